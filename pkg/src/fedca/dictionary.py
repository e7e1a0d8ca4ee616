"""Temporal-ensembled local dictionaries and server-side global dictionary assembly."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .numcore import EPS_NORM, ZeroRow, l2_normalize_rows


class BadAlpha(ValueError):
    pass


class EmptyAccumulator(ValueError):
    pass


class NoAccumulators(ValueError):
    pass


class DimMismatch(ValueError):
    pass


def _check_alpha(alpha: float) -> None:
    if not 0.0 <= alpha < 1.0:
        raise BadAlpha(f"alpha must lie in [0, 1), got {alpha}")


@dataclass(frozen=True)
class EnsembleAccumulator:
    sample_id: int
    Z: np.ndarray
    rounds_accumulated: int = 0

    @classmethod
    def empty(cls, sample_id: int, dim: int) -> "EnsembleAccumulator":
        return cls(sample_id, np.zeros(dim), 0)


def ensemble_update(acc: EnsembleAccumulator, z_t, alpha: float) -> EnsembleAccumulator:
    _check_alpha(alpha)
    z_t = np.asarray(z_t, dtype=np.float64)
    if z_t.shape != acc.Z.shape:
        raise DimMismatch(f"projection shape {z_t.shape} != accumulator shape {acc.Z.shape}")
    return EnsembleAccumulator(acc.sample_id, alpha * acc.Z + (1.0 - alpha) * z_t, acc.rounds_accumulated + 1)


def ensemble_normalized(acc: EnsembleAccumulator, eps: float = EPS_NORM) -> np.ndarray:
    # The (1 - alpha^t) bias correction cancels under normalisation, so it is not applied.
    if acc.rounds_accumulated < 1:
        raise EmptyAccumulator(f"sample {acc.sample_id} has no accumulated projections")
    norm = float(np.linalg.norm(acc.Z))
    if norm <= eps:
        raise ZeroRow(f"sample {acc.sample_id} has a zero ensemble projection")
    return acc.Z / norm


class EnsembleBank:
    """All accumulators of one client, stored as one matrix keyed by sample id.

    Vectorised equivalent of a list of :class:`EnsembleAccumulator`.
    """

    def __init__(self, sample_ids, dim: int):
        self.sample_ids = np.asarray(sample_ids, dtype=np.int64).copy()
        self.Z = np.zeros((self.sample_ids.size, dim))
        self.rounds = np.zeros(self.sample_ids.size, dtype=np.int64)

    def __len__(self) -> int:
        return self.sample_ids.size

    def update(self, z_rows: np.ndarray, alpha: float) -> None:
        _check_alpha(alpha)
        z_rows = np.asarray(z_rows, dtype=np.float64)
        if z_rows.shape != self.Z.shape:
            raise DimMismatch(f"projections {z_rows.shape} != bank {self.Z.shape}")
        self.Z = alpha * self.Z + (1.0 - alpha) * z_rows
        self.rounds += 1

    def accumulators(self):
        return [EnsembleAccumulator(int(s), self.Z[k].copy(), int(self.rounds[k]))
                for k, s in enumerate(self.sample_ids)]

    def to_dict(self) -> dict:
        return {"sample_ids": self.sample_ids.tolist(), "Z": self.Z.tolist(), "rounds": self.rounds.tolist()}


def build_local_dictionary(
    accs: Union[EnsembleBank, Sequence[EnsembleAccumulator]],
    budget: int,
    seed,
) -> np.ndarray:
    """Sample ``budget`` normalised ensemble projections (without replacement when possible)."""
    if isinstance(accs, EnsembleBank):
        ids, Z, rounds = accs.sample_ids, accs.Z, accs.rounds
    else:
        accs = list(accs)
        if not accs:
            raise NoAccumulators("client has no accumulators")
        ids = np.array([a.sample_id for a in accs], dtype=np.int64)
        Z = np.stack([a.Z for a in accs])
        rounds = np.array([a.rounds_accumulated for a in accs])
    ready = np.flatnonzero(rounds >= 1)
    if ready.size == 0:
        raise NoAccumulators("no accumulator has been updated yet")
    ready = ready[np.argsort(ids[ready], kind="stable")]
    if budget <= 0:
        return np.zeros((0, Z.shape[1]))
    rng = np.random.default_rng(seed)
    if budget <= ready.size:
        pick = np.sort(rng.choice(ready.size, size=budget, replace=False))
    else:
        pick = rng.integers(0, ready.size, size=budget)
    return l2_normalize_rows(Z[ready[pick]])


@dataclass
class GlobalDictionary:
    entries: np.ndarray
    round: int = 0

    def __len__(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def empty(cls, dim: int, round: int = 0) -> "GlobalDictionary":
        return cls(np.zeros((0, dim)), round)


def assemble_global_dictionary(locals_: Sequence[np.ndarray], k_max: int, round: int,
                               seed: int = 0, dim: Optional[int] = None) -> GlobalDictionary:
    """Concatenate client dictionaries (already in client-id order), subsampling to ``k_max`` rows."""
    mats = [np.asarray(m, dtype=np.float64) for m in locals_]
    widths = {m.shape[1] for m in mats if m.ndim == 2}
    if any(m.ndim != 2 for m in mats) or len(widths) > 1:
        raise DimMismatch("local dictionaries do not share a projection width")
    width = widths.pop() if widths else (dim or 0)
    nonempty = [m for m in mats if m.shape[0]]
    if not nonempty or k_max <= 0:
        return GlobalDictionary.empty(width, round)
    entries = np.concatenate(nonempty, axis=0)
    if entries.shape[0] > k_max:
        rng = np.random.default_rng([seed, round, 3])
        keep = np.sort(rng.choice(entries.shape[0], size=k_max, replace=False))
        entries = entries[keep]
    norms = np.linalg.norm(entries, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        entries = l2_normalize_rows(entries)
    return GlobalDictionary(entries, round)
