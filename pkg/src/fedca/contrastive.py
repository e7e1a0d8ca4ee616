"""Contrastive objectives on unit-norm projections.

``ntxent_dictionary_loss`` scores each anchor in ``z_i`` against every row of
``z_j`` plus every dictionary entry; the matching row of ``z_j`` is the target
class. ``simclr_loss`` is the symmetric 2N-view NT-Xent.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .numcore import log_softmax_rows, softmax_cross_entropy


class DimMismatch(ValueError):
    pass


class OddBatch(ValueError):
    pass


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.5
    use_dictionary: bool = True
    symmetrize: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")


def _empty_dict(d: int) -> np.ndarray:
    return np.zeros((0, d))


def build_logits(z_i: np.ndarray, z_j: np.ndarray, dictionary: Optional[np.ndarray] = None) -> np.ndarray:
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    if z_i.ndim != 2 or z_i.shape != z_j.shape:
        raise DimMismatch(f"z_i {z_i.shape} and z_j {z_j.shape} must have equal 2-D shapes")
    d = z_i.shape[1]
    if dictionary is None or np.size(dictionary) == 0:
        dictionary = _empty_dict(d)
    dictionary = np.asarray(dictionary, dtype=np.float64)
    if dictionary.ndim != 2 or dictionary.shape[1] != d:
        raise DimMismatch(f"dictionary shape {dictionary.shape} does not match projection width {d}")
    return np.concatenate([z_i @ z_j.T, z_i @ dictionary.T], axis=1)


def _one_direction(anchor, positive, dictionary, temperature):
    n = anchor.shape[0]
    logits = build_logits(anchor, positive, dictionary)
    loss, g = softmax_cross_entropy(logits, np.arange(n), temperature)
    grad_anchor = g[:, :n] @ positive
    if dictionary is not None and len(dictionary):
        grad_anchor += g[:, n:] @ dictionary
    grad_positive = g[:, :n].T @ anchor
    return loss, grad_anchor, grad_positive


def ntxent_dictionary_loss(
    z_i: np.ndarray,
    z_j: np.ndarray,
    dictionary: Optional[np.ndarray],
    cfg: ContrastiveConfig,
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Returns ``(loss, grad_z_i, grad_z_j)``; dictionary rows are treated as constants."""
    z_i = np.asarray(z_i, dtype=np.float64)
    z_j = np.asarray(z_j, dtype=np.float64)
    if not cfg.use_dictionary or dictionary is None or np.size(dictionary) == 0:
        dictionary = _empty_dict(z_i.shape[1] if z_i.ndim == 2 else 0)
    else:
        dictionary = np.asarray(dictionary, dtype=np.float64)
    loss, g_i, g_j = _one_direction(z_i, z_j, dictionary, cfg.temperature)
    if not cfg.symmetrize:
        return loss, g_i, g_j
    loss_r, g_j_r, g_i_r = _one_direction(z_j, z_i, dictionary, cfg.temperature)
    return 0.5 * (loss + loss_r), 0.5 * (g_i + g_i_r), 0.5 * (g_j + g_j_r)


def simclr_loss(z_all: np.ndarray, cfg: ContrastiveConfig) -> Tuple[float, np.ndarray]:
    """NT-Xent over 2N views where rows ``2k`` and ``2k+1`` are the two views of sample ``k``.

    Returns ``(loss, grad_z_all)``; the loss is the mean over all 2N ordered positive pairs.
    """
    z = np.asarray(z_all, dtype=np.float64)
    m = z.shape[0]
    if m % 2:
        raise OddBatch(f"expected an even number of views, got {m}")
    tau = cfg.temperature
    sim = (z @ z.T) / tau
    np.fill_diagonal(sim, -np.inf)
    partner = np.arange(m) ^ 1
    logp = log_softmax_rows(sim)
    rows = np.arange(m)
    loss = -logp[rows, partner].mean()
    p = np.exp(logp)
    p[rows, partner] -= 1.0
    p /= m * tau
    # d(sim_ab)/dz involves both z_a and z_b.
    grad = p @ z + p.T @ z
    return float(loss), grad
