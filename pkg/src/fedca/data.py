"""Datasets, client partitioning and the two-view augmentation pipeline."""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple

import numpy as np


class ParseError(ValueError):
    pass


class EmptyFile(ValueError):
    pass


class InfeasiblePartition(ValueError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        x = np.ascontiguousarray(self.features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64).reshape(-1)
        if x.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] < 1:
            raise ValueError(f"features {x.shape} and labels {y.shape} are inconsistent")
        if y.min() < 0 or y.max() >= self.class_count:
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(np.int64(self.class_count).tobytes())
        h.update(np.array(self.features.shape, dtype=np.int64).tobytes())
        h.update(self.features.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()

    def subset(self, rows) -> "LabeledDataset":
        rows = np.asarray(rows, dtype=np.int64)
        return LabeledDataset(self.features[rows], self.labels[rows], self.class_count)


@dataclass(frozen=True)
class PartitionPlan:
    assignment: np.ndarray
    mode: str
    n_clients: int
    classes_per_client: Optional[int] = None

    def client_rows(self, client_id: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client_id)


@dataclass(frozen=True)
class AugmentationConfig:
    noise_sigma: float = 0.1
    mask_prob: float = 0.1
    scale_range: Tuple[float, float] = (0.8, 1.2)

    def __post_init__(self):
        lo, hi = self.scale_range
        object.__setattr__(self, "scale_range", (float(lo), float(hi)))
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0 <= self.mask_prob < 1:
            raise ValueError("mask_prob must lie in [0, 1)")
        if not 0 < lo <= hi:
            raise ValueError("scale_range must satisfy 0 < lo <= hi")


def gen_blobs(class_count: int, dim: int, per_class: int, spread: float, seed: int,
              center_seed: Optional[int] = None) -> LabeledDataset:
    """Gaussian blobs around class centres drawn uniformly on the unit sphere.

    ``center_seed`` (default ``seed``) fixes the centres separately from the
    sample noise, so fresh draws from the same distribution are possible.
    """
    if min(class_count, dim, per_class) < 1 or not spread > 0:
        raise ValueError("counts must be >= 1 and spread > 0")
    c_rng = np.random.default_rng([seed if center_seed is None else center_seed, 0])
    centers = c_rng.standard_normal((class_count, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    rng = np.random.default_rng([seed, 1])
    labels = np.repeat(np.arange(class_count), per_class)
    features = centers[labels] + spread * rng.standard_normal((labels.size, dim))
    return LabeledDataset(features, labels, class_count)


def save_csv_dataset(ds: LabeledDataset, path, header: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow([f"x{k}" for k in range(ds.dim)] + ["label"])
        for row, label in zip(ds.features, ds.labels):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def _is_number(s: str) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


def load_csv_dataset(path) -> LabeledDataset:
    """Rows are feature columns followed by one integer label column; a header line is optional."""
    path = Path(path)
    rows, labels = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, rec in enumerate(csv.reader(fh), start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if lineno == 1 and not all(_is_number(c) for c in rec):
                continue
            if len(rec) < 2:
                raise ParseError(f"{path}:{lineno}: need at least one feature and a label")
            if width is None:
                width = len(rec)
            elif len(rec) != width:
                raise ParseError(f"{path}:{lineno}: expected {width} columns, found {len(rec)}")
            try:
                feats = [float(c) for c in rec[:-1]]
                label = float(rec[-1])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: {exc}") from exc
            if label != int(label) or label < 0:
                raise ParseError(f"{path}:{lineno}: label {rec[-1]!r} is not a non-negative integer")
            if not np.all(np.isfinite(feats)):
                raise ParseError(f"{path}:{lineno}: non-finite feature")
            rows.append(feats)
            labels.append(int(label))
    if not rows:
        raise EmptyFile(f"{path} contains no data rows")
    y = np.array(labels, dtype=np.int64)
    return LabeledDataset(np.array(rows, dtype=np.float64), y, int(y.max()) + 1)


def partition(ds: LabeledDataset, n_clients: int, mode: str = "iid",
              classes_per_client: Optional[int] = None, seed: int = 0) -> PartitionPlan:
    if n_clients < 1:
        raise InfeasiblePartition("need at least one client")
    rng = np.random.default_rng([seed, 2])
    n = len(ds)
    if mode == "iid":
        if n < n_clients:
            raise InfeasiblePartition(f"{n} samples cannot cover {n_clients} clients")
        assignment = np.empty(n, dtype=np.int64)
        assignment[rng.permutation(n)] = np.arange(n) % n_clients
        return PartitionPlan(assignment, mode, n_clients)
    if mode != "noniid_by_class":
        raise ValueError(f"unknown partition mode {mode!r}")

    k = classes_per_client
    present = np.unique(ds.labels)
    c = present.size
    if k is None or k < 1 or k > c or n_clients * k < c:
        raise InfeasiblePartition(
            f"{n_clients} clients x {k} classes each cannot cover {c} classes"
        )
    # Slot s = (client s // k, its (s % k)-th class); classes dealt round-robin
    # over a shuffled class order. A class owning several slots is split evenly.
    order = present[rng.permutation(c)]
    slots_of: dict = {int(cls): [] for cls in order}
    for client in range(n_clients):
        chosen = [order[(client * k + j) % c] for j in range(k)]
        if len(set(int(x) for x in chosen)) != k:
            raise InfeasiblePartition(f"client {client} would receive a repeated class")
        for cls in chosen:
            slots_of[int(cls)].append(client)
    assignment = np.empty(n, dtype=np.int64)
    for cls, owners in slots_of.items():
        rows = rng.permutation(np.flatnonzero(ds.labels == cls))
        if len(rows) < len(owners):
            raise InfeasiblePartition(f"class {cls} has too few samples to split over {len(owners)} clients")
        for part, owner in zip(np.array_split(rows, len(owners)), owners):
            assignment[part] = owner
    return PartitionPlan(assignment, mode, n_clients, k)


def augment_batch(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """One stochastic view of every row in ``x``: scale, then mask, then add noise."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = cfg.scale_range
    n = x.shape[0]
    scale = rng.uniform(lo, hi, size=(n, 1))
    keep = rng.random(x.shape) >= cfg.mask_prob
    noise = rng.standard_normal(x.shape)
    return x * scale * keep + cfg.noise_sigma * noise


def augment_pair(x: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator):
    """Two independent views; works on a single feature row or a batch of rows."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    v_i = augment_batch(batch, cfg, rng)
    v_j = augment_batch(batch, cfg, rng)
    return (v_i[0], v_j[0]) if single else (v_i, v_j)
