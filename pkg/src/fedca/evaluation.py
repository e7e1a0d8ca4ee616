"""Downstream evaluation and representation diagnostics.

Both supervised protocols hold out a seeded, stratified 20% test split of the
labelled dataset and report top-1 accuracy on it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .data import LabeledDataset
from .models import ParameterVector, backward, encode, forward
from .numcore import l2_normalize_rows, softmax_cross_entropy
from .optim import Adam


class TooFewLabels(ValueError):
    pass


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    learning_rate: float = 1e-3
    batch_size: int = 64
    test_fraction: float = 0.2
    standardize: bool = True
    hidden_dim: int = 64


@dataclass(frozen=True)
class ProbeResult:
    top1_accuracy: float
    train_epochs: int
    label_fraction: float
    n_labeled: int
    train_accuracy: Optional[float] = None


@dataclass(frozen=True)
class AngleStats:
    angles: np.ndarray
    mean: float
    median: float
    q1: float
    q3: float

    @classmethod
    def from_angles(cls, angles: np.ndarray) -> "AngleStats":
        q1, med, q3 = np.percentile(angles, [25, 50, 75])
        return cls(angles, float(angles.mean()), float(med), float(q1), float(q3))

    def summary(self) -> dict:
        return {"mean": self.mean, "median": self.median, "q1": self.q1, "q3": self.q3, "n": int(self.angles.size)}


@dataclass(frozen=True)
class ClusterStats:
    intra: float
    inter: float

    @property
    def gap(self) -> float:
        return self.intra - self.inter


def train_test_split(labels: np.ndarray, test_fraction: float, seed) -> Tuple[np.ndarray, np.ndarray]:
    """Stratified seeded split; every class with >= 2 samples contributes to both sides."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in np.unique(labels):
        rows = rng.permutation(np.flatnonzero(labels == cls))
        k = int(round(test_fraction * rows.size))
        if rows.size >= 2:
            k = min(max(k, 1), rows.size - 1)
        test.append(rows[:k])
        train.append(rows[k:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


class _Standardizer:
    """Per-dimension z-scoring fitted on training representations (identity when disabled)."""

    def __init__(self, h_train: np.ndarray, enabled: bool = True):
        d = h_train.shape[1]
        self.mu = h_train.mean(axis=0) if enabled else np.zeros(d)
        sd = h_train.std(axis=0) if enabled else np.ones(d)
        sd[sd < 1e-12] = 1.0
        self.sd = sd

    def __call__(self, h: np.ndarray) -> np.ndarray:
        return (h - self.mu) / self.sd


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train_softmax_classifier(x: np.ndarray, y: np.ndarray, n_classes: int, cfg: ProbeConfig,
                             rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    d = x.shape[1]
    w = np.zeros((d, n_classes))
    b = np.zeros(n_classes)
    opt = Adam(w.size + b.size, cfg.learning_rate)
    theta = np.zeros(w.size + b.size)
    n = x.shape[0]
    bs = max(1, min(cfg.batch_size, n))
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            rows = order[start:start + bs]
            w, b = theta[:d * n_classes].reshape(d, n_classes), theta[d * n_classes:]
            _, g = softmax_cross_entropy(x[rows] @ w + b, y[rows])
            grad = np.concatenate([(x[rows].T @ g).reshape(-1), g.sum(axis=0)])
            theta = opt.step(theta, grad)
    return theta[:d * n_classes].reshape(d, n_classes), theta[d * n_classes:]


def probe_representations(h: np.ndarray, labels: np.ndarray, n_classes: int,
                          cfg: Optional[ProbeConfig] = None, seed: int = 0) -> ProbeResult:
    """Linear probe on precomputed representations."""
    cfg = cfg or ProbeConfig()
    tr, te = train_test_split(labels, cfg.test_fraction, [seed, 10])
    std = _Standardizer(h[tr], cfg.standardize)
    w, b = train_softmax_classifier(std(h[tr]), labels[tr], n_classes, cfg, np.random.default_rng([seed, 11]))
    return ProbeResult(
        top1_accuracy=accuracy(std(h[te]) @ w + b, labels[te]),
        train_epochs=cfg.epochs,
        label_fraction=1.0,
        n_labeled=int(tr.size),
        train_accuracy=accuracy(std(h[tr]) @ w + b, labels[tr]),
    )


def linear_probe(params: ParameterVector, ds: LabeledDataset, cfg: Optional[ProbeConfig] = None,
                 seed: int = 0) -> ProbeResult:
    """Frozen-encoder linear evaluation on representations ``h``."""
    return probe_representations(encode(params, ds.features), ds.labels, ds.class_count, cfg, seed)


def stratified_label_subset(labels: np.ndarray, candidates: np.ndarray, label_fraction: float,
                            n_classes: int, seed) -> np.ndarray:
    """Per class, ``round(label_fraction * class_size)`` labelled rows drawn from ``candidates``.

    Class sizes are counted over the whole dataset; rows come from the training side only.
    """
    rng = np.random.default_rng(seed)
    picked = []
    for cls in range(n_classes):
        total = int(np.sum(labels == cls))
        if total == 0:
            continue
        pool = candidates[labels[candidates] == cls]
        k = min(int(round(label_fraction * total)), pool.size)
        if k == 0:
            raise TooFewLabels(f"class {cls} has no labelled samples at fraction {label_fraction}")
        picked.append(rng.choice(pool, size=k, replace=False))
    return np.sort(np.concatenate(picked))


def fine_tune_semisupervised(params: ParameterVector, ds: LabeledDataset, label_fraction: float,
                             cfg: Optional[ProbeConfig] = None, seed: int = 0) -> ProbeResult:
    """Fine-tune encoder plus a one-hidden-layer ReLU head on a stratified labelled subset."""
    if not 0 < label_fraction <= 1:
        raise ValueError("label_fraction must lie in (0, 1]")
    cfg = cfg or ProbeConfig()
    y = ds.labels
    tr, te = train_test_split(y, cfg.test_fraction, [seed, 10])
    lab = stratified_label_subset(y, tr, label_fraction, ds.class_count, [seed, 12])
    rng = np.random.default_rng([seed, 13])

    spec = params.spec
    d_h, hid, c = spec.representation_dim, cfg.hidden_dim, ds.class_count
    std = _Standardizer(encode(params, ds.features[tr]), cfg.standardize)
    w1 = rng.uniform(-1, 1, (d_h, hid)) / np.sqrt(d_h)
    w2 = rng.uniform(-1, 1, (hid, c)) / np.sqrt(hid)
    head = np.concatenate([w1.reshape(-1), np.zeros(hid), w2.reshape(-1), np.zeros(c)])
    n_enc = params.values.size
    theta = np.concatenate([params.values, head])
    opt = Adam(theta.size, cfg.learning_rate)

    def unpack(th):
        o = n_enc
        w1 = th[o:o + d_h * hid].reshape(d_h, hid); o += d_h * hid
        b1 = th[o:o + hid]; o += hid
        w2 = th[o:o + hid * c].reshape(hid, c); o += hid * c
        return ParameterVector(th[:n_enc], spec), w1, b1, w2, th[o:o + c]

    def predict(th, x):
        enc, w1, b1, w2, b2 = unpack(th)
        a = std(encode(enc, x)) @ w1 + b1
        return np.maximum(a, 0) @ w2 + b2

    x_lab, y_lab = ds.features[lab], y[lab]
    n = lab.size
    bs = max(1, min(cfg.batch_size, n))
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            rows = order[start:start + bs]
            enc, w1, b1, w2, b2 = unpack(theta)
            xb = x_lab[rows]
            hs = std(encode(enc, xb))
            pre = hs @ w1 + b1
            act = np.maximum(pre, 0)
            _, g = softmax_cross_entropy(act @ w2 + b2, y_lab[rows])
            g_w2, g_b2 = act.T @ g, g.sum(axis=0)
            g_pre = (g @ w2.T) * (pre > 0)
            g_w1, g_b1 = hs.T @ g_pre, g_pre.sum(axis=0)
            g_h = (g_pre @ w1.T) / std.sd
            g_enc = backward(enc, xb, grad_h=g_h)
            grad = np.concatenate([g_enc, g_w1.reshape(-1), g_b1, g_w2.reshape(-1), g_b2])
            theta = opt.step(theta, grad)
    return ProbeResult(
        top1_accuracy=accuracy(predict(theta, ds.features[te]), y[te]),
        train_epochs=cfg.epochs,
        label_fraction=label_fraction,
        n_labeled=int(n),
        train_accuracy=accuracy(predict(theta, x_lab), y_lab),
    )


def _unit_representations(params: ParameterVector, x: np.ndarray, use_projection: bool) -> np.ndarray:
    if use_projection:
        return forward(params, x).z_tilde
    return l2_normalize_rows(encode(params, x))


def pairwise_angle_stats(params_a: ParameterVector, params_b: ParameterVector, probe_set: np.ndarray,
                         use_projection: bool = False) -> AngleStats:
    """Per-row angle in degrees between two models' normalised representations."""
    probe_set = np.asarray(probe_set, dtype=np.float64)
    if probe_set.shape[0] == 0:
        raise ValueError("probe set is empty")
    if params_a.spec != params_b.spec:
        raise ValueError("models have different architectures")
    ua = _unit_representations(params_a, probe_set, use_projection)
    ub = _unit_representations(params_b, probe_set, use_projection)
    return angle_stats_from_units(ua, ub)


def angle_stats_from_units(ua: np.ndarray, ub: np.ndarray) -> AngleStats:
    # 2*atan2(|a-b|, |a+b|) stays accurate near 0 and 180 degrees, where arccos of the
    # rounded dot product does not.
    diff = np.linalg.norm(ua - ub, axis=1)
    summ = np.linalg.norm(ua + ub, axis=1)
    return AngleStats.from_angles(np.degrees(2.0 * np.arctan2(diff, summ)))


def cluster_stats_from_representations(h: np.ndarray, labels: np.ndarray, max_exact: int = 2000,
                                       n_pairs: int = 200_000, seed: int = 0) -> ClusterStats:
    """Mean cosine over same-class and different-class pairs of distinct rows."""
    u = l2_normalize_rows(h)
    labels = np.asarray(labels)
    n = u.shape[0]
    if n <= max_exact:
        gram = u @ u.T
        same = labels[:, None] == labels[None, :]
        off = ~np.eye(n, dtype=bool)
        intra_mask, inter_mask = same & off, ~same
        intra = float(gram[intra_mask].mean()) if intra_mask.any() else float("nan")
        inter = float(gram[inter_mask].mean()) if inter_mask.any() else float("nan")
        return ClusterStats(intra, inter)
    rng = np.random.default_rng([seed, 14])
    i = rng.integers(0, n, n_pairs)
    j = rng.integers(0, n, n_pairs)
    keep = i != j
    i, j = i[keep], j[keep]
    cos = np.sum(u[i] * u[j], axis=1)
    same = labels[i] == labels[j]
    return ClusterStats(float(cos[same].mean()), float(cos[~same].mean()))


def cluster_stats(params: ParameterVector, ds: LabeledDataset, seed: int = 0) -> ClusterStats:
    return cluster_stats_from_representations(encode(params, ds.features), ds.labels, seed=seed)
