"""Dense float64 primitives shared by every differentiable piece of the package.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64; there is no
wrapper class. All functions are pure.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

EPS_NORM = 1e-12


class NumericError(ValueError):
    """Base class for numeric contract violations."""


class ZeroRow(NumericError):
    pass


class BadLabel(NumericError):
    pass


class BadTemperature(NumericError):
    pass


class NonFiniteLoss(NumericError):
    pass


def as_matrix(m) -> np.ndarray:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {a.shape}")
    return a


def l2_normalize_rows(m, eps: float = EPS_NORM) -> np.ndarray:
    a = as_matrix(m)
    norms = np.sqrt(np.einsum("ij,ij->i", a, a))
    bad = np.flatnonzero(norms <= eps)
    if bad.size:
        raise ZeroRow(f"row {int(bad[0])} has norm {norms[bad[0]]:.3g} <= {eps}")
    return a / norms[:, None]


def l2_normalize_rows_backward(m: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    """Pull a gradient on ``m / ||m||`` back onto ``m`` (row-wise)."""
    norms = np.sqrt(np.einsum("ij,ij->i", m, m))[:, None]
    unit = m / norms
    radial = np.einsum("ij,ij->i", grad_out, unit)[:, None]
    return (grad_out - radial * unit) / norms


def cosine_similarity(u, v, check: bool = False) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if check:
        for name, w in (("u", u), ("v", v)):
            if abs(np.linalg.norm(w) - 1.0) > 1e-9:
                raise NumericError(f"{name} is not unit-norm")
    return float(np.clip(np.dot(u, v), -1.0, 1.0))


def log_softmax_rows(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_cross_entropy(logits, labels, temperature: float = 1.0):
    """Mean cross entropy of ``softmax(logits / temperature)`` against integer labels.

    Returns ``(loss, grad_logits)`` where the gradient is taken with respect to
    the unscaled logits.
    """
    if not temperature > 0:
        raise BadTemperature(f"temperature must be > 0, got {temperature}")
    x = as_matrix(logits)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, c = x.shape
    if y.shape[0] != n:
        raise BadLabel(f"{y.shape[0]} labels for {n} rows")
    if n and (y.min() < 0 or y.max() >= c):
        raise BadLabel(f"labels must lie in [0, {c})")
    logp = log_softmax_rows(x / temperature)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    grad = np.exp(logp)
    grad[rows, y] -= 1.0
    grad /= n * temperature
    return float(loss), grad


def finite_difference_check(
    loss_fn: Callable[[np.ndarray], float],
    grad_fn: Callable[[np.ndarray], np.ndarray],
    params,
    eps: float = 1e-5,
    max_coords: Optional[int] = None,
    seed: int = 0,
    floor: float = 1e-8,
) -> float:
    """Max relative error between ``grad_fn`` and central differences of ``loss_fn``.

    ``max_coords`` bounds the number of coordinates probed; a seeded subset is
    used when the vector is longer. ``floor`` is the smallest denominator of the
    relative error; raise it when exact zeros in the gradient (dead ReLU units)
    would otherwise turn central-difference roundoff into a large ratio.
    """
    if not 0 < eps <= 1e-2:
        raise ValueError("eps must lie in (0, 1e-2]")
    theta = np.array(getattr(params, "values", params), dtype=np.float64).reshape(-1)
    analytic = np.asarray(grad_fn(theta.copy()), dtype=np.float64).reshape(-1)
    if analytic.shape != theta.shape:
        raise ValueError("gradient length differs from parameter length")
    coords = np.arange(theta.size)
    if max_coords is not None and theta.size > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(theta.size, max_coords, replace=False))
    worst = 0.0
    for k in coords:
        bumped = theta.copy()
        bumped[k] += eps
        up = loss_fn(bumped)
        bumped[k] -= 2 * eps
        down = loss_fn(bumped)
        if not (np.isfinite(up) and np.isfinite(down)):
            raise NonFiniteLoss(f"loss is not finite near coordinate {k}")
        central = (up - down) / (2 * eps)
        denom = max(abs(analytic[k]), abs(central), floor)
        worst = max(worst, abs(analytic[k] - central) / denom)
    return worst
