"""Frozen alignment model trained on public data, and the output-matching regulariser."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .contrastive import ContrastiveConfig, simclr_loss
from .data import AugmentationConfig, LabeledDataset, augment_pair
from .models import (ArchitectureSpec, ParameterVector, ShapeMismatch, backward,
                     forward_raw, init_model)
from .numcore import l2_normalize_rows
from .optim import make_optimizer


class EmptyDataset(ValueError):
    pass


class SubsetTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class AlignTrainConfig:
    epochs: int = 20
    batch_size: int = 64
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    optimizer: str = "adam"
    temperature: float = 0.5
    augmentation: AugmentationConfig = AugmentationConfig()


@dataclass(frozen=True)
class AlignmentContext:
    params_align: ParameterVector
    public_data: LabeledDataset
    subset_size: int
    beta: float = 0.01

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.subset_size > len(self.public_data):
            raise SubsetTooLarge(f"subset of {self.subset_size} from {len(self.public_data)} public samples")
        frozen = self.params_align.values.copy()
        frozen.setflags(write=False)
        object.__setattr__(self, "params_align", ParameterVector(frozen, self.params_align.spec))


def simclr_step_loss(params: ParameterVector, v_i: np.ndarray, v_j: np.ndarray,
                     cfg: ContrastiveConfig) -> Tuple[float, np.ndarray]:
    """SimCLR loss of two view batches and its gradient w.r.t. the flat parameters."""
    n = v_i.shape[0]
    x = np.empty((2 * n, v_i.shape[1]))
    x[0::2], x[1::2] = v_i, v_j
    _, z = forward_raw(params, x)
    loss, g = simclr_loss(l2_normalize_rows(z), cfg)
    return loss, backward(params, x, grad_z_tilde=g)


def _epoch_loss(params, data, cfg, aug, rng):
    v_i, v_j = augment_pair(data, aug, rng)
    return simclr_step_loss(params, v_i, v_j, cfg)[0]


def train_alignment_model(public_data: LabeledDataset, spec: ArchitectureSpec,
                          train_cfg: Optional[AlignTrainConfig] = None, seed: int = 0,
                          history: Optional[list] = None) -> ParameterVector:
    """Central SimCLR training on the public data; labels are ignored.

    When ``history`` is a list, the full-data loss (fixed evaluation views) is
    appended before training and after every epoch.
    """
    if public_data is None or len(public_data) == 0:
        raise EmptyDataset("public dataset is empty")
    cfg = train_cfg or AlignTrainConfig()
    params = init_model(spec, seed)
    if cfg.epochs <= 0:
        return params
    ccfg = ContrastiveConfig(temperature=cfg.temperature)
    rng = np.random.default_rng([seed, 4])
    opt = make_optimizer(cfg.optimizer, params.values.size, cfg.learning_rate, cfg.weight_decay)
    x = public_data.features
    n = x.shape[0]
    bs = max(1, min(cfg.batch_size, n))
    if history is not None:
        history.append(_epoch_loss(params, x, ccfg, cfg.augmentation, np.random.default_rng([seed, 5])))
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            rows = order[start:start + bs]
            if rows.size < 2 and n >= 2:
                continue
            v_i, v_j = augment_pair(x[rows], cfg.augmentation, rng)
            _, grad = simclr_step_loss(params, v_i, v_j, ccfg)
            params = ParameterVector(opt.step(params.values, grad), spec)
        if history is not None:
            history.append(_epoch_loss(params, x, ccfg, cfg.augmentation, np.random.default_rng([seed, 5])))
    return params


def sample_alignment_subset(public_data: LabeledDataset, subset_size: int, round: int, seed: int) -> np.ndarray:
    n = len(public_data)
    if subset_size > n:
        raise SubsetTooLarge(f"subset of {subset_size} from {n} public samples")
    if subset_size == n:
        return public_data.features.copy()
    rng = np.random.default_rng([seed, round, 6])
    rows = np.sort(rng.choice(n, size=subset_size, replace=False))
    return public_data.features[rows]


def alignment_targets(ctx: AlignmentContext, subset: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    return forward_raw(ctx.params_align, subset)


def alignment_loss(ctx: AlignmentContext, params_u: ParameterVector, subset: np.ndarray,
                   targets: Optional[Tuple[np.ndarray, np.ndarray]] = None) -> Tuple[float, np.ndarray]:
    """Summed squared distance between both models' ``h`` and ``z`` on ``subset``.

    Returns ``(loss, grad)`` with the gradient taken w.r.t. ``params_u`` only.
    ``targets`` may carry precomputed alignment-model outputs for the subset.
    """
    spec_a, spec_u = ctx.params_align.spec, params_u.spec
    if (spec_a.representation_dim, spec_a.projection_dim) != (spec_u.representation_dim, spec_u.projection_dim):
        raise ShapeMismatch("alignment and local models have different output widths")
    h_a, z_a = targets if targets is not None else alignment_targets(ctx, subset)
    h_u, z_u = forward_raw(params_u, subset)
    dh = h_u - h_a
    dz = z_u - z_a
    loss = float(np.sum(dh * dh) + np.sum(dz * dz))
    grad = backward(params_u, subset, grad_h=2.0 * dh, grad_z=2.0 * dz)
    return loss, grad
