"""Round-based federated training: select, update locally, average, rebuild the dictionary."""
from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .alignment import AlignmentContext, alignment_loss, alignment_targets, sample_alignment_subset
from .contrastive import ContrastiveConfig, ntxent_dictionary_loss
from .data import AugmentationConfig, augment_pair
from .dictionary import EnsembleBank, GlobalDictionary, assemble_global_dictionary, build_local_dictionary
from .models import ArchitectureSpec, ParameterVector, backward, forward_raw, init_model
from .numcore import NonFiniteLoss, l2_normalize_rows
from .optim import make_optimizer

log = logging.getLogger(__name__)


class LengthMismatch(ValueError):
    pass


class EmptyInput(ValueError):
    pass


class ClientFailure(RuntimeError):
    def __init__(self, round_index: int, client_id: int, cause: Exception):
        super().__init__(f"round {round_index}, client {client_id}: {cause}")
        self.round_index = round_index
        self.client_id = client_id
        self.cause = cause


@dataclass(frozen=True)
class TrainConfig:
    n_clients: int = 5
    fraction_selected: float = 1.0
    local_epochs: int = 5
    batch_size: int = 128
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    optimizer: str = "adam"
    alpha: float = 0.5
    beta: float = 0.01
    temperature: float = 0.5
    symmetrize: bool = False
    k_max: int = 1024
    rounds: int = 10
    seed: int = 0
    align_subset_size: int = 64
    align_resample: str = "round"
    persist_optimizer_state: bool = False

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 0 < self.fraction_selected <= 1:
            raise ValueError("fraction_selected must lie in (0, 1]")
        if self.local_epochs < 0 or self.rounds < 0 or self.k_max < 0 or self.align_subset_size < 0:
            raise ValueError("local_epochs, rounds, k_max and align_subset_size must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.alpha < 1:
            raise ValueError("alpha must lie in [0, 1)")
        if self.beta < 0 or self.weight_decay < 0:
            raise ValueError("beta and weight_decay must be >= 0")
        if not self.temperature > 0:
            raise ValueError("temperature must be > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.align_resample not in ("round", "step"):
            raise ValueError("align_resample must be 'round' or 'step'")

    @property
    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(temperature=self.temperature, use_dictionary=self.k_max > 0,
                                 symmetrize=self.symmetrize)


@dataclass
class ClientState:
    client_id: int
    features: np.ndarray
    bank: EnsembleBank
    rng: np.random.Generator
    optimizer: object = None

    @classmethod
    def create(cls, client_id: int, features: np.ndarray, sample_ids, projection_dim: int, seed: int):
        return cls(client_id, np.asarray(features, dtype=np.float64), EnsembleBank(sample_ids, projection_dim),
                   np.random.default_rng([seed, client_id, 8]))

    def __len__(self) -> int:
        return self.features.shape[0]


@dataclass
class RoundReport:
    round: int
    selected: List[int]
    contrastive_loss: float
    alignment_loss: float
    dict_size: int
    wall_time: float
    mean_angle_deg: Optional[float] = None
    probe_acc: Optional[float] = None
    cluster_gap: Optional[float] = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ServerState:
    params: ParameterVector
    dictionary: GlobalDictionary
    round: int = 0
    clients: Dict[int, ClientState] = field(default_factory=dict)
    history: List[RoundReport] = field(default_factory=list)


@dataclass
class ClientResult:
    client_id: int
    params: ParameterVector
    local_dict: np.ndarray
    n_samples: int
    stats: dict


def select_clients(n: int, fraction: float, round: int, seed: int) -> List[int]:
    # The small tolerance keeps e.g. 0.3 * 10 from rounding up to 4.
    m = max(math.ceil(fraction * n - 1e-9), 1)
    m = min(m, n)
    if m == n:
        return list(range(n))
    rng = np.random.default_rng([seed, round, 7])
    return sorted(int(c) for c in rng.choice(n, size=m, replace=False))


def fedavg_aggregate(locals_: Sequence[Tuple[ParameterVector, int]]) -> ParameterVector:
    """Dataset-size weighted mean of client parameters, accumulated in the given order."""
    if not locals_:
        raise EmptyInput("nothing to aggregate")
    spec = locals_[0][0].spec
    size = locals_[0][0].values.size
    for p, _ in locals_:
        if p.values.size != size:
            raise LengthMismatch(f"parameter lengths differ: {p.values.size} vs {size}")
    total = float(sum(w for _, w in locals_))
    if total <= 0:
        raise EmptyInput("total dataset size is zero")
    first = locals_[0][0].values
    if all(np.array_equal(p.values, first) for p, _ in locals_[1:]):
        return ParameterVector(first.copy(), spec)
    acc = np.zeros(size)
    for p, w in locals_:
        acc += w * p.values
    acc /= total
    # Rounding may push a coordinate one ulp outside the convex hull of the inputs.
    stacked = np.stack([p.values for p, _ in locals_])
    np.clip(acc, stacked.min(axis=0), stacked.max(axis=0), out=acc)
    return ParameterVector(acc, spec)


def contrastive_step(params: ParameterVector, v_i: np.ndarray, v_j: np.ndarray,
                     dictionary: Optional[np.ndarray], ccfg: ContrastiveConfig) -> Tuple[float, np.ndarray]:
    """Dictionary-augmented contrastive loss of one view pair and its parameter gradient."""
    n = v_i.shape[0]
    x = np.concatenate([v_i, v_j], axis=0)
    _, z = forward_raw(params, x)
    zt = l2_normalize_rows(z)
    loss, g_i, g_j = ntxent_dictionary_loss(zt[:n], zt[n:], dictionary, ccfg)
    return loss, backward(params, x, grad_z_tilde=np.concatenate([g_i, g_j], axis=0))


def local_loss_and_grad(params: ParameterVector, v_i, v_j, dictionary, ctx: Optional[AlignmentContext],
                        subset, targets, cfg: TrainConfig) -> Tuple[float, float, np.ndarray]:
    """Total local objective: contrastive term plus ``beta`` times the alignment term."""
    c_loss, grad = contrastive_step(params, v_i, v_j, dictionary, cfg.contrastive)
    a_loss = 0.0
    if cfg.beta > 0 and ctx is not None and subset is not None and len(subset):
        a_loss, a_grad = alignment_loss(ctx, params, subset, targets)
        grad = grad + cfg.beta * a_grad
    return c_loss, a_loss, grad


def client_update(client: ClientState, theta: ParameterVector, dictionary: Optional[np.ndarray],
                  ctx: Optional[AlignmentContext], cfg: TrainConfig, aug: AugmentationConfig,
                  round: int = 0, subset: Optional[np.ndarray] = None,
                  targets=None) -> ClientResult:
    spec = theta.spec
    params = theta.copy()
    n = len(client)
    bs = max(1, min(cfg.batch_size, n))
    if client.optimizer is None or not cfg.persist_optimizer_state:
        client.optimizer = make_optimizer(cfg.optimizer, params.values.size, cfg.learning_rate, cfg.weight_decay)
    opt = client.optimizer
    use_align = cfg.beta > 0 and ctx is not None and cfg.align_subset_size > 0
    if use_align and subset is None:
        subset = sample_alignment_subset(ctx.public_data, cfg.align_subset_size, round, cfg.seed)
        targets = alignment_targets(ctx, subset)
    c_losses, a_losses = [], []
    for epoch in range(cfg.local_epochs):
        order = client.rng.permutation(n)
        for start in range(0, n, bs):
            rows = order[start:start + bs]
            if rows.size < 2 and n >= 2:
                continue
            v_i, v_j = augment_pair(client.features[rows], aug, client.rng)
            if use_align and cfg.align_resample == "step":
                step_seed = int(client.rng.integers(2**31))
                subset = sample_alignment_subset(ctx.public_data, cfg.align_subset_size, round, step_seed)
                targets = alignment_targets(ctx, subset)
            c_loss, a_loss, grad = local_loss_and_grad(
                params, v_i, v_j, dictionary, ctx if use_align else None, subset, targets, cfg)
            if not (np.isfinite(c_loss) and np.isfinite(a_loss) and np.all(np.isfinite(grad))):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch offset {start}")
            params = ParameterVector(opt.step(params.values, grad), spec)
            c_losses.append(c_loss)
            a_losses.append(a_loss)

    # Temporal ensembling of this client's projections under the trained local model.
    _, z = forward_raw(params, client.features)
    client.bank.update(l2_normalize_rows(z), cfg.alpha)
    budget = cfg.k_max // max(1, len(select_clients(cfg.n_clients, cfg.fraction_selected, round, cfg.seed)))
    local_dict = build_local_dictionary(client.bank, budget, seed=[cfg.seed, round, client.client_id, 9])
    stats = {}
    if c_losses:
        stats = {"contrastive_loss": float(np.mean(c_losses)), "alignment_loss": float(np.mean(a_losses)),
                 "steps": len(c_losses)}
    return ClientResult(client.client_id, params, local_dict, n, stats)


def mean_pairwise_angle(models: Sequence[ParameterVector], probe: np.ndarray) -> float:
    from .evaluation import pairwise_angle_stats

    angles = [pairwise_angle_stats(a, b, probe).mean
              for k, a in enumerate(models) for b in models[k + 1:]]
    return float(np.mean(angles)) if angles else 0.0


RoundCallback = Callable[[ServerState, RoundReport, List[ClientResult]], None]


def run_training(cfg: TrainConfig, client_data: Sequence[Tuple[np.ndarray, np.ndarray]], spec: ArchitectureSpec,
                 aug: AugmentationConfig, ctx: Optional[AlignmentContext] = None,
                 workers: int = 1, angle_probe: Optional[np.ndarray] = None,
                 on_round: Optional[RoundCallback] = None) -> ServerState:
    """Run ``cfg.rounds`` federated rounds.

    ``client_data`` holds ``(features, sample_ids)`` per client, indexed by client id.
    ``on_round`` is called after every round (checkpointing, evaluation).
    """
    if len(client_data) != cfg.n_clients:
        raise ValueError(f"{len(client_data)} client shards for n_clients={cfg.n_clients}")
    server = ServerState(init_model(spec, cfg.seed), GlobalDictionary.empty(spec.projection_dim))
    for cid, (features, ids) in enumerate(client_data):
        server.clients[cid] = ClientState.create(cid, features, ids, spec.projection_dim, cfg.seed)
    use_align = ctx is not None and cfg.beta > 0 and cfg.align_subset_size > 0
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(cfg.rounds):
            start = time.perf_counter()
            selected = select_clients(cfg.n_clients, cfg.fraction_selected, t, cfg.seed)
            subset = targets = None
            if use_align:
                subset = sample_alignment_subset(ctx.public_data, cfg.align_subset_size, t, cfg.seed)
                targets = alignment_targets(ctx, subset)
            theta, dict_entries = server.params, server.dictionary.entries

            def work(cid: int) -> ClientResult:
                try:
                    return client_update(server.clients[cid], theta, dict_entries, ctx if use_align else None,
                                         cfg, aug, t, subset, targets)
                except Exception as exc:
                    raise ClientFailure(t, cid, exc) from exc

            results = list(pool.map(work, selected)) if pool else [work(c) for c in selected]
            results.sort(key=lambda r: r.client_id)
            server.params = fedavg_aggregate([(r.params, r.n_samples) for r in results])
            server.dictionary = assemble_global_dictionary(
                [r.local_dict for r in results], cfg.k_max, t + 1, seed=cfg.seed, dim=spec.projection_dim)
            server.round = t + 1
            trained = [r for r in results if r.stats]
            report = RoundReport(
                round=t,
                selected=[r.client_id for r in results],
                contrastive_loss=float(np.mean([r.stats["contrastive_loss"] for r in trained])) if trained else float("nan"),
                alignment_loss=float(np.mean([r.stats["alignment_loss"] for r in trained])) if trained else float("nan"),
                dict_size=len(server.dictionary),
                wall_time=0.0,
            )
            if angle_probe is not None and len(results) > 1:
                report.mean_angle_deg = mean_pairwise_angle([r.params for r in results], angle_probe)
            if on_round is not None:
                on_round(server, report, results)
            report.wall_time = time.perf_counter() - start
            server.history.append(report)
            log.info("round %d: contrastive %.4f align %.4f dict %d", t, report.contrastive_loss,
                     report.alignment_loss, report.dict_size)
    finally:
        if pool is not None:
            pool.shutdown()
    return server
