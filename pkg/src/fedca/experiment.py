"""End-to-end runs: data preparation, training, evaluation and on-disk artefacts."""
from __future__ import annotations

import csv
import json
import logging
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional

import numpy as np

from .alignment import AlignmentContext, train_alignment_model
from .config import RunConfig, dump_config
from .data import LabeledDataset, gen_blobs, load_csv_dataset, partition
from .evaluation import cluster_stats, linear_probe
from .federation import RoundReport, run_training
from .models import ParameterVector, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

METRICS_COLUMNS = (
    "run_id", "method", "setting", "round", "contrastive_loss", "alignment_loss", "dict_size",
    "mean_angle_deg", "probe_acc", "cluster_gap", "seed", "wall_time_s",
)
ABLATION_COLUMNS = ("setting", "variant", "method", "alpha", "mean_acc", "sd_acc", "n_seeds", "accs")

# (row label, method, config overrides) in the order of the ablation grid.
ABLATION_VARIANTS = (
    ("fedsimclr", "fedsimclr", {}),
    ("align_only", "fedca_no_dict", {}),
    ("dict_only", "fedca_no_align", {"alpha": 0.0}),
    ("dict_ensemble", "fedca_no_align", {}),
    ("fedca", "fedca", {}),
)


@dataclass
class PreparedData:
    train: LabeledDataset
    public: Optional[LabeledDataset]
    client_rows: List[np.ndarray]

    def client_shards(self):
        return [(self.train.features[rows], rows) for rows in self.client_rows]


@dataclass
class RunResult:
    config: RunConfig
    params: ParameterVector
    history: List[RoundReport]
    rows: List[dict] = field(default_factory=list)
    final_probe_acc: Optional[float] = None
    final_cluster_gap: Optional[float] = None


def prepare_data(cfg: RunConfig) -> PreparedData:
    seed = cfg.effective_data_seed
    if cfg.data_source == "blobs":
        train = gen_blobs(cfg.blob_classes, cfg.blob_dim, cfg.blob_per_class, cfg.blob_spread, seed)
        public = None
        n_public = int(round(cfg.public_fraction * cfg.blob_per_class))
        if n_public > 0:
            # Fresh draw from the same class centres with a held-out noise seed.
            public = gen_blobs(cfg.blob_classes, cfg.blob_dim, n_public, cfg.blob_spread,
                               seed=seed + 7_919_000, center_seed=seed)
    else:
        full = load_csv_dataset(cfg.data_source)
        rng = np.random.default_rng([seed, 16])
        order = rng.permutation(len(full))
        n_public = int(round(cfg.public_fraction * len(full)))
        public = full.subset(np.sort(order[:n_public])) if n_public else None
        train = full.subset(np.sort(order[n_public:]))
    mode = "iid" if cfg.setting == "iid" else "noniid_by_class"
    plan = partition(train, cfg.n_clients, mode, cfg.classes_per_client if mode != "iid" else None, seed)
    return PreparedData(train, public, [plan.client_rows(c) for c in range(cfg.n_clients)])


def build_alignment(cfg: RunConfig, data: PreparedData, out_dir: Optional[Path] = None) -> Optional[AlignmentContext]:
    tcfg = cfg.train_config()
    if tcfg.beta <= 0 or tcfg.align_subset_size == 0:
        return None
    if data.public is None:
        raise ValueError("the alignment module needs public data (public_fraction > 0)")
    spec = cfg.architecture(data.train.dim)
    if cfg.align_model_path:
        params, _ = load_checkpoint(cfg.align_model_path)
        if params.spec != spec:
            raise ValueError("alignment checkpoint architecture does not match the run")
    else:
        params = train_alignment_model(data.public, spec, cfg.align_train_config(), seed=[cfg.seed, 15])
        if out_dir is not None:
            save_checkpoint(out_dir / "alignment_model.json", params, 0, cfg.seed)
    subset = min(tcfg.align_subset_size, len(data.public))
    return AlignmentContext(params, data.public, subset, tcfg.beta)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def metrics_row(cfg: RunConfig, run_id: str, report: RoundReport) -> dict:
    return {
        "run_id": run_id, "method": cfg.method, "setting": cfg.setting, "round": report.round,
        "contrastive_loss": report.contrastive_loss, "alignment_loss": report.alignment_loss,
        "dict_size": report.dict_size, "mean_angle_deg": report.mean_angle_deg,
        "probe_acc": report.probe_acc, "cluster_gap": report.cluster_gap, "seed": cfg.seed,
        "wall_time_s": report.wall_time,
    }


def append_metrics(path: Path, rows: List[dict]) -> None:
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRICS_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row.get(c)) for c in METRICS_COLUMNS])


def read_metrics(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(cfg: RunConfig, write: bool = True) -> RunResult:
    out = Path(cfg.out_dir)
    if write:
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").unlink(missing_ok=True)
    data = prepare_data(cfg)
    spec = cfg.architecture(data.train.dim)
    tcfg = cfg.train_config()
    ctx = build_alignment(cfg, data, out if write else None)
    run_id = cfg.run_id()

    if write:
        manifest = {
            "run_id": run_id,
            "config": cfg.to_dict(),
            "effective_train_config": tcfg.__dict__,
            "parameter_count": spec.param_count,
            "datasets": {
                "train": {"digest": data.train.digest, "n": len(data.train), "dim": data.train.dim},
                "public": None if data.public is None else {"digest": data.public.digest, "n": len(data.public)},
                "client_sizes": [int(r.size) for r in data.client_rows],
            },
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        dump_config(cfg, out / "config.json")

    probe = None
    if cfg.angle_probe_size > 0:
        rng = np.random.default_rng([cfg.effective_data_seed, 17])
        k = min(cfg.angle_probe_size, len(data.train))
        probe = data.train.features[np.sort(rng.choice(len(data.train), size=k, replace=False))]

    pcfg = cfg.probe_config()

    def on_round(server, report, results):
        last = report.round == tcfg.rounds - 1
        if last or (cfg.eval_every and (report.round + 1) % cfg.eval_every == 0):
            report.probe_acc = linear_probe(server.params, data.train, pcfg, seed=cfg.seed).top1_accuracy
            report.cluster_gap = cluster_stats(server.params, data.train, seed=cfg.seed).gap
        if write and (last or (cfg.checkpoint_every and (report.round + 1) % cfg.checkpoint_every == 0)):
            ckpt_dir = out / "checkpoints"
            ckpt_dir.mkdir(exist_ok=True)
            save_checkpoint(ckpt_dir / f"round_{report.round + 1:04d}.json", server.params, server.round, cfg.seed)
            if cfg.dump_dictionary:
                (ckpt_dir / f"dictionary_{report.round + 1:04d}.json").write_text(json.dumps(
                    {"round": server.dictionary.round, "entries": server.dictionary.entries.tolist()}))

    server = run_training(tcfg, data.client_shards(), spec, cfg.augmentation(), ctx,
                          workers=cfg.workers, angle_probe=probe, on_round=on_round)
    rows = [metrics_row(cfg, run_id, r) for r in server.history]
    result = RunResult(cfg, server.params, server.history, rows)
    if server.history:
        result.final_probe_acc = server.history[-1].probe_acc
        result.final_cluster_gap = server.history[-1].cluster_gap
    if write:
        append_metrics(out / "metrics.csv", rows)
        save_checkpoint(out / "final.json", server.params, server.round, cfg.seed)
    return result


def run_ablation(base: RunConfig, n_seeds: int = 3, settings=("iid", "noniid"), write: bool = True) -> List[dict]:
    """Grid of the five module variants x partition settings, ``n_seeds`` seeds each."""
    table = []
    root = Path(base.out_dir)
    for setting in settings:
        for label, method, overrides in ABLATION_VARIANTS:
            accs = []
            for s in range(n_seeds):
                seed = base.seed + s
                cfg = base.replace(method=method, setting=setting, seed=seed,
                                   out_dir=str(root / setting / label / f"seed{seed}"), **overrides)
                res = run_experiment(cfg, write=write)
                accs.append(res.final_probe_acc if res.final_probe_acc is not None else float("nan"))
                log.info("ablation %s/%s seed %d: acc %.4f", setting, label, seed, accs[-1])
            table.append({
                "setting": setting, "variant": label, "method": method,
                "alpha": overrides.get("alpha", base.alpha),
                "mean_acc": statistics.fmean(accs),
                "sd_acc": statistics.stdev(accs) if len(accs) > 1 else 0.0,
                "n_seeds": n_seeds,
                "accs": ";".join(repr(a) for a in accs),
            })
    if write:
        root.mkdir(parents=True, exist_ok=True)
        with open(root / "ablation.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_COLUMNS)
            for row in table:
                w.writerow([_fmt(row[c]) for c in ABLATION_COLUMNS])
    return table
