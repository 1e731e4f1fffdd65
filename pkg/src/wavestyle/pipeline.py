"""End-to-end runs: pretrain -> meta-train -> evaluate on every domain, and ablation grids."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import ImageDataset, load_benchmark
from .engine import EvalReport, evaluate, meta_train, pretrain
from .fsl import Backbone, checkpoint_digest, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

PRETRAIN_KEYS = ("widths", "image_size", "eps", "bn_momentum", "lr", "beta1", "beta2", "opt_eps",
                 "seed", "pretrain_epochs", "pretrain_batch")


@dataclass
class Benchmark:
    source_train: ImageDataset
    source_val: ImageDataset
    source_test: ImageDataset
    targets: dict[str, ImageDataset]

    @classmethod
    def load(cls, root) -> "Benchmark":
        manifests = load_benchmark(root)
        if "source" not in manifests:
            raise FileNotFoundError(f"no source domain under {root}")
        src = manifests.pop("source")
        targets = {}
        for name, m in sorted(manifests.items()):
            shared = set(m.classes) & set(src.classes)
            if shared:
                raise ValueError(f"target {name} shares classes {sorted(shared)} with the source domain")
            targets[name] = ImageDataset.load(m)
        return cls(ImageDataset.load(src, "train"), ImageDataset.load(src, "val"),
                   ImageDataset.load(src, "test"), targets)


def pretrain_key(cfg: ExperimentConfig) -> str:
    import hashlib

    blob = json.dumps({k: getattr(cfg, k) for k in PRETRAIN_KEYS}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def pretrained_model(cfg: ExperimentConfig, bench: Benchmark, cache_dir=None) -> Backbone:
    """Pretrain, or reuse a cached pretrain checkpoint with identical pretraining settings."""
    backbone_overrides = {k: getattr(cfg, k) for k in ExperimentConfig.BACKBONE_KEYS}
    if cache_dir is not None:
        path = Path(cache_dir) / f"pretrain-{pretrain_key(cfg)}"
        if (path / "manifest.json").exists():
            return load_checkpoint(path, backbone_overrides)
        model = pretrain(bench.source_train, cfg.replace(augment_mode="none", frequency_mode="full"))
        save_checkpoint(model, path, {"stage": "pretrain", "config": cfg.to_dict()})
        return load_checkpoint(path, backbone_overrides)
    model = pretrain(bench.source_train, cfg.replace(augment_mode="none", frequency_mode="full"))
    fresh = Backbone(cfg.backbone())
    fresh.params, fresh.buffers = model.params, model.buffers
    return fresh


def evaluate_all(model: Backbone, bench: Benchmark, cfg: ExperimentConfig,
                 insertions: bool = True) -> dict[str, EvalReport]:
    """Source test split plus every target domain; episodes drawn from a seed-fixed stream."""
    out = {}
    domains = {"source": bench.source_test, **bench.targets}
    for i, (name, ds) in enumerate(domains.items()):
        rng = np.random.default_rng([cfg.seed, 100 + i])
        out[name] = evaluate(model, ds, cfg.eval_episodes, cfg.n, cfg.k, cfg.q_eval, rng,
                             insertions=insertions, workers=cfg.workers, fingerprint=cfg.fingerprint())
    return out


def run_experiment(cfg: ExperimentConfig, bench: Benchmark, out_dir=None, cache_dir=None) -> dict:
    """One full two-stage run; returns per-domain reports and the checkpoint digest."""
    model = pretrained_model(cfg, bench, cache_dir)
    run_dir = Path(out_dir) if out_dir is not None else None
    model = meta_train(model, bench.source_train, cfg, run_dir, validation=bench.source_val)
    reports = evaluate_all(model, bench, cfg)
    result = {"config": cfg.to_dict(), "reports": {k: r.to_json() for k, r in reports.items()}}
    if run_dir is not None:
        result["checkpoint_sha256"] = checkpoint_digest(run_dir / "checkpoint")
        with open(run_dir / "report.json", "w") as fh:
            json.dump(result, fh, indent=2, sort_keys=True)
    return result


def run_grid(base: ExperimentConfig, cells: dict[str, dict], seeds, bench: Benchmark, out_dir=None,
             cache_dir=None) -> dict[str, list[dict]]:
    """Every cell under every seed; cells are named config overrides."""
    for name, overrides in cells.items():
        for key in overrides:
            if key not in base.to_dict():
                raise KeyError(f"grid cell {name!r}: unknown config key {key!r}")
    results = {}
    for name, overrides in cells.items():
        results[name] = []
        for seed in seeds:
            cfg = base.replace(**overrides, seed=seed)
            sub = Path(out_dir) / name / f"seed{seed}" if out_dir is not None else None
            log.info("grid cell %s seed %s", name, seed)
            results[name].append(run_experiment(cfg, bench, sub, cache_dir))
    return results


def summarize_grid(results: dict[str, list[dict]]) -> list[dict]:
    """Seed-averaged accuracy and CI half-width per cell and domain."""
    rows = []
    for name, runs in results.items():
        row = {"cell": name, "seeds": len(runs)}
        for domain in runs[0]["reports"]:
            means = [r["reports"][domain]["mean_accuracy"] for r in runs]
            hws = [r["reports"][domain]["half_width"] for r in runs]
            row[f"{domain}_mean"] = float(np.mean(means))
            row[f"{domain}_ci"] = float(np.mean(hws))
        rows.append(row)
    return rows


def write_grid_csv(rows: list[dict], path) -> None:
    fields = list(rows[0].keys()) if rows else ["cell"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in row.items()})
