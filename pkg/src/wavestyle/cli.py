"""Command-line entry point.

Every ``ExperimentConfig`` field is also a flag (``--augment-mode none``,
``--widths 8,16,32,64``). Flags override the JSON file given by ``--config``;
``WAVESTYLE_SEED`` sits between the two. Exit codes: 0 success, 1 runtime
failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .config import SEED_ENV, ExperimentConfig, coerce

log = logging.getLogger("wavestyle")

EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ConfigProblem(Exception):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


# ---------------------------------------------------------------------------
# argument parsing


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    group = p.add_argument_group("configuration overrides")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        names = [flag] if flag == f"--{f.name}" else [flag, f"--{f.name}"]
        group.add_argument(*names, dest=f"cfg__{f.name}", default=argparse.SUPPRESS, metavar="V")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    _add_config_flags(p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wavestyle", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"wavestyle {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render the synthetic source + target benchmark")
    _common(p)

    p = sub.add_parser("pretrain", help="classification pretraining on the source domain")
    _common(p)
    p.add_argument("--data", help="benchmark directory (defaults to data_dir)")

    p = sub.add_parser("meta-train", help="dual-episode meta-training")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--pretrained", help="pretrain checkpoint directory")
    p.add_argument("--from-scratch", action="store_true", help="skip the pretraining requirement")

    p = sub.add_parser("evaluate", help="episodic evaluation of a checkpoint")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", action="append", help="domain(s) to evaluate; default: source test + all targets")
    p.add_argument("--episodes", type=int, help="alias for --eval-episodes")

    p = sub.add_parser("ablate", help="run a grid of config overrides over shared seeds")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--grid", required=True, help='JSON: {"cells": {name: {key: value}}, "seeds": [...]}')
    p.add_argument("--parallel", type=int, help="evaluation worker threads")

    p = sub.add_parser("dump-features", help="feature maps before/after the low-frequency style swap")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", default="source")
    p.add_argument("--index-a", type=int, default=0, help="row of image A in the domain")
    p.add_argument("--index-b", type=int, default=1, help="row of image B in the domain")
    p.add_argument("--block", type=int, default=1)
    p.add_argument("--channel", type=int, default=0)

    p = sub.add_parser("dump-embeddings", help="embedding matrix + labels for external plotting")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", default="source")
    p.add_argument("--per-class", type=int, default=20)
    return parser


def _coerce_all(values: dict, label, errors: list[str]) -> dict:
    out = {}
    for name, raw in values.items():
        try:
            out[name] = coerce(name, raw)
        except (ValueError, KeyError, TypeError) as err:
            errors.append(f"{label(name)}: {err}")
    return out


def resolve_config(args: argparse.Namespace, env=None) -> ExperimentConfig:
    """Effective config (file, then WAVESTYLE_SEED, then flags) with every problem collected."""
    env = os.environ if env is None else env
    errors: list[str] = []
    values: dict = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
            if not isinstance(data, dict):
                raise ValueError("top level must be an object")
            values.update(_coerce_all(data, lambda k: f"{args.config}: {k}", errors))
        except FileNotFoundError:
            errors.append(f"config file {args.config} not found")
        except ValueError as err:
            errors.append(f"config file {args.config} is not a valid config: {err}")
    if env.get(SEED_ENV):
        values.update(_coerce_all({"seed": env[SEED_ENV]}, lambda k: SEED_ENV, errors))
    flags = {k[5:]: v for k, v in vars(args).items() if k.startswith("cfg__")}
    values.update(_coerce_all(flags, lambda k: "--" + k.replace("_", "-"), errors))
    if getattr(args, "episodes", None) is not None:
        values["eval_episodes"] = args.episodes
    if getattr(args, "parallel", None) is not None:
        values["workers"] = args.parallel
    try:
        cfg = ExperimentConfig().replace(**values)
    except (TypeError, ValueError) as err:
        errors.append(str(err))
        raise ConfigProblem(errors)
    errors.extend(cfg.errors())
    data = getattr(args, "data", None) or cfg.data_dir
    if args.command != "gen-data":
        if not data:
            errors.append("no benchmark directory: pass --data or set data_dir")
        elif not Path(data).is_dir():
            errors.append(f"benchmark directory {data} does not exist")
        else:
            cfg = cfg.replace(data_dir=str(data))
    for attr in ("checkpoint", "pretrained"):
        path = getattr(args, attr, None)
        if path and not (Path(path) / "manifest.json").exists():
            errors.append(f"--{attr} {path} is not a checkpoint directory")
    if args.command == "meta-train" and not args.pretrained and not args.from_scratch:
        errors.append("meta-train needs --pretrained CHECKPOINT (or --from-scratch)")
    if errors:
        raise ConfigProblem(errors)
    return cfg


# ---------------------------------------------------------------------------
# commands


def _out(args) -> Path:
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent of output directory {out} does not exist")
    out.mkdir(exist_ok=True)
    return out


def _write_run_manifest(out: Path, args, cfg: ExperimentConfig, artifacts: list[str], extra=None) -> None:
    manifest = {
        "command": args.command,
        "version": __version__,
        "config": cfg.to_dict(),
        "config_fingerprint": cfg.fingerprint(),
        "artifacts": sorted(artifacts),
    }
    if extra:
        manifest.update(extra)
    with open(out / "run-manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def cmd_gen_data(args, cfg: ExperimentConfig) -> int:
    from .data import generate_benchmark

    out = Path(args.out)
    manifests = generate_benchmark(out, cfg.seed, cfg.source_per_class, cfg.target_per_class, cfg.image_size)
    for name, m in manifests.items():
        print(f"{name}: {len(m.classes)} classes, {m.total} images -> {out / name}")
    _write_run_manifest(out, args, cfg, [f"{n}/manifest.json" for n in manifests])
    return 0


def cmd_pretrain(args, cfg: ExperimentConfig) -> int:
    from .engine import pretrain
    from .pipeline import Benchmark

    out = _out(args)
    bench = Benchmark.load(cfg.data_dir)
    model = pretrain(bench.source_train, cfg.replace(augment_mode="none", frequency_mode="full"),
                     out / "checkpoint")
    with open(out / "pretrain_history.json", "w") as fh:
        json.dump({"loss": model.pretrain_history}, fh, indent=2)
    print(f"checkpoint: {out / 'checkpoint'}")
    _write_run_manifest(out, args, cfg, ["checkpoint/manifest.json", "pretrain_history.json"])
    return 0


def cmd_meta_train(args, cfg: ExperimentConfig) -> int:
    from .engine import meta_train
    from .fsl import Backbone, checkpoint_digest, load_checkpoint
    from .pipeline import Benchmark

    out = _out(args)
    bench = Benchmark.load(cfg.data_dir)
    overrides = {k: getattr(cfg, k) for k in ExperimentConfig.BACKBONE_KEYS}
    if args.pretrained:
        model = load_checkpoint(args.pretrained, overrides)
    else:
        model = Backbone(cfg.backbone(), np.random.default_rng([cfg.seed, 0]))
    meta_train(model, bench.source_train, cfg, out, validation=bench.source_val)
    digest = checkpoint_digest(out / "checkpoint")
    print(f"checkpoint: {out / 'checkpoint'} (sha256 {digest})")
    print(f"metrics: {out / 'metrics.jsonl'}")
    _write_run_manifest(out, args, cfg, ["checkpoint/manifest.json", "metrics.jsonl", "timings.jsonl"],
                        {"checkpoint_sha256": digest, "pretrained": args.pretrained})
    return 0


def _domain(bench, name: str):
    if name == "source":
        return bench.source_test
    if name in ("source_train", "source_val", "source_test"):
        return getattr(bench, name)
    if name not in bench.targets:
        raise KeyError(f"unknown domain {name!r}; have source, {', '.join(bench.targets)}")
    return bench.targets[name]


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    from .engine import evaluate
    from .fsl import load_checkpoint
    from .pipeline import Benchmark

    out = _out(args)
    bench = Benchmark.load(cfg.data_dir)
    model = load_checkpoint(args.checkpoint)
    names = args.domain or ["source", *bench.targets]
    reports = {}
    for i, name in enumerate(names):
        ds = _domain(bench, name)
        src = None if name.startswith("source") else bench.source_train.manifest
        rng = np.random.default_rng([cfg.seed, 100 + i])
        reports[name] = evaluate(model, ds, cfg.eval_episodes, cfg.n, cfg.k, cfg.q_eval, rng,
                                 source_manifest=src, workers=cfg.workers, fingerprint=cfg.fingerprint())
        print(f"{name}: {reports[name].summary()}")
    report = {"checkpoint": str(args.checkpoint), "config": cfg.to_dict(),
              "reports": {k: r.to_json() for k, r in reports.items()}}
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
    _write_run_manifest(out, args, cfg, ["report.json"])
    return 0


def cmd_ablate(args, cfg: ExperimentConfig) -> int:
    from .pipeline import Benchmark, run_grid, summarize_grid, write_grid_csv

    with open(args.grid) as fh:
        grid = json.load(fh)
    cells = grid.get("cells")
    if not isinstance(cells, dict) or not cells:
        raise ConfigProblem([f"{args.grid}: 'cells' must be a non-empty object"])
    problems = []
    for name, overrides in cells.items():
        for key, value in overrides.items():
            try:
                coerce(key, value)
            except KeyError:
                problems.append(f"grid cell {name!r}: unknown config key {key!r}")
            except ValueError as err:
                problems.append(f"grid cell {name!r}: {err}")
        if not problems:
            problems.extend(f"grid cell {name!r}: {e}" for e in cfg.replace(**overrides).errors())
    if problems:
        raise ConfigProblem(problems)
    seeds = [int(s) for s in grid.get("seeds", [cfg.seed])]
    out = _out(args)
    bench = Benchmark.load(cfg.data_dir)
    results = run_grid(cfg, cells, seeds, bench, out / "runs", out / "cache")
    rows = summarize_grid(results)
    write_grid_csv(rows, out / "ablation.csv")
    print(f"{len(cells)} cells x {len(seeds)} seeds -> {out / 'ablation.csv'}")
    _write_run_manifest(out, args, cfg, ["ablation.csv"], {"grid": grid})
    return 0


def cmd_dump_features(args, cfg: ExperimentConfig) -> int:
    from .engine import dump_feature_maps
    from .fsl import load_checkpoint
    from .pipeline import Benchmark

    out = _out(args)
    bench = Benchmark.load(cfg.data_dir)
    ds = _domain(bench, args.domain)
    for idx in (args.index_a, args.index_b):
        if not 0 <= idx < len(ds):
            raise IndexError(f"image index {idx} outside 0..{len(ds) - 1} for domain {args.domain}")
    model = load_checkpoint(args.checkpoint)
    dump_feature_maps(model, ds.images[args.index_a], ds.images[args.index_b], args.block, args.channel, out)
    names = ["F_A", "F_B", "F_A_aug", "F_A_aug_minus_F_A"]
    files = [f"{n}.{ext}" for n in names for ext in ("wstn", "pgm")]
    for f in files:
        print(out / f)
    _write_run_manifest(out, args, cfg, files, {"image_a": ds.image_id(args.index_a),
                                                "image_b": ds.image_id(args.index_b)})
    return 0


def cmd_dump_embeddings(args, cfg: ExperimentConfig) -> int:
    from .engine import dump_embeddings
    from .fsl import load_checkpoint
    from .pipeline import Benchmark

    out = _out(args)
    bench = Benchmark.load(cfg.data_dir)
    emb, _ = dump_embeddings(load_checkpoint(args.checkpoint), _domain(bench, args.domain), args.per_class, out)
    print(f"{emb.shape[0]} x {emb.shape[1]} -> {out / 'embeddings.wstn'}, {out / 'labels.txt'}")
    _write_run_manifest(out, args, cfg, ["embeddings.wstn", "labels.txt"])
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "meta-train": cmd_meta_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "dump-features": cmd_dump_features,
    "dump-embeddings": cmd_dump_embeddings,
}


def main(argv=None, env=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, env)
        return COMMANDS[args.command](args, cfg)
    except ConfigProblem as err:
        print("configuration errors:", file=sys.stderr)
        for e in err.errors:
            print(f"  - {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - reported and mapped to the runtime exit code
        log.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


__all__ = ["main", "build_parser", "resolve_config", "SEED_ENV"]

if __name__ == "__main__":
    sys.exit(main())
