"""Training stages, Adam, episodic evaluation and array dumps."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .config import ExperimentConfig
from .data import ImageDataset, check_disjoint, sample_dual_episodes, sample_episode_rows
from .fsl import (Backbone, LossBreakdown, NonFiniteLossError, dual_episode_step, load_checkpoint,
                  save_checkpoint)
from .serialization import save_tensor
from .styleaug import style_swap
from .tensor import ShapeError, Tensor
from .wavelet import FrequencyDecomposition, dwt_multi, idwt_multi

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: OptimizerState) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p.data = p.data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


def optimizer_for(cfg: ExperimentConfig) -> OptimizerState:
    return OptimizerState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.opt_eps)


def _grads(model: Backbone) -> dict[str, np.ndarray | None]:
    return {k: p.grad for k, p in model.params.items()}


# ---------------------------------------------------------------------------
# stage 1: classification pretraining


def pretrain(source: ImageDataset, cfg: ExperimentConfig, out_dir=None,
             model: Backbone | None = None) -> Backbone:
    """Backbone + linear head trained with cross-entropy over all source classes.

    Wavelet and style modules stay inactive; the head is discarded afterwards.
    """
    rng = np.random.default_rng([cfg.seed, 1])
    if model is None:
        model = Backbone(cfg.backbone(), np.random.default_rng([cfg.seed, 0]))
    n_cls = len(source.classes)
    d = model.config.embed_dim
    head_w = Tensor(rng.standard_normal((d, n_cls)) * np.sqrt(1.0 / d), requires_grad=True)
    head_b = Tensor(np.zeros(n_cls), requires_grad=True)
    params = dict(model.params, **{"head.w": head_w, "head.b": head_b})
    opt = optimizer_for(cfg)
    history = []
    for epoch in range(cfg.pretrain_epochs):
        order = rng.permutation(len(source))
        total, count = 0.0, 0
        for s in range(0, len(order), cfg.pretrain_batch):
            rows = order[s:s + cfg.pretrain_batch]
            if len(rows) < 2:
                continue
            emb = model.forward(source.images[rows], training=True, update_stats=True, insertions=False)
            logp = T.log_softmax(emb @ head_w + head_b, axis=1)
            loss = -T.mean(logp[np.arange(len(rows)), source.labels[rows]])
            if not math.isfinite(loss.item()):
                raise TrainingError(f"non-finite pretraining loss at epoch {epoch}")
            for p in params.values():
                p.grad = None
            loss.backward()
            adam_step(params, {k: p.grad for k, p in params.items()}, opt)
            total += loss.item() * len(rows)
            count += len(rows)
        history.append(total / max(count, 1))
        log.info("pretrain epoch %d loss %.4f", epoch + 1, history[-1])
    model.pretrain_history = history
    if out_dir is not None:
        save_checkpoint(model, out_dir, {"stage": "pretrain", "config": cfg.to_dict(), "loss_history": history})
    return model


# ---------------------------------------------------------------------------
# stage 2: dual-episode meta-training


def meta_train(model: Backbone, source: ImageDataset, cfg: ExperimentConfig, out_dir=None,
               validation: ImageDataset | None = None) -> Backbone:
    """Dual-episode training; returns (and saves) the best-validation snapshot."""
    rng = np.random.default_rng([cfg.seed, 2])
    aug_rng = np.random.default_rng([cfg.seed, 3])
    opt = optimizer_for(cfg)
    out = Path(out_dir) if out_dir is not None else None
    metrics_fh = timing_fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out / "metrics.jsonl", "w")
        timing_fh = open(out / "timings.jsonl", "w")
    best_acc, best = -1.0, None
    start = time.perf_counter()
    try:
        for step in range(1, cfg.meta_steps + 1):
            a, b = sample_dual_episodes(source, cfg.n, cfg.k, cfg.q_train, cfg.strategy, rng)
            model.zero_grad()
            try:
                losses = dual_episode_step(a, b, model, cfg.k1, cfg.k2, aug_rng, cfg.use_ssl)
            except NonFiniteLossError as err:
                raise TrainingError(f"{err} at step {step}") from err
            values = losses.values()
            if not math.isfinite(values["total"]):
                raise TrainingError(f"non-finite total loss {values['total']} at step {step}")
            losses.total.backward()
            adam_step(model.params, _grads(model), opt)
            record = {"step": step, **values}
            if metrics_fh is not None:
                metrics_fh.write(json.dumps(record) + "\n")
                timing_fh.write(json.dumps({"step": step, "wall_time": time.perf_counter() - start}) + "\n")
            if validation is not None and (step % cfg.val_every == 0 or step == cfg.meta_steps):
                report = evaluate(model, validation, cfg.val_episodes, cfg.n, cfg.k, cfg.q_eval,
                                  np.random.default_rng([cfg.seed, 4]))
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps({"step": step, "val_accuracy": report.mean_accuracy}) + "\n")
                if report.mean_accuracy > best_acc:
                    best_acc, best = report.mean_accuracy, model.clone()
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
            timing_fh.close()
    final = best if best is not None else model
    if out is not None:
        save_checkpoint(final, out / "checkpoint",
                        {"stage": "meta_train", "config": cfg.to_dict(), "best_val_accuracy": best_acc})
    return final


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalReport:
    mean_accuracy: float
    half_width: float
    episode_count: int
    accuracies: list[float]
    config_fingerprint: str = ""
    dataset: str = ""

    @classmethod
    def from_accuracies(cls, accs, fingerprint: str = "", dataset: str = "") -> "EvalReport":
        accs = np.asarray(accs, dtype=float) * 100.0
        n = len(accs)
        std = float(accs.std(ddof=1)) if n > 1 else 0.0
        return cls(float(accs.mean()), 1.96 * std / math.sqrt(n), n, accs.tolist(), fingerprint, dataset)

    def summary(self) -> str:
        return f"{self.mean_accuracy:.2f} ± {self.half_width:.2f} %"

    def to_json(self) -> dict:
        d = asdict(self)
        d["summary"] = self.summary()
        return d


def episode_accuracy(emb: np.ndarray, labels: np.ndarray, s_rows, q_rows, n: int, k: int, q: int) -> float:
    protos = emb[s_rows].reshape(n, k, -1).mean(axis=1)
    query = emb[q_rows]
    d2 = (query ** 2).sum(1)[:, None] - 2 * query @ protos.T + (protos ** 2).sum(1)[None]
    pred = np.argmin(d2, axis=1)
    return float(np.mean(pred == np.repeat(np.arange(n), q)))


def evaluate(model: Backbone, target: ImageDataset, episodes: int, n: int, k: int, q: int,
             rng: np.random.Generator, source_manifest=None, insertions: bool = True,
             workers: int = 1, fingerprint: str = "", embeddings: np.ndarray | None = None) -> EvalReport:
    """Clean episodic evaluation with prototype classification.

    Batch norm runs on stored statistics, so each image's embedding is
    independent of its batch and the dataset is embedded once up front.
    """
    if source_manifest is not None:
        check_disjoint(source_manifest, target.manifest)
    if embeddings is None:
        embeddings = embed_dataset(model, target, insertions)
    draws = [sample_episode_rows(target, n, k, q, rng) for _ in range(episodes)]

    def run(draw):
        return episode_accuracy(embeddings, target.labels, draw[0], draw[1], n, k, q)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            accs = list(pool.map(run, draws))
    else:
        accs = [run(d) for d in draws]
    return EvalReport.from_accuracies(accs, fingerprint, target.manifest.name)


def embed_dataset(model: Backbone, ds: ImageDataset, insertions: bool = True, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(ds), batch_size):
            out.append(model.forward(ds.images[s:s + batch_size], insertions=insertions).data)
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# dumps


def write_pgm(path, array: np.ndarray) -> None:
    """8-bit binary PGM, min-max normalised."""
    a = np.asarray(array, dtype=float)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode())
        fh.write(pix.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    parts = blob.split(b"\n", 3)
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def block_features(model: Backbone, images, block: int) -> Tensor:
    """Eval-mode feature map after ``block`` (earlier insertions inactive)."""
    x = T.as_tensor(images)
    for i in range(1, block + 1):
        x = model.block(x, i, training=False, update_stats=False)
    return x


def dump_feature_maps(model: Backbone, image_a: np.ndarray, image_b: np.ndarray, block: int, channel: int,
                      out_dir) -> dict[str, np.ndarray]:
    """Write F_A, F_B, the low-frequency style-swapped F_A and its difference from F_A."""
    cfg = model.config
    if block not in cfg.insertion_blocks:
        raise ValueError(f"block {block} is not an insertion block {cfg.insertion_blocks}")
    if not 0 <= channel < cfg.widths[block - 1]:
        raise ValueError(f"channel {channel} outside 0..{cfg.widths[block - 1] - 1}")
    with T.no_grad():
        fa = block_features(model, np.asarray(image_a)[None], block)
        fb = block_features(model, np.asarray(image_b)[None], block)
        la, lb = dwt_multi(fa, cfg.depth_at(block)), dwt_multi(fb, cfg.depth_at(block))
        low_a, _ = style_swap(la[-1].low, lb[-1].low, cfg.eps)
        # the transform is linear, so the change comes from inverting the LL change alone;
        # this keeps a self-swap difference at exactly zero
        zero = [FrequencyDecomposition(d.low, *(Tensor(np.zeros(d.shape)),) * 3, d.level) for d in la]
        delta = idwt_multi(zero, low_a - la[-1].low)
    diff = delta.data[0, channel]
    arrays = {
        "F_A": fa.data[0, channel],
        "F_B": fb.data[0, channel],
        "F_A_aug": fa.data[0, channel] + diff,
        "F_A_aug_minus_F_A": diff,
    }
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, arr in arrays.items():
        save_tensor(out / f"{name}.wstn", arr)
        write_pgm(out / f"{name}.pgm", arr)
    return arrays


def dump_embeddings(model: Backbone, ds: ImageDataset, per_class: int, out_dir) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    for c, members in enumerate(ds.by_class):
        if per_class > len(members):
            raise ValueError(f"class {ds.classes[c]} has {len(members)} images, {per_class} requested")
        rows.extend(members[:per_class])
    rows = np.asarray(rows, dtype=int)
    emb = model.embed(ds.images[rows])
    labels = ds.labels[rows]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_tensor(out / "embeddings.wstn", emb)
    with open(out / "labels.txt", "w") as fh:
        fh.write("".join(f"{int(l)}\t{ds.classes[l]}\n" for l in labels))
    return emb, labels


def read_labels(path) -> np.ndarray:
    with open(path) as fh:
        return np.asarray([int(line.split("\t")[0]) for line in fh if line.strip()])


__all__ = [
    "OptimizerState", "adam_step", "pretrain", "meta_train", "evaluate", "EvalReport",
    "dump_feature_maps", "dump_embeddings", "load_checkpoint", "LossBreakdown", "TrainingError",
]
