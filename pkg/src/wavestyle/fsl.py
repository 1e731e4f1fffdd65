"""Episodes, the CNN backbone with style-exchange insertion points, the prototype
head and the dual-episode loss."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import styleaug
from . import tensor as T
from .serialization import load_tensor, save_tensor
from .styleaug import PredictionMatrix
from .tensor import ShapeError, Tensor
from .wavelet import FREQUENCY_MODES, dwt_multi, idwt_multi, mask_branch

AUGMENT_MODES = ("none", "wave_san", "feature_adain", "mixstyle",
                 "gaussian_noise", "imgaug_weak", "imgaug_strong")
FEATURE_MODES = ("wave_san", "feature_adain", "mixstyle")
IMAGE_MODES = ("gaussian_noise", "imgaug_weak", "imgaug_strong")


class ConfigError(ValueError):
    pass


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"non-finite loss term {term}={value}")
        self.term = term
        self.value = value


def _check_finite(**terms: Tensor) -> None:
    for name, t in terms.items():
        if not np.isfinite(t.item()):
            raise NonFiniteLossError(name, t.item())


@dataclass
class Episode:
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    class_ids: list[str]
    support_ids: list[str] = field(default_factory=list)
    query_ids: list[str] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.class_ids)

    @property
    def k(self) -> int:
        return len(self.support_labels) // self.n

    @property
    def q(self) -> int:
        return len(self.query_labels) // self.n

    def images(self) -> np.ndarray:
        """Support then query images as one batch."""
        return np.concatenate([self.support_images, self.query_images])

    def validate(self) -> None:
        for labels, per, what in ((self.support_labels, self.k, "support"),
                                  (self.query_labels, self.q, "query")):
            counts = np.bincount(np.asarray(labels), minlength=self.n)
            if len(counts) != self.n or np.any(counts != per):
                raise ValueError(f"{what} set does not have {per} images per class: {counts.tolist()}")
        if set(self.support_ids) & set(self.query_ids):
            raise ValueError("support and query sets overlap")


@dataclass
class BackboneConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    in_channels: int = 3
    image_size: int = 32
    insertion_blocks: list[int] = field(default_factory=lambda: [1, 2, 3])
    j_list: list[int] = field(default_factory=lambda: [1, 1, 1])
    frequency_mode: str = "full"
    augment_mode: str = "wave_san"
    eps: float = 1e-5
    bn_momentum: float = 0.1
    mixstyle_alpha: float = 0.1
    mixstyle_p: float = 0.5
    noise_scale: float = 0.2

    def errors(self) -> list[str]:
        errs = []
        nb = len(self.widths)
        if nb < 1 or any(w < 1 for w in self.widths):
            errs.append(f"widths must be a non-empty list of positive ints, got {self.widths}")
        if self.augment_mode not in AUGMENT_MODES:
            errs.append(f"augment_mode {self.augment_mode!r} not in {AUGMENT_MODES}")
        if self.frequency_mode not in FREQUENCY_MODES:
            errs.append(f"frequency_mode {self.frequency_mode!r} not in {FREQUENCY_MODES}")
        if len(self.j_list) != len(self.insertion_blocks):
            errs.append(f"j_list {self.j_list} and insertion_blocks {self.insertion_blocks} differ in length")
        if len(set(self.insertion_blocks)) != len(self.insertion_blocks):
            errs.append(f"insertion_blocks has duplicates: {self.insertion_blocks}")
        if self.image_size % (2 ** max(nb, 0)):
            errs.append(f"image_size {self.image_size} not divisible by 2^{nb} (one pool per block)")
        for blk, j in zip(self.insertion_blocks, self.j_list):
            if not 1 <= blk <= nb:
                errs.append(f"insertion block {blk} outside 1..{nb}")
                continue
            if j < 1:
                errs.append(f"wavelet depth {j} at block {blk} must be >= 1")
                continue
            side = self.image_size // 2 ** blk
            if side < 2 ** j or side % 2 ** j:
                errs.append(f"feature size {side} after block {blk} not divisible by 2^{j}")
        if self.eps <= 0:
            errs.append(f"eps must be positive, got {self.eps}")
        return errs

    def validate(self) -> "BackboneConfig":
        errs = self.errors()
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    @property
    def embed_dim(self) -> int:
        return self.widths[-1]

    def depth_at(self, block: int) -> int | None:
        if block in self.insertion_blocks:
            return self.j_list[self.insertion_blocks.index(block)]
        return None


class Backbone:
    """Stack of conv3x3 -> batch-norm -> relu -> maxpool blocks.

    Parameters live in ``params`` (trainable tensors) and batch-norm running
    statistics in ``buffers`` (plain arrays).
    """

    def __init__(self, config: BackboneConfig, rng: np.random.Generator | None = None):
        self.config = config.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        cin = config.in_channels
        for i, cout in enumerate(config.widths, start=1):
            fan_in = cin * 9
            self.params[f"block{i}.conv"] = Tensor(rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / fan_in),
                                                   requires_grad=True)
            self.params[f"block{i}.bn.gamma"] = Tensor(np.ones(cout), requires_grad=True)
            self.params[f"block{i}.bn.beta"] = Tensor(np.zeros(cout), requires_grad=True)
            self.buffers[f"block{i}.bn.running_mean"] = np.zeros(cout)
            self.buffers[f"block{i}.bn.running_var"] = np.ones(cout)
            cin = cout

    # -- blocks ----------------------------------------------------------------
    def block(self, x: Tensor, i: int, training: bool, update_stats: bool) -> Tensor:
        c = self.config
        h = T.conv2d(x, self.params[f"block{i}.conv"], stride=1, padding=1)
        gamma, beta = self.params[f"block{i}.bn.gamma"], self.params[f"block{i}.bn.beta"]
        if training:
            h, mu, var = T.batch_norm(h, gamma, beta, c.eps)
            if update_stats:
                m = c.bn_momentum
                n = h.shape[0] * h.shape[2] * h.shape[3]
                rm, rv = f"block{i}.bn.running_mean", f"block{i}.bn.running_var"
                self.buffers[rm] = (1 - m) * self.buffers[rm] + m * mu
                self.buffers[rv] = (1 - m) * self.buffers[rv] + m * var * n / max(n - 1, 1)
        else:
            inv = 1.0 / np.sqrt(self.buffers[f"block{i}.bn.running_var"] + c.eps)
            shift = -self.buffers[f"block{i}.bn.running_mean"] * inv
            h = T.affine_channels(h, Tensor(inv) * gamma, Tensor(shift) * gamma + beta)
        return T.max_pool2d(T.relu(h))

    def _frequency_roundtrip(self, x: Tensor, depth: int) -> Tensor:
        levels = dwt_multi(x, depth)
        levels = self._masked(levels)
        return idwt_multi(levels)

    def _masked(self, levels):
        mode = self.config.frequency_mode
        if mode == "full":
            return levels
        if mode == "low_only":
            return [mask_branch(d, "low_only") for d in levels]
        return levels[:-1] + [mask_branch(levels[-1], "high_only")]

    def _needs_wavelet(self) -> bool:
        c = self.config
        return c.augment_mode == "wave_san" or c.frequency_mode != "full"

    # -- forward passes ---------------------------------------------------------
    def forward(self, images, training: bool = False, update_stats: bool = False,
                insertions: bool = True) -> Tensor:
        """Clean pass. With ``insertions=False`` the wavelet layers are removed outright."""
        x = T.as_tensor(images)
        for i in range(1, len(self.config.widths) + 1):
            x = self.block(x, i, training, update_stats)
            depth = self.config.depth_at(i)
            if depth is not None and self._needs_wavelet() and (insertions or self.config.frequency_mode != "full"):
                x = self._frequency_roundtrip(x, depth)
        return T.global_avg_pool(x)

    def forward_pair(self, images_a, images_b, training: bool = True,
                     rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        """Jointly run two streams that exchange styles at every insertion block."""
        c = self.config
        xa, xb = T.as_tensor(images_a), T.as_tensor(images_b)
        if xa.shape != xb.shape:
            raise ShapeError(f"style-paired batches must match in shape: {xa.shape} vs {xb.shape}")
        for i in range(1, len(c.widths) + 1):
            xa = self.block(xa, i, training, False)
            xb = self.block(xb, i, training, False)
            depth = c.depth_at(i)
            if depth is None:
                continue
            xa, xb = self.exchange(xa, xb, depth, rng)
        return T.global_avg_pool(xa), T.global_avg_pool(xb)

    def exchange(self, xa: Tensor, xb: Tensor, depth: int, rng=None) -> tuple[Tensor, Tensor]:
        c = self.config
        mode = c.augment_mode
        if mode == "wave_san":
            la, lb = self._masked(dwt_multi(xa, depth)), self._masked(dwt_multi(xb, depth))
            low_a, low_b = styleaug.style_swap(la[-1].low, lb[-1].low, c.eps)
            return idwt_multi(la, low_a), idwt_multi(lb, low_b)
        if c.frequency_mode != "full":
            xa, xb = self._frequency_roundtrip(xa, depth), self._frequency_roundtrip(xb, depth)
        if mode == "feature_adain":
            return styleaug.style_swap(xa, xb, c.eps)
        if mode == "mixstyle":
            return styleaug.mixstyle(xa, xb, c.mixstyle_alpha, c.mixstyle_p, rng, c.eps)
        if c.frequency_mode == "full" and self._needs_wavelet():
            xa, xb = self._frequency_roundtrip(xa, depth), self._frequency_roundtrip(xb, depth)
        return xa, xb

    def embed(self, images, batch_size: int = 256) -> np.ndarray:
        """Evaluation-mode embeddings as a plain array."""
        images = np.asarray(images)
        out = []
        with T.no_grad():
            for s in range(0, len(images), batch_size):
                out.append(self.forward(images[s:s + batch_size]).data)
        return np.concatenate(out) if out else np.zeros((0, self.config.embed_dim))

    # -- parameter plumbing ------------------------------------------------------
    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return out

    def clone(self) -> "Backbone":
        other = Backbone.__new__(Backbone)
        other.config = self.config
        other.params = {k: Tensor(v.data, requires_grad=True) for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        return other


def backbone_forward(images, model: Backbone, style_source=None, training: bool = False,
                     rng: np.random.Generator | None = None) -> Tensor:
    """Embed ``images``; with ``style_source`` the feature-level augmentation is applied."""
    if style_source is None or model.config.augment_mode not in FEATURE_MODES:
        return model.forward(images, training=training)
    return model.forward_pair(images, style_source, training=training, rng=rng)[0]


# ---------------------------------------------------------------------------
# prototype head and losses


def _one_hot(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    oh = np.zeros((len(labels), n))
    oh[np.arange(len(labels)), labels] = 1.0
    return oh


def proto_logits(support_emb, support_labels, query_emb, n: int | None = None) -> Tensor:
    support_emb, query_emb = T.as_tensor(support_emb), T.as_tensor(query_emb)
    labels = np.asarray(support_labels, dtype=int)
    n = int(labels.max()) + 1 if n is None else n
    counts = np.bincount(labels, minlength=n)
    if len(counts) > n or np.any(counts[:n] == 0):
        missing = [c for c in range(n) if c >= len(counts) or counts[c] == 0]
        raise ValueError(f"classes {missing} have no support embedding")
    avg = Tensor((_one_hot(labels, n) / counts[None, :n]).T)
    protos = avg @ support_emb
    q2 = T.tsum(query_emb * query_emb, axis=1, keepdims=True)
    p2 = T.tsum(protos * protos, axis=1).reshape(1, n)
    return -(q2 - 2.0 * (query_emb @ protos.T) + p2)


def proto_classify(support_emb, support_labels, query_emb, n: int | None = None) -> PredictionMatrix:
    """Softmax over negative squared distances to class-mean prototypes."""
    return PredictionMatrix.from_logits(proto_logits(support_emb, support_labels, query_emb, n))


def fsl_cross_entropy(pred: PredictionMatrix, query_labels) -> Tensor:
    labels = np.asarray(query_labels, dtype=int)
    logp = pred.log_probs if isinstance(pred, PredictionMatrix) else PredictionMatrix.from_probs(pred).log_probs
    picked = logp[np.arange(len(labels)), labels]
    return -T.mean(picked)


@dataclass
class LossBreakdown:
    L_A0: Tensor
    L_B0: Tensor
    L_Asa: Tensor
    L_Bsa: Tensor
    L_Assl: Tensor
    L_Bssl: Tensor
    total: Tensor
    k1: float
    k2: float

    TERMS = ("L_A0", "L_B0", "L_Asa", "L_Bsa", "L_Assl", "L_Bssl")

    def values(self) -> dict[str, float]:
        out = {t: getattr(self, t).item() for t in self.TERMS}
        out["total"] = self.total.item()
        return out

    @staticmethod
    def combine(values: dict[str, float], k1: float, k2: float) -> float:
        return 0.5 * (k1 * (values["L_A0"] + values["L_B0"]) + k2 * (values["L_Asa"] + values["L_Bsa"])
                      + values["L_Assl"] + values["L_Bssl"])


def combine_losses(l_a0, l_b0, l_asa, l_bsa, l_assl, l_bssl, k1: float, k2: float) -> Tensor:
    return 0.5 * (k1 * (l_a0 + l_b0) + k2 * (l_asa + l_bsa) + l_assl + l_bssl)


def _episode_predictions(emb: Tensor, ep: Episode) -> PredictionMatrix:
    ns = len(ep.support_labels)
    return proto_classify(emb[:ns], ep.support_labels, emb[ns:], ep.n)


def _augment_images(images: np.ndarray, mode: str, cfg: BackboneConfig, rng) -> np.ndarray:
    if mode == "gaussian_noise":
        return styleaug.gaussian_noise_augment(images, cfg.noise_scale, rng)
    return styleaug.image_augment(images, "weak" if mode == "imgaug_weak" else "strong", rng)


def dual_episode_step(a: Episode, b: Episode, model: Backbone, k1: float = 0.2, k2: float = 0.8,
                      rng: np.random.Generator | None = None, use_ssl: bool = True) -> LossBreakdown:
    """All six losses of one meta-training step and their weighted total."""
    if (a.n, a.k, a.q) != (b.n, b.k, b.q):
        raise ShapeError(f"episode shapes differ: A is {a.n}-way {a.k}-shot {a.q}-query, "
                         f"B is {b.n}-way {b.k}-shot {b.q}-query")
    cfg = model.config
    mode = cfg.augment_mode
    xa, xb = a.images(), b.images()

    emb_a0 = model.forward(xa, training=True, update_stats=True)
    emb_b0 = model.forward(xb, training=True, update_stats=True)
    if mode in FEATURE_MODES:
        emb_asa, emb_bsa = model.forward_pair(xa, xb, training=True, rng=rng)
    elif mode in IMAGE_MODES:
        rng = rng if rng is not None else np.random.default_rng(0)
        emb_asa = model.forward(_augment_images(xa, mode, cfg, rng), training=True)
        emb_bsa = model.forward(_augment_images(xb, mode, cfg, rng), training=True)
    else:
        emb_asa, emb_bsa = emb_a0, emb_b0

    p_a0, p_b0 = _episode_predictions(emb_a0, a), _episode_predictions(emb_b0, b)
    p_asa, p_bsa = _episode_predictions(emb_asa, a), _episode_predictions(emb_bsa, b)
    l_a0, l_b0 = fsl_cross_entropy(p_a0, a.query_labels), fsl_cross_entropy(p_b0, b.query_labels)
    l_asa, l_bsa = fsl_cross_entropy(p_asa, a.query_labels), fsl_cross_entropy(p_bsa, b.query_labels)
    _check_finite(L_A0=l_a0, L_B0=l_b0, L_Asa=l_asa, L_Bsa=l_bsa)
    if use_ssl:
        l_assl = styleaug.ssl_consistency_loss(p_asa, p_a0)
        l_bssl = styleaug.ssl_consistency_loss(p_bsa, p_b0)
        _check_finite(L_Assl=l_assl, L_Bssl=l_bssl)
    else:
        l_assl = l_bssl = Tensor(0.0)
    total = combine_losses(l_a0, l_b0, l_asa, l_bsa, l_assl, l_bssl, k1, k2)
    return LossBreakdown(l_a0, l_b0, l_asa, l_bsa, l_assl, l_bssl, total, k1, k2)


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "wavestyle-checkpoint"


def save_checkpoint(model: Backbone, directory, extra: dict | None = None) -> Path:
    """Write one WSTN file per array plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for kind, arrays in (("parameter", {k: v.data for k, v in model.params.items()}), ("buffer", model.buffers)):
        for name in sorted(arrays):
            fname = name.replace(".", "_") + ".wstn"
            save_tensor(directory / fname, arrays[name])
            entries.append({"name": name, "kind": kind, "shape": list(arrays[name].shape), "file": fname})
    manifest = {"format": CHECKPOINT_FORMAT, "version": 1, "backbone": asdict(model.config),
                "tensors": entries}
    if extra:
        manifest.update(extra)
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return directory


def load_checkpoint(directory, config_overrides: dict | None = None) -> Backbone:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{manifest_path} is not a {CHECKPOINT_FORMAT} manifest")
    cfg = dict(manifest["backbone"])
    cfg.update(config_overrides or {})
    model = Backbone(BackboneConfig(**cfg))
    for e in manifest["tensors"]:
        arr = load_tensor(directory / e["file"])
        if list(arr.shape) != list(e["shape"]):
            raise ValueError(f"{e['name']}: file shape {arr.shape} != manifest {e['shape']}")
        if e["kind"] == "parameter":
            if e["name"] not in model.params or model.params[e["name"]].shape != arr.shape:
                raise ValueError(f"checkpoint parameter {e['name']} does not fit the configured backbone")
            model.params[e["name"]] = Tensor(arr, requires_grad=True)
        else:
            model.buffers[e["name"]] = arr
    return model


def checkpoint_digest(directory) -> str:
    import hashlib

    h = hashlib.sha256()
    directory = Path(directory)
    for p in sorted(directory.iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()
