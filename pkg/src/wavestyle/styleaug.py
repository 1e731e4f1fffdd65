"""Style statistics, AdaIN-based style exchange, baselines and the consistency loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import tensor as T
from .tensor import ShapeError, Tensor, as_tensor

DEFAULT_EPS = 1e-5


@dataclass(frozen=True)
class StyleStats:
    mu: Tensor
    sigma: Tensor


@dataclass(frozen=True)
class PredictionMatrix:
    """Row-stochastic query-by-class probabilities with matching log-probabilities.

    Keeping the log-probabilities from ``log_softmax`` avoids taking the log of
    probabilities that underflowed to zero.
    """

    probs: Tensor
    log_probs: Tensor

    @classmethod
    def from_logits(cls, logits: Tensor) -> "PredictionMatrix":
        logp = T.log_softmax(logits, axis=1)
        return cls(T.exp(logp), logp)

    @classmethod
    def from_probs(cls, probs) -> "PredictionMatrix":
        probs = as_tensor(probs)
        if np.any(probs.data <= 0):
            bad = tuple(int(i) for i in np.argwhere(probs.data <= 0)[0])
            raise ValueError(
                f"probability {probs.data[bad]!r} at {bad} is not strictly positive; apply softmax first")
        return cls(probs, T.log(probs))

    @property
    def shape(self):
        return self.probs.shape


def _spatial_axes(x: Tensor) -> tuple[int, ...]:
    return tuple(range(2, x.ndim))


def style_stats(x, eps: float = DEFAULT_EPS, keepdims: bool = False) -> StyleStats:
    """Per-sample, per-channel spatial mean and eps-stabilized population std."""
    x = as_tensor(x)
    axes = _spatial_axes(x)
    mu = T.mean(x, axis=axes, keepdims=True)
    centered = x - mu
    var = T.mean(centered * centered, axis=axes, keepdims=True)
    sigma = T.sqrt(var + eps)
    if not keepdims:
        mu = mu.reshape(x.shape[:2])
        sigma = sigma.reshape(x.shape[:2])
    return StyleStats(mu, sigma)


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what} needs equal shapes, got {a.shape} and {b.shape}")


def _renormalize(x: Tensor, stats: StyleStats, sigma: Tensor, mu: Tensor) -> Tensor:
    # sigma * (x - mu_x) / sigma_x + mu, arranged so that equal statistics return x bit-for-bit
    return x + (sigma / stats.sigma - 1.0) * (x - stats.mu) + (mu - stats.mu)


def adain(x_a, x_b, eps: float = DEFAULT_EPS) -> Tensor:
    """Give ``x_a`` the spatial mean/std of ``x_b`` per sample and channel."""
    x_a, x_b = as_tensor(x_a), as_tensor(x_b)
    _check_same(x_a, x_b, "adain")
    sa = style_stats(x_a, eps, keepdims=True)
    sb = style_stats(x_b, eps, keepdims=True)
    return _renormalize(x_a, sa, sb.sigma, sb.mu)


def style_swap(x_a, x_b, eps: float = DEFAULT_EPS) -> tuple[Tensor, Tensor]:
    x_a, x_b = as_tensor(x_a), as_tensor(x_b)
    _check_same(x_a, x_b, "style_swap")
    sa = style_stats(x_a, eps, keepdims=True)
    sb = style_stats(x_b, eps, keepdims=True)
    return _renormalize(x_a, sa, sb.sigma, sb.mu), _renormalize(x_b, sb, sa.sigma, sa.mu)


def mixstyle(x_a, x_b, alpha: float = 0.1, p: float = 0.5, rng: np.random.Generator | None = None,
             eps: float = DEFAULT_EPS, lam: float | None = None) -> tuple[Tensor, Tensor]:
    """Mix styles of two batches with ``lam ~ Beta(alpha, alpha)``, active with probability ``p``.

    Passing ``lam`` forces both the activation and the mixing ratio.
    """
    x_a, x_b = as_tensor(x_a), as_tensor(x_b)
    _check_same(x_a, x_b, "mixstyle")
    if alpha <= 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"activation probability must lie in [0, 1], got {p}")
    if lam is None:
        rng = rng if rng is not None else np.random.default_rng()
        if rng.random() >= p:
            return x_a, x_b
        lam = float(rng.beta(alpha, alpha))
    sa = style_stats(x_a, eps, keepdims=True)
    sb = style_stats(x_b, eps, keepdims=True)
    sigma_a = lam * sa.sigma + (1.0 - lam) * sb.sigma
    mu_a = lam * sa.mu + (1.0 - lam) * sb.mu
    sigma_b = lam * sb.sigma + (1.0 - lam) * sa.sigma
    mu_b = lam * sb.mu + (1.0 - lam) * sa.mu
    return _renormalize(x_a, sa, sigma_a, mu_a), _renormalize(x_b, sb, sigma_b, mu_b)


def _as_prediction(p) -> PredictionMatrix:
    return p if isinstance(p, PredictionMatrix) else PredictionMatrix.from_probs(p)


def _log_mean_exp(a: Tensor, b: Tensor) -> Tensor:
    """``log((e^a + e^b) / 2)``; the ln 2 is removed before adding ``m`` so a == b returns a exactly."""
    m = Tensor(np.maximum(a.data, b.data))
    return (T.log(T.exp(a - m) + T.exp(b - m)) - np.log(2.0)) + m


def kl_rows(p1: PredictionMatrix, logp2: Tensor) -> Tensor:
    """``1/(B n) * sum_ij P1_ij (log P1_ij - log P2_ij)`` for ``[B, n]`` matrices."""
    b, n = p1.shape
    return T.tsum(p1.probs * (p1.log_probs - logp2)) * (1.0 / (b * n))


def ssl_consistency_loss(p_sa, p_0) -> Tensor:
    """Half the sum of KL divergences of each prediction to their average."""
    p_sa, p_0 = _as_prediction(p_sa), _as_prediction(p_0)
    if p_sa.shape != p_0.shape:
        raise ShapeError(f"prediction shapes differ: {p_sa.shape} vs {p_0.shape}")
    log_avg = _log_mean_exp(p_sa.log_probs, p_0.log_probs)
    return 0.5 * (kl_rows(p_sa, log_avg) + kl_rows(p_0, log_avg))


# ---------------------------------------------------------------------------
# image-space baselines (numpy only; images are data, not graph nodes)


def gaussian_noise_augment(images, scale: float, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(getattr(images, "data", images), dtype=np.float64)
    if scale == 0:
        return x.copy()
    return np.clip(x + scale * rng.standard_normal(x.shape), 0.0, 1.0)


IMAGE_AUG_PRESETS = {
    "weak": {"jitter": 0.5, "rotation": 30.0, "grayscale_p": 0.1},
    "strong": {"jitter": 1.0, "rotation": 90.0, "grayscale_p": 0.3},
}


def _luma(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def sample_image_aug_params(strength: str, rng: np.random.Generator, size: int) -> dict:
    """Draw one image's augmentation parameters; the draw order is fixed across strengths."""
    if strength not in IMAGE_AUG_PRESETS:
        raise ValueError(f"unknown augmentation strength {strength!r}")
    cfg = IMAGE_AUG_PRESETS[strength]
    s = cfg["jitter"]
    area = rng.uniform(0.08, 1.0)
    log_ratio = rng.uniform(np.log(3 / 4), np.log(4 / 3))
    ratio = float(np.exp(log_ratio))
    cw = int(round(np.sqrt(area * ratio) * size))
    ch = int(round(np.sqrt(area / ratio) * size))
    cw, ch = min(max(cw, 1), size), min(max(ch, 1), size)
    top = int(rng.integers(0, size - ch + 1))
    left = int(rng.integers(0, size - cw + 1))
    u_bright, u_contrast, u_sat = rng.uniform(-1.0, 1.0, size=3)
    u_rot = rng.uniform(-1.0, 1.0)
    u_gray = rng.random()
    sigma_blur = rng.uniform(0.1, 2.0)
    return {
        "crop": (top, left, ch, cw),
        "brightness": 1.0 + 0.4 * s * u_bright,
        "contrast": 1.0 + 0.4 * s * u_contrast,
        "saturation": 1.0 + 0.4 * s * u_sat,
        "angle": cfg["rotation"] * u_rot,
        "grayscale": bool(u_gray < cfg["grayscale_p"]),
        "blur_sigma": sigma_blur,
    }


def _apply_image_aug(img: np.ndarray, prm: dict) -> np.ndarray:
    c, h, w = img.shape
    top, left, ch, cw = prm["crop"]
    crop = img[:, top:top + ch, left:left + cw]
    out = np.stack([ndimage.zoom(ch_img, (h / ch, w / cw), order=1, mode="nearest")[:h, :w]
                    for ch_img in crop])
    out = np.clip(out * prm["brightness"], 0, 1)
    m = _luma(out).mean()
    out = np.clip((out - m) * prm["contrast"] + m, 0, 1)
    gray = _luma(out)[None]
    out = np.clip((out - gray) * prm["saturation"] + gray, 0, 1)
    out = np.stack([ndimage.rotate(ch_img, prm["angle"], reshape=False, order=1, mode="nearest")
                    for ch_img in out])
    if prm["grayscale"]:
        out = np.repeat(_luma(out)[None], c, axis=0)
    out = np.stack([ndimage.gaussian_filter(ch_img, prm["blur_sigma"], mode="nearest") for ch_img in out])
    return np.clip(out, 0.0, 1.0)


def image_augment(images, strength: str, rng: np.random.Generator,
                  trace: list | None = None) -> np.ndarray:
    """Resized crop, colour jitter, rotation, random grayscale, gaussian blur.

    ``trace`` (if given) receives the sampled parameters of every image.
    """
    x = np.asarray(getattr(images, "data", images), dtype=np.float64)
    out = np.empty_like(x)
    for i, img in enumerate(x):
        prm = sample_image_aug_params(strength, rng, x.shape[-1])
        if trace is not None:
            trace.append(prm)
        out[i] = _apply_image_aug(img, prm)
    return out
