"""2-D Haar wavelet transform as differentiable tensor ops.

The four analysis kernels are the classic +-1 Haar masks

    LL = [[ 1,  1],    LH = [[-1, -1],    HL = [[-1,  1],    HH = [[ 1, -1],
          [ 1,  1]]          [ 1,  1]]          [-1,  1]]          [-1,  1]]

each scaled by 1/2 so the transform is orthonormal: energy is preserved and the
inverse uses the same kernels transposed. Subbands are the stride-2 valid
cross-correlation of the input with each kernel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, zeros

FrequencyMode = Literal["full", "low_only", "high_only"]
FREQUENCY_MODES = ("full", "low_only", "high_only")

HAAR_KERNELS = {
    "LL": np.array([[1.0, 1.0], [1.0, 1.0]]),
    "LH": np.array([[-1.0, -1.0], [1.0, 1.0]]),
    "HL": np.array([[-1.0, 1.0], [-1.0, 1.0]]),
    "HH": np.array([[1.0, -1.0], [-1.0, 1.0]]),
}
SCALE = 0.5


@dataclass(frozen=True)
class FrequencyDecomposition:
    low: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    level: int = 1

    def __post_init__(self):
        shapes = {self.low.shape, self.lh.shape, self.hl.shape, self.hh.shape}
        if len(shapes) != 1:
            raise ShapeError(
                f"subband shapes differ: LL {self.low.shape}, LH {self.lh.shape}, "
                f"HL {self.hl.shape}, HH {self.hh.shape}")

    @property
    def high(self) -> tuple[Tensor, Tensor, Tensor]:
        return self.lh, self.hl, self.hh

    @property
    def shape(self) -> tuple[int, ...]:
        return self.low.shape


def _split_blocks(x: np.ndarray):
    return x[..., 0::2, 0::2], x[..., 0::2, 1::2], x[..., 1::2, 0::2], x[..., 1::2, 1::2]


def _analysis(x: np.ndarray) -> np.ndarray:
    a, b, c, d = _split_blocks(x)
    return SCALE * np.stack([a + b + c + d, -a - b + c + d, -a + b - c + d, a - b - c + d])


def _synthesis(bands: np.ndarray) -> np.ndarray:
    ll, lh, hl, hh = bands
    *lead, h, w = ll.shape
    out = np.empty((*lead, 2 * h, 2 * w))
    out[..., 0::2, 0::2] = SCALE * (ll - lh - hl + hh)
    out[..., 0::2, 1::2] = SCALE * (ll - lh + hl - hh)
    out[..., 1::2, 0::2] = SCALE * (ll + lh - hl - hh)
    out[..., 1::2, 1::2] = SCALE * (ll + lh + hl + hh)
    return out


class HaarWavelet:
    """Single-level orthonormal Haar analysis/synthesis pair."""

    name = "haar"

    def decompose(self, x) -> FrequencyDecomposition:
        x = as_tensor(x)
        if x.ndim < 2:
            raise ShapeError(f"dwt needs at least 2-d input, got {x.shape}")
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            raise ShapeError(
                f"dwt needs even spatial size, got {h}x{w}; pad or crop the input first")
        stacked = Tensor._make(_analysis(x.data), (x,), lambda g: (_synthesis(g),), "dwt")
        return FrequencyDecomposition(stacked[0], stacked[1], stacked[2], stacked[3])

    def reconstruct(self, d: FrequencyDecomposition) -> Tensor:
        bands = [d.low, d.lh, d.hl, d.hh]
        data = _synthesis(np.stack([b.data for b in bands]))

        def bw(g):
            return tuple(_analysis(g))

        return Tensor._make(data, bands, bw, "idwt")


HAAR = HaarWavelet()


def dwt(x, wavelet=HAAR) -> FrequencyDecomposition:
    return wavelet.decompose(x)


def idwt(d: FrequencyDecomposition, wavelet=HAAR) -> Tensor:
    return wavelet.reconstruct(d)


def dwt_multi(x, levels: int, wavelet=HAAR) -> list[FrequencyDecomposition]:
    """Recursive decomposition of the LL band; entry ``j`` is level ``j + 1``."""
    x = as_tensor(x)
    if levels < 1:
        raise ValueError(f"number of wavelet levels must be >= 1, got {levels}")
    h, w = x.shape[-2:]
    f = 2 ** levels
    if h % f or w % f:
        raise ShapeError(f"spatial size {h}x{w} is not divisible by 2^{levels}")
    out = []
    current = x
    for j in range(levels):
        d = replace(wavelet.decompose(current), level=j + 1)
        out.append(d)
        current = d.low
    return out


def idwt_multi(levels: list[FrequencyDecomposition], low: Tensor | None = None, wavelet=HAAR) -> Tensor:
    """Invert :func:`dwt_multi`; ``low`` optionally replaces the deepest LL band."""
    current = levels[-1].low if low is None else low
    for d in reversed(levels):
        current = wavelet.reconstruct(FrequencyDecomposition(current, d.lh, d.hl, d.hh, d.level))
    return current


def mask_branch(d: FrequencyDecomposition, mode: FrequencyMode) -> FrequencyDecomposition:
    if mode == "full":
        return d
    if mode == "low_only":
        z = zeros(d.shape)
        return FrequencyDecomposition(d.low, z, z, z, d.level)
    if mode == "high_only":
        return FrequencyDecomposition(zeros(d.shape), d.lh, d.hl, d.hh, d.level)
    raise ValueError(f"unknown frequency mode {mode!r}; expected one of {FREQUENCY_MODES}")
