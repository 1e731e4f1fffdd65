"""Procedural "styled shapes" benchmark, PNG/JSON dataset IO and episode sampling.

Every image is rendered from its own Philox4x64 stream keyed by
``(domain seed, global class index, image index)``, so images can be generated
in any order or in parallel and still come out byte-identical.
"""

from __future__ import annotations

import colorsys
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .fsl import Episode

FORMAT_VERSION = 1

SHAPES = ("circle", "square", "triangle", "cross", "star", "ring", "bars", "checker", "diamond")
PATTERNS = ("solid", "stripes", "dots")
ALL_CLASSES = tuple(f"{s}-{p}" for s in SHAPES for p in PATTERNS)


def image_rng(seed: int, class_index: int, index: int) -> np.random.Generator:
    """Counter-based per-image generator (numpy Philox4x64-10 keyed via SeedSequence)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, class_index, index])))


@dataclass
class DomainSpec:
    name: str
    background: list[list[float]]
    foreground: list[list[float]]
    brightness: tuple[float, float] = (0.9, 1.1)
    contrast: tuple[float, float] = (0.9, 1.1)
    noise_amplitude: float = 0.02
    noise_frequency: float = 2.0
    color_jitter: float = 0.05
    seed: int = 0

    def errors(self) -> list[str]:
        errs = []
        if not self.background or not self.foreground:
            errs.append(f"domain {self.name}: palettes must be non-empty")
        for pal in (self.background, self.foreground):
            for rgb in pal:
                if len(rgb) != 3 or not all(0.0 <= v <= 1.0 for v in rgb):
                    errs.append(f"domain {self.name}: colour {rgb} is not an RGB triple in [0,1]")
        for lo, hi in (self.brightness, self.contrast):
            if not 0.0 <= lo <= hi <= 3.0:
                errs.append(f"domain {self.name}: range ({lo}, {hi}) invalid")
        if self.noise_amplitude < 0 or self.noise_frequency <= 0:
            errs.append(f"domain {self.name}: noise parameters invalid")
        return errs

    @classmethod
    def from_dict(cls, d: dict) -> "DomainSpec":
        d = dict(d)
        d["brightness"] = tuple(d["brightness"])
        d["contrast"] = tuple(d["contrast"])
        return cls(**d)


def _hsv_palette(hues, sat, val):
    return [list(colorsys.hsv_to_rgb(h % 1.0, s, v)) for h in hues for s in sat for v in val]


def default_domains(seed: int = 0) -> dict[str, DomainSpec]:
    """One muted source domain and three visually shifted target domains."""
    return {
        "source": DomainSpec(
            name="source",
            background=_hsv_palette([0.05, 0.15, 0.3, 0.55, 0.75], [0.15, 0.3], [0.25, 0.4]),
            foreground=_hsv_palette([0.0, 0.12, 0.35, 0.6, 0.85], [0.2, 0.35], [0.65, 0.8]),
            brightness=(0.8, 1.2), contrast=(0.7, 1.2),
            noise_amplitude=0.03, noise_frequency=2.0, color_jitter=0.04, seed=seed),
        "target_hue": DomainSpec(
            name="target_hue",
            background=_hsv_palette([0.45, 0.5, 0.95], [0.85, 1.0], [0.55, 0.7]),
            foreground=_hsv_palette([0.2, 0.25, 0.7], [0.9, 1.0], [0.85, 1.0]),
            brightness=(0.9, 1.2), contrast=(0.8, 1.1),
            noise_amplitude=0.03, noise_frequency=2.0, color_jitter=0.04, seed=seed + 101),
        "target_contrast": DomainSpec(
            name="target_contrast",
            background=_hsv_palette([0.1, 0.6], [0.05], [0.75, 0.85]),
            foreground=_hsv_palette([0.1, 0.6], [0.05], [0.05, 0.15]),
            brightness=(0.6, 1.4), contrast=(1.5, 2.2),
            noise_amplitude=0.03, noise_frequency=2.0, color_jitter=0.03, seed=seed + 202),
        "target_texture": DomainSpec(
            name="target_texture",
            background=_hsv_palette([0.08, 0.3, 0.6], [0.3, 0.5], [0.3, 0.45]),
            foreground=_hsv_palette([0.0, 0.4, 0.7], [0.3, 0.5], [0.6, 0.75]),
            brightness=(0.8, 1.2), contrast=(0.8, 1.2),
            noise_amplitude=0.15, noise_frequency=6.0, color_jitter=0.05, seed=seed + 303),
    }


def default_class_split() -> dict[str, list[str]]:
    """10 source classes and three mutually disjoint 5-class target sets.

    Each target set uses five different shapes and mixes all three patterns so
    that the sets are of comparable difficulty.
    """
    return {
        "source": ["circle-solid", "circle-stripes", "square-stripes", "triangle-dots", "cross-solid",
                   "star-stripes", "ring-dots", "bars-solid", "checker-stripes", "diamond-dots"],
        "target_hue": ["circle-dots", "square-solid", "cross-stripes", "ring-solid", "diamond-stripes"],
        "target_contrast": ["triangle-solid", "star-solid", "bars-stripes", "checker-dots", "square-dots"],
        "target_texture": ["triangle-stripes", "cross-dots", "ring-stripes", "bars-dots", "diamond-solid"],
    }


# ---------------------------------------------------------------------------
# rendering


def _shape_mask(shape: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Boolean mask of a unit-sized shape in rotated, centred coordinates."""
    r = np.hypot(u, v)
    au, av = np.abs(u), np.abs(v)
    if shape == "circle":
        return r <= 1.0
    if shape == "square":
        return np.maximum(au, av) <= 0.8
    if shape == "diamond":
        return au + av <= 1.05
    if shape == "triangle":
        return (v <= 0.65) & (1.8 * au - v <= 0.95)
    if shape == "cross":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if shape == "star":
        theta = np.arctan2(v, u)
        return r <= 0.55 + 0.4 * np.cos(5 * theta) ** 2
    if shape == "ring":
        return (r <= 1.0) & (r >= 0.55)
    if shape == "bars":
        return (np.maximum(au, av) <= 0.95) & (np.mod(np.floor((u + 1.0) / 0.4), 2) == 0)
    if shape == "checker":
        return (np.maximum(au, av) <= 0.95) & (np.mod(np.floor((u + 1) / 0.5) + np.floor((v + 1) / 0.5), 2) == 0)
    raise KeyError(shape)


def _pattern_mask(pattern: str, u: np.ndarray, v: np.ndarray, phase: float) -> np.ndarray:
    if pattern == "solid":
        return np.ones_like(u, dtype=bool)
    if pattern == "stripes":
        return np.sin(7.0 * (u + v) + phase) > -0.2
    if pattern == "dots":
        return (np.cos(9.0 * u + phase) + np.cos(9.0 * v + phase)) > -0.6
    raise KeyError(pattern)


def _smooth_noise(rng: np.random.Generator, size: int, freq: float) -> np.ndarray:
    """Sum of a few random plane waves at roughly ``freq`` cycles per image."""
    yy, xx = np.mgrid[0:size, 0:size] / size
    out = np.zeros((size, size))
    for _ in range(4):
        ang = rng.uniform(0, 2 * np.pi)
        f = freq * rng.uniform(0.7, 1.3)
        out += np.sin(2 * np.pi * f * (np.cos(ang) * xx + np.sin(ang) * yy) + rng.uniform(0, 2 * np.pi))
    return out / 2.0


def render_image(class_id: str, index: int, domain: DomainSpec, size: int = 32) -> np.ndarray:
    """Render one 8-bit-quantized RGB image ``[3, size, size]`` in [0, 1]."""
    if class_id not in ALL_CLASSES:
        raise KeyError(f"unknown class identifier {class_id!r}; known: {', '.join(ALL_CLASSES)}")
    shape, pattern = class_id.split("-")
    rng = image_rng(domain.seed, ALL_CLASSES.index(class_id), index)

    bg = np.asarray(domain.background[rng.integers(len(domain.background))], dtype=float)
    fg = np.asarray(domain.foreground[rng.integers(len(domain.foreground))], dtype=float)
    bg = np.clip(bg + domain.color_jitter * rng.standard_normal(3), 0, 1)
    fg = np.clip(fg + domain.color_jitter * rng.standard_normal(3), 0, 1)

    scale = rng.uniform(0.28, 0.4) * size
    cx, cy = size / 2 + rng.uniform(-0.12, 0.12, size=2) * size
    angle = rng.uniform(-np.pi / 6, np.pi / 6)
    phase = rng.uniform(0, 2 * np.pi)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = (xx - cx) / scale, (yy - cy) / scale
    u = np.cos(angle) * dx + np.sin(angle) * dy
    v = -np.sin(angle) * dx + np.cos(angle) * dy

    mask = _shape_mask(shape, u, v) & _pattern_mask(pattern, u, v, phase)
    img = np.where(mask[None], fg[:, None, None], bg[:, None, None])

    if domain.noise_amplitude > 0:
        tex = _smooth_noise(rng, size, domain.noise_frequency)
        tint = rng.uniform(0.5, 1.0, size=3)
        img = img + domain.noise_amplitude * tint[:, None, None] * tex[None]

    brightness = rng.uniform(*domain.brightness)
    contrast = rng.uniform(*domain.contrast)
    m = img.mean()
    img = (img - m) * contrast + m
    img = img * brightness
    img = np.clip(img, 0.0, 1.0)
    return np.round(img * 255.0) / 255.0


# ---------------------------------------------------------------------------
# manifests and datasets


@dataclass
class DatasetManifest:
    name: str
    role: str
    classes: list[str]
    images: dict[str, list[str]]
    domain: dict
    image_size: int
    seed: int
    splits: dict[str, dict[str, list[int]]] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION
    root: str = ""

    def counts(self) -> dict[str, int]:
        return {c: len(self.images[c]) for c in self.classes}

    @property
    def total(self) -> int:
        return sum(self.counts().values())

    def to_json(self) -> dict:
        d = asdict(self)
        d.pop("root")
        return d


def _split_indices(count: int, fractions: dict[str, float]) -> dict[str, list[int]]:
    out, start = {}, 0
    names = list(fractions)
    for i, name in enumerate(names):
        stop = count if i == len(names) - 1 else start + int(round(fractions[name] * count))
        out[name] = list(range(start, stop))
        start = stop
    return out


def generate_dataset(classes, per_class: int, domain: DomainSpec, size: int = 32,
                     out_dir=None, role: str = "target",
                     split_fractions: dict[str, float] | None = None) -> DatasetManifest:
    """Render ``per_class`` images for each class; write PNGs + manifest when ``out_dir`` is given."""
    classes = list(classes)
    unknown = [c for c in classes if c not in ALL_CLASSES]
    if unknown:
        raise KeyError(f"unknown class identifiers {unknown}")
    errs = domain.errors()
    if errs:
        raise ValueError("; ".join(errs))
    images: dict[str, list[str]] = {}
    splits = {}
    if split_fractions:
        splits = {c: _split_indices(per_class, split_fractions) for c in classes}
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        if not root.parent.exists():
            raise FileNotFoundError(f"parent directory {root.parent} does not exist")
        root.mkdir(exist_ok=True)
    for c in classes:
        images[c] = []
        if root is not None:
            (root / c).mkdir(exist_ok=True)
        for i in range(per_class):
            rel = f"{c}/{i:05d}.png"
            images[c].append(rel)
            if root is not None:
                arr = render_image(c, i, domain, size)
                save_png(root / rel, arr)
    manifest = DatasetManifest(name=domain.name, role=role, classes=classes, images=images,
                               domain=asdict(domain), image_size=size, seed=domain.seed,
                               splits=splits, root=str(root) if root is not None else "")
    if root is not None:
        with open(root / "manifest.json", "w") as fh:
            json.dump(manifest.to_json(), fh, indent=2, sort_keys=True)
    return manifest


def save_png(path, arr: np.ndarray) -> None:
    u8 = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0


def load_manifest(path, disjoint_from: "DatasetManifest | None" = None) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    with open(path) as fh:
        d = json.load(fh)
    if d.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported dataset format version {d.get('format_version')}")
    m = DatasetManifest(**d, root=str(path.parent))
    if disjoint_from is not None:
        check_disjoint(disjoint_from, m)
    return m


def check_disjoint(source: DatasetManifest, target: DatasetManifest) -> None:
    shared = sorted(set(source.classes) & set(target.classes))
    if shared:
        raise ValueError(f"source {source.name!r} and target {target.name!r} share classes {shared}")


class ImageDataset:
    """Images of one domain held in memory as float64 ``[N, 3, H, W]``."""

    def __init__(self, manifest: DatasetManifest, images: np.ndarray, labels: np.ndarray,
                 indices: np.ndarray):
        self.manifest = manifest
        self.images = images
        self.labels = labels
        self.indices = indices
        self.classes = list(manifest.classes)
        self.by_class = [np.flatnonzero(labels == c) for c in range(len(self.classes))]

    @classmethod
    def load(cls, manifest: DatasetManifest, split: str | None = None) -> "ImageDataset":
        imgs, labels, idx = [], [], []
        for ci, c in enumerate(manifest.classes):
            keep = range(len(manifest.images[c]))
            if split is not None:
                keep = manifest.splits[c][split]
            for i in keep:
                rel = manifest.images[c][i]
                if manifest.root:
                    imgs.append(load_png(Path(manifest.root) / rel))
                else:
                    imgs.append(render_image(c, i, DomainSpec.from_dict(manifest.domain), manifest.image_size))
                labels.append(ci)
                idx.append(i)
        return cls(manifest, np.asarray(imgs), np.asarray(labels), np.asarray(idx))

    def __len__(self) -> int:
        return len(self.labels)

    def image_id(self, row: int) -> str:
        return f"{self.classes[self.labels[row]]}/{self.indices[row]}"


# ---------------------------------------------------------------------------
# episode sampling


def _check_capacity(ds: ImageDataset, n: int, k: int, q: int, classes=None) -> None:
    pool = range(len(ds.classes)) if classes is None else classes
    eligible = [c for c in pool if len(ds.by_class[c]) >= k + q]
    if len(eligible) < n:
        raise ValueError(f"need {n} classes with >= {k + q} images each, dataset "
                         f"{ds.manifest.name!r} has {len(eligible)}")


def sample_episode_rows(ds: ImageDataset, n: int, k: int, q: int, rng: np.random.Generator,
                        classes=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row indices of support and query images plus the chosen class indices."""
    if classes is None:
        _check_capacity(ds, n, k, q)
        classes = rng.choice(len(ds.classes), size=n, replace=False)
    else:
        _check_capacity(ds, n, k, q, classes)
    support, query = [], []
    for c in classes:
        rows = rng.choice(ds.by_class[c], size=k + q, replace=False)
        support.append(rows[:k])
        query.append(rows[k:])
    return np.concatenate(support), np.concatenate(query), np.asarray(classes)


def sample_episode(ds: ImageDataset, n: int, k: int, q: int, rng: np.random.Generator,
                   classes=None) -> Episode:
    s_rows, q_rows, cls = sample_episode_rows(ds, n, k, q, rng, classes)
    return Episode(
        support_images=ds.images[s_rows],
        support_labels=np.repeat(np.arange(n), k),
        query_images=ds.images[q_rows],
        query_labels=np.repeat(np.arange(n), q),
        class_ids=[ds.classes[c] for c in cls],
        support_ids=[ds.image_id(r) for r in s_rows],
        query_ids=[ds.image_id(r) for r in q_rows],
    )


CLASS_SET_STRATEGIES = ("random_class_sets", "same_class_set")


def sample_dual_episodes(ds: ImageDataset, n: int, k: int, q: int, strategy: str,
                         rng: np.random.Generator) -> tuple[Episode, Episode]:
    if strategy not in CLASS_SET_STRATEGIES:
        raise ValueError(f"unknown class-set strategy {strategy!r}; expected {CLASS_SET_STRATEGIES}")
    a = sample_episode(ds, n, k, q, rng)
    if strategy == "same_class_set":
        cls = [ds.classes.index(c) for c in a.class_ids]
        b = sample_episode(ds, n, k, q, rng, classes=cls)
    else:
        b = sample_episode(ds, n, k, q, rng)
    return a, b


def load_benchmark(root) -> dict[str, DatasetManifest]:
    """All domain manifests under ``root`` keyed by domain name."""
    root = Path(root)
    out = {}
    for sub in sorted(os.listdir(root)):
        p = root / sub / "manifest.json"
        if p.exists():
            out[sub] = load_manifest(p)
    return out


def generate_benchmark(out_dir, seed: int = 0, source_per_class: int = 100, target_per_class: int = 40,
                       size: int = 32) -> dict[str, DatasetManifest]:
    """Write the default source + three target domains under ``out_dir``."""
    out_dir = Path(out_dir)
    if not out_dir.parent.exists():
        raise FileNotFoundError(f"parent directory {out_dir.parent} does not exist")
    out_dir.mkdir(exist_ok=True)
    domains = default_domains(seed)
    split = default_class_split()
    manifests = {}
    for name, spec in domains.items():
        if name == "source":
            manifests[name] = generate_dataset(split[name], source_per_class, spec, size, out_dir / name,
                                               role="source",
                                               split_fractions={"train": 0.6, "val": 0.2, "test": 0.2})
        else:
            manifests[name] = generate_dataset(split[name], target_per_class, spec, size, out_dir / name)
    for name, m in manifests.items():
        if name != "source":
            check_disjoint(manifests["source"], m)
    return manifests
