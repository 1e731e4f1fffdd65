import hashlib

import numpy as np
import pytest
from scipy import stats

from wavestyle.data import (ALL_CLASSES, DomainSpec, ImageDataset, check_disjoint, default_class_split,
                            default_domains, generate_benchmark, generate_dataset, load_manifest, load_png,
                            render_image, sample_dual_episodes, sample_episode, sample_episode_rows)


@pytest.fixture(scope="module")
def source_ds():
    split = default_class_split()
    m = generate_dataset(split["source"], 20, default_domains(0)["source"], 16)
    return ImageDataset.load(m)


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_render_deterministic_and_in_range():
    dom = default_domains(3)["target_texture"]
    a = render_image("star-dots", 7, dom)
    assert a.shape == (3, 32, 32) and a.min() >= 0 and a.max() <= 1
    assert render_image("star-dots", 7, dom).tobytes() == a.tobytes()
    assert render_image("star-dots", 8, dom).tobytes() != a.tobytes()


def test_files_bit_identical(tmp_path):
    dom = default_domains(0)["source"]
    generate_dataset(["circle-solid", "ring-dots"], 3, dom, 16, tmp_path / "a")
    generate_dataset(["circle-solid", "ring-dots"], 3, dom, 16, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_png_roundtrip_is_quantized(tmp_path):
    dom = default_domains(0)["source"]
    m = generate_dataset(["square-stripes"], 1, dom, 16, tmp_path / "d")
    back = load_png(tmp_path / "d" / m.images["square-stripes"][0])
    assert np.array_equal(back, render_image("square-stripes", 0, dom, 16))


def test_manifest_counts(tmp_path):
    classes = list(ALL_CLASSES[:10])
    m = generate_dataset(classes, 25, default_domains(0)["source"], 8, tmp_path / "m")
    assert m.total == 250
    loaded = load_manifest(tmp_path / "m")
    assert loaded.total == 250 and loaded.classes == classes


def test_errors(tmp_path):
    with pytest.raises(KeyError, match="hexagon"):
        generate_dataset(["hexagon-solid"], 1, default_domains(0)["source"])
    with pytest.raises(FileNotFoundError):
        generate_dataset(["circle-solid"], 1, default_domains(0)["source"], 8, tmp_path / "no" / "such")
    bad = DomainSpec("bad", [], [[2.0, 0, 0]])
    assert len(bad.errors()) == 2


def test_palettes_shift_colour_distribution():
    doms = default_domains(0)
    split = default_class_split()
    for target in ("target_hue", "target_contrast"):
        a = np.array([render_image(split["source"][i % 10], i, doms["source"], 16).mean(axis=(1, 2))
                      for i in range(200)])
        b = np.array([render_image(split[target][i % 5], i, doms[target], 16).mean(axis=(1, 2))
                      for i in range(200)])
        ks = max(stats.ks_2samp(a[:, ch], b[:, ch]).statistic for ch in range(3))
        assert ks > 0.5, (target, ks)


def test_benchmark_split_disjoint(tmp_path):
    split = default_class_split()
    names = [n for n in split if n != "source"]
    for n in names:
        assert not set(split[n]) & set(split["source"])
    assert len(split["source"]) == 10 and all(len(split[n]) == 5 for n in names)
    ms = generate_benchmark(tmp_path / "bench", seed=0, source_per_class=5, target_per_class=4, size=8)
    assert sorted(ms) == ["source", "target_contrast", "target_hue", "target_texture"]
    assert ms["source"].splits["circle-solid"] == {"train": [0, 1, 2], "val": [3], "test": [4]}
    with pytest.raises(ValueError, match="share"):
        load_manifest(tmp_path / "bench" / "source", disjoint_from=ms["source"])
    check_disjoint(ms["source"], ms["target_hue"])


def test_split_loading(tmp_path):
    generate_benchmark(tmp_path / "bench", source_per_class=10, target_per_class=4, size=8)
    m = load_manifest(tmp_path / "bench" / "source")
    sizes = {s: len(ImageDataset.load(m, s)) for s in ("train", "val", "test")}
    assert sizes == {"train": 60, "val": 20, "test": 20}


# -- sampling --------------------------------------------------------------------

def test_episode_shape(source_ds):
    ep = sample_episode(source_ds, 5, 1, 15, np.random.default_rng(0))
    assert ep.support_images.shape[0] == 5 and ep.query_images.shape[0] == 75
    ep.validate()


def test_episode_deterministic(source_ds):
    a = sample_episode(source_ds, 5, 2, 3, np.random.default_rng(9))
    b = sample_episode(source_ds, 5, 2, 3, np.random.default_rng(9))
    assert a.support_ids == b.support_ids and a.query_ids == b.query_ids
    assert a.support_images.tobytes() == b.support_images.tobytes()


def test_support_query_disjoint(source_ds):
    rng = np.random.default_rng(1)
    for _ in range(1000):
        s, q, _ = sample_episode_rows(source_ds, 5, 1, 15, rng)
        assert not set(s.tolist()) & set(q.tolist())


def test_insufficient_capacity(source_ds):
    with pytest.raises(ValueError, match="need 11 classes"):
        sample_episode(source_ds, 11, 1, 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_episode(source_ds, 5, 10, 15, np.random.default_rng(0))


def test_class_choice_uniform(source_ds):
    rng = np.random.default_rng(2)
    counts = np.zeros(10)
    for _ in range(10_000):
        _, _, cls = sample_episode_rows(source_ds, 5, 1, 1, rng)
        counts[cls] += 1
    assert stats.chisquare(counts).pvalue > 0.01


def test_dual_strategies(source_ds):
    rng = np.random.default_rng(3)
    a, b = sample_dual_episodes(source_ds, 5, 1, 4, "same_class_set", rng)
    assert a.class_ids == b.class_ids and a.query_ids != b.query_ids
    a.validate()
    b.validate()
    with pytest.raises(ValueError):
        sample_dual_episodes(source_ds, 5, 1, 4, "other", rng)


def test_random_class_sets_hypergeometric_overlap(source_ds):
    rng = np.random.default_rng(4)
    draws = 2000
    overlaps = []
    for _ in range(draws):
        a, b = sample_dual_episodes(source_ds, 5, 1, 1, "random_class_sets", rng)
        a.validate()
        b.validate()
        overlaps.append(len(set(a.class_ids) & set(b.class_ids)))
    dist = stats.hypergeom(10, 5, 5)
    sigma = np.sqrt(dist.var() / draws)
    assert abs(np.mean(overlaps) - dist.mean()) < 3 * sigma
