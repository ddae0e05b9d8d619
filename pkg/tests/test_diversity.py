from __future__ import annotations

import numpy as np
import pytest

from raresynth.data import POSITIVE, REAL, SYNTHETIC, Dataset, LabeledSample
from raresynth.diversity import (
    PERCEPTUAL_LABEL,
    PSNR_CAP_DB,
    Distribution,
    compare_diversity,
    cosine_distance,
    pairwise_distribution,
    perceptual_distance,
    psnr,
    sample_pairs,
)
from raresynth.errors import InvalidArgument


class FlatEmbed:
    """Embedding stub: the flattened image (optionally negated) is the feature vector."""

    trained = True

    def __init__(self, sign: float = 1.0):
        self.sign = sign

    def embed(self, images):
        x = np.asarray(images, dtype=np.float64).reshape(len(images), -1)
        return self.sign * (x - 0.5)


def test_psnr_closed_forms():
    a = np.zeros((8, 8))
    assert psnr(a, a + 0.5) == pytest.approx(6.0206, abs=1e-3)
    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-3)
    assert psnr(a, a) == PSNR_CAP_DB == 100.0
    rng = np.random.default_rng(0)
    x, y = rng.random((4, 4)), rng.random((4, 4))
    assert psnr(x, y) == psnr(y, x)
    with pytest.raises(InvalidArgument):
        psnr(np.zeros((2, 2)), np.zeros((3, 3)))


def test_perceptual_distance_properties():
    rng = np.random.default_rng(1)
    a, b = rng.random((6, 6)), rng.random((6, 6))
    m = FlatEmbed()
    assert perceptual_distance(m, a, a) == pytest.approx(0.0, abs=1e-12)
    assert perceptual_distance(m, a, b) == perceptual_distance(m, b, a)
    assert 0.0 <= perceptual_distance(m, a, b) <= 2.0


def test_antipodal_embedding_gives_two():
    e = np.array([[1.0, -2.0, 0.5]])
    assert cosine_distance(e, -e)[0] == pytest.approx(2.0)


def test_perceptual_requires_trained_model():
    class Untrained(FlatEmbed):
        trained = False

    with pytest.raises(InvalidArgument):
        perceptual_distance(Untrained(), np.zeros((2, 2)), np.zeros((2, 2)))


def test_sample_pairs_exhaustive_and_sampled():
    p = sample_pairs(3, 10, seed=0)
    assert p.tolist() == [[0, 1], [0, 2], [1, 2]]
    q = sample_pairs(100, 2000, seed=4)
    assert q.shape == (2000, 2)
    assert len({tuple(r) for r in q.tolist()}) == 2000
    assert np.all(q[:, 0] < q[:, 1])
    assert np.array_equal(q, sample_pairs(100, 2000, seed=4))
    assert not np.array_equal(q, sample_pairs(100, 2000, seed=5))
    with pytest.raises(InvalidArgument):
        sample_pairs(1, 10, 0)
    with pytest.raises(InvalidArgument):
        sample_pairs(5, 0, 0)


def test_pairwise_distribution_constant_set():
    d = pairwise_distribution(np.full((5, 4, 4), 0.3), "psnr", max_pairs=100)
    assert d.count == 10 and np.all(d.values == 100.0)
    assert d.summary()["std"] == 0.0
    assert int(d.counts.sum()) == d.count


def test_pairwise_callable_metric_and_errors():
    imgs = np.random.default_rng(0).random((4, 3, 3))
    d = pairwise_distribution(imgs, lambda a, b: float(np.abs(a - b).sum()), max_pairs=3, seed=1)
    assert d.count == 3
    with pytest.raises(InvalidArgument):
        pairwise_distribution(imgs, "ssim")
    with pytest.raises(InvalidArgument):
        pairwise_distribution(imgs, "perceptual")


def test_distribution_summary_recomputable():
    v = np.random.default_rng(2).normal(size=101)
    d = Distribution.from_values(v, bins=7)
    s = d.summary()
    assert s["count"] == 101 and s["mean"] == pytest.approx(v.mean())
    assert s["median"] == pytest.approx(np.median(v)) and s["std"] == pytest.approx(v.std())
    assert sum(d.to_dict()["histogram"]["counts"]) == 101


def _ds(images, origin=REAL, prefix="r"):
    ids = [f"{prefix}{i}" if origin == REAL else f"synth-{i:08d}" for i in range(len(images))]
    return Dataset(tuple(LabeledSample(np.asarray(im, np.float32), POSITIVE, origin, k) for im, k in zip(images, ids)))


def test_copy_of_real_has_zero_shift_and_no_flags():
    imgs = np.random.default_rng(3).random((30, 8, 8))
    rep = compare_diversity(_ds(imgs), _ds(imgs, SYNTHETIC), FlatEmbed(), budget=200, seed=1)
    assert rep.psnr_mean_shift == 0.0 and rep.percep_mean_shift == 0.0
    assert rep.psnr_ks == 0.0
    assert rep.structure_preserved and not rep.collapse_suspected
    d = rep.to_dict()
    assert d["metrics"]["perceptual"] == PERCEPTUAL_LABEL
    assert d["verdict"]["heuristic"] is True


def test_mode_collapse_detected():
    rng = np.random.default_rng(4)
    real = rng.random((40, 8, 8))
    pool = np.repeat(real[:1], 200, axis=0)
    rep = compare_diversity(_ds(real), _ds(pool, SYNTHETIC), FlatEmbed(), budget=500, seed=0)
    assert rep.collapse_suspected
    assert rep.percep_synth.summary()["std"] == 0.0


def test_split_half_oracle():
    rng = np.random.default_rng(5)
    imgs = np.clip(0.5 + 0.1 * rng.standard_normal((200, 8, 8)), 0, 1)
    rep = compare_diversity(_ds(imgs[:100]), _ds(imgs[100:], SYNTHETIC), FlatEmbed(), budget=1000, seed=2)
    assert rep.psnr_ks < 0.1 and rep.percep_ks < 0.1
    assert rep.structure_preserved and not rep.collapse_suspected


def test_shared_histogram_edges_and_determinism():
    rng = np.random.default_rng(6)
    a, b = rng.random((20, 6, 6)), rng.random((25, 6, 6)) * 0.5
    r1 = compare_diversity(_ds(a), _ds(b, SYNTHETIC), FlatEmbed(), budget=100, seed=9)
    r2 = compare_diversity(_ds(a), _ds(b, SYNTHETIC), FlatEmbed(), budget=100, seed=9)
    assert np.array_equal(r1.psnr_real.bin_edges, r1.psnr_synth.bin_edges)
    assert np.array_equal(r1.percep_real.bin_edges, r1.percep_synth.bin_edges)
    assert r1.to_dict() == r2.to_dict()
    assert r1.psnr_real.count == r1.psnr_synth.count == 100


def test_empty_input_rejected():
    imgs = np.zeros((3, 4, 4))
    with pytest.raises(InvalidArgument):
        compare_diversity(_ds(imgs), Dataset(()), FlatEmbed())
