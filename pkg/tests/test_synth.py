import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weseg import synth, tiler
from weseg.evaluation import annotation_stats
from weseg.synth import NoiseModel, SynthSpec


def test_spec_rejects_bad_values():
    with pytest.raises(ValueError):
        SynthSpec(d_prime=0.0)
    with pytest.raises(ValueError):
        SynthSpec(w0=1.5)
    with pytest.raises(ValueError):
        SynthSpec(n_tiles=(5, 2))


def test_separability_and_bayes_auc():
    spec = SynthSpec(dim=12, d_prime=2.0)
    assert spec.separability == pytest.approx(2.0, abs=1e-12)
    assert spec.bayes_auc() == pytest.approx(0.921350, abs=1e-6)


@pytest.mark.parametrize("w0, expected", [(1.0, 0), (0.0, None)])
def test_bag_truth_counts(w0, expected):
    spec = SynthSpec(w0=w0, n_tiles=(10, 40), seed=3)
    for bag in synth.gen_feature_bags(spec, 200):
        if expected == 0:
            assert bag.percent == 0 and not bag.truth.any() and bag.slide_label == 0
        k = synth.round_half_up(bag.percent * bag.n / 100)
        assert int(bag.truth.sum()) == k
        assert 10 <= bag.n <= 40 and bag.features.shape == (bag.n, spec.dim)


def test_pinned_percent_extremes():
    spec = SynthSpec(seed=1)
    zero, full, half = synth.gen_feature_bags(spec, 3, percents=[0, 100, 50])
    assert not zero.truth.any() and zero.slide_label == 0
    assert full.truth.all() and full.slide_label == 1
    assert int(half.truth.sum()) == synth.round_half_up(half.n / 2)


def test_tumor_fraction_law_of_large_numbers():
    spec = SynthSpec(seed=11)
    bags = synth.gen_feature_bags(spec, 10_000)
    tumor = sum(int(b.truth.sum()) for b in bags)
    tiles = sum(b.n for b in bags)
    expected = (1 - spec.w0) * 50.0 / 100
    assert abs(tumor / tiles - expected) <= 0.01


def test_class_means_recovered():
    spec = SynthSpec(dim=4, seed=2)
    bags = synth.gen_feature_bags(spec, 800)
    x = np.vstack([b.features for b in bags])
    y = np.concatenate([b.truth for b in bags])
    np.testing.assert_allclose(x[y == 1].mean(axis=0), spec.mu1, atol=0.05)
    np.testing.assert_allclose(x[y == 0].mean(axis=0), spec.mu0, atol=0.05)


def test_feature_bags_deterministic():
    spec = SynthSpec(seed=5)
    a = synth.gen_feature_bags(spec, 30)
    b = synth.gen_feature_bags(spec, 30)
    for x, y in zip(a, b):
        assert x.id == y.id and x.percent == y.percent
        assert x.features.tobytes() == y.features.tobytes()
        assert x.truth.tobytes() == y.truth.tobytes()
    # slides are seeded individually, so a later start reproduces the tail
    tail = synth.gen_feature_bags(spec, 10, start=20)
    assert tail[0].features.tobytes() == a[20].features.tobytes()


# -- noise -------------------------------------------------------------------

def test_round_to_multiple():
    assert synth.round_to_multiple(37, 20) == 40
    assert synth.round_to_multiple(37, 5) == 35
    assert synth.round_to_multiple(50, 20) == 60  # half rounds up


def test_q20_branch_example():
    always20 = NoiseModel(q20=1.0, q5=0.0)
    rng = np.random.default_rng(0)
    assert synth.perturb_annotation(37, rng, always20) == 40
    assert synth.perturb_annotation(7, rng, always20) == 20
    always5 = NoiseModel(q20=0.0, q5=1.0)
    assert synth.perturb_annotation(37, rng, always5) == 35
    assert synth.perturb_annotation(1.2, rng, always5) == 5
    never = NoiseModel(q20=0.0, q5=0.0)
    assert synth.perturb_annotation(37.3, rng, never) == 37.3


def test_zero_stays_zero():
    rng = np.random.default_rng(1)
    assert all(synth.perturb_annotation(0, rng) == 0 for _ in range(1000))


def test_calibration_constants():
    noise = synth.calibrate_noise()
    a, b = noise.q20, (1 - noise.q20) * noise.q5
    r = 1 - a - b
    # shares of U(0,100] read at whole percents: 0 -> 0.5%, mult of 5 -> 19.5%, of 20 -> 4.5%;
    # rounding to 5 hits a multiple of 20 on 22.5% of the range
    nonzero = a + b + r * 0.995
    assert (a + b + r * 0.195) / nonzero == pytest.approx(0.891, abs=1e-12)
    assert (a + 0.225 * b + r * 0.045) / nonzero == pytest.approx(0.449, abs=1e-12)


def test_unreachable_incidences_rejected():
    with pytest.raises(ValueError):
        synth.calibrate_noise(mult20=0.9, mult5=0.5)


def test_incidences_at_1e5():
    rng = np.random.default_rng(2024)
    truth = 100.0 * (1.0 - rng.random(100_000))
    noisy = [synth.perturb_annotation(p, rng) for p in truth]
    stats = annotation_stats(noisy)
    assert abs(stats.mult20 - 0.449) <= 0.02
    assert abs(stats.mult5 - 0.891) <= 0.02


@settings(max_examples=500, deadline=None)
@given(st.floats(0, 100), st.integers(0, 2**32 - 1))
def test_noise_bounds(p, seed):
    out = synth.perturb_annotation(p, np.random.default_rng(seed))
    assert 0 <= out <= 100
    assert (out == 0) == (p == 0)
    # the 20 -> 0 remap is the one way past the nearest-multiple bound
    assert abs(out - p) <= 10 or (p < 10 and out == 20)


def test_perturb_cohort_keeps_truth():
    bags = synth.gen_feature_bags(SynthSpec(seed=1), 50)
    noisy = synth.perturb_cohort(bags, 3)
    for a, b in zip(bags, noisy):
        assert b.true_percent == a.percent
        assert b.slide_label == a.slide_label
        assert b.features is a.features
    again = synth.perturb_cohort(bags, 3)
    assert [b.percent for b in noisy] == [b.percent for b in again]


# -- rasters -----------------------------------------------------------------

@pytest.mark.parametrize("percent", [0.0, 12.5, 50.0, 83.0, 100.0])
def test_raster_mask_fraction(percent):
    spec = SynthSpec(seed=4)
    image, mask = synth.gen_raster_slide(spec, 256, 192, percent, tile_size=64)
    assert image.shape == (192, 256, 3) and image.dtype == np.uint8
    tissue = image.min(axis=2) <= 200
    if percent == 0:
        assert not mask.any()
    assert abs(mask.sum() / tissue.sum() - percent / 100) <= 0.01
    assert not (mask & ~tissue).any()


def test_raster_background_present():
    image, _ = synth.gen_raster_slide(SynthSpec(), 512, 512, 30, tile_size=128)
    grid = tiler.tile_grid(512, 512, 128, 32)
    assert tiler.is_background(tiler.crop(image, grid, 0))
    assert not tiler.is_background(tiler.crop(image, grid, len(grid) // 2))


def test_raster_too_small():
    with pytest.raises(ValueError):
        synth.gen_raster_slide(SynthSpec(), 100, 100, 10, tile_size=128)


def test_raster_cohort_deterministic():
    spec = SynthSpec(seed=9)
    a = synth.gen_raster_cohort(spec, 3, 256, 256, tile_size=64, overlap=16)
    b = synth.gen_raster_cohort(spec, 3, 256, 256, tile_size=64, overlap=16)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes()
        assert x.bag.features.tobytes() == y.bag.features.tobytes()
        assert x.bag.truth.tolist() == y.bag.truth.tolist()
        assert x.bag.n == len(x.tiled.tissue_index)
