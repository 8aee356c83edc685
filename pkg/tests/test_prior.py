import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpatn.prior import (
    AIRLIGHT_FLOOR,
    PriorParams,
    dark_channel,
    estimate_airlight,
    prior_transmission,
    underwater_background_light,
)
from dpatn.synth import HazeRecipe, procedural_depth, procedural_scene, synth_hazy


def naive_prior(img, a, alpha_hat, alpha_check):
    h, w, _ = img.shape
    hi = img.reshape(-1, 3).max(axis=0)
    lo = img.reshape(-1, 3).min(axis=0)
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            cands = []
            for c in range(3):
                for den in (alpha_hat * hi[c] - a[c], alpha_check * lo[c] - a[c]):
                    if abs(den) >= 1e-6:
                        cands.append((img[y, x, c] - a[c]) / den)
            v = max(cands) if cands else 1.0
            out[y, x] = min(max(v, 0.0), 1.0)
    return out


class TestAirlight:
    def test_constant_image(self):
        img = np.ones((12, 12, 3)) * [0.2, 0.5, 0.9]
        np.testing.assert_allclose(estimate_airlight(img), [0.2, 0.5, 0.9])

    def test_window_one_is_channel_max(self, rng):
        img = rng.random((10, 10, 3))
        np.testing.assert_array_equal(estimate_airlight(img, 1), img.reshape(-1, 3).max(axis=0))

    def test_matches_min_then_max_scan(self, rng):
        img = rng.random((20, 20, 3))
        a = estimate_airlight(img, 15)
        for c in range(3):
            best = -np.inf
            for y in range(20):
                for x in range(20):
                    ys = slice(max(y - 7, 0), min(y + 8, 20))
                    xs = slice(max(x - 7, 0), min(x + 8, 20))
                    best = max(best, img[ys, xs, c].min())
            assert a[c] == pytest.approx(max(best, AIRLIGHT_FLOOR))

    def test_floor(self):
        assert np.all(estimate_airlight(np.zeros((5, 5, 3)), 3) == AIRLIGHT_FLOOR)

    def test_monotone_under_brightening(self, rng):
        img = rng.random((16, 16, 3)) * 0.8
        assert np.all(estimate_airlight(img + 0.1) >= estimate_airlight(img))


class TestPriorTransmission:
    def test_matches_naive_candidates(self, rng):
        img = rng.random((9, 8, 3))
        a = np.array([0.8, 0.7, 0.9])
        for ah, ac in [(1.5, 0.0), (1.5, 1.5), (0.0, 0.0)]:
            got = prior_transmission(img, a, PriorParams(ah, ac))
            np.testing.assert_allclose(got, naive_prior(img, a, ah, ac), atol=1e-15)

    def test_alpha_check_zero_contains_dark_channel_form(self, rng):
        img = rng.random((8, 8, 3)) * 0.6
        a = np.array([0.9, 0.9, 0.9])
        t = prior_transmission(img, a, PriorParams(1.5, 0.0))
        dcp_form = np.clip((1.0 - img / a).max(axis=2), 0, 1)
        assert np.all(t >= dcp_form - 1e-15)

    def test_airlight_colored_pixel_gives_zero(self):
        img = np.full((4, 4, 3), 0.3)
        img[1, 2] = [0.8, 0.8, 0.8]
        img[0, 0] = [0.1, 0.2, 0.3]
        a = np.array([0.8, 0.8, 0.8])
        assert prior_transmission(img, a)[1, 2] == 0.0

    def test_all_candidates_skipped_gives_one(self):
        img = np.full((3, 3, 3), 0.5)
        # alpha_hat * max = A and alpha_check * min = A for every channel
        t = prior_transmission(img, np.full(3, 0.5), PriorParams(1.0, 1.0, 1))
        np.testing.assert_array_equal(t, np.ones((3, 3)))

    def test_correlates_with_truth_on_ramp(self):
        clean = procedural_scene(64, 64, seed=5)
        depth = procedural_depth("ramp", 64, 64, seed=6)
        obs, t = synth_hazy(clean, depth, HazeRecipe(0.85, 1.0, None))
        est = prior_transmission(obs, estimate_airlight(obs))
        assert np.corrcoef(est.ravel(), t.ravel())[0, 1] > 0.5

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.floats(0, 3), st.floats(0, 3))
    def test_range_and_permutation_equivariance(self, seed, ah, ac):
        rng = np.random.default_rng(seed)
        img = rng.random((6, 5, 3))
        a = rng.uniform(0.05, 1.0, 3)
        t = prior_transmission(img, a, PriorParams(ah, ac))
        assert np.all((t >= 0) & (t <= 1))
        rows, cols = rng.permutation(6), rng.permutation(5)
        tp = prior_transmission(img[rows][:, cols], a, PriorParams(ah, ac))
        np.testing.assert_array_equal(tp, t[rows][:, cols])

    def test_negative_alpha_rejected(self):
        with pytest.raises(ValueError):
            PriorParams(-1.0, 0.0)
        with pytest.raises(ValueError):
            PriorParams(1.5, 0.0, 4)


class TestDarkChannel:
    def test_white(self):
        np.testing.assert_array_equal(dark_channel(np.ones((5, 5, 3)), 3), np.ones((5, 5)))

    def test_patch_one(self, rng):
        img = rng.random((6, 6, 3))
        np.testing.assert_array_equal(dark_channel(img, 1), img.min(axis=2))

    def test_exhaustive(self, rng):
        img = rng.random((10, 10, 3))
        dc = dark_channel(img, 3)
        for y in range(10):
            for x in range(10):
                win = img[max(y - 1, 0):y + 2, max(x - 1, 0):x + 2]
                assert dc[y, x] == win.min()
        assert np.all(dc[..., None] <= img)


class TestBackgroundLight:
    def test_pure_blue(self):
        img = np.zeros((40, 40, 3))
        img[..., 2] = 1.0
        np.testing.assert_array_equal(underwater_background_light(img), [0, 0, 1])

    def test_single_bright_bluish_pixel(self):
        img = np.full((30, 30, 3), 0.1)
        img[7, 11] = [0.2, 0.8, 0.9]
        np.testing.assert_array_equal(underwater_background_light(img), [0.2, 0.8, 0.9])

    def test_two_pass_scan(self, rng):
        img = rng.random((50, 50, 3))
        flat = img.reshape(-1, 3)
        lum = flat.mean(axis=1)
        n = max(1, int(len(flat) * 0.001))
        # pass 1: the n brightest, earlier index first among equals
        order = sorted(range(len(flat)), key=lambda i: (-lum[i], i))[:n]
        # pass 2: first row-major maximizer of the green/blue excess over red
        best, best_i = -np.inf, None
        for i in sorted(order):
            v = min(flat[i, 1] - flat[i, 0], flat[i, 2] - flat[i, 0])
            if v > best:
                best, best_i = v, i
        np.testing.assert_array_equal(underwater_background_light(img), flat[best_i])

    def test_small_image_uses_brightest_pixel(self):
        img = np.zeros((5, 5, 3))
        img[2, 3] = [0.1, 0.5, 0.6]
        np.testing.assert_array_equal(underwater_background_light(img), [0.1, 0.5, 0.6])
