import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dpatn.recovery import recover_radiance
from dpatn.synth import (
    DEPTH_KINDS,
    HazeRecipe,
    UnderwaterRecipe,
    build_dataset,
    crop_window,
    load_depth,
    make_sources,
    oriented_energy,
    procedural_depth,
    procedural_scene,
    rain_streaks,
    synth_hazy,
    synth_underwater,
    synthesize,
)
from dpatn.imaging import save_image


class TestRecipes:
    @pytest.mark.parametrize("kw", [dict(a=0.6), dict(a=1.1), dict(beta=0.5), dict(beta=1.3)])
    def test_haze_ranges(self, kw):
        with pytest.raises(ValueError):
            HazeRecipe(**kw)

    @pytest.mark.parametrize("kw", [dict(background=(0.3, 0.7, 0.8)), dict(beta=(0.1, 0.5, 0.8)),
                                    dict(background=(0.1, 0.7, 0.5))])
    def test_underwater_ranges(self, kw):
        with pytest.raises(ValueError):
            UnderwaterRecipe(**kw)

    def test_sampled_within_ranges(self, rng):
        for _ in range(50):
            r = HazeRecipe.sample(rng)
            assert 0.7 <= r.a <= 1.0 and 0.7 <= r.beta <= 1.2
            UnderwaterRecipe.sample(rng)


class TestDepth:
    def test_ramp(self):
        d = procedural_depth("ramp", 10, 20)
        assert d.min() == 0.5 and d.max() == 5.0
        np.testing.assert_allclose(np.diff(d, axis=1), 4.5 / 19)
        assert not np.any(np.diff(d, axis=0))

    def test_radial_monotone(self):
        d = procedural_depth("radial", 21, 21)
        yy, xx = np.mgrid[0:21, 0:21]
        r = np.hypot(yy - 10, xx - 10).ravel()
        order = np.argsort(r, kind="stable")
        assert np.all(np.diff(d.ravel()[order]) >= -1e-12)

    def test_steps_piecewise_constant(self):
        d = procedural_depth("steps", 16, 40, seed=5)
        assert 3 <= len(np.unique(d)) <= 6
        assert not np.any(np.diff(d, axis=0))

    @pytest.mark.parametrize("kind", DEPTH_KINDS)
    def test_range_and_determinism(self, kind):
        a = procedural_depth(kind, 32, 24, seed=9)
        np.testing.assert_array_equal(a, procedural_depth(kind, 32, 24, seed=9))
        assert a.min() >= 0.5 - 1e-12 and a.max() <= 5.0 + 1e-12

    def test_bad_kind_and_size(self):
        with pytest.raises(ValueError):
            procedural_depth("spiral", 16, 16)
        with pytest.raises(ValueError):
            procedural_depth("ramp", 4, 16)

    def test_load_depth(self, tmp_path, rng):
        save_image(rng.random((12, 12)), tmp_path / "d.png", bits=16)
        d = load_depth(tmp_path / "d.png")
        assert d.min() == pytest.approx(0.5) and d.max() == pytest.approx(5.0)
        save_image(rng.random((12, 12, 3)), tmp_path / "c.png")
        with pytest.raises(ValueError):
            load_depth(tmp_path / "c.png")


class TestHazy:
    def test_no_haze(self, rng):
        clean = rng.random((10, 10, 3))
        obs, t = synth_hazy(clean, np.zeros((10, 10)), HazeRecipe(crop=None))
        assert np.all(t == 1.0)
        np.testing.assert_array_equal(obs, clean)

    def test_pure_airlight(self, rng):
        obs, t = synth_hazy(rng.random((10, 10, 3)), np.full((10, 10), 1e3), HazeRecipe(a=0.8, crop=None))
        np.testing.assert_allclose(obs, 0.8, atol=1e-12)

    def test_uniform_depth(self, rng):
        _, t = synth_hazy(rng.random((10, 10, 3)), np.full((10, 10), 0.5), HazeRecipe(beta=1.0, crop=None))
        np.testing.assert_allclose(t, np.exp(-0.5))
        assert t[0, 0] == pytest.approx(0.60653, abs=1e-5)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10**6), st.floats(0.7, 1.0), st.floats(0.7, 1.2))
    def test_convex_combination(self, seed, a, beta):
        r = np.random.default_rng(seed)
        clean = r.random((9, 9, 3))
        obs, _ = synth_hazy(clean, r.uniform(0.5, 5.0, (9, 9)), HazeRecipe(a, beta, None))
        assert np.all(obs >= np.minimum(clean, a) - 1e-12)
        assert np.all(obs <= np.maximum(clean, a) + 1e-12)

    def test_round_trip_recovery(self, rng):
        clean = rng.random((16, 16, 3))
        obs, t = synth_hazy(clean, rng.uniform(0.5, 3.0, (16, 16)), HazeRecipe(a=0.9, crop=None))
        j = recover_radiance(obs, t, np.full(3, 0.9))
        mask = t >= 0.01
        assert np.max(np.abs(j - clean)[mask]) < 1e-6

    def test_crop_same_window(self, rng):
        clean = rng.random((30, 30, 3))
        depth = rng.uniform(0.5, 5.0, (30, 30))
        full, t_full = synth_hazy(clean, depth, HazeRecipe(crop=None))
        obs, t = synth_hazy(clean, depth, HazeRecipe(crop=12, seed=4))
        top, left = crop_window((30, 30), 12, 4)
        np.testing.assert_array_equal(obs, full[top:top + 12, left:left + 12])
        np.testing.assert_array_equal(t, t_full[top:top + 12, left:left + 12])

    def test_size_mismatch(self, rng):
        with pytest.raises(ValueError):
            synth_hazy(rng.random((8, 8, 3)), rng.random((8, 9)), HazeRecipe(crop=None))


class TestUnderwater:
    def test_degenerates_to_haze(self, rng):
        clean = rng.random((12, 12, 3))
        depth = rng.uniform(0.5, 5.0, (12, 12))
        uw, t_rgb = synth_underwater(clean, depth, UnderwaterRecipe((0.15, 0.75, 0.75), (0.1, 0.7, 0.7), None))
        # equal green and blue channels reproduce the hazy model with a = 0.75, beta = 0.7
        hz, t = synth_hazy(clean, depth, HazeRecipe(0.75, 0.7, None))
        np.testing.assert_allclose(uw[..., 1:], hz[..., 1:], atol=1e-15)
        np.testing.assert_allclose(t_rgb[..., 2], t, atol=1e-15)

    def test_closed_form(self):
        clean = np.zeros((8, 8, 3))
        _, t = synth_underwater(clean, np.full((8, 8), 10.0), UnderwaterRecipe((0.1, 0.7, 0.8), (0.1, 0.7, 0.9), None))
        assert t[0, 0, 0] == pytest.approx(0.368, abs=1e-3)
        assert t[0, 0, 2] == pytest.approx(np.exp(-9.0), rel=1e-14)
        assert t[0, 0, 2] == pytest.approx(1.2e-4, rel=0.05)

    def test_pixel_oracle(self, rng):
        clean = rng.random((6, 7, 3))
        depth = rng.uniform(0.5, 5.0, (6, 7))
        rec = UnderwaterRecipe.sample(rng, None)
        obs, t = synth_underwater(clean, depth, rec)
        for y in range(6):
            for x in range(7):
                for c in range(3):
                    tc = np.exp(-rec.beta[c] * depth[y, x])
                    assert t[y, x, c] == pytest.approx(tc, rel=1e-14)
                    assert obs[y, x, c] == pytest.approx(clean[y, x, c] * tc + rec.background[c] * (1 - tc),
                                                         rel=1e-13)


class TestDataset:
    @pytest.fixture(scope="class")
    @staticmethod
    def sources():
        return make_sources(3, size=200, seed=1)

    def test_default_size(self, sources):
        pairs = build_dataset(sources, n_pairs=50, seed=0)
        assert len(pairs) == 50
        for p in pairs:
            assert p.observation.shape == (180, 180, 3) and p.target.shape == (180, 180)
            assert p.target.min() > 0 and p.target.max() <= 1

    def test_determinism(self, sources):
        a = synthesize(sources, 4, seed=11, crop=40)
        b = synthesize(sources, 4, seed=11, crop=40)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x["observation"], y["observation"])
            assert x["recipe"] == y["recipe"]
        c = synthesize(sources, 4, seed=12, crop=40)
        assert any(x["recipe"] != y["recipe"] for x, y in zip(a, c))

    def test_underwater_records(self, sources):
        for r in synthesize(sources, 3, seed=2, crop=32, kind="underwater"):
            assert r["transmission"].shape == (32, 32, 3)
            assert r["clean"].shape == (32, 32, 3)

    def test_clean_crop_matches(self, sources):
        (r,) = synthesize(sources, 1, seed=5, crop=32)
        t = r["transmission"][..., None]
        a = r["recipe"]["a"]
        np.testing.assert_allclose(r["observation"], r["clean"] * t + a * (1 - t), atol=1e-14)

    def test_errors(self, sources):
        with pytest.raises(ValueError, match="smaller than"):
            build_dataset(sources, 2, crop=300)
        with pytest.raises(ValueError):
            build_dataset([], 2)
        with pytest.raises(ValueError):
            synthesize(sources, 2, kind="rain")


class TestScene:
    def test_range_and_determinism(self):
        a = procedural_scene(30, 20, seed=2)
        assert a.shape == (30, 20, 3) and a.min() >= 0 and a.max() <= 1
        np.testing.assert_array_equal(a, procedural_scene(30, 20, seed=2))


class TestRainStreaks:
    def test_range_and_determinism(self):
        r = rain_streaks(64, 64, seed=3)
        assert r.min() >= 0 and r.max() <= 0.25 and r.max() > 0.1
        np.testing.assert_array_equal(r, rain_streaks(64, 64, seed=3))

    @pytest.mark.parametrize("angle,ratio", [(90, 5.0), (45, 5.0), (75, 1.5)])
    def test_orientation(self, angle, ratio):
        # oblique thin lines alias onto the grid, which weakens the contrast
        r = rain_streaks(96, 96, angle=angle, density=0.01, length=25, seed=1)
        assert oriented_energy(r, angle) > ratio * oriented_energy(r, angle + 90)

    def test_oriented_energy_axis(self):
        f = np.tile(np.arange(10.0), (10, 1))
        # a horizontal ramp varies across vertical streaks only
        assert oriented_energy(f, 90) == pytest.approx(1.0)
        assert oriented_energy(f, 0) == pytest.approx(0.0, abs=1e-24)
