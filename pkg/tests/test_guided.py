import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from famednet import haze
from famednet.dataset import procedural_depth
from famednet.guided import GuidedFilterParams, box_counts, box_filter, box_sum, fast_guided_filter, guided_filter
from oracles import box_sum_brute
from photo_corpus import TEST_SOURCES, random_crops


@pytest.fixture(scope="module")
def k_scene():
    """A natural-image guide and the K map of a synthesized hazy version of it."""
    J = random_crops(TEST_SOURCES, 1, 200, seed=5)[0].astype(np.float64)
    t = haze.transmission_from_depth(procedural_depth(200, 200, 11), 1.2)
    I = haze.synthesize_hazy(J, t, 0.9)
    K = haze.k_from_scene(I, t, 0.9).mean(axis=0)
    return haze.grayscale(I), K


class TestBoxFilter:
    def test_constant(self):
        np.testing.assert_allclose(box_filter(np.full((6, 9), 0.42), 2), 0.42)

    def test_hand_row(self):
        out = box_filter(np.array([[0, 0, 1, 0, 0]], float), 1)
        np.testing.assert_allclose(out[0], [0, 1 / 3, 1 / 3, 1 / 3, 0])

    @pytest.mark.parametrize("radius", [1, 2, 4, 9])
    def test_equals_brute_force(self, rng, radius):
        x = rng.random((17, 13))
        sums, counts = box_sum_brute(x, radius)
        np.testing.assert_allclose(box_filter(x, radius) * counts, sums, atol=1e-6)
        np.testing.assert_allclose(box_filter(x, radius), sums / counts, atol=1e-12)

    def test_counts_and_sums_match_brute_force(self, rng):
        x = rng.random((11, 19))
        sums, counts = box_sum_brute(x, 4)
        np.testing.assert_array_equal(box_counts(11, 19, 4), counts)
        np.testing.assert_allclose(box_sum(x, 4), sums, atol=1e-12)

    def test_bad_radius(self):
        with pytest.raises(ValueError):
            box_filter(np.zeros((3, 3)), 0)


class TestGuidedFilter:
    def test_self_guided_small_eps_is_identity(self, rng):
        p = rng.random((32, 32))
        assert np.max(np.abs(guided_filter(p, p, 4, 1e-8) - p)) < 1e-3

    def test_constant_guide_gives_box_mean(self, rng):
        src = rng.random((20, 20))
        out = guided_filter(np.full((20, 20), 0.5), src, 3, 1e-4)
        np.testing.assert_allclose(out, box_filter(box_filter(src, 3), 3), atol=1e-12)

    def test_linear_model_reproduced(self, rng):
        g = rng.random((30, 30))
        src = 2 * g + 1
        assert np.max(np.abs(guided_filter(g, src, 5, 1e-8) - src)) < 1e-4

    def test_dims_mismatch(self):
        with pytest.raises(ValueError, match="differ"):
            guided_filter(np.zeros((4, 4)), np.zeros((4, 5)), 1, 1e-3)

    @given(st.integers(0, 10_000), st.integers(1, 6), st.floats(1e-6, 1.0))
    def test_bounded_overshoot(self, seed, radius, eps):
        r = np.random.default_rng(seed)
        g, p = r.random((16, 16)), r.random((16, 16))
        out = guided_filter(g, p, radius, eps)
        span = p.max() - p.min()
        assert np.all(np.isfinite(out))
        assert out.min() >= p.min() - span and out.max() <= p.max() + span


class TestFastGuidedFilter:
    def test_d1_is_exact(self, rng):
        g, p = rng.random((25, 31)), rng.random((25, 31))
        np.testing.assert_array_equal(fast_guided_filter(g, p, 4, 1e-3, 1), guided_filter(g, p, 4, 1e-3))

    @pytest.mark.parametrize("d", [1, 2, 4])
    def test_constant_source(self, rng, d):
        out = fast_guided_filter(rng.random((40, 36)), np.full((40, 36), 0.7), 8, 1e-4, d)
        np.testing.assert_allclose(out, 0.7, atol=1e-10)

    def test_small_radius_warns_and_clamps(self, rng):
        g = rng.random((16, 16))
        with pytest.warns(UserWarning, match="clamping"):
            out = fast_guided_filter(g, g, 2, 1e-3, 4)
        assert out.shape == (16, 16)

    def test_d4_close_to_d1_on_k_map(self, k_scene):
        guide, K = k_scene
        full = fast_guided_filter(guide, K, 48, 1e-4, 1)
        fast = fast_guided_filter(guide, K, 48, 1e-4, 4)
        assert np.mean(np.abs(full - fast)) < 0.01

    def test_params_validation(self):
        assert GuidedFilterParams() == GuidedFilterParams(48, 1e-4, 4)
        for kw in ({"radius": 0}, {"eps": 0}, {"downsample": 0}):
            with pytest.raises(ValueError):
                GuidedFilterParams(**kw)
