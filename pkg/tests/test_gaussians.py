import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sixdgs.gaussians import (
    N_PARAMS, Gaussian6D, ParameterDomainError, Scene, activate_cholesky, covariance,
    logit, pack_cholesky, raw_lambda_for, sigmoid,
)
from sixdgs.synth import random_gaussians

raw_factors = arrays(np.float64, (21,), elements=st.floats(-3, 3))


class TestActivation:
    @given(raw_factors)
    @settings(max_examples=200, deadline=None)
    def test_covariance_is_symmetric_positive_definite(self, raw):
        sigma = covariance(activate_cholesky(raw))
        assert np.array_equal(sigma, sigma.T)
        assert np.linalg.eigvalsh(sigma)[0] > 0

    @given(raw_factors)
    @settings(max_examples=100, deadline=None)
    def test_pack_inverts_activation(self, raw):
        np.testing.assert_allclose(pack_cholesky(activate_cholesky(raw)), raw, atol=1e-9)

    def test_zero_raw_factor_is_identity(self):
        np.testing.assert_array_equal(activate_cholesky(np.zeros(21)), np.eye(6))

    def test_off_diagonals_are_bounded(self):
        L = activate_cholesky(np.full(21, 50.0))
        off = L[np.tril_indices(6, -1)]
        assert np.all(np.abs(off) <= 1.0)

    @pytest.mark.parametrize("bad", [np.zeros(20), np.full(21, np.nan), np.r_[np.zeros(20), np.inf]])
    def test_rejects_bad_input(self, bad):
        with pytest.raises(ParameterDomainError):
            activate_cholesky(bad)

    def test_pack_rejects_unreachable_factor(self):
        L = np.eye(6)
        L[3, 0] = 1.5
        with pytest.raises(ParameterDomainError):
            pack_cholesky(L)


class TestScalars:
    def test_sigmoid_logit_roundtrip(self):
        p = np.linspace(0.001, 0.999, 101)
        np.testing.assert_allclose(sigmoid(logit(p)), p, rtol=1e-12)

    def test_sigmoid_saturates_without_overflow(self):
        with np.errstate(over="raise"):
            assert sigmoid(1e6) == 1.0
            assert sigmoid(-1e6) == 0.0

    @pytest.mark.parametrize("lam", [0.0, 1e-3, 0.35, 1.0])
    def test_raw_lambda_is_finite(self, lam):
        raw = raw_lambda_for(lam)
        assert np.isfinite(raw)
        assert abs(sigmoid(raw) - lam) < 2e-6


class TestPacking:
    def test_single_gaussian_roundtrip(self, rng):
        vec = rng.normal(size=N_PARAMS)
        g = Gaussian6D.unpack(vec)
        np.testing.assert_array_equal(g.pack(), vec)
        assert g.sh.shape == (3, 16)

    def test_layout_order(self):
        vec = np.arange(N_PARAMS, dtype=float)
        g = Gaussian6D.unpack(vec)
        np.testing.assert_array_equal(g.mu_p, [0, 1, 2])
        np.testing.assert_array_equal(g.mu_d, [3, 4, 5])
        assert g.raw_alpha == 27.0
        assert g.sh[0, 0] == 28.0 and g.sh[1, 0] == 44.0
        assert g.raw_lambda == 76.0

    def test_wrong_length(self):
        with pytest.raises(ParameterDomainError):
            Gaussian6D.unpack(np.zeros(76))

    def test_scene_roundtrip(self, small_scene):
        packed = small_scene.pack()
        assert packed.shape == (len(small_scene), N_PARAMS)
        back = Scene.unpack(packed, small_scene.background, small_scene.bbox)
        np.testing.assert_array_equal(back.pack(), packed)

    def test_scene_rows_match_gaussians(self, small_scene):
        for i in (0, 5, len(small_scene) - 1):
            np.testing.assert_array_equal(small_scene[i].pack(), small_scene.pack()[i])

    def test_empty_scene(self):
        s = Scene()
        assert len(s) == 0
        assert s.pack().shape == (0, N_PARAMS)
        assert s.validate() == []

    def test_shape_mismatch(self):
        with pytest.raises(ParameterDomainError):
            Scene(np.zeros((2, 3)), np.zeros((3, 3)), np.zeros((2, 21)), np.zeros(2),
                  np.zeros((2, 3, 16)), np.zeros(2))


class TestSceneOps:
    def test_take_extend(self, small_scene):
        a = small_scene.take(np.arange(4))
        b = small_scene.take(np.arange(4, len(small_scene)))
        np.testing.assert_array_equal(a.extend(b).pack(), small_scene.pack())

    def test_copy_is_deep(self, small_scene):
        c = small_scene.copy()
        c.mu_p[0, 0] += 1
        assert c.mu_p[0, 0] != small_scene.mu_p[0, 0]

    def test_validate_flags_problems(self, small_scene):
        assert small_scene.validate() == []
        s = small_scene.copy()
        s.mu_p[0] = [10.0, 0, 0]
        s.background = np.array([0.0, 2.0, 0.0])
        problems = s.validate()
        assert any("bbox" in p for p in problems)
        assert any("background" in p for p in problems)
        s.raw_alpha[1] = np.nan
        assert any("non-finite" in p for p in s.validate())

    def test_random_scene_properties(self, rng):
        s = random_gaussians(rng, 50, strength=0.0)
        assert np.all(activate_cholesky(s.raw_L)[:, 3:, :3] == 0)
