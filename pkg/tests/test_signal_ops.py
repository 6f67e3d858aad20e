"""Signal kernels: spec examples, oracle equivalence, gradients."""

import numpy as np
import pytest

import oracles
from fdcheck import check_grads

from luasr.signal_ops import (
    FreqMask, bicubic_resize, fft2_mag, gaussian_blur, gaussian_highpass_mask,
    gaussian_kernel1d, laplacian_variance_map, luminance, next_pow2,
    scharr_gradients, variance_pool3,
)
from luasr.tensor import ShapeError, Tensor, mean, mul, sum_


def rng_for(seed):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# FFT magnitude
# ---------------------------------------------------------------------------

class TestFFT2Mag:
    def test_constant_input_dc_only(self):
        h, w, v = 8, 16, 0.75
        out = fft2_mag(Tensor(np.full((2, h, w), v))).numpy()
        assert out[0, 0, 0] == pytest.approx(h * w * v, rel=1e-5)
        rest = out.copy()
        rest[:, 0, 0] = 0
        np.testing.assert_allclose(rest, 0.0, atol=1e-3)

    def test_impulse_flat_spectrum(self):
        x = np.zeros((1, 8, 8))
        x[0, 3, 5] = 1.0
        out = fft2_mag(Tensor(x)).numpy()
        np.testing.assert_allclose(out, 1.0, atol=1e-5)

    def test_random_matches_naive_dft(self):
        x = rng_for(0).normal(size=(4, 8, 8))
        got = fft2_mag(Tensor(x, dtype=np.float64)).numpy()
        want = oracles.naive_dft2_mag(x)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-8)

    def test_exhaustive_small_sizes(self):
        rng = rng_for(1)
        for h in (1, 2, 4, 8, 16):
            for w in (1, 2, 4, 8, 16):
                x = rng.normal(size=(1, h, w))
                got = fft2_mag(Tensor(x, dtype=np.float64)).numpy()
                want = oracles.naive_dft2_mag(x)
                np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-9,
                                           err_msg=f"size {(h, w)}")

    def test_parseval(self):
        x = rng_for(2).normal(size=(3, 16, 16))
        mag = fft2_mag(Tensor(x, dtype=np.float64)).numpy()
        lhs = (mag ** 2).sum()
        rhs = 16 * 16 * (x ** 2).sum()
        assert lhs == pytest.approx(rhs, rel=1e-5)

    def test_non_pow2_rejected(self):
        with pytest.raises(ShapeError):
            fft2_mag(Tensor(np.zeros((1, 6, 8))))

    def test_gradients(self):
        rng = rng_for(3)
        for _ in range(10):
            x = rng.normal(size=(2, 4, 4))
            check_grads(lambda t: mean(mul(fft2_mag(t), fft2_mag(t))), [x])


# ---------------------------------------------------------------------------
# Gaussian blur
# ---------------------------------------------------------------------------

class TestGaussianBlur:
    def test_constant_preserved(self):
        x = np.full((3, 10, 8), 0.4)
        out = gaussian_blur(Tensor(x)).numpy()
        np.testing.assert_allclose(out, 0.4, atol=1e-6)

    def test_kernel_sums_to_one(self):
        k = gaussian_kernel1d(5, 1.0)
        assert abs(k.sum() - 1.0) < 1e-9
        assert abs(np.outer(k, k).sum() - 1.0) < 1e-9

    def test_matches_direct_oracle(self):
        x = rng_for(4).normal(size=(2, 9, 11))
        got = gaussian_blur(Tensor(x, dtype=np.float64)).numpy()
        want = oracles.direct_gaussian_blur(x)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_even_kernel_rejected(self):
        with pytest.raises(ShapeError):
            gaussian_blur(Tensor(np.zeros((1, 8, 8))), kernel=4)

    def test_gradients(self):
        rng = rng_for(5)
        for _ in range(10):
            x = rng.normal(size=(1, 6, 6))
            check_grads(lambda t: mean(mul(gaussian_blur(t), gaussian_blur(t))), [x])


# ---------------------------------------------------------------------------
# Bicubic resize
# ---------------------------------------------------------------------------

class TestBicubicResize:
    @pytest.mark.parametrize("factor", [0.25, 0.5, 1.0, 2.0, 4.0])
    def test_constant_preserved(self, factor):
        x = np.full((2, 8, 8), 0.6)
        out = bicubic_resize(Tensor(x), factor).numpy()
        assert out.shape == (2, int(8 * factor), int(8 * factor))
        np.testing.assert_allclose(out, 0.6, atol=1e-6)

    def test_factor_one_identity(self):
        x = rng_for(6).normal(size=(3, 5, 7))
        np.testing.assert_array_equal(bicubic_resize(Tensor(x), 1.0).numpy(), x)

    @pytest.mark.parametrize("factor", [0.5, 2.0, 4.0, 0.25])
    def test_matches_direct_oracle(self, factor):
        x = rng_for(7).normal(size=(2, 8, 8))
        got = bicubic_resize(Tensor(x, dtype=np.float64), factor).numpy()
        want = oracles.direct_bicubic_resize(x, factor)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-9)

    def test_downsample_twice_matches_oracle_composition(self):
        x = rng_for(8).normal(size=(1, 16, 16))
        got = bicubic_resize(bicubic_resize(Tensor(x, dtype=np.float64), 0.5), 0.5).numpy()
        want = oracles.direct_bicubic_resize(oracles.direct_bicubic_resize(x, 0.5), 0.5)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-9)

    def test_invalid_factor_rejected(self):
        with pytest.raises(ShapeError):
            bicubic_resize(Tensor(np.zeros((1, 8, 8))), 3.0)

    def test_non_integral_output_rejected(self):
        with pytest.raises(ShapeError):
            bicubic_resize(Tensor(np.zeros((1, 6, 6))), 0.25)

    def test_gradients(self):
        rng = rng_for(9)
        for i in range(10):
            factor = [0.5, 2.0][i % 2]
            x = rng.normal(size=(1, 6, 6))
            check_grads(lambda t: mean(mul(bicubic_resize(t, factor),
                                           bicubic_resize(t, factor))), [x])


# ---------------------------------------------------------------------------
# Scharr gradients
# ---------------------------------------------------------------------------

class TestScharr:
    def test_constant_maps_to_zero(self):
        x = np.full((1, 7, 7), 1.3)
        gx, gy = scharr_gradients(Tensor(x))
        np.testing.assert_allclose(gx.numpy(), 0.0, atol=1e-6)
        np.testing.assert_allclose(gy.numpy(), 0.0, atol=1e-6)

    def test_horizontal_ramp_has_zero_vertical_gradient(self):
        h, w = 8, 8
        x = np.tile(np.arange(w, dtype=np.float64), (h, 1))[None]
        gx, gy = scharr_gradients(Tensor(x))
        np.testing.assert_allclose(gy.numpy()[0, 1:-1, 1:-1], 0.0, atol=1e-6)
        # /16 normalization: taps sum to 32, so a unit ramp responds with 2
        np.testing.assert_allclose(gx.numpy()[0, 1:-1, 1:-1], 2.0, atol=1e-5)

    def test_multichannel_rejected(self):
        with pytest.raises(ShapeError):
            scharr_gradients(Tensor(np.zeros((3, 8, 8))))

    def test_matches_direct_oracle(self):
        x = rng_for(10).normal(size=(1, 9, 7))
        gx, gy = scharr_gradients(Tensor(x, dtype=np.float64))
        ox, oy = oracles.direct_scharr(x)
        np.testing.assert_allclose(gx.numpy(), ox, rtol=1e-6, atol=1e-9)
        np.testing.assert_allclose(gy.numpy(), oy, rtol=1e-6, atol=1e-9)

    def test_luminance_weights(self):
        x = rng_for(11).normal(size=(3, 4, 4))
        lum = luminance(Tensor(x, dtype=np.float64)).numpy()
        np.testing.assert_allclose(lum, oracles.luminance601(x), rtol=1e-6)

    def test_gradients(self):
        rng = rng_for(12)
        for _ in range(10):
            x = rng.normal(size=(1, 6, 6))

            def f(t):
                gx, gy = scharr_gradients(t)
                return mean(mul(gx, gx)) + mean(mul(gy, gy))

            check_grads(f, [x])


# ---------------------------------------------------------------------------
# Variance pooling
# ---------------------------------------------------------------------------

class TestVariancePool:
    def test_constant_patch_zero(self):
        out = variance_pool3(Tensor(np.full((1, 6, 6), 2.0))).numpy()
        np.testing.assert_allclose(out, 0.0, atol=1e-7)

    def test_hand_computed_patch(self):
        x = np.arange(9, dtype=np.float64).reshape(1, 3, 3)
        out = variance_pool3(Tensor(x)).numpy()
        assert out[0, 0, 0] == pytest.approx(60.0 / 9.0, rel=1e-12)

    def test_truncation_shape(self):
        out = variance_pool3(Tensor(np.zeros((1, 7, 7)))).numpy()
        assert out.shape == (1, 2, 2)

    def test_too_small_rejected(self):
        with pytest.raises(ShapeError):
            variance_pool3(Tensor(np.zeros((1, 2, 5))))

    def test_matches_direct_oracle(self):
        x = rng_for(13).normal(size=(1, 8, 10))
        got = variance_pool3(Tensor(x, dtype=np.float64)).numpy()
        want = oracles.direct_variance_pool3(x)
        np.testing.assert_allclose(got, want, rtol=1e-6, atol=1e-12)

    def test_gradients(self):
        rng = rng_for(14)
        for _ in range(10):
            x = rng.normal(size=(1, 6, 7))
            check_grads(lambda t: sum_(mul(variance_pool3(t), variance_pool3(t))), [x])


# ---------------------------------------------------------------------------
# High-pass mask
# ---------------------------------------------------------------------------

class TestHighpassMask:
    def test_single_bin_is_dc(self):
        m = gaussian_highpass_mask(1, 1)
        assert m.values.shape == (1, 1)
        assert m.values[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_dc_bin_zero(self):
        m = gaussian_highpass_mask(8, 8)
        assert m.values[4, 4] == pytest.approx(0.0, abs=1e-12)

    def test_corner_value(self):
        m = gaussian_highpass_mask(8, 8, fc=0.5)
        want = 1.0 - np.exp(-1.0)
        assert m.values[0, 0] == pytest.approx(want, rel=1e-9)

    def test_radial_monotonicity(self):
        m = gaussian_highpass_mask(16, 16)
        u = (np.arange(16) - 8) / 16
        uu, vv = np.meshgrid(u, u, indexing="ij")
        r = np.sqrt(uu ** 2 + vv ** 2).ravel()
        vals = m.values.ravel()
        order = np.argsort(r)
        assert (np.diff(vals[order]) >= -1e-12).all()

    def test_negation_symmetry_even_grid(self):
        m = gaussian_highpass_mask(8, 6).values
        # (u,v) -> (-u,-v): rows/cols mirror around the DC bin; the extreme
        # -0.5 row of the half-open interval has no positive partner
        tol = 1e-12
        for i in range(1, 8):
            for j in range(1, 6):
                assert abs(m[i, j] - m[8 - i, 6 - j]) < tol

    def test_matches_oracle_grid(self):
        m = gaussian_highpass_mask(8, 16, fc=0.5)
        np.testing.assert_allclose(m.values, oracles.centered_highpass(8, 16), rtol=1e-12)

    def test_unshifted_puts_zero_first(self):
        m = gaussian_highpass_mask(8, 8)
        assert m.unshifted()[0, 0] == pytest.approx(0.0, abs=1e-12)

    def test_next_pow2(self):
        assert [next_pow2(n) for n in (1, 2, 3, 5, 8, 21)] == [1, 2, 4, 8, 8, 32]


# ---------------------------------------------------------------------------
# Laplacian variance map
# ---------------------------------------------------------------------------

class TestLaplacianVarianceMap:
    def test_constant_is_zero(self):
        vmap, vmean = laplacian_variance_map(np.full((1, 12, 12), 0.7), patch=3)
        np.testing.assert_allclose(vmap, 0.0, atol=1e-12)
        assert vmean == 0.0

    def test_shape_contract(self):
        vmap, _ = laplacian_variance_map(np.zeros((1, 14, 10)), patch=4)
        assert vmap.shape == (3, 2)

    def test_noise_monotonicity(self):
        rng = rng_for(15)
        base = rng.normal(size=(1, 24, 24)) * 0.1
        means = []
        for sigma in (0.05, 0.2):
            noisy = base + rng_for(16).normal(size=base.shape) * sigma
            _, vmean = laplacian_variance_map(noisy, patch=3)
            means.append(vmean)
        assert means[1] > means[0]

    def test_small_patch_rejected(self):
        with pytest.raises(ShapeError):
            laplacian_variance_map(np.zeros((1, 8, 8)), patch=2)
