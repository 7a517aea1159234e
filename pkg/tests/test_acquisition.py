import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from splinecs.acquisition import (IntervalBatch, NoiseModel, add_noise, gauss_nodes,
                                  measure_quadrature, measure_zoh, read_wav, write_wav, zoh_embed)
from splinecs.sensing import extend_phi_for_overlap, gen_bernoulli
from splinecs.si_model import build_correction_matrix, overlap
from splinecs.spline_core import BSplineKernel, ExpansionCoefficients, eval_kernel


def random_coefficients(p_a, N, K, seed):
    ca = overlap(p_a)
    v = np.random.default_rng(seed).standard_normal(K * N + 2 * ca)
    return ExpansionCoefficients(v, origin=-ca)


def discrete_oracle(d, p_a, p_s, ens, K):
    """Measurements from the discretized model, interval by interval."""
    N = ens.N
    R = build_correction_matrix(p_a, p_s, N).entries
    phi = extend_phi_for_overlap(ens, p_s)
    L = R.shape[1]
    return np.array([phi @ R @ d.values[k * N:k * N + L] for k in range(K)])


class TestQuadrature:
    def test_gauss_nodes_exact_for_polynomials(self):
        t, w = gauss_nodes(-0.5, 3.5, 8, 3)
        assert w.sum() == pytest.approx(4.0)
        assert np.sum(w * t ** 5) == pytest.approx((3.5 ** 6 - 0.5 ** 6) / 6)

    def test_zero_signal(self):
        ens = gen_bernoulli(5, 16, 0)
        d = ExpansionCoefficients(np.zeros(3 * 16 + 2), origin=-1)
        b = measure_quadrature(d, 1, ens, 1, 3)
        assert b.y.shape == (3, 5) and np.all(b.y == 0)

    def test_box_box_signed_sums(self):
        ens = gen_bernoulli(6, 16, 1)
        d = random_coefficients(0, 16, 4, 2)
        b = measure_quadrature(d, 0, ens, 0, 4)
        for k in range(4):
            assert np.allclose(b[k], ens.phi @ d.values[16 * k:16 * k + 16], atol=1e-12)

    @pytest.mark.parametrize("p_a,p_s", [(0, 0), (1, 0), (1, 1), (2, 0), (2, 1), (3, 0), (3, 2)])
    def test_matches_discrete_model(self, p_a, p_s):
        N, K = 16, 3
        ens = gen_bernoulli(7, N, 3)
        d = random_coefficients(p_a, N, K, 10 * p_a + p_s)
        b = measure_quadrature(d, p_a, ens, p_s, K)
        assert np.abs(b.y - discrete_oracle(d, p_a, p_s, ens, K)).max() < 1e-11

    def test_rejects_short_coefficients(self):
        ens = gen_bernoulli(2, 8, 0)
        d = ExpansionCoefficients(np.zeros(16), origin=0)
        with pytest.raises(ValueError):
            measure_quadrature(d, 1, ens, 0, 2)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 3), st.integers(0, 2), st.floats(-3, 3), st.integers(0, 1000))
    def test_linearity(self, p_a, p_s, a, seed):
        N, K = 8, 2
        ens = gen_bernoulli(4, N, seed)
        d1 = random_coefficients(p_a, N, K, seed)
        d2 = random_coefficients(p_a, N, K, seed + 1)
        mix = ExpansionCoefficients(a * d1.values + d2.values, origin=d1.origin)
        lhs = measure_quadrature(mix, p_a, ens, p_s, K).y
        rhs = a * measure_quadrature(d1, p_a, ens, p_s, K).y + measure_quadrature(d2, p_a, ens, p_s, K).y
        assert np.allclose(lhs, rhs, atol=1e-10)


def zoh_oracle(samples, ratio, ens, p_s, K):
    """Kernel integrals of a held signal by adaptive quadrature, one shift at a time."""
    N = ens.N
    cs = overlap(p_s)
    kern = BSplineKernel(p_s)
    phi = extend_phi_for_overlap(ens, p_s)

    def g(t):
        j = int(np.ceil((t + 0.5) * ratio)) - 1
        return samples[j] if 0 <= j < samples.size else 0.0

    y = np.zeros((K, ens.M))
    for k in range(K):
        lo, hi = k * N - 0.5, k * N + N - 0.5
        c = np.zeros(N + 2 * cs)
        for i, n in enumerate(range(k * N - cs, k * N + N + cs)):
            a = max(lo, n - (p_s + 1) / 2)
            b = min(hi, n + (p_s + 1) / 2)
            if a >= b:
                continue
            brk = -0.5 + np.arange(samples.size + 1) / ratio
            brk = np.union1d(brk, np.arange(-1, 2 * (K * N + 2)) / 2)
            pts = brk[(brk > a) & (brk < b)]
            c[i] = quad(lambda t: g(t) * eval_kernel(kern, t - n), a, b, points=pts,
                        limit=500, epsabs=1e-14)[0]
        y[k] = phi @ c
    return y


class TestZoh:
    def test_hold_values(self):
        s = zoh_embed([1.0, 2.0, 3.0], 2)
        assert s(np.array([-0.5, -0.25, -0.1, 0.0, 0.5, 0.6, 1.0])).tolist() == [0, 1, 1, 1, 2, 3, 3]
        assert s.duration == 1.5
        assert s.integrate(-0.5, 1.0) == pytest.approx(3.0)

    def test_ratio_one_partial_sums(self):
        ens = gen_bernoulli(5, 8, 4)
        x = np.random.default_rng(0).standard_normal(24)
        b = measure_zoh(zoh_embed(x, 1), ens, 0, 3)
        for k in range(3):
            assert np.allclose(b[k], ens.phi @ x[8 * k:8 * k + 8], atol=1e-12)

    @pytest.mark.parametrize("p_s", [0, 1, 2])
    def test_matches_adaptive_quadrature(self, p_s):
        ens = gen_bernoulli(4, 8, 5)
        ratio, K = 4, 2
        x = np.random.default_rng(p_s).standard_normal(K * 8 * ratio)
        b = measure_zoh(zoh_embed(x, ratio), ens, p_s, K)
        assert np.abs(b.y - zoh_oracle(x, ratio, ens, p_s, K)).max() < 1e-9

    def test_box_sampling_is_block_mean(self):
        ens = gen_bernoulli(3, 8, 6)
        x = np.random.default_rng(1).standard_normal(8 * 8)
        b = measure_zoh(zoh_embed(x, 8), ens, 0, 1)
        assert np.allclose(b[0], ens.phi @ x.reshape(8, 8).mean(axis=1), atol=1e-12)

    def test_spline_vs_hold_discrepancy(self):
        # a held copy of a linear spline is not the spline; report how far apart they are
        N, K, ratio = 16, 2, 8
        ens = gen_bernoulli(8, N, 7)
        d = random_coefficients(1, N, K, 8)
        from splinecs.spline_core import synthesize
        t = -0.5 + (np.arange(K * N * ratio) + 0.5) / ratio
        held = zoh_embed(synthesize(d, BSplineKernel(1), t), ratio)
        exact = measure_quadrature(d, 1, ens, 0, K).y
        approx = measure_zoh(held, ens, 0, K).y
        rel = np.linalg.norm(exact - approx) / np.linalg.norm(exact)
        print(f"hold vs spline relative discrepancy: {rel:.3e}")
        assert np.isfinite(rel)

    def test_errors(self):
        ens = gen_bernoulli(2, 8, 0)
        with pytest.raises(ValueError):
            measure_zoh(zoh_embed(np.ones(8), 1), ens, 0, 2)
        with pytest.raises(ValueError):
            measure_zoh(zoh_embed(np.ones(16), 1, start=0.0), ens, 0, 2)
        with pytest.raises(ValueError):
            zoh_embed([], 2)
        with pytest.raises(ValueError):
            zoh_embed([1.0], 0)


class TestNoise:
    def batch(self, M=64, K=3):
        return IntervalBatch(np.random.default_rng(0).standard_normal((K, M)) * 3, 64)

    def test_zero_noise_identical(self):
        b = self.batch()
        out = add_noise(b, NoiseModel(0.0, 1))
        assert np.array_equal(out.y, b.y) and np.all(out.noise_sigma == 0)

    def test_deterministic(self):
        b = self.batch()
        a1, a2 = add_noise(b, NoiseModel(0.1, 5)), add_noise(b, NoiseModel(0.1, 5))
        assert np.array_equal(a1.y, a2.y)
        assert not np.array_equal(a1.y, add_noise(b, NoiseModel(0.1, 6)).y)

    def test_scale(self):
        b = self.batch(M=1024, K=4)
        out = add_noise(b, NoiseModel(0.05, 3))
        for k in range(4):
            target = 0.05 * np.std(b.y[k], ddof=1)
            assert out.noise_sigma[k] == pytest.approx(target)
            assert np.std(out.y[k] - b.y[k], ddof=1) == pytest.approx(target, rel=0.1)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            NoiseModel(-0.1)


class TestWav:
    def test_round_trip(self, tmp_path):
        x = np.sin(np.linspace(0, 20, 500)) * 0.9
        p = tmp_path / "a.wav"
        write_wav(p, x, 48000)
        back, rate = read_wav(p)
        assert rate == 48000 and np.abs(back - x).max() <= 0.5 / 32768 + 1e-12

    def test_clipping_warns(self, tmp_path):
        with pytest.warns(UserWarning, match="clipped"):
            write_wav(tmp_path / "b.wav", np.array([0.0, 1.5, -2.0]), 8000)
        back, _ = read_wav(tmp_path / "b.wav")
        assert back[1] == pytest.approx(32767 / 32768) and back[2] == -1.0

    def test_no_warning_in_range(self, tmp_path):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            write_wav(tmp_path / "c.wav", np.array([0.0, 0.5, -1.0]), 8000)

    def test_stereo_rejected(self, tmp_path):
        from scipy.io import wavfile
        wavfile.write(tmp_path / "s.wav", 8000, np.zeros((10, 2), dtype=np.int16))
        with pytest.raises(ValueError):
            read_wav(tmp_path / "s.wav")
