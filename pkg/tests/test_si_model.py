from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad
from scipy.ndimage import convolve1d

from splinecs.si_model import (UnstableFilterError, apply_correction, build_correction_matrix,
                               concat_intervals, concat_weights, dtft_magnitude,
                               make_correction_filter, truncated_product_integral)
from splinecs.spline_core import BSplineKernel, cross_correlation, eval_kernel


def integral_oracle(p_a, p_s, N, h, l):
    """Entry (h, l) of the correction matrix by adaptive quadrature."""
    n = h - (p_s + 1) // 2
    m = l - (p_a + 1) // 2
    ka, ks = BSplineKernel(p_a), BSplineKernel(p_s)
    lo, hi = -0.5, N - 0.5
    a = max(lo, m - (p_a + 1) / 2, n - (p_s + 1) / 2)
    b = min(hi, m + (p_a + 1) / 2, n + (p_s + 1) / 2)
    if a >= b:
        return 0.0
    knots = np.arange(np.floor(2 * a), np.ceil(2 * b) + 1) / 2
    val, _ = quad(lambda t: eval_kernel(ka, t - m) * eval_kernel(ks, t - n), a, b,
                  points=knots[(knots > a) & (knots < b)], epsabs=1e-15, limit=200)
    return val


# corner of the (1, 1, 32) matrix, exact values (times 24)
CORNER_11 = np.array([[1, 2, 0, 0], [2, 15, 4, 0], [0, 4, 16, 4]]) / 24


class TestCorrectionMatrix:
    def test_linear_linear_corner(self):
        R = build_correction_matrix(1, 1, 32)
        assert (R.H, R.L) == (34, 34)
        E = R.entries
        assert np.abs(E[:3, :4] - CORNER_11).max() < 1e-12
        assert np.abs(E[-3:, -4:] - CORNER_11[::-1, ::-1]).max() < 1e-12
        assert np.array_equal(E, E.T)

    def test_corner_matches_integral_oracle(self):
        R = build_correction_matrix(1, 1, 32).entries
        for h in range(3):
            for l in range(4):
                assert R[h, l] == pytest.approx(integral_oracle(1, 1, 32, h, l), abs=1e-12)

    def test_box_box_identity(self):
        R = build_correction_matrix(0, 0, 16)
        assert np.array_equal(R.entries, np.eye(16))

    def test_linear_box(self):
        R = build_correction_matrix(1, 0, 16)
        assert R.entries.shape == (16, 18)
        assert R.entries[5, 5:8].tolist() == [1 / 8, 6 / 8, 1 / 8]
        for h in (0, 15):
            for l in range(18):
                assert R.entries[h, l] == pytest.approx(integral_oracle(1, 0, 16, h, l), abs=1e-12)

    @pytest.mark.parametrize("p_a,p_s", [(0, 1), (2, 0), (2, 1), (3, 0), (1, 2), (3, 2), (2, 2)])
    def test_all_entries_match_oracle(self, p_a, p_s):
        N = 2 * (max(p_a, p_s) + 1) + 3
        R = build_correction_matrix(p_a, p_s, N)
        oracle = np.array([[integral_oracle(p_a, p_s, N, h, l) for l in range(R.L)]
                           for h in range(R.H)])
        assert np.abs(R.entries - oracle).max() < 1e-12

    @pytest.mark.parametrize("p_a,p_s", [(a, s) for a in range(4) for s in range(3)])
    def test_structure(self, p_a, p_s):
        N = 24
        R = build_correction_matrix(p_a, p_s, N)
        E = R.entries
        assert R.H == N + 2 * ((p_s + 1) // 2) and R.L == N + 2 * ((p_a + 1) // 2)
        assert np.all(E >= 0)
        r = cross_correlation(p_a, p_s)
        P = r.half_width
        ca, cs = (p_a + 1) // 2, (p_s + 1) // 2
        margin = max(p_a, p_s) + 1
        for h in range(R.H):
            n = h - cs
            for l in range(R.L):
                assert E[h, l] <= r[n - (l - ca)] + 1e-15
            if margin <= h < R.H - margin:
                band = np.zeros(R.L)
                for m in range(n - P, n + P + 1):
                    band[m + ca] = r[n - m]
                assert np.abs(E[h] - band).max() < 1e-12
                assert E[h].sum() == pytest.approx(1.0, abs=1e-12)
        # centrosymmetry
        assert np.abs(E - E[::-1, ::-1]).max() < 1e-15

    def test_rejects_small_N(self):
        with pytest.raises(ValueError):
            build_correction_matrix(1, 1, 4)

    def test_truncated_integral_exact(self):
        # triangle squared over its right half: 1/3
        assert truncated_product_integral(1, 1, 0, 0, Fraction(0), Fraction(5)) == Fraction(1, 3)


TABLE = {
    0: (1, (1,)),
    1: (8, (1, 6, 1)),
    2: (6, (1, 4, 1)),
    3: (384, (1, 76, 230, 76, 1)),
}


class TestCorrectionFilter:
    @pytest.mark.parametrize("p_a", range(4))
    def test_gain_and_denominator(self, p_a):
        f = make_correction_filter(p_a, 0)
        assert (f.gain, f.denominator) == TABLE[p_a]

    def test_identity(self):
        f = make_correction_filter(0, 0)
        assert f.is_identity and f.scale == 1.0
        c = np.random.default_rng(0).standard_normal(7)
        assert np.array_equal(apply_correction(f, c), c)

    @pytest.mark.parametrize("p_a,p_s", [(a, s) for a in range(5) for s in range(4) if a + s <= 5])
    def test_poles_and_response(self, p_a, p_s):
        f = make_correction_filter(p_a, p_s)
        taps = np.asarray(f.denominator, dtype=float)
        for z in f.poles:
            assert abs(z) < 1
            # reciprocal pair: both roots of z^P D(z)
            assert abs(np.polyval(taps, z)) < 1e-9 * np.abs(taps).sum()
            assert abs(np.polyval(taps, 1 / z)) < 1e-9 * np.abs(taps).sum() / abs(z) ** len(taps)
        w = np.linspace(0, np.pi, 64)
        e = np.exp(-1j * w)
        resp = f.scale * np.ones_like(e)
        for z in f.poles:
            resp = resp / ((1 - z * e) * (1 - z / e))
        P = f.fir_taps.size // 2
        R = sum(f.fir_taps[P + n] * np.exp(-1j * w * n) for n in range(-P, P + 1))
        assert np.allclose(resp, 1 / R, rtol=1e-10)

    @pytest.mark.parametrize("p_a,p_s", [(a, s) for a in range(6) for s in range(6) if a + s <= 5])
    def test_spectrum_bounded_away_from_zero(self, p_a, p_s):
        assert dtft_magnitude(cross_correlation(p_a, p_s).taps).min() > 0

    def test_floor_violation(self):
        with pytest.raises(UnstableFilterError):
            make_correction_filter(3, 0, floor=0.5)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            make_correction_filter(1, 0, mode="spline")

    @pytest.mark.parametrize("p_a,p_s", [(a, s) for a in range(6) for s in range(6) if a + s <= 5])
    def test_round_trip(self, p_a, p_s):
        rng = np.random.default_rng(10 * p_a + p_s)
        d = rng.standard_normal(512)
        f = make_correction_filter(p_a, p_s)
        c = convolve1d(d, f.fir_taps, mode="mirror")
        out = apply_correction(f, c)
        assert np.abs(out - d)[10:-10].max() < 1e-8

    def test_constant_preserved(self):
        f = make_correction_filter(3, 0)
        out = apply_correction(f, np.ones(100))
        assert np.allclose(out[10:-10], 1.0, atol=1e-12)

    def test_fir_mode(self):
        iir = make_correction_filter(3, 0)
        fir = make_correction_filter(3, 0, mode="fir")
        h = fir.impulse_response
        assert h.size == fir.tap_count and h.size % 2 == 1
        assert np.allclose(h, h[::-1])
        assert abs(h[0]) >= 1e-12 and abs(h.sum() - 1.0) < 1e-10
        c = np.random.default_rng(1).standard_normal(300)
        assert np.abs(apply_correction(fir, c) - apply_correction(iir, c)).max() < 1e-10

    def test_short_input(self):
        f = make_correction_filter(3, 0)
        with pytest.raises(ValueError):
            apply_correction(f, np.ones(8))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 3), st.integers(0, 2), st.integers(20, 200), st.integers(0, 2**31))
    def test_round_trip_property(self, p_a, p_s, n, seed):
        d = np.random.default_rng(seed).standard_normal(n)
        f = make_correction_filter(p_a, p_s)
        out = apply_correction(f, convolve1d(d, f.fir_taps, mode="mirror"))
        assert np.abs(out - d)[10:-10].max(initial=0) < 1e-8


class TestConcat:
    def test_linear_weights(self):
        w = concat_weights(build_correction_matrix(1, 1, 32)).weights
        assert np.abs(w - [1 / 8, 7 / 8]).max() < 1e-15

    def test_box_empty(self):
        assert len(concat_weights(build_correction_matrix(0, 0, 8))) == 0

    @pytest.mark.parametrize("p_a,p_s", [(a, s) for a in range(1, 4) for s in range(3)])
    def test_pair_sums(self, p_a, p_s):
        R = build_correction_matrix(p_a, p_s, 64)
        w = concat_weights(R).weights
        assert len(w) == R.L - R.N
        assert np.all((w >= 0) & (w <= 1))
        assert np.abs(w + w[::-1] - 1).max() < 1e-12
        cols = R.entries[:, :len(w)].sum(axis=0)
        assert np.allclose(w, cols / (cols + cols[::-1]), atol=1e-15)

    def test_cubic_box_weights(self):
        w = concat_weights(build_correction_matrix(3, 0, 64)).weights
        assert len(w) == 4
        # frozen from the column sums of the exact matrix
        assert np.allclose(w, [1 / 384, 77 / 384, 307 / 384, 383 / 384], atol=1e-12)

    def test_single_interval(self):
        w = concat_weights(build_correction_matrix(1, 1, 16))
        v = np.arange(18.0)
        out = concat_intervals([v], w, 16)
        assert np.array_equal(out.values, v) and out.origin == -1

    def test_agreeing_seams(self):
        w = concat_weights(build_correction_matrix(3, 0, 16))
        full = np.random.default_rng(2).standard_normal(2 * 16 + 4)
        out = concat_intervals([full[:20], full[16:]], w, 16)
        assert np.allclose(out.values, full, atol=1e-15)

    def test_linear_seam_average(self):
        w = concat_weights(build_correction_matrix(1, 1, 8))
        a, b, c, d = 1.0, 2.0, 3.0, 5.0
        v0 = np.r_[np.zeros(8), a, b]
        v1 = np.r_[c, d, np.zeros(8)]
        out = concat_intervals([v0, v1], w, 8)
        assert len(out) == 18
        assert out.values[8:10] == pytest.approx([7 * a / 8 + c / 8, b / 8 + 7 * d / 8])

    def test_length_mismatch(self):
        w = concat_weights(build_correction_matrix(1, 1, 8))
        with pytest.raises(ValueError):
            concat_intervals([np.zeros(10), np.zeros(9)], w, 8)
        with pytest.raises(ValueError):
            concat_intervals([], w, 8)
