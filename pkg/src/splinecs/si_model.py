"""Correction matrix, correction filters and interval concatenation.

Conventions: with centered kernels, integration interval ``k`` covers
``(kN - 1/2, kN + N - 1/2]`` so that the ``N`` degree-0 boxes tile it
exactly. Row ``h`` of the correction matrix is the sampling shift
``n = kN - ceil(p_s/2) + h`` and column ``l`` is the generator shift
``m = kN - ceil(p_a/2) + l``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache, reduce
from math import ceil, lcm, log

import numpy as np
from numpy.polynomial import polynomial as npoly
from scipy.signal import lfilter

from .spline_core import ExpansionCoefficients, cross_correlation, kernel_pieces

__all__ = [
    "CorrectionMatrix",
    "CorrectionFilter",
    "ConcatWeights",
    "UnstableFilterError",
    "overlap",
    "build_correction_matrix",
    "truncated_product_integral",
    "make_correction_filter",
    "apply_correction",
    "dtft_magnitude",
    "concat_weights",
    "concat_intervals",
]


class UnstableFilterError(ValueError):
    """The cross-correlation spectrum touches zero; no stable inverse exists."""


def overlap(p: int) -> int:
    """Extra shifts on each side of an interval for a degree-``p`` kernel."""
    return ceil(p / 2)


@dataclass(frozen=True)
class CorrectionMatrix:
    entries: np.ndarray
    N: int
    p_a: int
    p_s: int

    @property
    def H(self) -> int:
        return self.entries.shape[0]

    @property
    def L(self) -> int:
        return self.entries.shape[1]

    @property
    def row_origin(self) -> int:
        return -overlap(self.p_s)

    @property
    def col_origin(self) -> int:
        return -overlap(self.p_a)


# ---------------------------------------------------------------------------
# exact truncated integrals


def _taylor_shift(coeffs, delta):
    """Coefficients of ``p(v + delta)`` given those of ``p(u)``."""
    n = len(coeffs)
    out = [Fraction(0)] * n
    # Horner in the shifted variable
    for c in reversed(coeffs):
        # out = out * (v + delta) + c
        new = [Fraction(0)] * n
        for i, a in enumerate(out):
            if a:
                if i + 1 < n:
                    new[i + 1] += a
                new[i] += a * delta
        new[0] += c
        out = new
    return out


def _piece_at(p, center, x0, x1):
    """Polynomial piece (in ``v = t - x0``) of ``b^p(t - center)`` on ``[x0, x1]``.

    Returns ``None`` if the kernel vanishes there.
    """
    lo = Fraction(center) - Fraction(p + 1, 2)
    mid = (x0 + x1) / 2 - lo
    if mid <= 0 or mid >= p + 1:
        return None
    j = int(mid)
    return _taylor_shift(list(kernel_pieces(p)[j]), x0 - (lo + j))


@lru_cache(maxsize=None)
def truncated_product_integral(p_a: int, p_s: int, m, n, lo, hi) -> Fraction:
    """Exact ``int_lo^hi b^{p_a}(t - m) b^{p_s}(t - n) dt`` for rational inputs."""
    m, n, lo, hi = Fraction(m), Fraction(n), Fraction(lo), Fraction(hi)
    knots = {lo, hi}
    for c, p in ((m, p_a), (n, p_s)):
        start = c - Fraction(p + 1, 2)
        knots.update(start + j for j in range(p + 2))
    pts = sorted(k for k in knots if lo <= k <= hi)
    total = Fraction(0)
    for x0, x1 in zip(pts[:-1], pts[1:]):
        a = _piece_at(p_a, m, x0, x1)
        s = _piece_at(p_s, n, x0, x1)
        if a is None or s is None:
            continue
        prod = [Fraction(0)] * (len(a) + len(s) - 1)
        for i, ai in enumerate(a):
            for j, sj in enumerate(s):
                prod[i + j] += ai * sj
        width = x1 - x0
        total += sum(c * width ** (i + 1) / (i + 1) for i, c in enumerate(prod))
    return total


def build_correction_matrix(p_a: int, p_s: int, N: int) -> CorrectionMatrix:
    """Boundary-aware correction matrix for one integration interval.

    Entry ``(h, l)`` is the integral, over a single interval of length ``N``,
    of the generator shift for column ``l`` times the sampling shift for row
    ``h``. Rows whose sampling kernel lies fully inside the interval carry the
    plain cross-correlation taps; the truncated corner rows are integrated
    exactly in rational arithmetic. The matrix is centrosymmetric, so the
    right corner mirrors the left.
    """
    if N <= 2 * (max(p_a, p_s) + 1):
        raise ValueError(
            f"N={N} too small for degrees ({p_a}, {p_s}); need N > {2 * (max(p_a, p_s) + 1)}"
        )
    ca, cs = overlap(p_a), overlap(p_s)
    H, L = N + 2 * cs, N + 2 * ca
    r = cross_correlation(p_a, p_s)
    P = r.half_width
    lo, hi = Fraction(-1, 2), Fraction(2 * N - 1, 2)

    R = np.zeros((H, L))
    for h in range(H):
        n = h - cs
        for m in range(n - P, n + P + 1):
            l = m + ca
            if not 0 <= l < L:
                continue
            R[h, l] = r[n - m]

    # sampling kernels with n < p_s/2 stick out on the left
    n_trunc = [n for n in range(-cs, N) if 2 * n < p_s]
    for n in n_trunc:
        h = n + cs
        for l in range(L):
            m = l - ca
            val = truncated_product_integral(p_a, p_s, m, n, lo, hi)
            R[h, l] = float(val)
            R[H - 1 - h, L - 1 - l] = float(val)
    R.setflags(write=False)
    return CorrectionMatrix(entries=R, N=N, p_a=p_a, p_s=p_s)


# ---------------------------------------------------------------------------
# correction filters


@dataclass(frozen=True)
class CorrectionFilter:
    """Inverse of the symmetric FIR ``r_sa``: ``H(z) = gain / D(z)``.

    ``denominator`` holds the integer Laurent coefficients of ``D`` from
    ``z^P`` down to ``z^-P``. The inverse factors as ``scale`` times a cascade
    of causal/anti-causal first-order sections, one pair per stored pole.
    """

    fir_taps: np.ndarray
    gain: int
    denominator: tuple
    poles: tuple
    scale: float
    mode: str = "iir"
    impulse_response: np.ndarray | None = field(default=None, repr=False)

    @property
    def is_identity(self) -> bool:
        return not self.poles

    @property
    def tap_count(self) -> int:
        return 0 if self.impulse_response is None else self.impulse_response.size

    def warmup(self) -> int:
        if not self.poles:
            return 0
        zmax = max(abs(z) for z in self.poles)
        return max(8 * len(self.poles), ceil(log(1e-17) / log(zmax)))


def dtft_magnitude(taps, n_grid: int = 4096) -> np.ndarray:
    """``|sum_n r[n] e^{-j w n}|`` on ``n_grid`` points of ``[0, 2 pi)``."""
    taps = np.asarray(taps, dtype=float)
    P = (taps.size - 1) // 2
    w = 2 * np.pi * np.arange(n_grid) / n_grid
    n = np.arange(-P, P + 1)
    return np.abs(np.exp(-1j * np.outer(w, n)) @ taps)


def _laurent_to_w_poly(taps):
    """Rewrite ``sum_n r[n] z^n`` (symmetric) as a polynomial in ``w = z + 1/z``."""
    P = (len(taps) - 1) // 2
    center = taps[P]
    # V_n(w) = z^n + z^-n: V_0 = 2, V_1 = w, V_{n+1} = w V_n - V_{n-1}
    V = [np.array([2.0]), np.array([0.0, 1.0])]
    for _ in range(2, P + 1):
        V.append(npoly.polysub(npoly.polymulx(V[-1]), V[-2]))
    out = np.array([center])
    for n in range(1, P + 1):
        out = npoly.polyadd(out, taps[P + n] * V[n])
    return out


def make_correction_filter(p_a: int, p_s: int = 0, *, floor: float = 1e-8,
                           mode: str = "iir", fir_tol: float = 1e-12) -> CorrectionFilter:
    """Build the correction filter inverting ``r_sa`` for the given degrees.

    Parameters
    ----------
    p_a, p_s : int
        Generator and sampling-kernel degrees.
    floor : float
        Minimum admissible magnitude of the taps' DTFT. Below it the inverse
        is treated as unstable.
    mode : {"iir", "fir"}
        ``"iir"`` runs the exact causal/anti-causal recursions; ``"fir"``
        truncates the impulse response once it drops under ``fir_tol``.

    Returns
    -------
    CorrectionFilter
    """
    if mode not in ("iir", "fir"):
        raise ValueError(f"unknown mode {mode!r}")
    r = cross_correlation(p_a, p_s)
    if dtft_magnitude(r.taps).min() <= floor:
        raise UnstableFilterError(f"r_sa({p_a}, {p_s}) spectrum drops below {floor}")
    gain = reduce(lcm, (v.denominator for v in r.exact), 1)
    denominator = tuple(int(v * gain) for v in r.exact)

    P = r.half_width
    poles = []
    if P:
        wpoly = _laurent_to_w_poly(r.taps)
        for w in npoly.polyroots(wpoly):
            root = np.sqrt(complex(w) ** 2 - 4)
            z = min(((w + root) / 2, (w - root) / 2), key=abs)
            if abs(z.imag) > 1e-12 * max(1.0, abs(z)):
                raise UnstableFilterError("complex pole pairs are not supported")
            poles.append(float(z.real))
        poles.sort(key=abs, reverse=True)
    scale = float(np.prod([-z for z in poles]) / r.taps[-1]) if poles else 1.0 / r.taps[0]
    filt = CorrectionFilter(
        fir_taps=r.taps, gain=gain, denominator=denominator,
        poles=tuple(poles), scale=scale, mode=mode,
    )
    if mode == "fir":
        h = _impulse_response(filt, fir_tol)
        filt = CorrectionFilter(**{**filt.__dict__, "impulse_response": h})
    return filt


def _cascade(x, poles, scale):
    y = np.asarray(x, dtype=float)
    for z in poles:
        y = lfilter([1.0], [1.0, -z], y)
        y = lfilter([1.0], [1.0, -z], y[::-1])[::-1]
    return scale * y


def _impulse_response(filt: CorrectionFilter, tol: float) -> np.ndarray:
    zmax = max((abs(z) for z in filt.poles), default=0.0)
    if zmax == 0.0:
        return np.array([filt.scale])
    half = ceil(log(tol / 10) / log(zmax)) + 4 * len(filt.poles)
    delta = np.zeros(4 * half + 1)
    delta[2 * half] = 1.0
    h = _cascade(delta, filt.poles, filt.scale)[half:3 * half + 1]
    keep = np.nonzero(np.abs(h) >= tol)[0]
    reach = max(abs(keep[0] - half), abs(keep[-1] - half))
    return h[half - reach:half + reach + 1].copy()


def apply_correction(filt: CorrectionFilter, c) -> np.ndarray:
    """Filter SI samples ``c`` by the correction filter.

    Boundaries use whole-sample symmetric (mirror) extension, long enough for
    the recursions' start-up transients to decay below double precision.
    """
    c = np.asarray(c, dtype=float)
    if filt.is_identity:
        return filt.scale * c
    if c.size <= 4 * len(filt.poles):
        raise ValueError(f"need more than {4 * len(filt.poles)} samples, got {c.size}")
    if filt.mode == "fir":
        h = filt.impulse_response
        reach = h.size // 2
        padded = np.pad(c, reach, mode="reflect")
        return np.convolve(padded, h, mode="valid")
    W = filt.warmup()
    padded = np.pad(c, W, mode="reflect")
    return _cascade(padded, filt.poles, filt.scale)[W:W + c.size]


# ---------------------------------------------------------------------------
# concatenation


@dataclass(frozen=True)
class ConcatWeights:
    """Seam weights ``w_1 .. w_{L-N}`` (stored 0-based)."""

    weights: np.ndarray

    def __len__(self):
        return self.weights.size


def concat_weights(R: CorrectionMatrix) -> ConcatWeights:
    """Weights from the column sums of the first ``L - N`` columns of ``R``.

    A column sum is the area of that generator shift inside the interval;
    reflected pairs are renormalized to sum to one.
    """
    k = R.L - R.N
    if k == 0:
        return ConcatWeights(np.zeros(0))
    raw = R.entries[:, :k].sum(axis=0)
    w = raw / (raw + raw[::-1])
    return ConcatWeights(w)


def concat_intervals(per_interval, weights: ConcatWeights, N: int) -> ExpansionCoefficients:
    """Stitch per-interval length-``L`` estimates into one coefficient run.

    Each seam coefficient is the area-weighted average of its two estimates;
    the outermost ``(L - N)/2`` coefficients on either end have only one.
    """
    vecs = [np.asarray(v, dtype=float) for v in per_interval]
    if not vecs:
        raise ValueError("need at least one interval")
    ov = len(weights)
    L = N + ov
    for i, v in enumerate(vecs):
        if v.shape != (L,):
            raise ValueError(f"interval {i} has shape {v.shape}, expected ({L},)")
    K = len(vecs)
    out = np.empty(K * N + ov)
    out[:L] = vecs[0]
    w = weights.weights
    for k in range(1, K):
        start = k * N
        if ov:
            prev = out[start:start + ov]
            out[start:start + ov] = w[::-1] * prev + w * vecs[k][:ov]
        out[start + ov:start + L] = vecs[k][ov:]
    return ExpansionCoefficients(out, origin=-(ov // 2))
