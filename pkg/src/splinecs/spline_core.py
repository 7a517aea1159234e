"""Centered polynomial B-splines, continuous synthesis and cross-correlations.

All kernels are centered: the degree-``p`` B-spline is supported on
``(-(p+1)/2, (p+1)/2]`` (in units of the period ``T``) and is symmetric.
Internally ``T = 1``; the period only rescales the time axis.

Polynomial pieces are kept as exact rationals so that sampled values and
truncated integrals (used by the correction matrix) come out exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from math import comb, factorial

import numpy as np

__all__ = [
    "BSplineKernel",
    "ExpansionCoefficients",
    "CrossCorrelation",
    "kernel_pieces",
    "kernel_value_exact",
    "eval_kernel",
    "cross_correlation",
    "synthesize",
]


@dataclass(frozen=True)
class BSplineKernel:
    degree: int
    period: float = 1.0

    def __post_init__(self):
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError(f"degree must be a non-negative integer, got {self.degree!r}")
        if not self.period > 0:
            raise ValueError(f"period must be positive, got {self.period!r}")

    @property
    def half_support(self) -> float:
        return (self.degree + 1) / 2 * self.period

    def __call__(self, t):
        return eval_kernel(self, t)


@dataclass(frozen=True)
class ExpansionCoefficients:
    """Finite run of expansion coefficients ``d[m]``.

    ``values[j]`` is the coefficient of the shift ``m = origin + j``.
    """

    values: np.ndarray
    origin: int = 0
    period: float = 1.0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 1:
            raise ValueError("coefficients must be one-dimensional")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.size

    @property
    def shifts(self) -> np.ndarray:
        return np.arange(self.origin, self.origin + self.values.size)

    def window(self, start: int, length: int) -> np.ndarray:
        """Coefficients for shifts ``start .. start+length-1``; raises if not covered."""
        lo = start - self.origin
        if lo < 0 or lo + length > self.values.size:
            raise ValueError(
                f"shifts [{start}, {start + length}) not covered by "
                f"[{self.origin}, {self.origin + self.values.size})"
            )
        return self.values[lo:lo + length]


@dataclass(frozen=True)
class CrossCorrelation:
    """Symmetric sampled cross-correlation ``r_sa[n]`` for ``n = -P .. P``."""

    taps: np.ndarray
    p_a: int
    p_s: int
    exact: tuple = ()

    @property
    def half_width(self) -> int:
        return (self.taps.size - 1) // 2

    def __getitem__(self, n: int) -> float:
        P = self.half_width
        if abs(n) > P:
            return 0.0
        return float(self.taps[n + P])


@lru_cache(maxsize=None)
def kernel_pieces(p: int) -> tuple:
    """Exact polynomial pieces of the centered degree-``p`` B-spline.

    Returns a tuple of ``p + 1`` coefficient tuples. Piece ``j`` lives on
    ``[lo + j, lo + j + 1]`` with ``lo = -(p+1)/2`` and is a polynomial in the
    local variable ``u = t - (lo + j)``, ``u`` in ``[0, 1]``, with
    coefficients listed in increasing powers of ``u``.
    """
    if p < 0:
        raise ValueError("degree must be non-negative")
    # truncated-power form of the causal spline: (1/p!) sum_k (-1)^k C(p+1,k) (x-k)_+^p
    pieces = []
    for j in range(p + 1):
        coeffs = [Fraction(0)] * (p + 1)
        # on piece j, x = j + u and only k <= j contribute: (j - k + u)^p
        for k in range(j + 1):
            sign = -1 if k % 2 else 1
            w = Fraction(sign * comb(p + 1, k), factorial(p))
            shift = j - k
            for i in range(p + 1):
                coeffs[i] += w * comb(p, i) * Fraction(shift) ** (p - i)
        pieces.append(tuple(coeffs))
    return tuple(pieces)


def kernel_value_exact(p: int, t) -> Fraction:
    """Exact value of the centered B-spline at a rational point ``t``."""
    t = Fraction(t)
    lo = Fraction(-(p + 1), 2)
    x = t - lo
    # support is the half-open interval (lo, -lo]
    if x <= 0 or x > p + 1:
        return Fraction(0)
    j = int(x) if x != int(x) else int(x) - 1
    u = x - j
    return sum((c * u ** i for i, c in enumerate(kernel_pieces(p)[j])), Fraction(0))


@lru_cache(maxsize=None)
def _float_pieces(p: int) -> np.ndarray:
    return np.array([[float(c) for c in piece] for piece in kernel_pieces(p)])


def _eval_unit(p: int, x):
    """Centered degree-p B-spline at ``x`` (period 1), vectorized."""
    x = np.asarray(x, dtype=float)
    shifted = x + (p + 1) / 2
    inside = (shifted > 0) & (shifted <= p + 1)
    # left-open pieces: an exact knot belongs to the piece on its left
    j = np.clip(np.ceil(shifted) - 1, 0, p).astype(int)
    u = shifted - j
    coeffs = _float_pieces(p)[j]
    out = np.zeros_like(shifted)
    for i in range(p, -1, -1):
        out = out * u + coeffs[..., i]
    return np.where(inside, out, 0.0)


def eval_kernel(kernel: BSplineKernel, t):
    """Value of ``b^p(t / T)`` for the centered kernel; zero outside the support."""
    out = _eval_unit(kernel.degree, np.asarray(t, dtype=float) / kernel.period)
    return out if out.ndim else float(out)


def cross_correlation(p_a: int, p_s: int) -> CrossCorrelation:
    """Sampled cross-correlation between a degree-``p_a`` generator and a
    degree-``p_s`` sampling kernel.

    Uses the convolution identity: the correlation of two centered B-splines
    is the centered B-spline of degree ``p_a + p_s + 1``, so the taps are that
    spline sampled at the integers.
    """
    if p_a < 0 or p_s < 0:
        raise ValueError("degrees must be non-negative")
    q = p_a + p_s + 1
    P = q // 2  # b^q vanishes at integers |n| >= (q+1)/2
    exact = tuple(kernel_value_exact(q, n) for n in range(-P, P + 1))
    taps = np.array([float(v) for v in exact])
    taps.setflags(write=False)
    return CrossCorrelation(taps=taps, p_a=p_a, p_s=p_s, exact=exact)


def _active_shifts(t, p: int, first: int, last: int):
    """Candidate shift indices whose centered kernel may be nonzero at ``t``."""
    reach = p // 2 + 1
    base = np.floor(t).astype(int)
    offsets = np.arange(-reach, reach + 1)
    m = base[..., None] + offsets
    valid = (m >= first) & (m <= last)
    return m, valid


def synthesize(coeffs: ExpansionCoefficients, kernel: BSplineKernel, t):
    """Evaluate ``f(t) = sum_m d[m] b^p((t - mT)/T)`` at ``t`` (scalar or array).

    Shifts outside the stored run count as zero coefficients.
    """
    T = kernel.period
    x = np.asarray(t, dtype=float) / T
    p = kernel.degree
    first, last = coeffs.origin, coeffs.origin + len(coeffs) - 1
    m, valid = _active_shifts(x, p, first, last)
    idx = np.where(valid, m - first, 0)
    vals = np.where(valid, coeffs.values[idx], 0.0) if len(coeffs) else np.zeros(m.shape)
    out = np.sum(vals * _eval_unit(p, x[..., None] - m), axis=-1)
    return out if out.ndim else float(out)
