"""Continuous-domain simulation of the integrate-and-dump front end.

Measurements are computed straight from the analog description: the input
signal is evaluated pointwise, multiplied by each sampling-kernel shift and
integrated over the interval with Gauss-Legendre rules placed between
consecutive knots. Every integrand is piecewise polynomial, so the result is
exact to roundoff without touching the correction matrix.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

from .sensing import DemodulatorEnsemble, extend_phi_for_overlap
from .si_model import overlap
from .spline_core import BSplineKernel, ExpansionCoefficients, eval_kernel, synthesize

__all__ = [
    "IntervalBatch",
    "NoiseModel",
    "ZohSignal",
    "gauss_nodes",
    "kernel_inner_products",
    "measure_quadrature",
    "zoh_embed",
    "measure_zoh",
    "add_noise",
    "read_wav",
    "write_wav",
]


@dataclass(frozen=True)
class IntervalBatch:
    """Measurements ``y[k, i]`` for intervals ``k = 0..K-1`` and channels ``i``."""

    y: np.ndarray
    N: int
    period: float = 1.0
    noise_sigma: np.ndarray | None = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float, ndmin=2)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)

    @property
    def K(self) -> int:
        return self.y.shape[0]

    @property
    def M(self) -> int:
        return self.y.shape[1]

    @property
    def tau(self) -> float:
        return self.N * self.period

    def __getitem__(self, k):
        return self.y[k]


@dataclass(frozen=True)
class NoiseModel:
    sigma_fraction: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.sigma_fraction < 0:
            raise ValueError("sigma_fraction must be non-negative")


def gauss_nodes(lo: float, hi: float, pieces: int, order: int):
    """Gauss-Legendre nodes/weights on ``pieces`` equal sub-intervals of ``[lo, hi]``."""
    x, w = np.polynomial.legendre.leggauss(order)
    h = (hi - lo) / pieces
    starts = lo + h * np.arange(pieces)
    t = (starts[:, None] + (x[None, :] + 1) * h / 2).ravel()
    wt = np.tile(w * h / 2, pieces)
    return t, wt


def kernel_inner_products(values, t, w, p_s: int, first: int, count: int) -> np.ndarray:
    """``sum_j w_j g(t_j) s(t_j - n)`` for ``n = first .. first+count-1``.

    ``values`` are ``g(t)`` on the quadrature nodes ``t`` with weights ``w``.
    """
    gw = np.asarray(values) * w
    out = np.zeros(count)
    reach = p_s // 2 + 1
    base = np.floor(t).astype(int)
    kern = BSplineKernel(p_s)
    for off in range(-reach, reach + 1):
        n = base + off
        vals = eval_kernel(kern, t - n) * gw
        idx = n - first
        ok = (idx >= 0) & (idx < count)
        out += np.bincount(idx[ok], weights=vals[ok], minlength=count)
    return out


def _interval_bounds(k: int, N: int):
    return k * N - 0.5, k * N + N - 0.5


def measure_quadrature(d: ExpansionCoefficients, p_a: int, ens: DemodulatorEnsemble,
                       p_s: int, K: int) -> IntervalBatch:
    """Integrate ``f(t) z_i(t)`` over each of ``K`` intervals by quadrature.

    ``f`` is synthesized from ``d`` with the degree-``p_a`` generator and
    ``z_i`` is the ``N``-periodic chipping waveform built from degree-``p_s``
    kernels. ``d`` must cover shifts ``-ceil(p_a/2) .. K N - 1 + ceil(p_a/2)``.
    """
    N = ens.N
    ca, cs = overlap(p_a), overlap(p_s)
    lo_shift, hi_shift = -ca, K * N - 1 + ca
    if d.origin > lo_shift or d.origin + len(d) - 1 < hi_shift:
        raise ValueError(
            f"coefficients cover [{d.origin}, {d.origin + len(d) - 1}], "
            f"need [{lo_shift}, {hi_shift}]"
        )
    kern = BSplineKernel(p_a)
    order = -(-(p_a + p_s) // 2) + 1
    phi = extend_phi_for_overlap(ens, p_s)
    y = np.zeros((K, ens.M))
    for k in range(K):
        lo, hi = _interval_bounds(k, N)
        # knots of centered splines sit on the half-integer grid
        t, w = gauss_nodes(lo, hi, 2 * N, order)
        f = synthesize(d, kern, t)
        c = kernel_inner_products(f, t, w, p_s, k * N - cs, N + 2 * cs)
        y[k] = phi @ c
    return IntervalBatch(y, N, d.period)


@dataclass(frozen=True)
class ZohSignal:
    """Piecewise-constant signal: ``samples[j]`` on ``(start + j/ratio, start + (j+1)/ratio]``.

    Time is in units of the coefficient period; ``start = -1/2`` lines the
    first sample up with the left edge of interval 0.
    """

    samples: np.ndarray = field(repr=False)
    ratio: int
    start: float = -0.5

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        j = np.ceil((t - self.start) * self.ratio).astype(int) - 1
        ok = (j >= 0) & (j < self.samples.size)
        return np.where(ok, self.samples[np.clip(j, 0, self.samples.size - 1)], 0.0)

    @property
    def duration(self) -> float:
        return self.samples.size / self.ratio

    def integrate(self, lo: float, hi: float) -> float:
        """Exact integral over ``[lo, hi]``."""
        edges = self.start + np.arange(self.samples.size + 1) / self.ratio
        left = np.clip(edges[:-1], lo, hi)
        right = np.clip(edges[1:], lo, hi)
        return float(np.sum(self.samples * (right - left)))

    def kernel_inner_products(self, p_s: int, first: int, count: int,
                              lo: float, hi: float) -> np.ndarray:
        """``int_lo^hi g(t) b^{p_s}(t - n) dt`` for ``count`` shifts from ``first``.

        ``lo`` and ``hi`` must lie on the ``1/(2 ratio)`` grid offset by ``start``.
        """
        pieces = int(round((hi - lo) * 2 * self.ratio))
        t, w = gauss_nodes(lo, hi, pieces, p_s // 2 + 1)
        return kernel_inner_products(self(t), t, w, p_s, first, count)


def zoh_embed(samples, upsample_ratio: int = 8, start: float = -0.5) -> ZohSignal:
    """Zero-order-hold signal whose samples run ``upsample_ratio`` times faster
    than the coefficient grid."""
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValueError("empty input")
    if int(upsample_ratio) != upsample_ratio or upsample_ratio < 1:
        raise ValueError("upsample_ratio must be a positive integer")
    samples.setflags(write=False)
    return ZohSignal(samples, int(upsample_ratio), float(start))


def measure_zoh(sig: ZohSignal, ens: DemodulatorEnsemble, p_s: int, K: int) -> IntervalBatch:
    """Integrate-and-dump measurements of a zero-order-hold signal."""
    N = ens.N
    if sig.start != -0.5:
        raise ValueError("ZOH samples must start at the left edge of interval 0")
    if sig.duration < K * N - 1e-9:
        raise ValueError(f"signal lasts {sig.duration} periods, need {K * N}")
    cs = overlap(p_s)
    phi = extend_phi_for_overlap(ens, p_s)
    y = np.zeros((K, ens.M))
    for k in range(K):
        lo, hi = _interval_bounds(k, N)
        c = sig.kernel_inner_products(p_s, k * N - cs, N + 2 * cs, lo, hi)
        y[k] = phi @ c
    return IntervalBatch(y, N)


def add_noise(batch: IntervalBatch, noise: NoiseModel) -> IntervalBatch:
    """Add white Gaussian noise scaled to each interval's measurement spread.

    The standard deviation is ``sigma_fraction`` times the sample standard
    deviation (``ddof=1``) of that interval's measurement vector.
    """
    if noise.sigma_fraction == 0:
        return IntervalBatch(batch.y.copy(), batch.N, batch.period, np.zeros(batch.K))
    rng = np.random.default_rng(noise.seed)
    y = batch.y.copy()
    sig = np.zeros(batch.K)
    for k in range(batch.K):
        sig[k] = noise.sigma_fraction * (np.std(y[k], ddof=1) if batch.M > 1 else 0.0)
        y[k] += rng.normal(0.0, 1.0, batch.M) * sig[k]
    return IntervalBatch(y, batch.N, batch.period, sig)


def read_wav(path):
    """Mono 16/24-bit PCM WAV as floats in ``[-1, 1)`` plus the sample rate."""
    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data / 32768.0
    elif data.dtype == np.int32:
        # scipy left-justifies 24-bit samples into int32
        x = data / 2147483648.0
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    return x.astype(float), int(rate)


def write_wav(path, x, rate: int):
    """Write 16-bit PCM, clipping (with a warning) anything outside ``[-1, 1)``."""
    x = np.asarray(x, dtype=float)
    clipped = np.clip(x, -1.0, 32767 / 32768)
    if np.any(clipped != x):
        warnings.warn(f"{np.sum(clipped != x)} samples clipped while writing {path}")
    wavfile.write(path, int(rate), np.round(clipped * 32768).astype(np.int16))
