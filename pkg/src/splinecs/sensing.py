"""Demodulator ensembles, sparsity bases and sensing operators."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from math import log2

import numpy as np
from scipy.fft import dct, idct

from .si_model import CorrectionFilter, CorrectionMatrix, overlap

__all__ = [
    "DemodulatorEnsemble",
    "SparsityBasis",
    "SensingOperator",
    "gen_bernoulli",
    "gen_wht_multilevel",
    "wht_levels",
    "level_quotas",
    "sequency_to_natural",
    "walsh_rows",
    "make_sparsity_basis",
    "extend_phi_for_overlap",
    "periodic_inverse_filter",
    "prefilter_phi",
    "assemble_sensing",
    "ensemble_to_csv",
    "ensemble_from_csv",
]


@dataclass(frozen=True)
class DemodulatorEnsemble:
    """``M`` rows of +-1 chipping coefficients, each ``N``-periodic."""

    phi: np.ndarray
    seed: int | None
    kind: str
    picked_rows: tuple = ()

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float).reshape(-1, np.shape(self.phi)[-1])
        if phi.size and not np.all(np.abs(phi) == 1):
            raise ValueError("ensemble entries must be +1 or -1")
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def M(self) -> int:
        return self.phi.shape[0]

    @property
    def N(self) -> int:
        return self.phi.shape[1]

    def head(self, M: int) -> "DemodulatorEnsemble":
        """First ``M`` channels (the nested sub-ensemble used by M-sweeps)."""
        if M > self.M:
            raise ValueError(f"ensemble has only {self.M} rows")
        return DemodulatorEnsemble(self.phi[:M], self.seed, self.kind)


def gen_bernoulli(M: int, N: int, seed=None) -> DemodulatorEnsemble:
    """i.i.d. equiprobable +-1 ensemble.

    Rows are drawn one after another from the seeded stream, so the first
    ``M`` rows do not depend on how many rows are requested in total.
    """
    if M > N:
        raise ValueError(f"M={M} exceeds N={N}")
    if M < 0 or N < 1:
        raise ValueError("M must be >= 0 and N >= 1")
    rng = np.random.default_rng(seed)
    phi = np.where(rng.random((M, N)) < 0.5, -1.0, 1.0)
    return DemodulatorEnsemble(phi.reshape(M, N), seed, "bernoulli")


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def sequency_to_natural(s, N: int):
    """Natural (Sylvester) Hadamard row index of sequency index ``s``.

    Gray-code the sequency, then bit-reverse over ``log2 N`` bits.
    """
    bits = int(log2(N))
    s = np.asarray(s, dtype=np.int64)
    g = s ^ (s >> 1)
    out = np.zeros_like(g)
    for b in range(bits):
        out |= ((g >> b) & 1) << (bits - 1 - b)
    return out


def walsh_rows(indices, N: int) -> np.ndarray:
    """Rows of the sequency-ordered Walsh-Hadamard matrix (entries +-1)."""
    if not _is_pow2(N):
        raise ValueError(f"N={N} is not a power of two")
    nat = sequency_to_natural(np.asarray(indices, dtype=np.int64), N)
    cols = np.arange(N, dtype=np.int64)
    anded = nat[:, None] & cols[None, :]
    parity = np.zeros(anded.shape, dtype=np.int64)
    while np.any(anded):
        parity ^= anded & 1
        anded >>= 1
    return 1.0 - 2.0 * parity


def wht_levels(N: int) -> list[np.ndarray]:
    """Dyadic sampling levels; level 1 holds the DC row too, so it is ``{0, 1}``."""
    if not _is_pow2(N) or N < 2:
        raise ValueError(f"N={N} must be a power of two >= 2")
    J = int(log2(N))
    levels = [np.arange(0, 2)]
    for j in range(2, J + 1):
        levels.append(np.arange(2 ** (j - 1), 2 ** j))
    return levels


def level_quotas(M: int, N: int) -> list[int]:
    """Rows taken per level: ``M // log2 N`` each, remainder on the last level,
    and any excess over a level's size carried to the next level."""
    levels = wht_levels(N)
    J = len(levels)
    base = [M // J] * J
    base[-1] += M - sum(base)
    quotas, carry = [], 0
    for size, want in zip((len(lv) for lv in levels), base):
        want += carry
        take = min(want, size)
        carry = want - take
        quotas.append(take)
    if carry:
        raise ValueError(f"M={M} exceeds N={N}")
    return quotas


def gen_wht_multilevel(M: int, N: int, seed=None) -> DemodulatorEnsemble:
    """Walsh-Hadamard rows picked by multilevel subsampling."""
    if not _is_pow2(N):
        raise ValueError(f"N={N} is not a power of two")
    if M > N:
        raise ValueError(f"M={M} exceeds N={N}")
    rng = np.random.default_rng(seed)
    picked = []
    for level, q in zip(wht_levels(N), level_quotas(M, N)):
        sel = rng.choice(level, size=q, replace=False) if q else np.zeros(0, dtype=int)
        picked.append(tuple(int(i) for i in np.sort(sel)))
    flat = [i for lv in picked for i in lv]
    phi = walsh_rows(flat, N) if flat else np.zeros((0, N))
    return DemodulatorEnsemble(phi, seed, "wht_multilevel", tuple(picked))


@dataclass(frozen=True)
class SparsityBasis:
    """Orthonormal synthesis basis: coefficients ``d = Psi @ x``."""

    kind: str
    size: int
    matrix: np.ndarray = field(repr=False)

    def synthesize(self, x):
        if self.kind == "dct":
            return idct(np.asarray(x, dtype=float), norm="ortho", axis=0)
        return np.asarray(x, dtype=float).copy()

    def analyze(self, d):
        if self.kind == "dct":
            return dct(np.asarray(d, dtype=float), norm="ortho", axis=0)
        return np.asarray(d, dtype=float).copy()


def make_sparsity_basis(kind: str, size: int) -> SparsityBasis:
    """Orthonormal DCT-II (columns are the atoms) or the identity."""
    if size < 1:
        raise ValueError("size must be >= 1")
    if kind == "dct":
        mat = idct(np.eye(size), norm="ortho", axis=0)
    elif kind == "identity":
        mat = np.eye(size)
    else:
        raise ValueError(f"unknown basis kind {kind!r}")
    mat.setflags(write=False)
    return SparsityBasis(kind, size, mat)


def extend_phi_for_overlap(ens: DemodulatorEnsemble | np.ndarray, p_s: int) -> np.ndarray:
    """Wrap each N-periodic row by ``ceil(p_s/2)`` entries on both sides (M x H)."""
    phi = ens.phi if isinstance(ens, DemodulatorEnsemble) else np.asarray(ens, dtype=float)
    c = overlap(p_s)
    N = phi.shape[1]
    idx = np.arange(-c, N + c) % N
    return phi[:, idx]


def periodic_inverse_filter(rows, filt: CorrectionFilter) -> np.ndarray:
    """Circularly filter N-periodic rows by ``1 / R_sa`` (exact, via the DFT)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    N = rows.shape[1]
    taps = np.asarray(filt.fir_taps)
    P = taps.size // 2
    if taps.size > N:
        raise ValueError("row period shorter than the filter taps")
    kernel = np.zeros(N)
    for n in range(-P, P + 1):
        kernel[n % N] += taps[n + P]
    spec = np.fft.rfft(kernel)
    return np.fft.irfft(np.fft.rfft(rows, axis=1) / spec, n=N, axis=1)


def prefilter_phi(ens: DemodulatorEnsemble, filt: CorrectionFilter, p_s: int = 0) -> np.ndarray:
    """Chipping rows pre-filtered by the correction filter, wrapped to M x H.

    ``filt`` should invert the generator/sampling correlation, so that
    ``prefilter_phi(...) @ R`` reproduces the original rows away from the
    interval edges.
    """
    if filt.poles and min(abs(1 - abs(z)) for z in filt.poles) < 1e-9:
        raise ValueError("filter has a pole on the unit circle")
    if ens.M == 0:
        return np.zeros((0, ens.N + 2 * overlap(p_s)))
    return extend_phi_for_overlap(periodic_inverse_filter(ens.phi, filt), p_s)


@dataclass(frozen=True)
class SensingOperator:
    mode: str
    matrix: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    R: CorrectionMatrix | None
    basis: SparsityBasis

    @property
    def shape(self):
        return self.matrix.shape

    def __matmul__(self, x):
        return self.matrix @ x


def assemble_sensing(mode: str, ens: DemodulatorEnsemble, R: CorrectionMatrix | None,
                     basis: SparsityBasis, filt: CorrectionFilter | None = None) -> SensingOperator:
    """Dense sensing matrix for one interval.

    ``"rd"``: ``Phi @ Psi`` (M x N). ``"generalized"``: ``Phi_k @ R @ Psi``
    (M x L) with the cyclically wrapped chipping rows.
    ``"generalized_prefiltered"``: as generalized, with rows pre-filtered by
    ``filt``.
    """
    if mode == "rd":
        if basis.size != ens.N:
            raise ValueError(f"basis size {basis.size} != N={ens.N}")
        phi = ens.phi
        return SensingOperator(mode, phi @ basis.matrix, phi, None, basis)
    if mode not in ("generalized", "generalized_prefiltered"):
        raise ValueError(f"unknown sensing mode {mode!r}")
    if R is None:
        raise ValueError(f"mode {mode!r} needs a correction matrix")
    if R.N != ens.N:
        raise ValueError(f"correction matrix built for N={R.N}, ensemble has N={ens.N}")
    if basis.size != R.L:
        raise ValueError(f"basis size {basis.size} != L={R.L}")
    if mode == "generalized":
        phi = extend_phi_for_overlap(ens, R.p_s)
    else:
        if filt is None:
            raise ValueError("prefiltered mode needs a correction filter")
        phi = prefilter_phi(ens, filt, R.p_s)
    return SensingOperator(mode, phi @ R.entries @ basis.matrix, phi, R, basis)


# ---------------------------------------------------------------------------
# serialization


def ensemble_to_csv(ens: DemodulatorEnsemble) -> str:
    """CSV text: a ``kind,seed,M,N`` line, then one row of +-1 integers per channel."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([ens.kind, "" if ens.seed is None else ens.seed, ens.M, ens.N])
    for row in ens.phi.astype(int):
        w.writerow(row.tolist())
    return buf.getvalue()


def ensemble_from_csv(text: str) -> DemodulatorEnsemble:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or len(rows[0]) != 4:
        raise ValueError("missing 'kind,seed,M,N' header line")
    kind, seed, M, N = rows[0]
    seed = int(seed) if seed != "" else None
    M, N = int(M), int(N)
    body = rows[1:]
    if len(body) != M or any(len(r) != N for r in body):
        raise ValueError(f"expected {M} rows of {N} entries")
    phi = np.array([[int(v) for v in r] for r in body], dtype=float).reshape(M, N)
    picked = ()
    if kind == "wht_multilevel":
        # each Walsh row is unique, so the picked indices can be read back
        full = walsh_rows(np.arange(N), N)
        lookup = {full[i].tobytes(): i for i in range(N)}
        idx = [lookup[r.tobytes()] for r in phi]
        picked = tuple(
            tuple(i for i in idx if i in set(level.tolist())) for level in wht_levels(N)
        )
    return DemodulatorEnsemble(phi, seed, kind, picked)
