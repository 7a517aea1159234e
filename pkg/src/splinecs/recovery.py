"""QCBP solver and the two end-to-end reconstruction pipelines.

The solver is ADMM on ``min ||x||_1  s.t.  ||y - A x||_2 <= kappa``:

* ``kappa == 0``: the basis-pursuit splitting ``x = z`` where the x-step is
  the exact projection onto ``{A x = y}`` and the z-step soft-thresholds;
* ``kappa > 0``: ``u = x``, ``v = A x`` with a soft-threshold on ``u`` and a
  closed-form projection of ``v`` onto the ball around ``y``.

Both use residual balancing for the penalty and return a dual vector so the
duality gap can be checked independently.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .acquisition import IntervalBatch
from .sensing import (DemodulatorEnsemble, SensingOperator, SparsityBasis,
                      assemble_sensing)
from .si_model import (CorrectionFilter, CorrectionMatrix, apply_correction,
                       concat_intervals, concat_weights, overlap)
from .spline_core import ExpansionCoefficients

__all__ = [
    "SolverConfig",
    "QcbpProblem",
    "QcbpSolution",
    "QcbpSolver",
    "InfeasibleProblemError",
    "RecoveryReport",
    "PERFECT_SNR_DB",
    "SNR_CAP_DB",
    "solve_qcbp",
    "default_kappa",
    "recover_rd",
    "recover_generalized",
    "snr_db",
]

log = logging.getLogger(__name__)

PERFECT_SNR_DB = 70.0
# the penalty is frozen after this many iterations so ADMM settles
_ADAPT_UNTIL = 1000
# how often basis pursuit tries a certified support refit
_FINISH_EVERY = 200
SNR_CAP_DB = 300.0


class InfeasibleProblemError(ValueError):
    """``kappa`` is below the least-squares residual floor of the system."""


@dataclass(frozen=True)
class SolverConfig:
    max_iterations: int = 20000
    tolerance: float = 1e-9
    gap_tolerance: float = 1e-7
    rho: float = 1.0
    feasibility_tolerance: float = 1e-8
    polish: bool = True

    def __post_init__(self):
        if self.tolerance <= 0 or self.feasibility_tolerance <= 0 or self.gap_tolerance <= 0:
            raise ValueError("tolerances must be positive")
        if self.rho <= 0:
            raise ValueError("rho must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass(frozen=True)
class QcbpProblem:
    theta: np.ndarray | SensingOperator
    y: np.ndarray
    kappa: float = 0.0

    def __post_init__(self):
        if not self.kappa >= 0:
            raise ValueError(f"kappa must be non-negative, got {self.kappa}")

    @property
    def matrix(self) -> np.ndarray:
        th = self.theta
        return th.matrix if isinstance(th, SensingOperator) else np.asarray(th, dtype=float)


@dataclass(frozen=True)
class QcbpSolution:
    x: np.ndarray
    iterations: int
    converged: bool
    residual: float
    objective: float
    dual: np.ndarray = field(repr=False)
    dual_objective: float = -np.inf
    polished: bool = False

    @property
    def gap(self) -> float:
        return self.objective - self.dual_objective


def _soft(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


class QcbpSolver:
    """Factorizes one sensing matrix and solves QCBP for many right-hand sides."""

    def __init__(self, theta, config: SolverConfig | None = None):
        A = theta.matrix if isinstance(theta, SensingOperator) else np.asarray(theta, dtype=float)
        self.config = config or SolverConfig()
        self.shape = A.shape
        M, N = A.shape
        self.scale = float(np.linalg.norm(A, 2)) if A.size else 1.0
        if self.scale == 0.0:
            self.scale = 1.0
        self.A = A / self.scale
        if M == 0:
            return
        gram = self.A @ self.A.T
        evals, evecs = np.linalg.eigh(gram)
        self.full_rank = evals[0] > 1e-12 * evals[-1]
        if self.full_rank:
            self._gram = sla.cho_factor(gram)
        else:
            keep = evals > 1e-12 * evals[-1]
            self._range = evecs[:, keep]
            self._gram_pinv = (evecs[:, keep] / evals[keep]) @ evecs[:, keep].T
        self._ball = None

    # linear algebra helpers on the scaled matrix
    def _gram_solve(self, b):
        if self.full_rank:
            return sla.cho_solve(self._gram, b)
        return self._gram_pinv @ b

    def _ball_solve(self, q):
        if self._ball is None:
            M = self.shape[0]
            self._ball = sla.cho_factor(np.eye(M) + self.A @ self.A.T)
        return q - self.A.T @ sla.cho_solve(self._ball, self.A @ q)

    def residual_floor(self, y) -> float:
        """Smallest achievable ``||y - A x||`` (zero for full row rank)."""
        if self.shape[0] == 0 or self.full_rank:
            return 0.0
        y = np.asarray(y, dtype=float)
        return float(np.linalg.norm(y - self._range @ (self._range.T @ y)))

    def _dual_value(self, nu, y, kappa):
        """Dual objective of a (rescaled to feasible) dual candidate, scaled units."""
        bound = np.max(np.abs(self.A.T @ nu)) if nu.size else 0.0
        if bound > 1.0:
            nu = nu / bound
        return float(y @ nu - kappa * np.linalg.norm(nu)), nu

    def solve(self, y, kappa: float = 0.0) -> QcbpSolution:
        y = np.asarray(y, dtype=float)
        M, N = self.shape
        if y.shape != (M,):
            raise ValueError(f"y has shape {y.shape}, expected ({M},)")
        if kappa < 0:
            raise ValueError("kappa must be non-negative")
        if M == 0:
            return QcbpSolution(np.zeros(N), 0, True, 0.0, 0.0, np.zeros(0), 0.0)
        s = self.scale
        floor = self.residual_floor(y)
        if floor > kappa * (1 + self.config.feasibility_tolerance) + 1e-12 * max(1.0, np.linalg.norm(y)):
            raise InfeasibleProblemError(
                f"kappa={kappa:.6g} below the least-squares residual floor {floor:.6g}"
            )
        ys, ks = y / s, kappa / s
        if np.linalg.norm(ys) <= ks:
            # zero is feasible and minimizes the l1 norm
            return QcbpSolution(np.zeros(N), 0, True, float(np.linalg.norm(y)), 0.0, np.zeros(M), 0.0)
        if kappa == 0.0:
            x, nu, it, conv = self._basis_pursuit(ys)
        else:
            x, nu, it, conv = self._ball_admm(ys, ks)
        polished = False
        if self.config.polish and kappa == 0.0:
            found = self._polish(x, nu, ys)
            if found is not None:
                x, nu, certified = found
                polished = True
                conv = conv or certified
        dual_val, nu = self._dual_value(nu, ys, ks)
        resid = float(np.linalg.norm(y - s * (self.A @ x)))
        return QcbpSolution(
            x=x, iterations=it, converged=conv, residual=resid,
            objective=float(np.abs(x).sum()), dual=nu / s, dual_objective=dual_val,
            polished=polished,
        )

    def _basis_pursuit(self, y):
        A, cfg = self.A, self.config
        N = self.shape[1]
        if not self.full_rank:
            y = self._range @ (self._range.T @ y)

        def project(v):
            w = self._gram_solve(A @ v - y)
            return v - A.T @ w, w

        x, w = project(np.zeros(N))
        rho = cfg.rho / max(np.abs(x).max(), 1e-300)
        z = x.copy()
        u = np.zeros(N)
        converged = False
        it = 0
        for it in range(1, cfg.max_iterations + 1):
            x, w = project(z - u)
            z_old = z
            z = _soft(x + u, 1.0 / rho)
            u += x - z
            r = np.linalg.norm(x - z)
            sd = rho * np.linalg.norm(z - z_old)
            if (r <= cfg.tolerance * max(np.linalg.norm(x), np.linalg.norm(z))
                    and sd <= cfg.tolerance * rho * np.linalg.norm(u)):
                converged = True
                break
            if it % 10 == 0:
                if self._gap_small(x, -rho * w, y, 0.0):
                    converged = True
                    break
                if cfg.polish and it % _FINISH_EVERY == 0:
                    found = self._polish(x, -rho * w, y)
                    if found is not None and found[2]:
                        return found[0], found[1], it, True
                if it > _ADAPT_UNTIL:
                    pass
                elif r > 10 * sd:
                    rho *= 2.0
                    u /= 2.0
                elif sd > 10 * r:
                    rho /= 2.0
                    u *= 2.0
        x, w = project(z - u)
        # at a fixed point u = -A^T w, and rho*u is an l1 subgradient
        xz = project(z)[0]
        if np.abs(xz).sum() < np.abs(x).sum():
            x = xz
        return x, -rho * w, it, converged

    def _ball_admm(self, y, kappa):
        A, cfg = self.A, self.config
        M, N = self.shape

        def to_ball(v):
            r = v - y
            nr = np.linalg.norm(r)
            return v if nr <= kappa else y + r * (kappa / nr)

        u = np.zeros(N)
        v = to_ball(np.zeros(M))
        l1 = np.zeros(N)
        l2 = np.zeros(M)
        rho = cfg.rho
        x = np.zeros(N)
        converged = False
        it = 0
        for it in range(1, cfg.max_iterations + 1):
            x = self._ball_solve((u - l1) + A.T @ (v - l2))
            Ax = A @ x
            u_old, v_old = u, v
            u = _soft(x + l1, 1.0 / rho)
            v = to_ball(Ax + l2)
            l1 += x - u
            l2 += Ax - v
            r = np.sqrt(np.sum((x - u) ** 2) + np.sum((Ax - v) ** 2))
            sd = rho * np.sqrt(np.sum((u - u_old) ** 2) + np.sum((A.T @ (v - v_old)) ** 2))
            if (r <= cfg.tolerance * max(np.linalg.norm(x), np.linalg.norm(u))
                    and sd <= cfg.tolerance * rho * np.sqrt(np.sum(l1 ** 2) + np.sum((A.T @ l2) ** 2))):
                converged = True
                break
            if it % 10 == 0:
                if self.full_rank and self._gap_small(self._restore(u, v), -rho * l2, y, kappa):
                    converged = True
                    break
                if it > _ADAPT_UNTIL:
                    pass
                elif r > 10 * sd:
                    rho *= 2.0
                    l1 /= 2.0
                    l2 /= 2.0
                elif sd > 10 * r:
                    rho /= 2.0
                    l1 *= 2.0
                    l2 *= 2.0
        if self.full_rank:
            u = self._restore(u, v)
        return u, -rho * l2, it, converged

    def _restore(self, u, v):
        """Smallest change to ``u`` that moves ``A u`` onto the ball point ``v``."""
        return u + self.A.T @ self._gram_solve(v - self.A @ u)

    def _gap_small(self, x, nu, y, kappa) -> bool:
        """Relative duality gap of a feasible ``x`` below the configured tolerance."""
        primal = np.abs(x).sum()
        dual, _ = self._dual_value(nu, y, kappa)
        return primal - dual <= self.config.gap_tolerance * max(primal, 1e-300)

    def _polish(self, x, nu, y):
        """Least-squares refit on a detected support (equality case only).

        Candidate supports come from coarser and coarser magnitude thresholds
        on ``x`` and from the near-active set ``|A^T nu| ~ 1`` of the dual.
        A refit is accepted if it stays feasible without raising the l1 norm.
        Returns ``(x, nu, certified)`` or ``None``; ``certified`` means a dual
        vector matching the refit's signs exactly was found, so the refit is
        optimal to roundoff.
        """
        A = self.A
        M = self.shape[0]
        big = np.abs(x)
        if not big.any():
            return None
        ny = max(np.linalg.norm(y), 1e-300)
        l1 = big.sum()
        g = np.abs(A.T @ nu) / max(np.abs(A.T @ nu).max(), 1e-300)
        candidates = [np.nonzero(big > rel * big.max())[0] for rel in (1e-9, 1e-6, 1e-3)]
        candidates += [np.nonzero(g > 1 - tol)[0] for tol in (1e-6, 1e-4, 1e-2)]
        best = None
        seen = set()
        for support in candidates:
            key = support.tobytes()
            if support.size == 0 or support.size > M or key in seen:
                continue
            seen.add(key)
            sol, *_ = np.linalg.lstsq(A[:, support], y, rcond=None)
            xp = np.zeros_like(x)
            xp[support] = sol
            if np.linalg.norm(A @ xp - y) > self.config.feasibility_tolerance * ny:
                continue
            if np.abs(xp).sum() > l1 * (1 + 1e-9) + 1e-14:
                continue
            cert = self._sign_certificate(xp, nu)
            if cert is not None:
                return xp, cert, True
            if best is None:
                best = (xp, nu, False)
        return best

    def _sign_certificate(self, x, nu):
        """Dual vector with ``A_T^T nu = sign(x_T)`` on the support ``T`` and
        ``|A^T nu| <= 1`` elsewhere, closest to ``nu``; ``None`` if there is none."""
        A = self.A
        T = np.nonzero(x)[0]
        AT = A[:, T]
        s = np.sign(x[T])
        corr, *_ = np.linalg.lstsq(AT.T, s - AT.T @ nu, rcond=None)
        cand = nu + corr
        g = A.T @ cand
        if np.abs(g[T] - s).max() > 1e-9 or np.abs(g).max() > 1 + 1e-9:
            return None
        return cand


def solve_qcbp(problem: QcbpProblem, config: SolverConfig | None = None) -> QcbpSolution:
    """Solve ``min ||x||_1  s.t.  ||y - Theta x||_2 <= kappa``.

    Raises
    ------
    InfeasibleProblemError
        If ``kappa`` is smaller than the least-squares residual floor.

    Non-convergence is not an error: the returned solution has
    ``converged=False`` and is still feasible up to roundoff.
    """
    return QcbpSolver(problem.matrix, config).solve(problem.y, problem.kappa)


# ---------------------------------------------------------------------------
# metrics and reports


def snr_db(reference, estimate) -> float:
    """``10 log10(||ref||^2 / ||ref - est||^2)``, capped at 300 dB."""
    ref = np.asarray(reference, dtype=float)
    est = np.asarray(estimate, dtype=float)
    if ref.shape != est.shape:
        raise ValueError(f"shape mismatch: {ref.shape} vs {est.shape}")
    sig = float(np.sum(ref ** 2))
    if sig == 0.0:
        raise ValueError("reference is identically zero")
    err = float(np.sum((ref - est) ** 2))
    if err == 0.0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10.0 * np.log10(sig / err))


@dataclass
class RecoveryReport:
    x_hat: list
    d_hat: ExpansionCoefficients
    snr_db: float
    interval_snr_db: list
    residuals: list
    iterations: list
    failed: list
    converged: list

    @property
    def perfect(self) -> bool:
        return self.snr_db >= PERFECT_SNR_DB

    @property
    def interval_perfect(self) -> list:
        return [s >= PERFECT_SNR_DB for s in self.interval_snr_db]

    @property
    def perfect_rate(self) -> float:
        flags = self.interval_perfect
        return float(np.mean(flags)) if flags else 0.0

    def to_csv(self) -> str:
        """One row per interval plus a ``summary`` row."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "snr_db", "perfect", "residual", "iterations", "failed"])
        for k, (snr, res, its, bad) in enumerate(
                zip(self.interval_snr_db, self.residuals, self.iterations, self.failed)):
            w.writerow([k, f"{snr:.6f}", int(snr >= PERFECT_SNR_DB), f"{res:.6e}", its, int(bad)])
        w.writerow(["summary", f"{self.snr_db:.6f}", int(self.perfect),
                    f"{float(np.sum(self.residuals)):.6e}", int(np.sum(self.iterations)),
                    int(np.sum(self.failed))])
        return buf.getvalue()


def default_kappa(batch: IntervalBatch) -> np.ndarray:
    """``sigma_n * sqrt(M)`` per interval; zero for noiseless batches."""
    if batch.noise_sigma is None:
        return np.zeros(batch.K)
    return np.asarray(batch.noise_sigma, dtype=float) * np.sqrt(batch.M)


def _kappas(kappa, batch):
    if kappa is None:
        return default_kappa(batch)
    return np.broadcast_to(np.asarray(kappa, dtype=float), (batch.K,))


def _solve_intervals(theta: SensingOperator, batch, kappas, config, basis):
    solver = QcbpSolver(theta, config)
    size = theta.shape[1]
    xs, ds, res, its, failed, conv = [], [], [], [], [], []
    for k in range(batch.K):
        try:
            sol = solver.solve(batch.y[k], float(kappas[k]))
        except (InfeasibleProblemError, np.linalg.LinAlgError) as exc:
            log.warning("interval %d failed: %s", k, exc)
            xs.append(np.zeros(size))
            ds.append(np.zeros(size))
            res.append(float(np.linalg.norm(batch.y[k])))
            its.append(0)
            failed.append(True)
            conv.append(False)
            continue
        xs.append(sol.x)
        ds.append(basis.synthesize(sol.x))
        res.append(sol.residual)
        its.append(sol.iterations)
        failed.append(False)
        conv.append(sol.converged)
    return xs, ds, res, its, failed, conv


def _scores(d_hat: ExpansionCoefficients, reference, K, N):
    if reference is None:
        return float("nan"), [float("nan")] * K
    est = d_hat.window(0, K * N)
    ref = reference.window(0, K * N)
    whole = snr_db(ref, est)
    per = []
    for k in range(K):
        seg = slice(k * N, (k + 1) * N)
        per.append(snr_db(ref[seg], est[seg]) if np.any(ref[seg]) else float("nan"))
    return whole, per


def recover_rd(batch: IntervalBatch, ens: DemodulatorEnsemble, basis: SparsityBasis,
               kappa=None, filt: CorrectionFilter | None = None,
               config: SolverConfig | None = None,
               reference: ExpansionCoefficients | None = None) -> RecoveryReport:
    """CS recovery of the SI samples per interval, then correction filtering.

    ``kappa`` is a scalar, a per-interval array, or ``None`` for the default
    noise-based policy. ``reference`` (the true coefficients) enables SNRs.
    """
    if basis.size != ens.N:
        raise ValueError(f"basis size {basis.size} != N={ens.N}")
    theta = assemble_sensing("rd", ens, None, basis)
    xs, cs, res, its, failed, conv = _solve_intervals(theta, batch, _kappas(kappa, batch), config, basis)
    c = np.concatenate(cs) if cs else np.zeros(0)
    d = apply_correction(filt, c) if filt is not None else c
    d_hat = ExpansionCoefficients(d, origin=0, period=batch.period)
    whole, per = _scores(d_hat, reference, batch.K, ens.N)
    return RecoveryReport(xs, d_hat, whole, per, res, its, failed, conv)


def recover_generalized(batch: IntervalBatch, ens: DemodulatorEnsemble, R: CorrectionMatrix,
                        basis: SparsityBasis, kappa=None,
                        config: SolverConfig | None = None,
                        reference: ExpansionCoefficients | None = None) -> RecoveryReport:
    """Recover expansion coefficients directly with the correction matrix
    embedded in the sensing operator, then stitch the intervals."""
    theta = assemble_sensing("generalized", ens, R, basis)
    xs, ds, res, its, failed, conv = _solve_intervals(theta, batch, _kappas(kappa, batch), config, basis)
    d_hat = concat_intervals(ds, concat_weights(R), R.N)
    d_hat = ExpansionCoefficients(d_hat.values, origin=-overlap(R.p_a), period=batch.period)
    whole, per = _scores(d_hat, reference, batch.K, ens.N)
    return RecoveryReport(xs, d_hat, whole, per, res, its, failed, conv)
