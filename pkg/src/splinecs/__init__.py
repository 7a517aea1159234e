"""Compressive acquisition of spline signals with B-spline sampling kernels."""

from .acquisition import (IntervalBatch, NoiseModel, ZohSignal, add_noise, measure_quadrature,
                          measure_zoh, read_wav, write_wav, zoh_embed)
from .recovery import (InfeasibleProblemError, QcbpProblem, QcbpSolution, QcbpSolver,
                       RecoveryReport, SolverConfig, recover_generalized, recover_rd,
                       snr_db, solve_qcbp)
from .sensing import (DemodulatorEnsemble, SensingOperator, SparsityBasis, assemble_sensing,
                      gen_bernoulli, gen_wht_multilevel, make_sparsity_basis)
from .si_model import (CorrectionFilter, CorrectionMatrix, UnstableFilterError, apply_correction,
                       build_correction_matrix, concat_intervals, concat_weights,
                       make_correction_filter)
from .spline_core import (BSplineKernel, CrossCorrelation, ExpansionCoefficients,
                          cross_correlation, eval_kernel, synthesize)

__version__ = "0.1.0"

__all__ = [
    "IntervalBatch",
    "NoiseModel",
    "ZohSignal",
    "add_noise",
    "measure_quadrature",
    "measure_zoh",
    "read_wav",
    "write_wav",
    "zoh_embed",
    "InfeasibleProblemError",
    "QcbpProblem",
    "QcbpSolution",
    "QcbpSolver",
    "RecoveryReport",
    "SolverConfig",
    "recover_generalized",
    "recover_rd",
    "snr_db",
    "solve_qcbp",
    "DemodulatorEnsemble",
    "SensingOperator",
    "SparsityBasis",
    "assemble_sensing",
    "gen_bernoulli",
    "gen_wht_multilevel",
    "make_sparsity_basis",
    "CorrectionFilter",
    "CorrectionMatrix",
    "UnstableFilterError",
    "apply_correction",
    "build_correction_matrix",
    "concat_intervals",
    "concat_weights",
    "make_correction_filter",
    "BSplineKernel",
    "CrossCorrelation",
    "ExpansionCoefficients",
    "cross_correlation",
    "eval_kernel",
    "synthesize",
]
