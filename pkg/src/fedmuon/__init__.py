"""Desk-scale federated optimization with orthonormalized momentum.

Workers take local steps whose direction is the orthonormal polar factor of
their gradient momentum; every few iterations both iterates and momenta are
averaged across workers.  The package pairs the optimizer with executable
audits of its consensus/gradient-error bounds, hyperparameter schedules, and
scaling behavior on synthetic matrix objectives, including heavy-tailed
gradient-noise regimes.
"""

__version__ = "0.1.0"

from .analysis import (
    AuditEntry,
    AuditReport,
    RateFit,
    ScheduleSpec,
    audit_consensus_m,
    audit_consensus_x,
    audit_grad_est_error,
    fit_rate_exponent,
    run_ensemble,
    schedule_from_KT,
    schedule_from_epsilon,
)
from .federation import FederationConfig, RoundLog, RunResult, average_states, run_federation
from .metrics import MetricsRow, read_metrics_csv, time_averaged_grad_norm, write_metrics_csv
from .optim import (
    OptimizerKind,
    WorkerState,
    init_worker_state,
    local_sgdm_step,
    muon_local_step,
)
from .ortho import OrthoResult, newton_schulz, orthonormalize_exact
from .problems import (
    NoiseModel,
    ProblemInstance,
    calibrate_heavy_tail,
    make_quadratic_align,
    make_rayleigh_nonconvex,
    stochastic_gradient,
)

__all__ = [
    "AuditEntry",
    "AuditReport",
    "FederationConfig",
    "MetricsRow",
    "NoiseModel",
    "OptimizerKind",
    "OrthoResult",
    "ProblemInstance",
    "RateFit",
    "RoundLog",
    "RunResult",
    "ScheduleSpec",
    "WorkerState",
    "audit_consensus_m",
    "audit_consensus_x",
    "audit_grad_est_error",
    "average_states",
    "calibrate_heavy_tail",
    "fit_rate_exponent",
    "init_worker_state",
    "local_sgdm_step",
    "make_quadratic_align",
    "make_rayleigh_nonconvex",
    "muon_local_step",
    "newton_schulz",
    "orthonormalize_exact",
    "read_metrics_csv",
    "run_ensemble",
    "run_federation",
    "schedule_from_KT",
    "schedule_from_epsilon",
    "stochastic_gradient",
    "time_averaged_grad_norm",
    "write_metrics_csv",
]
