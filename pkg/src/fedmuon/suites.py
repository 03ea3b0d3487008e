"""Default audit suites.

Each suite wires up the standard desk-scale configuration for one class of
checks and returns one or more AuditReports.  The CLI's ``audit`` command and
the acceptance tests both drive these, so the parameters below are the
single source of truth for the shipped guarantees:

* consensus_x: 36-point grid (workers x period x sigma x delta) of T = 256
  exact-orthogonalizer runs on the 8x4 quadratic testbed; also verifies the
  per-step update-norm identity ||X' - X||_F = eta * sqrt(rank) inline.
* consensus_m / grad_err: 30-seed ensembles, 4 workers, period 4, the
  worker/iteration schedule at T = 1024, sigma = delta = 0.5.
* rate: single-worker runs at K*T in {2^8 .. 2^16} with derived schedules;
  fits the log-log slope of the time-averaged gradient norm.
* speedup: 1 vs 4 workers at fixed T = 4096 under the derived schedules.
* heavy_tail: tail exponent 1.2 Student-t noise at sigma = 1; the
  orthonormalized method must stay finite on every seed and beat plain
  LocalSGD (same eta) on most seeds without any clipping.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .analysis import (
    AuditEntry,
    AuditReport,
    _finish,
    audit_consensus_m,
    audit_consensus_x,
    audit_grad_est_error,
    fit_rate_exponent,
    run_ensemble,
    schedule_from_KT,
)
from .errors import NonFiniteState
from .federation import FederationConfig, RunResult, run_federation
from .metrics import time_averaged_grad_norm
from .optim import OptimizerKind
from .problems import NoiseModel, make_quadratic_align, make_rayleigh_nonconvex

UPDATE_NORM_TOL = 1e-8
RATE_SLOPE_BAND = (-0.45, -0.10)
SPEEDUP_MAX_RATIO = 1.1
HEAVY_TAIL_MIN_WINS = 24
DEFAULT_RATE_KT_POINTS = (2**8, 2**10, 2**12, 2**14, 2**16)

_PROBLEM_SEED = 1234
_RUN_SEED_BASE = 5000


def _quad_problem(num_workers: int, delta: float, m: int = 8, n: int = 4):
    return make_quadratic_align(m, n, num_workers, delta, seed=_PROBLEM_SEED)


def suite_consensus_x(
    num_iters: int = 256,
    eta: float = 0.05,
    beta: float = 0.25,
    threads: int | None = None,
) -> list[AuditReport]:
    """Deterministic variable-consensus grid plus the update-norm identity."""
    grid_entries: list[AuditEntry] = []
    worst_gap = 0.0
    violations = 0
    total_rows = 0
    index = 0
    for num_workers in (2, 4, 8):
        for delta in (0.0, 1.0):
            problem = _quad_problem(num_workers, delta)
            for period in (2, 4, 16):
                for sigma in (0.0, 0.5):
                    noise = NoiseModel.gaussian(sigma) if sigma else NoiseModel.none()
                    config = FederationConfig(
                        num_workers=num_workers,
                        num_iters=num_iters,
                        period=period,
                        eta=eta,
                        beta=beta,
                        seed=_RUN_SEED_BASE + index,
                        optimizer=OptimizerKind.fedmuon(),
                    )
                    index += 1
                    result = run_federation(config, problem, noise, threads=threads)
                    report = audit_consensus_x(result, config, problem)
                    label = f"K{num_workers}_tau{period}_sigma{sigma}_delta{delta}"
                    worst = max(row.consensus_x for row in result)
                    bound = 2.0 * eta * period * math.sqrt(min(problem.m, problem.n))
                    grid_entries.append(AuditEntry.le(label, worst, bound))
                    violations += sum(not e.passed for e in report.entries)
                    total_rows += len(result)
                    worst_gap = max(worst_gap, result.max_update_norm_gap)
    grid_report = _finish(
        "consensus_x",
        grid_entries,
        [
            f"{index} runs, {total_rows} iterations audited, {violations} violations",
            "bound: 2*eta*tau*sqrt(min(m,n)) at every iteration, zero tolerance",
        ],
    )
    norm_report = _finish(
        "update_norm_identity",
        [AuditEntry.le("max_abs_gap", worst_gap, UPDATE_NORM_TOL)],
        ["| ||X'-X||_F - eta*sqrt(rank(M)) | over every local step of the grid"],
    )
    return [grid_report, norm_report]


@dataclass
class BoundEnsemble:
    """A 30-seed ensemble shared by the expectation-bound audits."""

    config: FederationConfig
    problem: object
    noise: NoiseModel
    results: list[RunResult]
    sigma: float
    delta: float


def make_bound_ensemble(
    noise_kind: str = "gaussian",
    num_seeds: int = 30,
    num_workers: int = 4,
    period: int = 4,
    num_iters: int = 256,
    sigma: float = 0.5,
    delta: float = 0.5,
    tail_p: float = 1.5,
    dof: float = 1.8,
    threads: int | None = None,
) -> BoundEnsemble:
    """Seeded ensemble on the quadratic testbed with the derived schedule.

    eta and beta come from the worker/iteration schedule; the period is
    pinned separately (the bounds hold for any period >= 1).  The default
    iteration budget keeps beta large enough that the momentum-consensus
    bound also covers the block before the first synchronization, where
    momenta are still the per-worker initial gradients (the bound's
    telescoping argument starts at the last momentum sync, so with much
    smaller beta that pre-sync block can sit above it).
    """
    schedule = schedule_from_KT(num_workers, num_iters)
    problem = _quad_problem(num_workers, delta)
    if noise_kind == "gaussian":
        noise = NoiseModel.gaussian(sigma)
    elif noise_kind == "heavy":
        noise = NoiseModel.heavy_tailed(sigma, tail_p, problem.m, problem.n, dof=dof)
    else:
        raise ValueError(f"unknown noise kind {noise_kind!r}")
    config = FederationConfig(
        num_workers=num_workers,
        num_iters=num_iters,
        period=period,
        eta=schedule.eta,
        beta=schedule.beta,
        seed=_RUN_SEED_BASE,
        optimizer=OptimizerKind.fedmuon(),
    )
    seeds = [_RUN_SEED_BASE + i for i in range(num_seeds)]
    results = run_ensemble(config, problem, noise, seeds, threads=threads)
    return BoundEnsemble(
        config=config, problem=problem, noise=noise, results=results, sigma=sigma, delta=delta
    )


def suite_consensus_m(
    ensemble: BoundEnsemble | None = None, num_seeds: int = 30, threads: int | None = None
) -> list[AuditReport]:
    ensemble = ensemble or make_bound_ensemble("gaussian", num_seeds=num_seeds, threads=threads)
    report = audit_consensus_m(
        ensemble.results, ensemble.config, ensemble.problem, ensemble.sigma, ensemble.delta
    )
    return [report]


def suite_grad_err(
    regular: BoundEnsemble | None = None,
    heavy: BoundEnsemble | None = None,
    num_seeds: int = 30,
    threads: int | None = None,
) -> list[AuditReport]:
    regular = regular or make_bound_ensemble("gaussian", num_seeds=num_seeds, threads=threads)
    heavy = heavy or make_bound_ensemble("heavy", num_seeds=num_seeds, threads=threads)
    reports = [
        audit_grad_est_error(regular.results, regular.config, regular.problem, regular.noise),
        audit_grad_est_error(heavy.results, heavy.config, heavy.problem, heavy.noise),
    ]
    return reports


def suite_rate(
    kt_points: tuple[int, ...] = DEFAULT_RATE_KT_POINTS,
    seeds_per_point: int = 3,
    sigma: float = 0.5,
    threads: int | None = None,
) -> list[AuditReport]:
    """Scaling of the time-averaged gradient norm against the K*T budget.

    Runs a single worker per point (delta is necessarily 0) and fits the
    log-log slope across per-point seed means.  With noise the slope must
    land in the acceptance band around -1/4; in the noiseless case only a
    monotone decrease is required.
    """
    problem = _quad_problem(1, 0.0)
    noise = NoiseModel.gaussian(sigma) if sigma else NoiseModel.none()
    points: list[tuple[float, float]] = []
    squared_avgs: list[float] = []
    entries: list[AuditEntry] = []
    for kt in kt_points:
        schedule = schedule_from_KT(1, kt)
        config = FederationConfig(
            num_workers=1,
            num_iters=kt,
            period=schedule.tau,
            eta=schedule.eta,
            beta=schedule.beta,
            seed=_RUN_SEED_BASE,
            optimizer=OptimizerKind.fedmuon(),
        )
        seeds = [_RUN_SEED_BASE + i for i in range(seeds_per_point)]
        results = run_ensemble(config, problem, noise, seeds, threads=threads)
        mean_avg = float(np.mean([time_averaged_grad_norm(r) for r in results]))
        squared_avgs.append(
            float(np.mean([time_averaged_grad_norm(r, squared=True) for r in results]))
        )
        points.append((float(kt), mean_avg))
        entries.append(AuditEntry.info(f"KT={kt}", mean_avg))
    squared_note = (
        "squared time averages (reported, not audited): "
        + ", ".join(f"{kt}:{sq:.4g}" for (kt, _), sq in zip(points, squared_avgs))
    )
    if sigma == 0.0:
        decreasing = all(points[i + 1][1] <= points[i][1] for i in range(len(points) - 1))
        entries.append(
            AuditEntry("monotone_decrease", float(not decreasing), 0.0, decreasing)
        )
        return [_finish("rate", entries, ["noiseless mode: monotone decrease only", squared_note])]
    fit = fit_rate_exponent(points)
    lo, hi = RATE_SLOPE_BAND
    entries.append(AuditEntry("slope_upper", fit.slope, hi, fit.slope <= hi))
    entries.append(AuditEntry("slope_lower", fit.slope, lo, fit.slope >= lo))
    notes = [
        f"fitted slope {fit.slope:.4f} (band [{lo}, {hi}]), residual {fit.residual:.4f}",
        f"{seeds_per_point} seeds per point, seed means fitted",
        squared_note,
    ]
    return [_finish("rate", entries, notes)]


def suite_speedup(
    num_iters: int = 4096,
    sigma: float = 0.5,
    num_seeds: int = 30,
    threads: int | None = None,
) -> list[AuditReport]:
    """Adding workers at fixed T must not hurt the time-averaged grad norm."""
    noise = NoiseModel.gaussian(sigma)
    means = {}
    for num_workers in (1, 4):
        problem = _quad_problem(num_workers, 0.0)
        schedule = schedule_from_KT(num_workers, num_iters)
        config = FederationConfig(
            num_workers=num_workers,
            num_iters=num_iters,
            period=schedule.tau,
            eta=schedule.eta,
            beta=schedule.beta,
            seed=_RUN_SEED_BASE,
            optimizer=OptimizerKind.fedmuon(),
        )
        seeds = [_RUN_SEED_BASE + i for i in range(num_seeds)]
        results = run_ensemble(config, problem, noise, seeds, threads=threads)
        means[num_workers] = float(np.mean([time_averaged_grad_norm(r) for r in results]))
    ratio = means[4] / means[1]
    entries = [
        AuditEntry.info("K1_mean_avg_grad_norm", means[1]),
        AuditEntry.info("K4_mean_avg_grad_norm", means[4]),
        AuditEntry.le("K4_over_K1_ratio", ratio, SPEEDUP_MAX_RATIO),
    ]
    notes = [f"{num_seeds} seeds, T={num_iters}, derived schedules per worker count"]
    return [_finish("speedup", entries, notes)]


def suite_heavy_tail(
    num_iters: int = 512,
    num_workers: int = 4,
    period: int = 4,
    eta: float = 0.2,
    beta: float = 0.25,
    sigma: float = 1.0,
    tail_p: float = 1.2,
    dof: float = 1.5,
    num_seeds: int = 30,
    threads: int | None = None,
) -> list[AuditReport]:
    """No-clipping robustness under infinite-variance noise.

    Runs the orthonormalized method and plain LocalSGD with the same eta on
    matched seeds over the nonconvex Gram-matching problem, whose gradient
    grows cubically away from the optimum.  A single heavy-tailed draw that
    throws a LocalSGD worker past ~sqrt(2/eta) makes its unbounded steps
    diverge, while the orthonormalized step length can never exceed
    eta*sqrt(min(m, n)); no run uses any clipping.  The orthonormalized
    method must produce finite iterates on every seed and achieve the lower
    final time-averaged gradient norm on most (a diverged baseline seed
    counts as a loss for the baseline).
    """
    problem = make_rayleigh_nonconvex(8, 4, num_workers, seed=_PROBLEM_SEED)
    noise = NoiseModel.heavy_tailed(sigma, tail_p, problem.m, problem.n, dof=dof)
    base = dict(
        num_workers=num_workers,
        num_iters=num_iters,
        period=period,
        eta=eta,
        beta=beta,
        seed=_RUN_SEED_BASE,
    )
    muon_config = FederationConfig(optimizer=OptimizerKind.fedmuon(), **base)
    sgd_config = FederationConfig(optimizer=OptimizerKind.local_sgd(), **base)
    seeds = [_RUN_SEED_BASE + i for i in range(num_seeds)]
    muon_runs = run_ensemble(muon_config, problem, noise, seeds, threads=threads)
    wins = 0
    nonfinite = 0
    blowups = 0
    muon_avgs = []
    sgd_avgs = []
    for seed, muon_run in zip(seeds, muon_runs):
        if not all(row.is_finite() for row in muon_run):
            nonfinite += 1  # pragma: no cover - bounded updates keep iterates finite
        muon_avg = time_averaged_grad_norm(muon_run)
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                sgd_run = run_federation(
                    replace(sgd_config, seed=seed), problem, noise, threads=threads
                )
            sgd_avg = time_averaged_grad_norm(sgd_run)
        except NonFiniteState:
            sgd_avg = math.inf
            blowups += 1
        muon_avgs.append(muon_avg)
        sgd_avgs.append(sgd_avg)
        if muon_avg < sgd_avg:
            wins += 1
    entries = [
        AuditEntry.le("nonfinite_seeds", float(nonfinite), 0.0),
        AuditEntry(
            f"wins_vs_localsgd_of_{num_seeds}",
            float(wins),
            float(HEAVY_TAIL_MIN_WINS),
            wins >= HEAVY_TAIL_MIN_WINS,
        ),
        AuditEntry.info("localsgd_blowup_seeds", float(blowups)),
        AuditEntry.info("median_avg_grad_norm", float(np.median(muon_avgs))),
        AuditEntry.info("localsgd_median_avg_grad_norm", float(np.median(sgd_avgs))),
    ]
    notes = [
        f"tail exponent {tail_p}, dof {dof}, sigma {sigma}, shared eta {eta}",
        "no clipping anywhere; baseline seeds that blow up count as losses for it",
    ]
    return [_finish("heavy_tail", entries, notes)]


SUITES = {
    "consensus_x": suite_consensus_x,
    "consensus_m": suite_consensus_m,
    "grad_err": suite_grad_err,
    "rate": suite_rate,
    "speedup": suite_speedup,
    "heavy_tail": suite_heavy_tail,
}
