"""Hyperparameter schedules, lemma-bound auditors, and rate fitting.

The auditors turn the convergence analysis into executable checks:

* variable-consensus: (1/K) sum_k ||mean X_t - X_t^k||_F never exceeds
  2 * eta * period * sqrt(min(m, n)) on any orthonormalized-momentum run
  with the exact orthogonalizer.  Deterministic, zero tolerance.
* momentum-consensus: the across-seed mean of (1/K) sum_k ||mean M_t -
  M_t^k||_F stays below 4*beta*eta*period^2*L*sqrt(min(m,n)) +
  2*beta*period*sigma + beta*period*delta at every t (an expectation bound,
  audited statistically over >= 30 seeds).
* gradient-estimation error: the seed-mean of the time-averaged
  || mean_k grad f_k(X_t^k) - mean_k M_t^k ||_F stays below
  (1/T)(sigma/beta) + eta*sqrt(min(m,n))*L/beta + sqrt(beta)*sigma/sqrt(K);
  the heavy-tailed variant carries 2*sqrt(2) prefactors and a
  beta^(1-1/p) / K^(1-1/p) noise term.

Bounds use sqrt(min(m, n)) (the tight norm of an orthonormal factor); the
conventional sqrt(n) variant is reported alongside in the report notes.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import InsufficientPoints, InsufficientRuns, InvalidArg
from .federation import FederationConfig, RunResult, resolve_threads, run_federation
from .metrics import MetricsRow, format_float, time_averaged_grad_norm
from .problems import (
    FAMILY_QUADRATIC,
    NOISE_GAUSSIAN,
    NOISE_HEAVY_TAILED,
    NOISE_NONE,
    NoiseModel,
    ProblemInstance,
)

MIN_ENSEMBLE_RUNS = 30

DERIVATION_FROM_KT = "from_kt"
DERIVATION_EPSILON_REGULAR = "epsilon_regular"
DERIVATION_EPSILON_HEAVY = "epsilon_heavy"

REGIME_REGULAR = "regular"
REGIME_HEAVY = "heavy"

STATUS_PASS = "pass"
STATUS_FAIL = "fail"
STATUS_NOT_APPLICABLE = "not_applicable"

AUDIT_CSV_HEADER = "audit_name,t_or_aggregate,observed,bound,ratio,pass"


@dataclass(frozen=True)
class ScheduleSpec:
    """Hyperparameters (eta, beta, period, iteration budget) plus how they
    were derived.  Invariants: 0 < beta < 1, period >= 2, eta > 0."""

    eta: float
    beta: float
    tau: int
    num_iters: int
    derivation: str


def schedule_from_KT(num_workers: int, num_iters: int) -> ScheduleSpec:
    """Worker/iteration schedule: eta = K^(1/4)/T^(3/4), beta = sqrt(K/T),
    tau = max(2, round(T^(1/4)/K^(3/4))).

    The schedule is only sensible when T is comfortably larger than K;
    raises ``InvalidArg`` whenever the formulas give beta >= 1.
    """
    if num_workers < 1 or num_iters < 1:
        raise InvalidArg("num_workers and num_iters must be >= 1")
    beta = math.sqrt(num_workers / num_iters)
    if beta >= 1.0:
        raise InvalidArg("beta = sqrt(K/T) must be < 1; increase the iteration budget")
    eta = num_workers**0.25 / num_iters**0.75
    tau = max(2, round(num_iters**0.25 / num_workers**0.75))
    return ScheduleSpec(
        eta=eta, beta=beta, tau=tau, num_iters=num_iters, derivation=DERIVATION_FROM_KT
    )


def schedule_from_epsilon(
    num_workers: int,
    epsilon: float,
    regime: str = REGIME_REGULAR,
    tail_p: float | None = None,
) -> ScheduleSpec:
    """Accuracy-driven schedule with unit constants.

    Regular: T = 1/(K eps^4), eta = K eps^3, beta = K eps^2,
    tau = 1/(K eps).  Heavy-tailed with exponent p replaces the powers by
    2p/(p-1), 3p/(2(p-1)), p/(p-1), and p/(2(p-1)); at p = 2 the two
    regimes coincide.  Iteration counts round to the nearest integer and
    the period clamps to >= 2.
    """
    if not 0.0 < epsilon < 1.0:
        raise InvalidArg("epsilon must lie in (0, 1)")
    if num_workers < 1:
        raise InvalidArg("num_workers must be >= 1")
    if regime == REGIME_REGULAR:
        t_exp, eta_exp, beta_exp, tau_exp = 4.0, 3.0, 2.0, 1.0
        derivation = DERIVATION_EPSILON_REGULAR
    elif regime == REGIME_HEAVY:
        if tail_p is None or not 1.0 < tail_p <= 2.0:
            raise InvalidArg("heavy regime needs a tail exponent in (1, 2]")
        t_exp = 2.0 * tail_p / (tail_p - 1.0)
        eta_exp = 3.0 * tail_p / (2.0 * (tail_p - 1.0))
        beta_exp = tail_p / (tail_p - 1.0)
        tau_exp = tail_p / (2.0 * (tail_p - 1.0))
        derivation = DERIVATION_EPSILON_HEAVY
    else:
        raise InvalidArg(f"unknown regime {regime!r}")
    beta = num_workers * epsilon**beta_exp
    if beta >= 1.0:
        raise InvalidArg("epsilon too large for this worker count (beta >= 1)")
    num_iters = max(1, round(1.0 / (num_workers * epsilon**t_exp)))
    eta = num_workers * epsilon**eta_exp
    tau = max(2, round(1.0 / (num_workers * epsilon**tau_exp)))
    return ScheduleSpec(eta=eta, beta=beta, tau=tau, num_iters=num_iters, derivation=derivation)


@dataclass(frozen=True)
class AuditEntry:
    """One checked quantity.  ``bound`` is the binding limit used for the
    ratio column; ``passed`` may encode a two-sided or informational check."""

    label: str
    observed: float
    bound: float
    passed: bool

    @staticmethod
    def le(label: str, observed: float, bound: float) -> "AuditEntry":
        return AuditEntry(label, observed, bound, observed <= bound)

    @staticmethod
    def info(label: str, observed: float) -> "AuditEntry":
        return AuditEntry(label, observed, math.nan, True)

    @property
    def ratio(self) -> float:
        if not math.isfinite(self.bound) or self.bound == 0:
            return math.nan
        return self.observed / self.bound


@dataclass
class AuditReport:
    """Outcome of one auditor: entries, overall status, and free-form notes."""

    name: str
    entries: list[AuditEntry]
    status: str
    notes: list[str]

    @property
    def passed(self) -> bool:
        return self.status != STATUS_FAIL

    def worst_ratio(self) -> float:
        ratios = [e.ratio for e in self.entries if math.isfinite(e.ratio)]
        return max(ratios) if ratios else math.nan

    def csv_rows(self) -> list[str]:
        return [
            ",".join(
                [
                    self.name,
                    entry.label,
                    format_float(entry.observed),
                    format_float(entry.bound),
                    format_float(entry.ratio),
                    "true" if entry.passed else "false",
                ]
            )
            for entry in self.entries
        ]

    def to_text(self) -> str:
        lines = [f"audit {self.name}: {self.status.upper()}"]
        lines += [f"  note: {note}" for note in self.notes]
        shown = self.entries if len(self.entries) <= 12 else self.entries[:12]
        for entry in shown:
            mark = "ok " if entry.passed else "VIOLATION"
            lines.append(
                f"  {mark} {entry.label}: observed={entry.observed:.6g} "
                f"bound={entry.bound:.6g} ratio={entry.ratio:.4g}"
            )
        if len(self.entries) > len(shown):
            lines.append(f"  ... {len(self.entries) - len(shown)} more entries in the CSV")
        return "\n".join(lines)


def _finish(name: str, entries: list[AuditEntry], notes: list[str]) -> AuditReport:
    status = STATUS_PASS if all(e.passed for e in entries) else STATUS_FAIL
    return AuditReport(name=name, entries=entries, status=status, notes=notes)


def _not_applicable(name: str, reason: str) -> AuditReport:
    return AuditReport(name=name, entries=[], status=STATUS_NOT_APPLICABLE, notes=[reason])


def write_audit_csv(path, reports: Iterable[AuditReport]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(AUDIT_CSV_HEADER + "\n")
        for report in reports:
            for line in report.csv_rows():
                fh.write(line + "\n")


def run_ensemble(
    config: FederationConfig,
    problem: ProblemInstance,
    noise: NoiseModel,
    seeds: Sequence[int],
    threads: int | None = None,
) -> list[RunResult]:
    """Independent runs differing only in seed, returned in seed order."""
    configs = [replace(config, seed=s) for s in seeds]
    pool = min(resolve_threads(threads), len(configs))
    if pool > 1:
        with ThreadPoolExecutor(max_workers=pool) as executor:
            return list(
                executor.map(lambda c: run_federation(c, problem, noise, threads=1), configs)
            )
    return [run_federation(c, problem, noise, threads=1) for c in configs]


def _bound_note(sqrt_min: float, n: int, label: str) -> str:
    return (
        f"{label} uses sqrt(min(m,n)) = {sqrt_min:.6g}; the conventional "
        f"sqrt(n) = {math.sqrt(n):.6g} variant is looser or equal for tall shapes"
    )


def audit_consensus_x(
    run: RunResult | Sequence[MetricsRow],
    config: FederationConfig,
    problem: ProblemInstance,
) -> AuditReport:
    """Deterministic variable-consensus bound, checked at every iteration."""
    if not config.optimizer.uses_exact_ortho:
        return _not_applicable(
            "consensus_x",
            "bound requires orthonormalized update directions (exact orthogonalizer)",
        )
    rows = list(run)
    sqrt_min = math.sqrt(min(problem.m, problem.n))
    bound = 2.0 * config.eta * config.period * sqrt_min
    entries = [
        AuditEntry.le(f"t={row.t}", row.consensus_x, bound)
        for row in rows
        if row.consensus_x > bound
    ]
    worst = max(row.consensus_x for row in rows)
    entries.append(AuditEntry.le("aggregate_max", worst, bound))
    notes = [
        _bound_note(sqrt_min, problem.n, "bound 2*eta*tau*sqrt(min(m,n))"),
        f"{len(rows)} iterations checked, {sum(not e.passed for e in entries)} violations",
    ]
    return _finish("consensus_x", entries, notes)


def _require_expectation_preconditions(
    name: str, results: Sequence[RunResult], config: FederationConfig, problem: ProblemInstance
) -> AuditReport | None:
    if len(results) < MIN_ENSEMBLE_RUNS:
        raise InsufficientRuns(
            f"{name} needs >= {MIN_ENSEMBLE_RUNS} seeded runs, got {len(results)}"
        )
    if not config.optimizer.uses_exact_ortho:
        return _not_applicable(name, "expectation bounds are audited under the exact orthogonalizer")
    if problem.family != FAMILY_QUADRATIC:
        return _not_applicable(name, "expectation bounds need exactly known problem constants")
    if not config.sync_momentum:
        return _not_applicable(name, "momentum bound telescopes from the last momentum sync")
    return None


def audit_consensus_m(
    results: Sequence[RunResult],
    config: FederationConfig,
    problem: ProblemInstance,
    sigma: float,
    delta: float,
) -> AuditReport:
    """Momentum-consensus expectation bound, audited via the seed mean per t."""
    guard = _require_expectation_preconditions("consensus_m", results, config, problem)
    if guard is not None:
        return guard
    sqrt_min = math.sqrt(min(problem.m, problem.n))
    smooth = problem.smoothness
    bound = (
        4.0 * config.beta * config.eta * config.period**2 * smooth * sqrt_min
        + 2.0 * config.beta * config.period * sigma
        + config.beta * config.period * delta
    )
    per_t = np.array([[row.consensus_m for row in run] for run in results])
    means = per_t.mean(axis=0)
    entries = [
        AuditEntry.le(f"t={t}", float(means[t]), bound)
        for t in range(means.size)
        if means[t] > bound
    ]
    worst_t = int(np.argmax(means))
    entries.append(AuditEntry.le(f"aggregate_max(t={worst_t})", float(means[worst_t]), bound))
    notes = [
        _bound_note(sqrt_min, problem.n, "bound 4*beta*eta*tau^2*L*sqrt(min(m,n)) + 2*beta*tau*sigma + beta*tau*delta"),
        f"seed mean over {len(results)} runs at each of {means.size} iterations",
    ]
    return _finish("consensus_m", entries, notes)


def audit_grad_est_error(
    results: Sequence[RunResult],
    config: FederationConfig,
    problem: ProblemInstance,
    noise: NoiseModel,
) -> AuditReport:
    """Gradient-estimation-error bound on the seed mean of the time average."""
    guard = _require_expectation_preconditions("grad_est_err", results, config, problem)
    if guard is not None:
        return guard
    sqrt_min = math.sqrt(min(problem.m, problem.n))
    smooth = problem.smoothness
    k = config.num_workers
    t_total = config.num_iters
    sigma = noise.sigma
    if noise.kind == NOISE_HEAVY_TAILED:
        p = noise.tail_p
        bound = (
            (2.0 * math.sqrt(2.0) * sigma) / (config.beta * t_total)
            + config.eta * sqrt_min * smooth / config.beta
            + 2.0 * math.sqrt(2.0) * config.beta ** (1.0 - 1.0 / p) * sigma / k ** (1.0 - 1.0 / p)
        )
        name = "grad_est_err_heavy"
    elif noise.kind in (NOISE_GAUSSIAN, NOISE_NONE):
        bound = (
            sigma / (config.beta * t_total)
            + config.eta * sqrt_min * smooth / config.beta
            + math.sqrt(config.beta) * sigma / math.sqrt(k)
        )
        name = "grad_est_err"
    else:
        raise InvalidArg(f"no gradient-error bound for noise kind {noise.kind!r}")
    time_avgs = [sum(row.grad_est_err for row in run) / len(run) for run in results]
    observed = float(np.mean(time_avgs))
    entries = [
        AuditEntry.le("aggregate_mean_of_time_avgs", observed, bound),
        AuditEntry.info("max_single_seed_time_avg", float(np.max(time_avgs))),
    ]
    notes = [
        _bound_note(sqrt_min, problem.n, "lag term eta*sqrt(min(m,n))*L/beta"),
        f"seed mean over {len(results)} runs of the {t_total}-iteration time average",
    ]
    return _finish(name, entries, notes)


@dataclass(frozen=True)
class RateFit:
    """Least-squares slope of log(avg grad norm) against log(K*T)."""

    slope: float
    intercept: float
    residual: float


def fit_rate_exponent(points: Sequence[tuple[float, float]]) -> RateFit:
    """Fit the scaling exponent from (K*T, time-averaged gradient norm) pairs.

    Requires at least 4 points spanning at least two decades of K*T.
    """
    if len(points) < 4:
        raise InsufficientPoints(f"need >= 4 points, got {len(points)}")
    kt = np.array([p[0] for p in points], dtype=float)
    val = np.array([p[1] for p in points], dtype=float)
    if kt.min() <= 0 or val.min() <= 0:
        raise InvalidArg("points must be positive for a log-log fit")
    if kt.max() / kt.min() < 100.0:
        raise InsufficientPoints("points must span at least two decades of K*T")
    log_kt = np.log(kt)
    log_val = np.log(val)
    slope, intercept = np.polyfit(log_kt, log_val, deg=1)
    fitted = slope * log_kt + intercept
    residual = float(np.sqrt(np.mean((log_val - fitted) ** 2)))
    return RateFit(slope=float(slope), intercept=float(intercept), residual=residual)


def grad_norm_summary(rows: Sequence[MetricsRow]) -> dict[str, float]:
    """Unsquared (audited) and squared (reported-only) time averages."""
    return {
        "avg_grad_norm": time_averaged_grad_norm(rows),
        "avg_grad_norm_sq": time_averaged_grad_norm(rows, squared=True),
    }
