"""Bulk-synchronous federation driver.

Runs K workers through T iterations.  Every iteration each worker takes one
local step; whenever (t + 1) is a multiple of the communication period, both
iterates and momenta are averaged across workers and broadcast (the first
synchronization therefore happens only after a full period of local steps).
Metrics are recorded at the across-worker mean iterate *before* each
iteration's update.

Determinism: all reductions sum in ascending worker-id order, worker random
streams are counter-based, and local steps are pure per worker, so results
are bitwise identical whether workers run sequentially or on a thread pool.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigInvalid, EmptyWorkerSet, ShapeMismatch
from .metrics import MetricsRow
from .optim import (
    ALGO_FEDMUON,
    ALGO_LOCALSGD,
    OptimizerKind,
    WorkerState,
    init_worker_state,
    local_sgdm_step,
    muon_local_step,
)
from .problems import NoiseModel, ProblemInstance, stochastic_gradient
from .rng import spawn_streams

THREADS_ENV_VAR = "FEDMUON_THREADS"

LR_CONSTANT = "constant"
LR_COSINE = "cosine"


def resolve_threads(explicit: int | None = None) -> int:
    """Thread budget: explicit argument, else FEDMUON_THREADS, else 1 (0 = auto)."""
    value = explicit
    if value is None:
        raw = os.environ.get(THREADS_ENV_VAR, "").strip()
        value = int(raw) if raw else 1
    if value < 0:
        raise ConfigInvalid("thread count must be >= 0")
    if value == 0:
        return os.cpu_count() or 1
    return value


@dataclass(frozen=True)
class FederationConfig:
    """Everything that determines a run besides the problem and the noise."""

    num_workers: int
    num_iters: int
    period: int
    eta: float
    beta: float
    seed: int
    optimizer: OptimizerKind
    sync_momentum: bool = True
    lr_schedule: str = LR_CONSTANT

    def validate(self) -> None:
        if self.num_workers < 1:
            raise ConfigInvalid("num_workers must be >= 1")
        if self.num_iters < 1:
            raise ConfigInvalid("num_iters must be >= 1")
        if self.period < 1:
            raise ConfigInvalid("period must be >= 1")
        if self.eta <= 0:
            raise ConfigInvalid("eta must be positive")
        if not 0.0 < self.beta <= 1.0:
            raise ConfigInvalid("beta must lie in (0, 1]")
        if self.lr_schedule not in (LR_CONSTANT, LR_COSINE):
            raise ConfigInvalid(f"unknown lr schedule {self.lr_schedule!r}")
        self.optimizer.validate()

    def eta_at(self, t: int) -> float:
        if self.lr_schedule == LR_COSINE:
            return self.eta * 0.5 * (1.0 + math.cos(math.pi * t / self.num_iters))
        return self.eta


@dataclass(frozen=True)
class RoundLog:
    """Post-update snapshot of iteration t: the across-worker means and each
    worker's Frobenius deviation from the mean iterate.  Deviations are all
    zero at iterations with (t + 1) % period == 0, immediately after
    communication."""

    iteration: int
    mean_x: np.ndarray
    mean_m: np.ndarray
    deviations: tuple[float, ...]


@dataclass
class RunResult(Sequence):
    """Sequence of per-iteration MetricsRow plus run-level diagnostics.

    ``max_update_norm_gap`` is the largest observed |  ||X' - X||_F -
    eta_t * sqrt(rank(M)) | over all local steps (exact-orthogonalizer
    momentum runs only; None otherwise).
    """

    rows: list[MetricsRow]
    config: FederationConfig
    noise: NoiseModel
    problem: ProblemInstance
    final_states: list[WorkerState]
    max_update_norm_gap: float | None = None
    round_logs: list[RoundLog] | None = None
    elapsed_seconds: float = 0.0

    def __len__(self) -> int:
        return len(self.rows)

    def __getitem__(self, idx):
        return self.rows[idx]


def _ordered_mean(stack: np.ndarray) -> np.ndarray:
    """Mean over axis 0, summed in ascending index order.

    When every slice is bitwise identical (the post-communication state) the
    first slice is returned directly, so consensus metrics are exactly zero
    rather than within an ulp of it.
    """
    first = stack[0]
    if all(np.array_equal(first, stack[k]) for k in range(1, stack.shape[0])):
        return first.copy()
    acc = np.zeros_like(first)
    for k in range(stack.shape[0]):
        acc += stack[k]
    return acc / stack.shape[0]


def average_states(states: Sequence[WorkerState]) -> tuple[np.ndarray, np.ndarray]:
    """Across-worker means of iterates and momenta, in ascending worker id."""
    if not states:
        raise EmptyWorkerSet("cannot average zero workers")
    ordered = sorted(states, key=lambda s: s.worker_id)
    shape = ordered[0].x.shape
    for s in ordered:
        if s.x.shape != shape or s.momentum.shape != shape:
            raise ShapeMismatch("worker states have inhomogeneous shapes")
    mean_x = _ordered_mean(np.stack([s.x for s in ordered]))
    mean_m = _ordered_mean(np.stack([s.momentum for s in ordered]))
    return mean_x, mean_m


def _measure(t: int, states: list[WorkerState], problem: ProblemInstance) -> MetricsRow:
    xs = np.stack([s.x for s in states])
    ms = np.stack([s.momentum for s in states])
    x_bar = _ordered_mean(xs)
    m_bar = _ordered_mean(ms)
    k = len(states)
    consensus_x = sum(float(np.linalg.norm(x_bar - xs[i])) for i in range(k)) / k
    consensus_m = sum(float(np.linalg.norm(m_bar - ms[i])) for i in range(k)) / k
    grad_est_err = float(np.linalg.norm(problem.mean_worker_gradient(xs) - m_bar))
    return MetricsRow(
        t=t,
        f_mean=problem.objective(x_bar),
        grad_norm=float(np.linalg.norm(problem.full_gradient(x_bar))),
        consensus_x=consensus_x,
        consensus_m=consensus_m,
        grad_est_err=grad_est_err,
    )


def run_federation(
    config: FederationConfig,
    problem: ProblemInstance,
    noise: NoiseModel | None = None,
    x0: np.ndarray | None = None,
    collect_round_logs: bool = False,
    threads: int | None = None,
) -> RunResult:
    """Execute the full federated run and return one MetricsRow per iteration.

    All workers start from the same ``x0`` (zero matrix by default) with
    momenta seeded by their step-0 stochastic gradients.  ``threads`` > 1
    runs worker steps on a thread pool; output is bitwise independent of the
    thread count.
    """
    config.validate()
    noise = noise or NoiseModel.none()
    if config.num_workers != problem.num_workers:
        raise ConfigInvalid(
            f"config has {config.num_workers} workers, problem has {problem.num_workers}"
        )
    if x0 is None:
        x0 = np.zeros(problem.shape)
    else:
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape != problem.shape:
            raise ShapeMismatch(f"x0 shape {x0.shape} != problem shape {problem.shape}")

    start = time.perf_counter()

    def make_oracle(k: int):
        def oracle(x, gen):
            return stochastic_gradient(problem, k, x, noise, gen)

        return oracle

    oracles = [make_oracle(k) for k in range(config.num_workers)]
    streams = spawn_streams(config.seed, config.num_workers)
    states = [
        init_worker_state(k, x0, oracles[k], streams[k]) for k in range(config.num_workers)
    ]

    optimizer = config.optimizer
    ortho = optimizer.make_orthogonalizer()
    track_update_norm = optimizer.uses_exact_ortho
    beta = 1.0 if optimizer.algo == ALGO_LOCALSGD else config.beta

    def step_worker(state: WorkerState, eta_t: float) -> WorkerState:
        oracle = oracles[state.worker_id]
        if optimizer.algo == ALGO_FEDMUON:
            return muon_local_step(state, oracle, eta_t, beta, ortho)
        return local_sgdm_step(state, oracle, eta_t, beta)

    pool_size = min(resolve_threads(threads), config.num_workers)
    executor = ThreadPoolExecutor(max_workers=pool_size) if pool_size > 1 else None

    rows: list[MetricsRow] = []
    round_logs: list[RoundLog] | None = [] if collect_round_logs else None
    max_gap = 0.0 if track_update_norm else None
    try:
        for t in range(config.num_iters):
            rows.append(_measure(t, states, problem))
            eta_t = config.eta_at(t)
            if executor is not None:
                new_states = list(executor.map(lambda s: step_worker(s, eta_t), states))
            else:
                new_states = [step_worker(s, eta_t) for s in states]
            if track_update_norm:
                for old, new in zip(states, new_states):
                    step_norm = float(np.linalg.norm(new.x - old.x))
                    gap = abs(step_norm - eta_t * math.sqrt(new.last_rank))
                    max_gap = max(max_gap, gap)
            states = new_states
            if (t + 1) % config.period == 0:
                mean_x, mean_m = average_states(states)
                for s in states:
                    s.x = mean_x.copy()
                    if config.sync_momentum:
                        s.momentum = mean_m.copy()
            if round_logs is not None:
                mean_x, mean_m = average_states(states)
                deviations = tuple(float(np.linalg.norm(mean_x - s.x)) for s in states)
                round_logs.append(
                    RoundLog(iteration=t, mean_x=mean_x, mean_m=mean_m, deviations=deviations)
                )
    finally:
        if executor is not None:
            executor.shutdown()

    return RunResult(
        rows=rows,
        config=config,
        noise=noise,
        problem=problem,
        final_states=states,
        max_update_norm_gap=max_gap,
        round_logs=round_logs,
        elapsed_seconds=time.perf_counter() - start,
    )
