"""Per-worker optimizer state machines.

The main step orthonormalizes the current momentum, moves the iterate along
the orthonormal factor, and only then refreshes the momentum with a
stochastic gradient taken at the new iterate:

    O   = orthonormalize(M_t)
    X'  = X - eta * O
    M'  = (1 - beta) * M + beta * grad(X'; xi_{t+1})

Reference baselines reuse the identical momentum recurrence with the raw
momentum as the step direction (LocalSGDM), or with beta = 1 so the momentum
is never retained (LocalSGD).  A worker's state is owned by one logical
worker between synchronization points; steps for distinct workers share no
mutable state and may run in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from .errors import InvalidArg, NonFiniteState, ShapeMismatch
from .ortho import (
    DEFAULT_NS_ITERS,
    QUINTIC_COEFFS,
    OrthoResult,
    newton_schulz,
    orthonormalize_exact,
)
from .rng import WorkerStream

ALGO_FEDMUON = "fedmuon"
ALGO_LOCALSGD = "localsgd"
ALGO_LOCALSGDM = "localsgdm"

ORTHO_EXACT = "svd"
ORTHO_NEWTON_SCHULZ = "ns"

# grad_oracle(x, gen) -> stochastic gradient at x using draws from gen
GradOracle = Callable[[np.ndarray, np.random.Generator], np.ndarray]
Orthogonalizer = Callable[[np.ndarray], OrthoResult]


@dataclass(frozen=True)
class OptimizerKind:
    """Which per-worker update rule a run uses.

    ``ortho`` selects the orthogonalization route for the momentum method
    (exact SVD or Newton-Schulz) and is None for the baselines.
    """

    algo: str
    ortho: str | None = None
    ns_iters: int = DEFAULT_NS_ITERS
    ns_coeffs: tuple[float, float, float] = QUINTIC_COEFFS

    @staticmethod
    def fedmuon(ortho: str = ORTHO_EXACT, ns_iters: int = DEFAULT_NS_ITERS) -> "OptimizerKind":
        return OptimizerKind(algo=ALGO_FEDMUON, ortho=ortho, ns_iters=ns_iters)

    @staticmethod
    def local_sgd() -> "OptimizerKind":
        return OptimizerKind(algo=ALGO_LOCALSGD)

    @staticmethod
    def local_sgdm() -> "OptimizerKind":
        return OptimizerKind(algo=ALGO_LOCALSGDM)

    def validate(self) -> None:
        if self.algo not in (ALGO_FEDMUON, ALGO_LOCALSGD, ALGO_LOCALSGDM):
            raise InvalidArg(f"unknown algorithm {self.algo!r}")
        if self.algo == ALGO_FEDMUON:
            if self.ortho not in (ORTHO_EXACT, ORTHO_NEWTON_SCHULZ):
                raise InvalidArg(f"unknown orthogonalizer {self.ortho!r}")
            if self.ns_iters < 1:
                raise InvalidArg("ns_iters must be >= 1")
        elif self.ortho is not None:
            raise InvalidArg(f"{self.algo} does not take an orthogonalizer")

    @property
    def is_fedmuon(self) -> bool:
        return self.algo == ALGO_FEDMUON

    @property
    def uses_exact_ortho(self) -> bool:
        return self.algo == ALGO_FEDMUON and self.ortho == ORTHO_EXACT

    def make_orthogonalizer(self) -> Orthogonalizer | None:
        if not self.is_fedmuon:
            return None
        if self.ortho == ORTHO_EXACT:
            return orthonormalize_exact
        iters, coeffs = self.ns_iters, self.ns_coeffs
        return lambda m: newton_schulz(m, iters=iters, coeffs=coeffs)


@dataclass
class WorkerState:
    """Iterate, momentum, and random stream of one worker.

    ``last_rank`` records the retained rank of the momentum the most recent
    step orthonormalized (None before the first step and for baselines); the
    federation driver uses it to verify the update-norm identity
    ||X' - X||_F = eta * sqrt(rank).
    """

    worker_id: int
    x: np.ndarray
    momentum: np.ndarray
    stream: WorkerStream
    step_count: int = 0
    last_rank: int | None = None


def init_worker_state(
    worker_id: int, x0: np.ndarray, grad_oracle: GradOracle, stream: WorkerStream
) -> WorkerState:
    """Fresh state with the momentum seeded by the step-0 stochastic gradient."""
    x0 = np.array(x0, dtype=np.float64)
    momentum = np.asarray(grad_oracle(x0, stream.generator(0)), dtype=np.float64)
    if momentum.shape != x0.shape:
        raise ShapeMismatch(f"oracle produced {momentum.shape}, expected {x0.shape}")
    return WorkerState(worker_id=worker_id, x=x0, momentum=momentum, stream=stream)


def _refresh_momentum(
    state: WorkerState,
    x_new: np.ndarray,
    grad_oracle: GradOracle,
    beta: float,
    last_rank: int | None,
) -> WorkerState:
    step = state.step_count + 1
    grad = np.asarray(grad_oracle(x_new, state.stream.generator(step)), dtype=np.float64)
    if grad.shape != x_new.shape:
        raise ShapeMismatch(f"oracle produced {grad.shape}, expected {x_new.shape}")
    m_new = (1.0 - beta) * state.momentum + beta * grad
    if not (np.isfinite(x_new).all() and np.isfinite(m_new).all()):
        raise NonFiniteState(f"worker {state.worker_id} produced NaN/Inf at step {step}")
    return replace(
        state, x=x_new, momentum=m_new, step_count=step, last_rank=last_rank
    )


def muon_local_step(
    state: WorkerState,
    grad_oracle: GradOracle,
    eta: float,
    beta: float,
    ortho: Orthogonalizer,
) -> WorkerState:
    """One orthonormalized-momentum step.

    Orthogonalizes the *current* momentum, steps, then refreshes the momentum
    at the *new* iterate.  Zero momentum uses the rank-0 convention (zero
    direction) rather than calling the orthogonalizer.
    """
    if eta <= 0:
        raise InvalidArg("eta must be positive")
    if not 0.0 < beta <= 1.0:
        raise InvalidArg("beta must lie in (0, 1]")
    if np.any(state.momentum):
        result = ortho(state.momentum)
        x_new = state.x - eta * result.factor
        rank = result.rank
    else:
        x_new = state.x.copy()
        rank = 0
    return _refresh_momentum(state, x_new, grad_oracle, beta, rank)


def local_sgdm_step(
    state: WorkerState, grad_oracle: GradOracle, eta: float, beta: float
) -> WorkerState:
    """Momentum baseline step: direction is the raw momentum.

    With beta = 1 the momentum always equals the latest stochastic gradient,
    which makes this plain LocalSGD.
    """
    if eta <= 0:
        raise InvalidArg("eta must be positive")
    if not 0.0 < beta <= 1.0:
        raise InvalidArg("beta must lie in (0, 1]")
    x_new = state.x - eta * state.momentum
    return _refresh_momentum(state, x_new, grad_oracle, beta, None)
