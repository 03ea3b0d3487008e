import dataclasses

import numpy as np
import pytest

from fedmuon.errors import ConfigInvalid, EmptyWorkerSet, ShapeMismatch
from fedmuon.federation import (
    FederationConfig,
    average_states,
    run_federation,
)
from fedmuon.optim import OptimizerKind, WorkerState
from fedmuon.problems import NoiseModel, make_quadratic_align
from fedmuon.rng import WorkerStream


def config(**overrides):
    base = dict(
        num_workers=2,
        num_iters=32,
        period=4,
        eta=0.05,
        beta=0.25,
        seed=7,
        optimizer=OptimizerKind.fedmuon(),
    )
    base.update(overrides)
    return FederationConfig(**base)


def state(worker_id, x, momentum):
    return WorkerState(
        worker_id=worker_id,
        x=np.asarray(x, dtype=float),
        momentum=np.asarray(momentum, dtype=float),
        stream=WorkerStream(0, worker_id),
    )


class TestAverageStates:
    def test_single_state_unchanged(self):
        s = state(0, np.diag([1.0, 2.0]), np.ones((2, 2)))
        mean_x, mean_m = average_states([s])
        assert np.array_equal(mean_x, s.x)
        assert np.array_equal(mean_m, s.momentum)

    def test_arithmetic_mean(self):
        states = [
            state(0, np.diag([1.0, 1.0]), np.zeros((2, 2))),
            state(1, np.diag([3.0, 3.0]), np.ones((2, 2))),
        ]
        mean_x, mean_m = average_states(states)
        assert np.array_equal(mean_x, np.diag([2.0, 2.0]))
        assert np.array_equal(mean_m, 0.5 * np.ones((2, 2)))

    def test_storage_order_does_not_matter(self):
        gen = np.random.default_rng(3)
        states = [state(k, gen.standard_normal((3, 3)), gen.standard_normal((3, 3))) for k in range(4)]
        mean_a = average_states(states)
        mean_b = average_states(list(reversed(states)))
        assert np.array_equal(mean_a[0], mean_b[0])
        assert np.array_equal(mean_a[1], mean_b[1])

    def test_empty_rejected(self):
        with pytest.raises(EmptyWorkerSet):
            average_states([])

    def test_shape_mismatch_rejected(self):
        states = [state(0, np.zeros((2, 2)), np.zeros((2, 2))), state(1, np.zeros((3, 3)), np.zeros((3, 3)))]
        with pytest.raises(ShapeMismatch):
            average_states(states)

    def test_mean_preserved_by_broadcast(self):
        # the communication step itself leaves the across-worker mean intact
        gen = np.random.default_rng(5)
        states = [state(k, gen.standard_normal((2, 2)), gen.standard_normal((2, 2))) for k in range(4)]
        mean_x, mean_m = average_states(states)
        for s in states:
            s.x = mean_x.copy()
            s.momentum = mean_m.copy()
        mean_x2, mean_m2 = average_states(states)
        assert np.array_equal(mean_x, mean_x2)
        assert np.array_equal(mean_m, mean_m2)


class TestRunFederation:
    def test_single_worker_any_period_matches_every_step_sync(self):
        problem = make_quadratic_align(4, 3, 1, delta=0.0, seed=1)
        noise = NoiseModel.gaussian(0.3)
        rows_a = run_federation(config(num_workers=1, period=3), problem, noise).rows
        rows_b = run_federation(config(num_workers=1, period=1), problem, noise).rows
        assert rows_a == rows_b

    def test_every_step_sync_gives_zero_consensus(self):
        problem = make_quadratic_align(4, 3, 2, delta=0.5, seed=2)
        result = run_federation(config(period=1), problem, NoiseModel.gaussian(0.2))
        for row in result.rows[1:]:
            assert row.consensus_x == 0.0
            assert row.consensus_m == 0.0

    def test_consensus_zero_exactly_after_each_sync(self):
        problem = make_quadratic_align(8, 4, 4, delta=1.0, seed=3)
        result = run_federation(config(num_workers=4, num_iters=33), problem, NoiseModel.gaussian(0.5))
        for row in result.rows:
            if row.t > 0 and row.t % 4 == 0:
                assert row.consensus_x == 0.0
                assert row.consensus_m == 0.0
            assert row.is_finite()

    def test_deterministic_variable_consensus_bound(self):
        problem = make_quadratic_align(8, 4, 2, delta=1.0, seed=4)
        cfg = config(num_iters=128)
        result = run_federation(cfg, problem)
        bound = 2 * cfg.eta * cfg.period * np.sqrt(4)
        assert all(row.consensus_x <= bound for row in result.rows)

    def test_per_worker_deviation_bound_noiseless_heterogeneous(self):
        # even the worst single worker stays within 2*eta*tau*sqrt(min(m,n))
        problem = make_quadratic_align(8, 4, 2, delta=1.0, seed=4)
        cfg = config(num_iters=64)
        result = run_federation(cfg, problem, collect_round_logs=True)
        bound = 2 * cfg.eta * cfg.period * np.sqrt(4)
        for log in result.round_logs:
            assert max(log.deviations) <= bound

    def test_first_row_measures_the_start_point(self):
        problem = make_quadratic_align(4, 3, 2, delta=0.5, seed=5)
        x0 = np.ones((4, 3))
        result = run_federation(config(), problem, x0=x0)
        expected = np.linalg.norm(problem.full_gradient(x0))
        assert result.rows[0].grad_norm == expected
        assert result.rows[0].consensus_x == 0.0

    def test_post_communication_agreement_is_bitwise(self):
        problem = make_quadratic_align(4, 3, 3, delta=0.5, seed=6)
        result = run_federation(
            config(num_workers=3, num_iters=8, period=8), problem, NoiseModel.gaussian(0.4)
        )
        xs = [s.x for s in result.final_states]
        ms = [s.momentum for s in result.final_states]
        assert all(np.array_equal(xs[0], x) for x in xs)
        assert all(np.array_equal(ms[0], m) for m in ms)

    def test_round_log_deviations_zero_at_communication(self):
        problem = make_quadratic_align(4, 3, 2, delta=0.5, seed=7)
        result = run_federation(
            config(num_iters=12, period=3), problem, NoiseModel.gaussian(0.2), collect_round_logs=True
        )
        for log in result.round_logs:
            if (log.iteration + 1) % 3 == 0:
                assert all(d == 0.0 for d in log.deviations)

    def test_sync_momentum_off_keeps_momenta_apart(self):
        problem = make_quadratic_align(4, 3, 2, delta=1.0, seed=8)
        result = run_federation(
            config(sync_momentum=False, num_iters=9, period=2),
            problem,
            NoiseModel.gaussian(0.3),
        )
        synced_rows = [row for row in result.rows if row.t > 0 and row.t % 2 == 0]
        assert all(row.consensus_x == 0.0 for row in synced_rows)
        assert any(row.consensus_m > 0.0 for row in synced_rows)

    def test_bitwise_determinism(self):
        problem = make_quadratic_align(8, 4, 4, delta=0.5, seed=9)
        noise = NoiseModel.gaussian(0.5)
        cfg = config(num_workers=4)
        assert run_federation(cfg, problem, noise).rows == run_federation(cfg, problem, noise).rows

    def test_thread_count_independence(self):
        problem = make_quadratic_align(8, 4, 4, delta=0.5, seed=10)
        noise = NoiseModel.gaussian(0.5)
        cfg = config(num_workers=4, num_iters=48)
        sequential = run_federation(cfg, problem, noise, threads=1)
        threaded = run_federation(cfg, problem, noise, threads=8)
        assert sequential.rows == threaded.rows
        for a, b in zip(sequential.final_states, threaded.final_states):
            assert np.array_equal(a.x, b.x)
            assert np.array_equal(a.momentum, b.momentum)

    def test_update_norm_gap_tracked_for_exact_runs(self):
        problem = make_quadratic_align(8, 4, 2, delta=0.5, seed=11)
        exact = run_federation(config(), problem, NoiseModel.gaussian(0.2))
        assert exact.max_update_norm_gap < 1e-8
        baseline = run_federation(
            config(optimizer=OptimizerKind.local_sgdm()), problem, NoiseModel.gaussian(0.2)
        )
        assert baseline.max_update_norm_gap is None

    def test_worker_count_mismatch_rejected(self):
        problem = make_quadratic_align(4, 3, 3, delta=0.0, seed=12)
        with pytest.raises(ConfigInvalid):
            run_federation(config(num_workers=2), problem)

    def test_cosine_schedule_shrinks_late_steps(self):
        problem = make_quadratic_align(8, 4, 1, delta=0.0, seed=13)
        cfg = config(num_workers=1, lr_schedule="cosine", num_iters=64, eta=0.1)
        result = run_federation(cfg, problem, x0=np.ones((8, 4)) * 10)
        early = np.linalg.norm(np.asarray(result.rows[1].grad_norm) - result.rows[0].grad_norm)
        late = abs(result.rows[-1].grad_norm - result.rows[-2].grad_norm)
        assert late < early  # steps decay toward zero
        assert cfg.eta_at(0) == pytest.approx(0.1)
        assert cfg.eta_at(32) == pytest.approx(0.05)


class TestConfigValidation:
    @pytest.mark.parametrize(
        "overrides",
        [
            dict(num_workers=0),
            dict(num_iters=0),
            dict(period=0),
            dict(eta=0.0),
            dict(beta=0.0),
            dict(beta=1.5),
            dict(lr_schedule="step"),
        ],
    )
    def test_invalid_configs_rejected(self, overrides):
        with pytest.raises(ConfigInvalid):
            config(**overrides).validate()

    def test_localsgd_runs_with_forced_beta(self):
        # LocalSGD ignores beta (momentum never retained)
        problem = make_quadratic_align(4, 3, 2, delta=0.0, seed=14)
        cfg = config(optimizer=OptimizerKind.local_sgd(), beta=0.5, num_iters=4)
        x0 = np.ones((4, 3))
        result = run_federation(cfg, problem, x0=x0)
        expected = x0 - cfg.eta * problem.worker_gradient(0, x0)
        first_step = np.linalg.norm(result.rows[1].grad_norm - np.linalg.norm(problem.full_gradient(expected)))
        assert first_step < 1e-12
