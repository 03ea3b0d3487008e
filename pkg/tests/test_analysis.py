import math

import numpy as np
import pytest

from fedmuon.analysis import (
    AuditEntry,
    AuditReport,
    STATUS_NOT_APPLICABLE,
    STATUS_PASS,
    audit_consensus_m,
    audit_consensus_x,
    audit_grad_est_error,
    fit_rate_exponent,
    run_ensemble,
    schedule_from_KT,
    schedule_from_epsilon,
    write_audit_csv,
)
from fedmuon.errors import InsufficientPoints, InsufficientRuns, InvalidArg
from fedmuon.federation import FederationConfig, run_federation
from fedmuon.optim import OptimizerKind
from fedmuon.problems import NoiseModel, make_quadratic_align


class TestScheduleFromKT:
    def test_small_case(self):
        spec = schedule_from_KT(1, 16)
        assert spec.eta == pytest.approx(0.125)
        assert spec.beta == pytest.approx(0.25)
        assert spec.tau == 2

    def test_four_workers_long_run(self):
        spec = schedule_from_KT(4, 4096)
        assert spec.eta == pytest.approx(np.sqrt(2) / 512, rel=1e-12)
        assert spec.eta == pytest.approx(0.0027621, abs=1e-7)
        assert spec.beta == pytest.approx(0.03125)
        assert spec.tau == 3  # round(8 / 4^(3/4)) = round(2.8284)

    def test_equal_workers_and_iters_rejected(self):
        with pytest.raises(InvalidArg):
            schedule_from_KT(64, 64)

    def test_period_clamped_to_two(self):
        spec = schedule_from_KT(8, 256)  # formula gives tau < 2
        assert spec.tau == 2


class TestScheduleFromEpsilon:
    def test_regular_matches_kt_schedule(self):
        eps_spec = schedule_from_epsilon(1, 0.5)
        kt_spec = schedule_from_KT(1, 16)
        assert eps_spec.num_iters == 16
        assert eps_spec.eta == pytest.approx(kt_spec.eta)
        assert eps_spec.beta == pytest.approx(kt_spec.beta)
        assert eps_spec.tau == kt_spec.tau

    @pytest.mark.parametrize("workers,eps", [(1, 0.5), (1, 0.25), (2, 0.3)])
    def test_heavy_p2_reduces_to_regular(self, workers, eps):
        regular = schedule_from_epsilon(workers, eps)
        heavy = schedule_from_epsilon(workers, eps, regime="heavy", tail_p=2.0)
        assert heavy.num_iters == regular.num_iters
        assert heavy.eta == pytest.approx(regular.eta)
        assert heavy.beta == pytest.approx(regular.beta)
        assert heavy.tau == regular.tau

    def test_heavy_exponent_arithmetic(self):
        spec = schedule_from_epsilon(1, 0.5, regime="heavy", tail_p=1.5)
        assert spec.num_iters == 64  # (1/eps)^(2p/(p-1)) = 2^6
        assert spec.tau == 3  # round(1/eps^1.5) = round(2.8284)
        assert spec.eta == pytest.approx(0.5**4.5)
        assert spec.beta == pytest.approx(0.125)

    def test_out_of_range_inputs_rejected(self):
        with pytest.raises(InvalidArg):
            schedule_from_epsilon(1, 1.5)
        with pytest.raises(InvalidArg):
            schedule_from_epsilon(1, 0.5, regime="heavy", tail_p=2.5)
        with pytest.raises(InvalidArg):
            schedule_from_epsilon(4, 0.9)  # beta = K * eps^2 >= 1


class TestFitRateExponent:
    def test_recovers_exact_power_law(self):
        points = [(float(kt), 3.0 * kt**-0.25) for kt in (1e2, 1e3, 1e4, 1e5)]
        fit = fit_rate_exponent(points)
        assert fit.slope == pytest.approx(-0.25, abs=1e-12)
        assert fit.residual < 1e-12

    def test_too_few_points(self):
        with pytest.raises(InsufficientPoints):
            fit_rate_exponent([(1e2, 1.0), (1e3, 0.5), (1e4, 0.25)])

    def test_too_little_dynamic_range(self):
        points = [(100.0, 1.0), (150.0, 0.9), (200.0, 0.8), (250.0, 0.7)]
        with pytest.raises(InsufficientPoints):
            fit_rate_exponent(points)


def small_run(num_workers=2, period=4, optimizer=None, num_iters=64, seed=3):
    problem = make_quadratic_align(8, 4, num_workers, delta=1.0, seed=42)
    config = FederationConfig(
        num_workers=num_workers,
        num_iters=num_iters,
        period=period,
        eta=0.05,
        beta=0.25,
        seed=seed,
        optimizer=optimizer or OptimizerKind.fedmuon(),
    )
    result = run_federation(config, problem, NoiseModel.gaussian(0.5))
    return result, config, problem


class TestAuditConsensusX:
    def test_passes_on_exact_run(self):
        result, config, problem = small_run()
        report = audit_consensus_x(result, config, problem)
        assert report.status == STATUS_PASS
        assert report.worst_ratio() <= 1.0

    def test_every_step_sync_trivially_zero(self):
        result, config, problem = small_run(period=1)
        report = audit_consensus_x(result, config, problem)
        assert report.status == STATUS_PASS
        assert max(row.consensus_x for row in result) == 0.0

    def test_not_applicable_for_momentum_baseline(self):
        result, config, problem = small_run(optimizer=OptimizerKind.local_sgdm())
        report = audit_consensus_x(result, config, problem)
        assert report.status == STATUS_NOT_APPLICABLE
        assert report.passed  # not-applicable is not a failure

    def test_not_applicable_for_newton_schulz_runs(self):
        result, config, problem = small_run(optimizer=OptimizerKind.fedmuon(ortho="ns"))
        report = audit_consensus_x(result, config, problem)
        assert report.status == STATUS_NOT_APPLICABLE


@pytest.fixture(scope="module")
def mini_ensemble():
    problem = make_quadratic_align(8, 4, 2, delta=0.5, seed=42)
    spec = schedule_from_KT(2, 128)
    config = FederationConfig(
        num_workers=2,
        num_iters=128,
        period=4,
        eta=spec.eta,
        beta=spec.beta,
        seed=0,
        optimizer=OptimizerKind.fedmuon(),
    )
    noise = NoiseModel.gaussian(0.5)
    results = run_ensemble(config, problem, noise, seeds=range(30))
    return results, config, problem, noise


class TestExpectationAudits:
    def test_insufficient_runs_rejected(self, mini_ensemble):
        results, config, problem, _ = mini_ensemble
        with pytest.raises(InsufficientRuns):
            audit_consensus_m(results[:10], config, problem, 0.5, 0.5)

    def test_consensus_m_passes(self, mini_ensemble):
        results, config, problem, _ = mini_ensemble
        report = audit_consensus_m(results, config, problem, sigma=0.5, delta=0.5)
        assert report.status == STATUS_PASS

    def test_grad_est_error_passes(self, mini_ensemble):
        results, config, problem, noise = mini_ensemble
        report = audit_grad_est_error(results, config, problem, noise)
        assert report.status == STATUS_PASS
        assert report.name == "grad_est_err"

    def test_momentum_sync_required(self, mini_ensemble):
        results, config, problem, _ = mini_ensemble
        import dataclasses

        no_sync = dataclasses.replace(config, sync_momentum=False)
        report = audit_consensus_m(results, no_sync, problem, 0.5, 0.5)
        assert report.status == STATUS_NOT_APPLICABLE


class TestReportSerialization:
    def test_csv_schema(self, tmp_path):
        report = AuditReport(
            name="demo",
            entries=[AuditEntry.le("t=3", 0.5, 1.0), AuditEntry.le("aggregate", 2.0, 1.0)],
            status="fail",
            notes=["note"],
        )
        path = tmp_path / "audit.csv"
        write_audit_csv(path, [report])
        lines = path.read_text().splitlines()
        assert lines[0] == "audit_name,t_or_aggregate,observed,bound,ratio,pass"
        assert lines[1].startswith("demo,t=3,0.5")
        assert lines[1].endswith(",true")
        assert lines[2].endswith(",false")
        raw = path.read_bytes()
        assert b"\r" not in raw

    def test_text_rendering(self):
        report = AuditReport(
            name="demo",
            entries=[AuditEntry.le("aggregate", 0.5, 1.0)],
            status="pass",
            notes=["checked things"],
        )
        text = report.to_text()
        assert "demo" in text and "PASS" in text and "checked things" in text

    def test_info_entries_never_fail(self):
        entry = AuditEntry.info("metric", 123.0)
        assert entry.passed
        assert math.isnan(entry.bound)
