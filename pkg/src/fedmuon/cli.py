"""Command-line entry point.

Three subcommands:

* ``run``   one federated experiment; writes ``metrics.csv`` and a
            ``manifest.txt`` that reproduces the run bitwise.
* ``audit`` one of the default audit suites; writes ``audit.csv`` (and a
            human-readable ``audit.txt``), exit 0 iff every check passes.
* ``sweep`` a cartesian grid over run parameters; one subdirectory per grid
            point plus a top-level ``summary.csv`` with the final
            time-averaged gradient norm per point.

Configuration is a flat ``key = value`` text file; command-line flags
override file values.  A manifest is itself a valid config file (its
informational keys are recognized and ignored), so ``run --config
manifest.txt`` replays a run.  Exit codes: 0 success, 2 configuration
error, 3 numerical failure (NaN/Inf), 4 audit failure.
"""

from __future__ import annotations

import argparse
import itertools
import sys
import time
from pathlib import Path

from . import __version__
from .analysis import schedule_from_KT, write_audit_csv
from .errors import (
    ConfigInvalid,
    FedMuonError,
    InvalidArg,
    NonFiniteInput,
    NonFiniteState,
)
from .federation import FederationConfig, resolve_threads, run_federation
from .metrics import format_float, time_averaged_grad_norm, write_metrics_csv
from .optim import ALGO_FEDMUON, ALGO_LOCALSGD, ALGO_LOCALSGDM, OptimizerKind
from .problems import (
    NoiseModel,
    make_quadratic_align,
    make_rayleigh_nonconvex,
)
from .suites import SUITES

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_AUDIT = 4


class ConfigError(Exception):
    """Configuration problem; the message names the offending key."""


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes", "on"):
        return True
    if lowered in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# Canonical run-config keys: (type, default).  ``None`` defaults mean
# "required or filled by a schedule/other key".
_CONFIG_SCHEMA: dict[str, tuple] = {
    "algo": (str, ALGO_FEDMUON),
    "ortho": (str, "svd"),
    "ns_iters": (int, 5),
    "workers": (int, 1),
    "iters": (int, None),
    "period": (int, 1),
    "eta": (float, None),
    "beta": (float, None),
    "sync_momentum": (_parse_bool, True),
    "lr_schedule": (str, "constant"),
    "seed": (int, 0),
    "schedule": (str, "none"),
    "problem": (str, "quad"),
    "m": (int, 8),
    "n": (int, 4),
    "delta": (float, 0.0),
    "problem_seed": (int, None),  # defaults to seed
    "noise": (str, "none"),
    "sigma": (float, 0.0),
    "tail_p": (float, 1.5),
    "dof": (float, None),  # defaults to tail_p + 0.3
    "calib_trials": (int, 100_000),
    "calib_seed": (int, 0),
}

# Accepted in config files (manifests) but carry no run semantics.
_INFORMATIONAL_KEYS = ("artifact_version", "runtime_seconds")

_SWEEPABLE = {
    "workers": int,
    "iters": int,
    "period": int,
    "eta": float,
    "beta": float,
    "sigma": float,
    "tail_p": float,
    "delta": float,
    "algo": str,
}


def read_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_config(file_values: dict[str, str], flag_values: dict[str, object]) -> dict:
    """Merge defaults, config-file values, and flag overrides; coerce types."""
    resolved: dict[str, object] = {key: default for key, (_, default) in _CONFIG_SCHEMA.items()}
    for key, text in file_values.items():
        if key in _INFORMATIONAL_KEYS:
            continue
        if key not in _CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        caster = _CONFIG_SCHEMA[key][0]
        try:
            resolved[key] = caster(text)
        except ValueError as exc:
            raise ConfigError(f"invalid value for key {key}: {exc}") from exc
    for key, value in flag_values.items():
        if value is not None:
            resolved[key] = value

    if resolved["iters"] is None:
        raise ConfigError("missing required config key: iters")
    if resolved["schedule"] == "corollary":
        spec = schedule_from_KT(resolved["workers"], resolved["iters"])
        if resolved["eta"] is None:
            resolved["eta"] = spec.eta
        if resolved["beta"] is None:
            resolved["beta"] = spec.beta
        if flag_values.get("period") is None and "period" not in file_values:
            resolved["period"] = spec.tau
        resolved["schedule"] = "none"  # values are now explicit
    elif resolved["schedule"] != "none":
        raise ConfigError(f"invalid value for key schedule: {resolved['schedule']!r}")
    for key in ("eta", "beta"):
        if resolved[key] is None:
            raise ConfigError(f"missing required config key: {key}")
    if resolved["problem_seed"] is None:
        resolved["problem_seed"] = resolved["seed"]
    if resolved["dof"] is None:
        resolved["dof"] = resolved["tail_p"] + 0.3
    return resolved


def build_run(resolved: dict):
    """(config, problem, noise) from a resolved config mapping."""
    algo = resolved["algo"]
    if algo == ALGO_FEDMUON:
        optimizer = OptimizerKind.fedmuon(ortho=resolved["ortho"], ns_iters=resolved["ns_iters"])
    elif algo == ALGO_LOCALSGD:
        optimizer = OptimizerKind.local_sgd()
    elif algo == ALGO_LOCALSGDM:
        optimizer = OptimizerKind.local_sgdm()
    else:
        raise ConfigError(f"invalid value for key algo: {algo!r}")

    if resolved["problem"] == "quad":
        problem = make_quadratic_align(
            resolved["m"],
            resolved["n"],
            resolved["workers"],
            resolved["delta"],
            seed=resolved["problem_seed"],
        )
    elif resolved["problem"] == "rayleigh":
        problem = make_rayleigh_nonconvex(
            resolved["m"], resolved["n"], resolved["workers"], seed=resolved["problem_seed"]
        )
    else:
        raise ConfigError(f"invalid value for key problem: {resolved['problem']!r}")

    kind = resolved["noise"]
    if kind == "none":
        noise = NoiseModel.none()
    elif kind == "gaussian":
        noise = NoiseModel.gaussian(resolved["sigma"])
    elif kind == "heavy":
        noise = NoiseModel.heavy_tailed(
            resolved["sigma"],
            resolved["tail_p"],
            resolved["m"],
            resolved["n"],
            dof=resolved["dof"],
            trials=resolved["calib_trials"],
            calibration_seed=resolved["calib_seed"],
        )
    else:
        raise ConfigError(f"invalid value for key noise: {kind!r}")

    config = FederationConfig(
        num_workers=resolved["workers"],
        num_iters=resolved["iters"],
        period=resolved["period"],
        eta=resolved["eta"],
        beta=resolved["beta"],
        seed=resolved["seed"],
        optimizer=optimizer,
        sync_momentum=resolved["sync_momentum"],
        lr_schedule=resolved["lr_schedule"],
    )
    return config, problem, noise


def _manifest_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return format_float(value)
    return str(value)


def write_manifest(path: Path, resolved: dict, runtime_seconds: float) -> None:
    lines = [f"artifact_version = {__version__}", f"runtime_seconds = {runtime_seconds:.3f}"]
    for key in _CONFIG_SCHEMA:
        lines.append(f"{key} = {_manifest_value(resolved[key])}")
    path.write_text("\n".join(lines) + "\n", newline="\n")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=str, help="flat key = value config file")
    parser.add_argument("--algo", choices=[ALGO_FEDMUON, ALGO_LOCALSGD, ALGO_LOCALSGDM])
    parser.add_argument("--ortho", choices=["svd", "ns"])
    parser.add_argument("--ns-iters", dest="ns_iters", type=int)
    parser.add_argument("--workers", type=int)
    parser.add_argument("--iters", type=int)
    parser.add_argument("--period", type=int)
    parser.add_argument("--eta", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--sync-momentum", dest="sync_momentum", type=_parse_bool)
    parser.add_argument("--lr-schedule", dest="lr_schedule", choices=["constant", "cosine"])
    parser.add_argument("--seed", type=int)
    parser.add_argument("--schedule", choices=["none", "corollary"])
    parser.add_argument("--problem", choices=["quad", "rayleigh"])
    parser.add_argument("--m", type=int)
    parser.add_argument("--n", type=int)
    parser.add_argument("--delta", type=float)
    parser.add_argument("--problem-seed", dest="problem_seed", type=int)
    parser.add_argument("--noise", choices=["none", "gaussian", "heavy"])
    parser.add_argument("--sigma", type=float)
    parser.add_argument("--tail-p", dest="tail_p", type=float)
    parser.add_argument("--dof", type=float)
    parser.add_argument("--calib-trials", dest="calib_trials", type=int)
    parser.add_argument("--calib-seed", dest="calib_seed", type=int)
    parser.add_argument("--out", type=str, default=".", help="output directory")
    parser.add_argument("--threads", type=int, help="0 = auto; default from FEDMUON_THREADS")


def _flag_values(args: argparse.Namespace) -> dict:
    return {key: getattr(args, key, None) for key in _CONFIG_SCHEMA}


def _resolved_from_args(args: argparse.Namespace) -> dict:
    file_values = read_config_file(args.config) if args.config else {}
    return resolve_config(file_values, _flag_values(args))


def cmd_run(args: argparse.Namespace) -> int:
    resolved = _resolved_from_args(args)
    config, problem, noise = build_run(resolved)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    result = run_federation(config, problem, noise, threads=args.threads)
    runtime = time.perf_counter() - start
    write_metrics_csv(out_dir / "metrics.csv", result.rows)
    write_manifest(out_dir / "manifest.txt", resolved, runtime)
    print(
        f"run ok: {len(result.rows)} iterations, "
        f"avg grad norm {time_averaged_grad_norm(result.rows):.6g}, "
        f"outputs in {out_dir}"
    )
    return EXIT_OK


_SUITE_KWARG_NAMES = {
    "consensus_x": {"iters": "num_iters"},
    "consensus_m": {"seeds": "num_seeds"},
    "grad_err": {"seeds": "num_seeds"},
    "rate": {"seeds": "seeds_per_point"},
    "speedup": {"seeds": "num_seeds", "iters": "num_iters"},
    "heavy_tail": {"seeds": "num_seeds", "iters": "num_iters"},
}


def cmd_audit(args: argparse.Namespace) -> int:
    if args.suite not in SUITES:
        raise ConfigError(f"unknown audit suite: {args.suite}")
    kwargs = {"threads": args.threads}
    for flag, kwarg in _SUITE_KWARG_NAMES[args.suite].items():
        value = getattr(args, flag)
        if value is not None:
            kwargs[kwarg] = value
    if args.suite == "rate" and args.points is not None:
        from .suites import DEFAULT_RATE_KT_POINTS

        if not 1 <= args.points <= len(DEFAULT_RATE_KT_POINTS):
            raise ConfigError(f"invalid value for key points: {args.points}")
        kwargs["kt_points"] = DEFAULT_RATE_KT_POINTS[: args.points]
    reports = SUITES[args.suite](**kwargs)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_audit_csv(out_dir / "audit.csv", reports)
    text = "\n".join(report.to_text() for report in reports)
    (out_dir / "audit.txt").write_text(text + "\n", newline="\n")
    print(text)
    return EXIT_OK if all(r.passed for r in reports) else EXIT_AUDIT


def _parse_sweep_values(key: str, text: str) -> list:
    caster = _SWEEPABLE[key]
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError(f"empty sweep list for key {key}")
    try:
        return [caster(v) for v in values]
    except ValueError as exc:
        raise ConfigError(f"invalid value for key {key}: {exc}") from exc


def _point_dir_name(point: dict) -> str:
    return "_".join(f"{key}{value}" for key, value in point.items())


def cmd_sweep(args: argparse.Namespace) -> int:
    grid: dict[str, list] = {}
    for key in _SWEEPABLE:
        text = getattr(args, f"sweep_{key}")
        if text is not None:
            grid[key] = _parse_sweep_values(key, text)
    if not grid:
        raise ConfigError("empty sweep grid: pass at least one --sweep-* flag")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = list(grid)
    summary_lines = [",".join(keys + ["avg_grad_norm"])]
    base_flags = _flag_values(args)
    file_values = read_config_file(args.config) if args.config else {}
    for combo in itertools.product(*(grid[k] for k in keys)):
        point = dict(zip(keys, combo))
        flags = dict(base_flags)
        flags.update(point)
        resolved = resolve_config(file_values, flags)
        config, problem, noise = build_run(resolved)
        point_dir = out_dir / _point_dir_name(point)
        point_dir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        result = run_federation(config, problem, noise, threads=args.threads)
        runtime = time.perf_counter() - start
        write_metrics_csv(point_dir / "metrics.csv", result.rows)
        write_manifest(point_dir / "manifest.txt", resolved, runtime)
        avg = time_averaged_grad_norm(result.rows)
        summary_lines.append(
            ",".join([_manifest_value(v) for v in combo] + [format_float(avg)])
        )
    (out_dir / "summary.csv").write_text("\n".join(summary_lines) + "\n", newline="\n")
    print(f"sweep ok: {len(summary_lines) - 1} grid points in {out_dir}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmuon",
        description="Federated orthonormalized-momentum optimizer testbed",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_parser = sub.add_parser("run", help="run one federated experiment")
    _add_run_flags(run_parser)
    run_parser.set_defaults(func=cmd_run)

    audit_parser = sub.add_parser("audit", help="run a bound/scaling audit suite")
    audit_parser.add_argument("suite", help=f"one of: {', '.join(SUITES)}")
    audit_parser.add_argument("--seeds", type=int, help="ensemble size override")
    audit_parser.add_argument("--iters", type=int, help="iteration budget override")
    audit_parser.add_argument("--points", type=int, help="rate suite: number of K*T points")
    audit_parser.add_argument("--out", type=str, default=".")
    audit_parser.add_argument("--threads", type=int)
    audit_parser.set_defaults(func=cmd_audit)

    sweep_parser = sub.add_parser("sweep", help="run a grid of experiments")
    _add_run_flags(sweep_parser)
    for key in _SWEEPABLE:
        sweep_parser.add_argument(
            f"--sweep-{key.replace('_', '-')}",
            dest=f"sweep_{key}",
            type=str,
            help=f"comma-separated {key} values",
        )
    sweep_parser.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on bad flags already
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ConfigInvalid, InvalidArg) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteState, NonFiniteInput) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FedMuonError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


def entry() -> None:  # console-script wrapper
    raise SystemExit(main())


if __name__ == "__main__":  # pragma: no cover
    entry()
