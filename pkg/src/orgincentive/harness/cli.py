"""Command-line entry point: ``solve``, ``sweep`` and ``synth``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ScenarioConfig, SynthSpec, read_config_file
from .pipeline import AXES, REPORT_FIELDS, ScenarioError, error_kind, run_scenario, sweep
from .report import emit_report, format_value
from .synth import synthesize_instance

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE, EXIT_DIVERGED = 0, 1, 2, 3
_EXIT = {"infeasible": EXIT_INFEASIBLE, "diverged": EXIT_DIVERGED, "error": EXIT_ERROR}

# flag -> ScenarioConfig field
SCENARIO_FLAGS = {
    "network": "network", "demand": "demand", "orgs": "orgs", "budget": "budget", "rho": "rho",
    "lambda_": "lambda_tilde", "iters": "max_iters", "tol": "tol", "seed": "seed", "out": "out",
    "n_orgs": "n_orgs", "participation": "participation", "vot_scale": "vot_scale", "time_limit": "time_limit",
    "name": "name", "k_routes": "k_routes",
}  # fmt: skip
SYNTH_FLAGS = {
    "nodes": "n_nodes", "links": "n_links", "ods": "n_ods", "drivers": "drivers", "n_orgs": "n_orgs",
    "participation": "participation", "congestion": "congestion", "seed": "seed",
}  # fmt: skip


def _values(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _scenario_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON or YAML file with any of the options below")
    p.add_argument("--network")
    p.add_argument("--demand")
    p.add_argument("--orgs", help="organizations JSON; synthesized from --n-orgs/--participation when absent")
    p.add_argument("--budget", type=float)
    p.add_argument("--rho", type=float)
    p.add_argument("--lambda", dest="lambda_", type=float, help="regularizer weight")
    p.add_argument("--iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory for report files")
    p.add_argument("--n-orgs", type=int)
    p.add_argument("--participation", type=float)
    p.add_argument("--vot-scale", type=float)
    p.add_argument("--time-limit", type=float)
    p.add_argument("--k-routes", type=int)
    p.add_argument("--name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="orgincentive", description="Organization-level incentive planning.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="run one scenario")
    _scenario_args(solve)

    sw = sub.add_parser("sweep", help="run one scenario per value of an axis")
    _scenario_args(sw)
    sw.add_argument("--axis", choices=AXES)
    sw.add_argument("--values", type=_values)
    sw.add_argument("--workers", type=int)

    syn = sub.add_parser("synth", help="generate network, demand and organization files")
    syn.add_argument("--config")
    syn.add_argument("--nodes", type=int)
    syn.add_argument("--links", type=int)
    syn.add_argument("--ods", type=int)
    syn.add_argument("--drivers", type=int)
    syn.add_argument("--n-orgs", type=int)
    syn.add_argument("--participation", type=float)
    syn.add_argument("--congestion", type=float)
    syn.add_argument("--seed", type=int)
    syn.add_argument("--out")
    return parser


def _merge(args: argparse.Namespace, mapping: dict[str, str]) -> dict:
    data = read_config_file(args.config) if args.config else {}
    for flag, key in mapping.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    return data


def _scenario_config(args: argparse.Namespace, extra: tuple[str, ...] = ()) -> tuple[ScenarioConfig, dict]:
    data = _merge(args, SCENARIO_FLAGS)
    rest = {k: data.pop(k) for k in extra if k in data}
    for k in extra:
        if getattr(args, k, None) is not None:
            rest[k] = getattr(args, k)
    return ScenarioConfig.from_mapping(data), rest


def _print_reports(reports) -> None:
    for rep in reports:
        print(json.dumps({f: format_value(getattr(rep, f)) for f in REPORT_FIELDS}))


def _cmd_solve(args) -> int:
    config, _ = _scenario_config(args)
    report = run_scenario(config)
    if config.out:
        emit_report([report], config.out)
    _print_reports([report])
    return EXIT_OK


def _cmd_sweep(args) -> int:
    config, rest = _scenario_config(args, ("axis", "values", "workers"))
    if "axis" not in rest or not rest.get("values"):
        raise ValueError("sweep needs --axis and --values")
    values = rest["values"]
    if isinstance(values, str):
        values = _values(values)
    reports = sweep(config, rest["axis"], values, int(rest.get("workers") or 1))
    if config.out:
        emit_report(reports, config.out)
    _print_reports(reports)
    kinds = [r.error_kind for r in reports]
    if all(kinds):
        return _EXIT[kinds[0]]
    return EXIT_OK


def _cmd_synth(args) -> int:
    data = _merge(args, SYNTH_FLAGS)
    out = data.pop("out", None) or args.out
    if not out:
        raise ValueError("synth needs --out")
    spec = SynthSpec(**data)
    inst = synthesize_instance(spec, out)
    summary = {"out": str(out), "links": inst.network.num_links, "od_pairs": len({k[:2] for k in inst.demand}),
               "mean_vw": inst.mean_vw}  # fmt: skip
    print(json.dumps(summary))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    handler = {"solve": _cmd_solve, "sweep": _cmd_sweep, "synth": _cmd_synth}[args.command]
    try:
        return handler(args)
    except ScenarioError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT[error_kind(exc)]
    except (ValueError, OSError) as exc:
        kind = error_kind(exc)
        print(f"error: {exc}", file=sys.stderr)
        return _EXIT[kind]


if __name__ == "__main__":
    sys.exit(main())
