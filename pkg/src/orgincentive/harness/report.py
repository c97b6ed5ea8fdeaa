"""CSV emission of scenario reports and plot data."""

from __future__ import annotations

import csv
import math
from dataclasses import fields
from pathlib import Path
from typing import Sequence

from .pipeline import REPORT_FIELDS, ScenarioReport

ORG_COST_FIELDS = ("org", "vot_per_min", "drivers", "baseline_min", "assigned_min", "cost")
ASSIGNMENT_FIELDS = (
    "org", "driver", "origin", "destination", "entry_period", "route", "route_min", "fastest_min", "deviated",
)  # fmt: skip
PLOTS = {
    "budget_vs_decrease.csv": ("name", "n_orgs", "budget", "decrease_pct"),
    "budget_vs_cost.csv": ("name", "n_orgs", "budget", "total_cost"),
    "cost_vs_decrease_by_norgs.csv": ("n_orgs", "budget", "total_cost", "decrease_pct"),
}


def format_value(value) -> str:
    """Exact text form: repr for floats, empty for null, lowercase booleans."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([format_value(row[h]) for h in header])
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _row(rep: ScenarioReport) -> dict:
    return {f: getattr(rep, f) for f in REPORT_FIELDS}


def emit_report(reports: Sequence[ScenarioReport], outdir: str | Path) -> list[Path]:
    """Write report.csv, per-scenario tables and plotdata/*.csv; returns the paths written."""
    out = Path(outdir)
    try:
        (out / "plotdata").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out}: {exc.strerror or exc}") from exc
    written = [out / "report.csv"]
    rows = [_row(r) for r in reports]
    _write(written[0], REPORT_FIELDS, rows)
    for rep in reports:
        sub = out / rep.name
        sub.mkdir(parents=True, exist_ok=True)
        _write(sub / "org_costs.csv", ORG_COST_FIELDS, rep.org_costs)
        _write(sub / "assignments.csv", ASSIGNMENT_FIELDS, rep.assignments)
        written += [sub / "org_costs.csv", sub / "assignments.csv"]
    ok = [r for r in rows if not str(r["status"]).startswith("failed")]
    for fname, header in PLOTS.items():
        order = sorted(ok, key=lambda r: (r["n_orgs"], r["budget"]))
        _write(out / "plotdata" / fname, header, order)
        written.append(out / "plotdata" / fname)
    return written


def _parse(text: str, kind):
    if text == "":
        return None
    if kind is bool:
        return text == "true"
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    return text


_KINDS = {
    "value": float, "budget": float, "n_orgs": int, "participation": float, "vot_scale": float, "seed": int,
    "num_org_drivers": int, "baseline_tt": float, "final_tt": float, "decrease_pct": float, "total_cost": float,
    "deviated_count": int, "cost_per_deviated": float, "admm_iterations": int, "admm_converged": bool,
    "admm_max_residual": float, "relaxed_tt": float, "projection_distance": float,
}  # fmt: skip


def read_report(path: str | Path) -> list[ScenarioReport]:
    """Parse report.csv back into reports (scalar fields only)."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        out = []
        for row in reader:
            data = {k: _parse(v, _KINDS.get(k, str)) for k, v in row.items()}
            for k in ("name", "axis", "status", "projection_status"):
                data[k] = row[k]
            out.append(ScenarioReport(**data))
    return out


def same_scalars(a: ScenarioReport, b: ScenarioReport) -> bool:
    """Field-by-field equality of the CSV columns, treating NaN as equal to itself."""
    for f in fields(ScenarioReport):
        if f.name not in REPORT_FIELDS:
            continue
        x, y = getattr(a, f.name), getattr(b, f.name)
        if isinstance(x, float) and isinstance(y, float) and math.isnan(x) and math.isnan(y):
            continue
        if x != y or type(x) is not type(y):
            return False
    return True
