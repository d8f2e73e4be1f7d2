"""AMPL model/data export of an NLP instance, and a re-parsing soundness check."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .expr import Dag, EvaluationError, Expr, Naming, Program, format_number, parse, render
from .transcribe import ROW_KIND_NAMES, NlpInstance, eval_instance

_NAMING = Naming(var=lambda i: f"xi[{i}]")
_ROW = re.compile(r"^(?P<name>[a-z]+)(?P<idx>\d+):\s*(?P<body>.*);$")


def _row_text(idx: int, kind: str, body: str, lo: float, hi: float) -> str:
    name = f"{kind}{idx}"
    if lo == hi:
        return f"{name}: {body} = {format_number(lo)};"
    if math.isinf(lo):
        return f"{name}: {body} <= {format_number(hi)};"
    if math.isinf(hi):
        return f"{name}: {body} >= {format_number(lo)};"
    return f"{name}: {format_number(lo)} <= {body} <= {format_number(hi)};"


def export_ampl(nlp: NlpInstance) -> tuple[str, str]:
    """(model text, data text) describing ``nlp`` exactly."""
    prov = nlp.provenance
    head = (
        f"# problem {prov['problem']}, scheme {prov['scheme']}, M = {prov['M']}, "
        f"formulation {prov['formulation']}\n"
    )
    lines = [
        head.rstrip("\n"),
        "param n_vars integer > 0;",
        "set J := 0..n_vars-1;",
        "param lb{J} default -Infinity;",
        "param ub{J} default Infinity;",
        "var xi{j in J} >= lb[j], <= ub[j];",
        "",
        f"minimize fit: {render(nlp.objective, _NAMING)};",
        "",
    ]
    for r, (e, lo, hi, k) in enumerate(zip(nlp.rows, nlp.lo, nlp.hi, nlp.row_kind)):
        lines.append(_row_text(r, ROW_KIND_NAMES[int(k)], render(e, _NAMING), float(lo), float(hi)))
    model = "\n".join(lines) + "\n"

    data = [head.rstrip("\n"), f"param n_vars := {nlp.n_vars};"]
    for name, vec in (("lb", nlp.lb), ("ub", nlp.ub)):
        finite = np.flatnonzero(np.isfinite(vec))
        if len(finite):
            data.append(f"param {name} :=")
            data.extend(f"  {j} {format_number(float(vec[j]))}" for j in finite)
            data.append(";")
    return model, "\n".join(data) + "\n"


def write_ampl(nlp: NlpInstance, stem: str | Path) -> tuple[Path, Path]:
    model, data = export_ampl(nlp)
    stem = Path(stem)
    mod, dat = stem.with_suffix(".mod"), stem.with_suffix(".dat")
    mod.write_text(model)
    dat.write_text(data)
    return mod, dat


@dataclass
class ExportReport:
    ok: bool
    objective_error: float
    max_row_error: float
    mismatches: list[tuple[int, float, float]] = field(default_factory=list)  # (row, exported, reference)
    bound_mismatches: list[int] = field(default_factory=list)
    messages: list[str] = field(default_factory=list)


def _rel(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(b))


def _parse_data(data: str) -> tuple[int, dict[str, dict[int, float]]]:
    n = None
    vals: dict[str, dict[int, float]] = {"lb": {}, "ub": {}}
    cur = None
    for line in data.splitlines():
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        m = re.match(r"param n_vars := (\d+);", s)
        if m:
            n = int(m.group(1))
        elif s in ("param lb :=", "param ub :="):
            cur = s.split()[1]
        elif s == ";":
            cur = None
        elif cur is not None:
            j, v = s.split()
            vals[cur][int(j)] = float(v)
    if n is None:
        raise ValueError("data text declares no n_vars")
    return n, vals


def verify_export(nlp: NlpInstance, xi: np.ndarray, model: str | None = None, data: str | None = None,
                  rtol: float = 1e-12) -> ExportReport:
    """Re-read an export and compare objective, rows and bounds against ``eval_instance``."""
    if model is None or data is None:
        m, d = export_ampl(nlp)
        model = m if model is None else model
        data = d if data is None else data
    xi = np.asarray(xi, dtype=float)
    f_ref, c_ref = eval_instance(nlp, xi)
    report = ExportReport(True, 0.0, 0.0)
    dag = Dag()
    leaves: dict[int, Expr] = {}

    def var(i: int) -> Expr:
        if i not in leaves:
            leaves[i] = Expr(dag, dag.var(i))
        return leaves[i]

    objective = None
    rows: dict[int, tuple[Expr, float, float]] = {}
    for line in model.splitlines():
        if line.startswith("minimize fit: "):
            objective = parse(line[len("minimize fit: "):].rstrip(";"), indexed={"xi": var}, dag=dag)
            continue
        m = _ROW.match(line)
        if not m:
            continue
        idx, body = int(m.group("idx")), m.group("body")
        parts = [p.strip() for p in re.split(r"\s(<=|>=|=)\s", body)]
        if len(parts) == 3 and parts[1] == "=":
            expr, lo, hi = parts[0], float(parts[2]), float(parts[2])
        elif len(parts) == 3 and parts[1] == "<=":
            expr, lo, hi = parts[0], -math.inf, float(parts[2])
        elif len(parts) == 3 and parts[1] == ">=":
            expr, lo, hi = parts[0], float(parts[2]), math.inf
        elif len(parts) == 5 and parts[1] == parts[3] == "<=":
            expr, lo, hi = parts[2], float(parts[0]), float(parts[4])
        else:
            report.messages.append(f"row {idx}: unrecognised constraint form")
            report.ok = False
            continue
        rows[idx] = (parse(expr, indexed={"xi": var}, dag=dag), lo, hi)

    if objective is None:
        report.ok = False
        report.messages.append("no objective found")
        return report
    roots = [objective.id] + [rows[k][0].id for k in sorted(rows)]
    try:
        vals = Program(dag, roots)(xi)
    except EvaluationError as exc:
        report.ok = False
        report.messages.append(f"export evaluation fault: {exc}")
        return report
    report.objective_error = _rel(float(vals[0]), f_ref)
    if report.objective_error > rtol:
        report.ok = False
        report.messages.append(f"objective {vals[0]!r} vs {f_ref!r}")
    if sorted(rows) != list(range(nlp.n_rows)):
        report.ok = False
        report.messages.append(f"export has {len(rows)} rows, instance has {nlp.n_rows}")
    for k, v in zip(sorted(rows), vals[1:]):
        if k >= nlp.n_rows:
            continue
        _, lo, hi = rows[k]
        err = _rel(float(v), float(c_ref[k]))
        report.max_row_error = max(report.max_row_error, err)
        if err > rtol or lo != nlp.lo[k] or hi != nlp.hi[k]:
            report.mismatches.append((k, float(v), float(c_ref[k])))
    n, bounds = _parse_data(data)
    if n != nlp.n_vars:
        report.messages.append(f"n_vars {n} vs {nlp.n_vars}")
        report.ok = False
    for name, vec in (("lb", nlp.lb), ("ub", nlp.ub)):
        got = np.full(nlp.n_vars, -math.inf if name == "lb" else math.inf)
        for j, v in bounds[name].items():
            if j < nlp.n_vars:
                got[j] = v
        report.bound_mismatches.extend(int(j) for j in np.flatnonzero(got != vec))
    report.bound_mismatches = sorted(set(report.bound_mismatches))
    if report.mismatches or report.bound_mismatches:
        report.ok = False
    return report
