"""Accuracy metrics, outcome classes and grouped summary tables."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterable, Sequence

import numpy as np

FOUND_REF = "FoundRef"
NEAR_REF = "NearRef"
ALTERN = "Altern"
NOT_FOUND = "NotFound"
FAILED = "Failed"
OUTCOMES = (FOUND_REF, NEAR_REF, ALTERN, NOT_FOUND, FAILED)

FOUND_THRESHOLD = 0.1
NEAR_THRESHOLD = 0.5
ALTERN_THRESHOLD = 1e-4
# a returned point further than this from [lo, hi] counts as no feasible point
FEASIBILITY_TOL = 1e-6


class MetricError(ValueError):
    pass


def max_re(p_hat: Sequence[float], p_ref: Sequence[float]) -> float:
    p_hat = np.asarray(p_hat, dtype=float)
    p_ref = np.asarray(p_ref, dtype=float)
    if p_hat.shape != p_ref.shape:
        raise MetricError(f"length mismatch: {p_hat.shape} vs {p_ref.shape}")
    if np.any(p_ref == 0):
        raise MetricError("relative error undefined for a zero reference component")
    if p_ref.size == 0:
        return 0.0
    return float(np.max(np.abs((p_hat - p_ref) / p_ref)))


def nrmse(y_pred: np.ndarray, y_data: np.ndarray) -> float:
    """Root-mean-square mismatch divided by the global range of the data."""
    y_pred = np.asarray(y_pred, dtype=float)
    y_data = np.asarray(y_data, dtype=float)
    if y_pred.shape != y_data.shape:
        raise MetricError(f"shape mismatch: {y_pred.shape} vs {y_data.shape}")
    span = float(np.max(y_data) - np.min(y_data))
    if not span > 0:
        raise MetricError("data range is zero; NRMSE normalisation is degenerate")
    return math.sqrt(float(np.sum((y_pred - y_data) ** 2)) / y_data.size) / span


def outcome_of(mre: float | None, err: float, failed: bool = False) -> str:
    if failed:
        return FAILED
    if mre is not None and not math.isnan(mre):
        if mre <= FOUND_THRESHOLD:
            return FOUND_REF
        if mre <= NEAR_THRESHOLD:
            return NEAR_REF
    if err < ALTERN_THRESHOLD:
        return ALTERN
    return NOT_FOUND


@dataclass(frozen=True)
class Outcome:
    tag: str
    max_re: float | None
    nrmse: float


def is_failed(status: str, max_violation: float) -> bool:
    return status == "numerical-failure" or not (max_violation <= FEASIBILITY_TOL)


def classify(result, nlp, p_ref: Sequence[float] | None = None, include_ic: bool = False) -> Outcome:
    """Outcome of ``result`` on instance ``nlp`` against reference ``p_ref``.

    ``p_ref`` defaults to the problem nominal (rate parameters first, then
    estimated initial states); only rate parameters enter MaxRE unless
    ``include_ic`` is set.
    """
    prob = nlp.problem
    ref = prob.theta_nominal if p_ref is None else np.asarray(p_ref, dtype=float)
    k = len(ref) if include_ic else prob.n_p
    try:
        mre: float | None = max_re(np.asarray(result.p_hat)[:k], ref[:k])
    except MetricError:
        mre = None
    try:
        err = nrmse(nlp.predictions(result.xi), nlp.data.values)
    except MetricError:
        err = math.nan
    if not np.isfinite(np.asarray(result.xi)).all():
        return Outcome(FAILED, mre, err)
    return Outcome(outcome_of(mre, err, is_failed(result.status, result.max_violation)), mre, err)


RECORD_COLUMNS = (
    "problem", "scheme", "M", "formulation", "form_param", "solver", "seed", "status",
    "objective", "max_violation", "max_re", "nrmse", "outcome", "time_s", "iterations",
)
SUMMARY_COLUMNS = ("group", "solved_s", "found_r", "near_r", "altern", "time_bfr", "success")
SCATTER_COLUMNS = ("max_re", "log_nrmse1", "time_s", "solver_class", "solver")


@dataclass(frozen=True)
class RunRecord:
    problem: str
    scheme: str
    M: int
    formulation: str
    form_param: float | None
    solver: str
    seed: int
    status: str
    objective: float
    max_violation: float
    max_re: float | None
    nrmse: float
    outcome: str
    time_s: float
    iterations: int

    @property
    def formulation_label(self) -> str:
        return self.formulation if self.form_param is None else f"{self.formulation}({self.form_param:g})"

    def key(self) -> tuple:
        return (self.problem, self.scheme, self.M, self.formulation, _none_last(self.form_param), self.solver, self.seed)

    def to_row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in RECORD_COLUMNS]

    @classmethod
    def from_row(cls, row: dict[str, str]) -> "RunRecord":
        try:
            return cls(
                problem=row["problem"],
                scheme=row["scheme"],
                M=int(row["M"]),
                formulation=row["formulation"],
                form_param=_opt_float(row["form_param"]),
                solver=row["solver"],
                seed=int(row["seed"]),
                status=row["status"],
                objective=float(row["objective"]),
                max_violation=float(row["max_violation"]),
                max_re=_opt_float(row["max_re"]),
                nrmse=float(row["nrmse"]),
                outcome=row["outcome"],
                time_s=float(row["time_s"]),
                iterations=int(row["iterations"]),
            )
        except (KeyError, ValueError) as exc:
            raise MetricError(f"malformed record: {exc}") from exc

    def outcome_columns(self) -> tuple:
        """Everything except wall time, for determinism audits."""
        return tuple(getattr(self, f.name) for f in fields(self) if f.name != "time_s")


def _none_last(v):
    return (1, 0.0) if v is None else (0, v)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _opt_float(s: str) -> float | None:
    return None if s.strip() == "" else float(s)


@dataclass(frozen=True)
class SummaryRow:
    group: str
    solved_s: float
    found_r: float
    near_r: float
    altern: float
    time_bfr: float | None
    success: float
    count: int = 0

    def to_row(self) -> list[str]:
        vals = [self.group, self.solved_s, self.found_r, self.near_r, self.altern, self.time_bfr, self.success]
        return [v if isinstance(v, str) else ("" if v is None else format(v, ".6g")) for v in vals]


GROUP_FIELDS = {
    "problem": lambda r: r.problem,
    "solver": lambda r: r.solver,
    "scheme": lambda r: r.scheme,
    "formulation": lambda r: r.formulation_label,
    "mesh": lambda r: str(r.M),
}
PAIR_GROUPINGS = tuple(
    (a, b)
    for i, a in enumerate(("problem", "solver", "scheme", "formulation"))
    for b in ("problem", "solver", "scheme", "formulation")[i + 1:]
)


def parse_grouping(spec: str | Sequence[str]) -> tuple[str, ...]:
    keys = tuple(k.strip() for k in spec.split(",")) if isinstance(spec, str) else tuple(spec)
    if not keys or any(k not in GROUP_FIELDS for k in keys):
        raise MetricError(f"unknown grouping {spec!r}; choose from {', '.join(GROUP_FIELDS)}")
    return keys


def summarize(records: Iterable[RunRecord], group_by: str | Sequence[str] = "problem") -> list[SummaryRow]:
    recs = list(records)
    if not recs:
        raise MetricError("no records to summarise")
    keys = parse_grouping(group_by)
    groups: dict[str, list[RunRecord]] = {}
    for r in recs:
        groups.setdefault("|".join(GROUP_FIELDS[k](r) for k in keys), []).append(r)
    rows = []
    for name, rs in groups.items():
        n = len(rs)
        found = [r for r in rs if r.outcome == FOUND_REF]
        rows.append(
            SummaryRow(
                group=name,
                solved_s=sum(r.status == "solved-local" for r in rs) / n,
                found_r=len(found) / n,
                near_r=sum(r.outcome == NEAR_REF for r in rs) / n,
                altern=sum(r.outcome == ALTERN for r in rs) / n,
                time_bfr=min(r.time_s for r in found) if found else None,
                success=sum(r.outcome != FAILED for r in rs) / n,
                count=n,
            )
        )
    rows.sort(key=lambda s: (-s.found_r, s.group))
    return rows


def scatter_data(records: Iterable[RunRecord]) -> tuple[list[tuple], list[str]]:
    """(max_re, log(nrmse + 1), time, solver class, solver) rows, plus notes on skipped records."""
    rows, notes = [], []
    for r in records:
        if r.max_re is None or math.isnan(r.max_re) or math.isnan(r.nrmse):
            notes.append(f"{r.problem}/{r.scheme}/{r.M}/{r.formulation_label}/seed {r.seed}: metric undefined, skipped")
            continue
        rows.append((r.max_re, math.log(r.nrmse + 1.0), r.time_s, "local", r.solver))
    return rows, notes


def render_table(rows: Sequence[SummaryRow], title: str = "") -> str:
    head = list(SUMMARY_COLUMNS)
    body = [r.to_row() for r in rows]
    width = [max(len(h), *(len(b[i]) for b in body)) if body else len(h) for i, h in enumerate(head)]
    lines = [title] if title else []
    lines.append("  ".join(h.ljust(w) for h, w in zip(head, width)))
    lines.append("  ".join("-" * w for w in width))
    lines.extend("  ".join(c.ljust(w) for c, w in zip(b, width)) for b in body)
    return "\n".join(lines)
