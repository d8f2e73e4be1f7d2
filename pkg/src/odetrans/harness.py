"""Configuration matrices, batch execution and result files."""

from __future__ import annotations

import csv
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

from .integrate import IntegrationError, MeasurementSet, Scheme, read_measurements, synthesize_measurements
from .metrics import (
    PAIR_GROUPINGS,
    RECORD_COLUMNS,
    SCATTER_COLUMNS,
    SUMMARY_COLUMNS,
    FAILED,
    MetricError,
    RunRecord,
    classify,
    render_table,
    scatter_data,
    summarize,
)
from .pool import POOL_NAMES, OdeProblem, ProblemError, build_problem, load_problem
from .solve import NUMERICAL_FAILURE, SolverOptions, multistart, write_ampl
from .transcribe import Formulation, formulate

log = logging.getLogger(__name__)

MODES = ("local", "multistart", "export")
FORMULATION_KINDS = ("Baseline", "ExtraTol", "SoftCons")
DEFAULT_EPS = (1e-4, 1e-6)
DEFAULT_PENALTY = (1e3, 1e5)
# problem-specific ExtraTol tolerance lists
EPS_PRESETS = {
    "lv_p": (1e-5, 1e-6, 1e-8),
    "crauste_f": (1e-5, 1e-7, 1e-9),
    "crauste_p": (1e-5, 1e-7, 1e-9),
}
RECORDS_FILE = "records.csv"
SCATTER_FILE = "scatter.csv"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    problems: tuple[str, ...]
    schemes: tuple[str, ...] = tuple(s.value for s in Scheme)
    meshes: str | tuple[int, ...] = "shipped"  # "shipped", "smallest", or explicit sizes
    formulations: tuple[str, ...] = FORMULATION_KINDS
    eps: tuple[float, ...] = DEFAULT_EPS
    penalty: tuple[float, ...] = DEFAULT_PENALTY
    eps_presets: bool = False
    mode: str = "local"
    starts: int = 1
    seed: int = 0
    time_limit_s: float = 600.0
    workers: int = 1
    out: Path = Path("results")
    data_dir: Path | None = None  # optional <problem>.csv measurement files

    def __post_init__(self):
        for name in ("problems", "schemes", "formulations"):
            if not getattr(self, name):
                raise ConfigError(f"{name} selection is empty")
        for s in self.schemes:
            Scheme.parse(s)
        for f in self.formulations:
            if f not in FORMULATION_KINDS:
                raise ConfigError(f"unknown formulation {f!r}")
        if "ExtraTol" in self.formulations and not self.eps and not self.eps_presets:
            raise ConfigError("ExtraTol selected with an empty eps list")
        if any(not e > 0 for e in self.eps):
            raise ConfigError("eps values must be positive")
        if "SoftCons" in self.formulations and not self.penalty:
            raise ConfigError("SoftCons selected with an empty penalty list")
        if any(not P >= 0 for P in self.penalty):
            raise ConfigError("penalty values must be >= 0")
        if isinstance(self.meshes, str):
            if self.meshes not in ("shipped", "smallest"):
                raise ConfigError(f"mesh selector must be 'shipped', 'smallest' or a list, got {self.meshes!r}")
        elif not self.meshes or any(int(m) < 1 for m in self.meshes):
            raise ConfigError("explicit meshes must be a non-empty list of positive sizes")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.starts < 1:
            raise ConfigError("starts must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if not self.time_limit_s > 0:
            raise ConfigError("time limit must be positive")

    @property
    def solver_id(self) -> str:
        return "builtin-local" if self.mode == "local" else f"builtin-multistart({self.starts})"


@dataclass(frozen=True)
class RunSpec:
    problem: str
    scheme: str
    M: int
    formulation: str
    form_param: float | None
    seed: int
    solver: str
    starts: int
    time_limit_s: float
    data_dir: str | None = None

    @property
    def formulation_spec(self) -> Formulation:
        return Formulation(self.formulation, self.form_param)

    @property
    def label(self) -> str:
        tag = self.formulation_spec.label.replace("(", "_").replace(")", "")
        return f"{problem_label(self.problem)}_{self.scheme}_{self.M}_{tag}"


def problem_label(ref: str) -> str:
    return ref if ref in POOL_NAMES else Path(ref).stem


@lru_cache(maxsize=None)
def resolve_problem(ref: str) -> OdeProblem:
    if ref in POOL_NAMES:
        return build_problem(ref)
    path = Path(ref)
    if path.suffix in (".yaml", ".yml") or path.exists():
        return load_problem(path)
    raise ProblemError(f"unknown problem {ref!r}; choose from {', '.join(POOL_NAMES)} or give a problem file")


def _meshes(cfg: RunConfig, prob: OdeProblem) -> list[int]:
    if cfg.meshes == "shipped":
        return list(prob.mesh_options)
    if cfg.meshes == "smallest":
        return [min(prob.mesh_options)]
    return [int(m) for m in cfg.meshes]


def _form_cells(cfg: RunConfig, problem: str) -> list[tuple[str, float | None]]:
    cells: list[tuple[str, float | None]] = []
    for kind in cfg.formulations:
        if kind == "Baseline":
            cells.append(("Baseline", None))
        elif kind == "ExtraTol":
            eps = EPS_PRESETS.get(problem_label(problem), cfg.eps) if cfg.eps_presets else cfg.eps
            cells.extend(("ExtraTol", float(e)) for e in eps)
        else:
            cells.extend(("SoftCons", float(P)) for P in cfg.penalty)
    return cells


def expand(cfg: RunConfig) -> list[RunSpec]:
    """Run specs in nested order problem, scheme, mesh, formulation, parameter."""
    specs = []
    for problem in cfg.problems:
        prob = resolve_problem(problem)
        for scheme in cfg.schemes:
            sch = Scheme.parse(scheme).value
            for M in _meshes(cfg, prob):
                for kind, param in _form_cells(cfg, problem):
                    specs.append(
                        RunSpec(problem, sch, M, kind, param, cfg.seed, cfg.solver_id, cfg.starts, cfg.time_limit_s,
                                None if cfg.data_dir is None else str(cfg.data_dir))
                    )
    return specs


@lru_cache(maxsize=None)
def _measurements(problem: str, data_dir: str | None) -> MeasurementSet:
    if data_dir is not None:
        path = Path(data_dir) / f"{problem_label(problem)}.csv"
        if path.exists():
            return read_measurements(path)
    return synthesize_measurements(resolve_problem(problem))


def _failure_record(spec: RunSpec, t0: float, msg: str) -> RunRecord:
    log.info("run %s failed: %s", spec.label, msg)
    return RunRecord(
        problem=problem_label(spec.problem), scheme=spec.scheme, M=spec.M, formulation=spec.formulation,
        form_param=spec.form_param, solver=spec.solver, seed=spec.seed, status=NUMERICAL_FAILURE,
        objective=math.nan, max_violation=math.inf, max_re=None, nrmse=math.nan, outcome=FAILED,
        time_s=time.perf_counter() - t0, iterations=0,
    )


def execute(spec: RunSpec) -> RunRecord:
    """One run; any fault inside it becomes a Failed record."""
    t0 = time.perf_counter()
    try:
        prob = resolve_problem(spec.problem)
        data = _measurements(spec.problem, spec.data_dir)
        nlp = formulate(prob, spec.scheme, spec.M, spec.formulation_spec, data)
        opts = SolverOptions(time_limit_s=spec.time_limit_s, seed=spec.seed)
        res = multistart(nlp, spec.starts, opts)
        outcome = classify(res, nlp)
    except (ArithmeticError, ValueError, ProblemError, IntegrationError, MetricError) as exc:
        return _failure_record(spec, t0, f"{type(exc).__name__}: {exc}")
    return RunRecord(
        problem=problem_label(spec.problem), scheme=spec.scheme, M=spec.M, formulation=spec.formulation,
        form_param=spec.form_param, solver=spec.solver, seed=spec.seed, status=res.status,
        objective=res.objective, max_violation=res.max_violation, max_re=outcome.max_re, nrmse=outcome.nrmse,
        outcome=outcome.tag, time_s=time.perf_counter() - t0, iterations=res.iterations,
    )


def export_spec(spec: RunSpec, out: Path) -> tuple[Path, Path]:
    prob = resolve_problem(spec.problem)
    nlp = formulate(prob, spec.scheme, spec.M, spec.formulation_spec, _measurements(spec.problem, spec.data_dir))
    return write_ampl(nlp, out / spec.label)


class RecordWriter:
    """Single appending writer; each record is flushed and fsync'd."""

    def __init__(self, path: Path):
        self.path = path
        self.fh = open(path, "w", newline="")
        self.w = csv.writer(self.fh)
        self.w.writerow(RECORD_COLUMNS)
        self._sync()

    def _sync(self):
        self.fh.flush()
        os.fsync(self.fh.fileno())

    def write(self, rec: RunRecord) -> None:
        self.w.writerow(rec.to_row())
        self._sync()

    def close(self) -> None:
        self.fh.close()


def write_records(path: Path, records: Iterable[RunRecord]) -> None:
    tmp = path.with_suffix(".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow(r.to_row())
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def read_records(path: str | Path) -> list[RunRecord]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or tuple(rd.fieldnames) != RECORD_COLUMNS:
            raise MetricError(f"{path}: header does not match the record columns")
        return [RunRecord.from_row(row) for row in rd]


GROUPINGS: tuple[tuple[str, ...], ...] = (
    ("problem",), ("solver",), ("scheme",), ("formulation",)
) + PAIR_GROUPINGS


def write_summaries(out: Path, records: Sequence[RunRecord]) -> dict[str, Path]:
    paths = {}
    for g in GROUPINGS:
        name = "-".join(g)
        path = out / f"summary_{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(SUMMARY_COLUMNS)
            for row in summarize(records, g):
                w.writerow(row.to_row())
        paths[name] = path
    rows, notes = scatter_data(records)
    with open(out / SCATTER_FILE, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SCATTER_COLUMNS)
        for r in rows:
            w.writerow([format(r[0], ".17g"), format(r[1], ".17g"), format(r[2], ".6g"), r[3], r[4]])
    for note in notes:
        log.info("scatter: %s", note)
    return paths


@dataclass
class RunOutput:
    specs: list[RunSpec]
    records: list[RunRecord] = field(default_factory=list)
    exports: list[tuple[Path, Path]] = field(default_factory=list)
    out: Path = Path(".")


def run(cfg: RunConfig) -> RunOutput:
    specs = expand(cfg)  # validation happens before any run starts
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = RunOutput(specs, out=out)
    if cfg.mode == "export":
        exp = out / "exports"
        exp.mkdir(exist_ok=True)
        result.exports = [export_spec(s, exp) for s in specs]
        return result

    order = {s: k for k, s in enumerate(specs)}
    done: dict[int, RunRecord] = {}
    writer = RecordWriter(out / RECORDS_FILE)
    try:
        if cfg.workers == 1:
            for s in specs:
                rec = execute(s)
                writer.write(rec)
                done[order[s]] = rec
        else:
            with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
                futures = {pool.submit(execute, s): s for s in specs}
                for fut in as_completed(futures):
                    s = futures[fut]
                    try:
                        rec = fut.result()
                    except Exception as exc:  # worker crash: still one record per spec
                        rec = _failure_record(s, time.perf_counter(), f"worker error: {exc}")
                    writer.write(rec)
                    done[order[s]] = rec
    finally:
        writer.close()
    result.records = [done[k] for k in range(len(specs))]
    write_records(out / RECORDS_FILE, result.records)
    write_summaries(out, result.records)
    return result


def report(path: str | Path, group_by: str | Sequence[str] | None = None) -> str:
    records = read_records(path)
    groups = [tuple(group_by.split(",")) if isinstance(group_by, str) else tuple(group_by)] if group_by else GROUPINGS
    parts = []
    for g in groups:
        parts.append(render_table(summarize(records, g), title=f"by {' x '.join(g)}"))
    return "\n\n".join(parts) + "\n"
