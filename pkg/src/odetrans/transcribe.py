"""Direct transcription of an estimation problem into an NLP instance.

The decision vector interleaves states and outputs per mesh node,
``(x_0, y_0, x_1, y_1, ..., x_M, y_M, p)``, followed by RK4 stage variables
and SoftCons slacks when the configuration needs them. Estimated initial
states are not separate variables: they are the x_0 block with widened bounds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .expr import Dag, EvaluationError, Expr, Program, balanced_sum, constant, substitute
from .integrate import MeasurementSet, Scheme, Trajectory
from .pool import OdeProblem, measurement_indices

INF = math.inf


class TranscriptionError(ValueError):
    pass


@dataclass(frozen=True)
class Formulation:
    kind: str = "Baseline"
    param: float | None = None

    def __post_init__(self):
        if self.kind == "Baseline":
            if self.param is not None:
                raise TranscriptionError("Baseline takes no parameter")
        elif self.kind == "ExtraTol":
            if self.param is None or not self.param > 0:
                raise TranscriptionError("ExtraTol needs a tolerance eps > 0")
        elif self.kind == "SoftCons":
            if self.param is None or not self.param >= 0:
                raise TranscriptionError("SoftCons needs a penalty P >= 0")
        else:
            raise TranscriptionError(f"unknown formulation {self.kind!r}")

    @classmethod
    def baseline(cls) -> "Formulation":
        return cls()

    @classmethod
    def extratol(cls, eps: float) -> "Formulation":
        return cls("ExtraTol", float(eps))

    @classmethod
    def softcons(cls, P: float) -> "Formulation":
        return cls("SoftCons", float(P))

    @classmethod
    def parse(cls, text: str) -> "Formulation":
        """Read ``Baseline``, ``ExtraTol(1e-4)`` or ``SoftCons:1e3`` style labels."""
        s = text.strip()
        for sep in ("(", ":", "="):
            if sep in s:
                kind, _, val = s.partition(sep)
                return cls(kind.strip(), float(val.rstrip(")").strip()))
        return cls(s)

    @property
    def label(self) -> str:
        return self.kind if self.param is None else f"{self.kind}({self.param:g})"


@dataclass(frozen=True)
class VariableLayout:
    M: int
    n_s: int
    n_y: int
    n_p: int
    rk4: bool = False
    n_slack: int = 0

    @property
    def node_width(self) -> int:
        return self.n_s + self.n_y

    def x(self, m: int, i: int) -> int:
        return m * self.node_width + i

    def y(self, m: int, j: int) -> int:
        return m * self.node_width + self.n_s + j

    @property
    def p_offset(self) -> int:
        return (self.M + 1) * self.node_width

    def p(self, j: int) -> int:
        return self.p_offset + j

    @property
    def k_offset(self) -> int:
        return self.p_offset + self.n_p

    def k(self, m: int, stage: int, i: int) -> int:
        return self.k_offset + (4 * m + stage) * self.n_s + i

    @property
    def s_offset(self) -> int:
        return self.k_offset + (4 * self.M * self.n_s if self.rk4 else 0)

    def s(self, j: int) -> int:
        return self.s_offset + j

    @property
    def size(self) -> int:
        return self.s_offset + self.n_slack

    def block_of(self, idx: int) -> tuple[str, tuple[int, ...]]:
        """Block name and coordinates of flat index ``idx``."""
        if not 0 <= idx < self.size:
            raise IndexError(idx)
        if idx < self.p_offset:
            m, r = divmod(idx, self.node_width)
            return ("x", (m, r)) if r < self.n_s else ("y", (m, r - self.n_s))
        if idx < self.k_offset:
            return "p", (idx - self.p_offset,)
        if idx < self.s_offset:
            q, i = divmod(idx - self.k_offset, self.n_s)
            m, stage = divmod(q, 4)
            return "k", (m, stage, i)
        return "s", (idx - self.s_offset,)

    def states(self, xi: np.ndarray) -> np.ndarray:
        nodes = np.asarray(xi)[: self.p_offset].reshape(self.M + 1, self.node_width)
        return nodes[:, : self.n_s]

    def outputs(self, xi: np.ndarray) -> np.ndarray:
        nodes = np.asarray(xi)[: self.p_offset].reshape(self.M + 1, self.node_width)
        return nodes[:, self.n_s:]

    def params(self, xi: np.ndarray) -> np.ndarray:
        return np.asarray(xi)[self.p_offset: self.k_offset]


def _vars(dag: Dag, idx: Sequence[int]) -> list[Expr]:
    return [Expr(dag, dag.var(i)) for i in idx]


def _mesh_times(problem: OdeProblem, M: int) -> tuple[list[float], float]:
    h = (problem.tf - problem.t0) / M
    return [problem.t0 + m * h for m in range(M + 1)], h


def _dynamic_rows(problem: OdeProblem, scheme: Scheme, M: int, dag: Dag, layout: VariableLayout) -> list[Expr]:
    n_s = problem.n_s
    t, h = _mesh_times(problem, M)
    X = [_vars(dag, [layout.x(m, i) for i in range(n_s)]) for m in range(M + 1)]
    P = _vars(dag, [layout.p(j) for j in range(problem.n_p)])
    rhs = list(problem.rhs)

    def f(tm: float, xs: Sequence[Expr]) -> list[Expr]:
        return substitute(rhs, dag, xs, P, tm)

    rows: list[Expr] = []
    if scheme is Scheme.RK4:
        half = constant(dag, h / 2)
        full = constant(dag, h)
        sixth = constant(dag, h / 6)
        for m in range(M):
            K = [_vars(dag, [layout.k(m, s, i) for i in range(n_s)]) for s in range(4)]
            args = [
                (t[m], X[m]),
                (t[m] + h / 2, [x + half * k for x, k in zip(X[m], K[0])]),
                (t[m] + h / 2, [x + half * k for x, k in zip(X[m], K[1])]),
                (t[m + 1], [x + full * k for x, k in zip(X[m], K[2])]),
            ]
            for s, (ts, xs) in enumerate(args):
                rows.extend(k - fk for k, fk in zip(K[s], f(ts, xs)))
            for i in range(n_s):
                acc = ((K[0][i] + 2 * K[1][i]) + 2 * K[2][i]) + K[3][i]
                rows.append((X[m + 1][i] - X[m][i]) - sixth * acc)
        return rows

    F = [f(t[m], X[m]) for m in range(M + 1)]
    if scheme is Scheme.EULER:
        c = constant(dag, h)
        for m in range(M):
            rows.extend((X[m + 1][i] - X[m][i]) - c * F[m][i] for i in range(n_s))
        return rows

    c2 = constant(dag, h / 2)
    trap_steps = {Scheme.TRAPEZOID: M, Scheme.ADAMS_MOULTON3: 2, Scheme.SIMPSON: 1}[scheme]
    for m in range(trap_steps):
        rows.extend((X[m + 1][i] - X[m][i]) - c2 * (F[m][i] + F[m + 1][i]) for i in range(n_s))
    if scheme is Scheme.ADAMS_MOULTON3:
        c = constant(dag, h / 24)
        for m in range(M - 2):
            rows.extend(
                (X[m + 3][i] - X[m + 2][i])
                - c * (((9 * F[m + 3][i] + 19 * F[m + 2][i]) - 5 * F[m + 1][i]) + F[m][i])
                for i in range(n_s)
            )
    elif scheme is Scheme.SIMPSON:
        c = constant(dag, h / 3)
        for m in range(1, M):
            rows.extend(
                (X[m + 1][i] - X[m - 1][i]) - c * ((F[m + 1][i] + 4 * F[m][i]) + F[m - 1][i])
                for i in range(n_s)
            )
    return rows


def dynamic_row_count(scheme: Scheme | str, M: int, n_s: int) -> int:
    scheme = Scheme.parse(scheme)
    return (5 if scheme is Scheme.RK4 else 1) * M * n_s


def _check_mesh(problem: OdeProblem, scheme: Scheme, M: int) -> None:
    if M < max(scheme.min_mesh, 1):
        raise TranscriptionError(f"{scheme.value} needs a mesh of at least {scheme.min_mesh} steps, got {M}")
    measurement_indices(problem, M)


def discretize(problem: OdeProblem, scheme: Scheme | str, M: int) -> list[Expr]:
    """Residual rows H of ``scheme`` on mesh ``M`` over the transcription variables."""
    scheme = Scheme.parse(scheme)
    _check_mesh(problem, scheme, M)
    layout = VariableLayout(M, problem.n_s, problem.n_y, problem.n_p, scheme is Scheme.RK4)
    return _dynamic_rows(problem, scheme, M, Dag(), layout)


ROW_DYN, ROW_OBS, ROW_IC, ROW_SOFT_LO, ROW_SOFT_HI = range(5)
ROW_KIND_NAMES = {ROW_DYN: "dyn", ROW_OBS: "obs", ROW_IC: "ic", ROW_SOFT_LO: "softlo", ROW_SOFT_HI: "softhi"}


@dataclass(eq=False)
class NlpInstance:
    problem: OdeProblem
    scheme: Scheme
    M: int
    formulation: Formulation
    data: MeasurementSet
    layout: VariableLayout
    dag: Dag
    lb: np.ndarray
    ub: np.ndarray
    objective: Expr
    rows: list[Expr]
    lo: np.ndarray
    hi: np.ndarray
    row_kind: np.ndarray
    dynamic: list[Expr]  # raw H rows (before relaxation)
    fit_index: np.ndarray  # variable index of each fitted output y_{m(i), j}
    fit_target: np.ndarray
    cost: np.ndarray  # linear objective coefficients (SoftCons penalty)
    meas_index: list[int] = field(default_factory=list)

    @property
    def n_vars(self) -> int:
        return self.layout.size

    @property
    def n_rows(self) -> int:
        return len(self.rows)

    @property
    def provenance(self) -> dict:
        return {
            "problem": self.problem.name,
            "scheme": self.scheme.value,
            "M": self.M,
            "formulation": self.formulation.label,
        }

    @property
    def constraints(self) -> list[tuple[Expr, float, float]]:
        return [(e, float(lo), float(hi)) for e, lo, hi in zip(self.rows, self.lo, self.hi)]

    @cached_property
    def sparsity(self) -> list[list[int]]:
        return [self.dag.variables(e.id) for e in self.rows]

    @cached_property
    def _row_program(self) -> Program:
        return Program(self.dag, [e.id for e in self.rows])

    @cached_property
    def _dyn_program(self) -> Program:
        return Program(self.dag, [e.id for e in self.dynamic])

    @cached_property
    def _obj_program(self) -> Program:
        return Program(self.dag, [self.objective.id])

    @cached_property
    def _jacobian(self) -> tuple[np.ndarray, np.ndarray, Program]:
        rows, cols, nodes = [], [], []
        g = self.dag
        for r, (e, support) in enumerate(zip(self.rows, self.sparsity)):
            for v in support:
                rows.append(r)
                cols.append(v)
                nodes.append(g.diff(e.id, g.var(v)))
        return (
            np.array(rows, dtype=np.intp),
            np.array(cols, dtype=np.intp),
            Program(g, nodes),
        )

    def theta(self, xi: np.ndarray) -> np.ndarray:
        """Rate parameters followed by estimated initial states, read from ``xi``."""
        x0 = self.layout.states(xi)[0]
        return np.concatenate([self.layout.params(xi), x0[self.problem.estimated_states]])

    def predictions(self, xi: np.ndarray) -> np.ndarray:
        """Fitted outputs y_{m(i)} as an (n, n_y) matrix."""
        return np.asarray(xi)[self.fit_index].reshape(self.data.n, self.data.n_y)

    def fit_residuals(self, xi: np.ndarray) -> np.ndarray:
        return np.asarray(xi)[self.fit_index] - self.fit_target

    def dynamic_residuals(self, xi: np.ndarray) -> np.ndarray:
        return self._dyn_program(np.asarray(xi, dtype=float))

    def violation(self, c: np.ndarray) -> np.ndarray:
        """Per-row distance of raw constraint values ``c`` to [lo, hi]."""
        return np.maximum(self.lo - c, 0.0) + np.maximum(c - self.hi, 0.0)


def formulate(
    problem: OdeProblem,
    scheme: Scheme | str,
    M: int,
    formulation: Formulation,
    data: MeasurementSet,
) -> NlpInstance:
    """Build the NLP for (problem, scheme, mesh, formulation) fitted to ``data``."""
    scheme = Scheme.parse(scheme)
    _check_mesh(problem, scheme, M)
    if data.n != problem.n or data.n_y != problem.n_y:
        raise TranscriptionError(
            f"data shape ({data.n}, {data.n_y}) does not match the problem grid ({problem.n}, {problem.n_y})"
        )
    if not np.allclose(data.taus, problem.grid.taus, rtol=1e-12, atol=1e-12 * abs(problem.tf)):
        raise TranscriptionError("measurement times do not match the problem grid")
    n_s, n_y, n_p = problem.n_s, problem.n_y, problem.n_p
    soft = formulation.kind == "SoftCons"
    n_dyn = dynamic_row_count(scheme, M, n_s)
    layout = VariableLayout(M, n_s, n_y, n_p, scheme is Scheme.RK4, n_dyn if soft else 0)
    dag = Dag()

    dyn = _dynamic_rows(problem, scheme, M, dag, layout)
    assert len(dyn) == n_dyn

    rows: list[Expr] = []
    lo: list[float] = []
    hi: list[float] = []
    kind: list[int] = []
    if formulation.kind == "Baseline":
        rows.extend(dyn)
        lo.extend([0.0] * n_dyn)
        hi.extend([0.0] * n_dyn)
        kind.extend([ROW_DYN] * n_dyn)
    elif formulation.kind == "ExtraTol":
        eps = formulation.param
        rows.extend(dyn)
        lo.extend([-eps] * n_dyn)
        hi.extend([eps] * n_dyn)
        kind.extend([ROW_DYN] * n_dyn)
    else:
        for j, H in enumerate(dyn):
            s = Expr(dag, dag.var(layout.s(j)))
            rows.extend([H + s, H - s])
            lo.extend([0.0, -INF])
            hi.extend([INF, 0.0])
            kind.extend([ROW_SOFT_LO, ROW_SOFT_HI])

    P = _vars(dag, [layout.p(j) for j in range(n_p)])
    obs = list(problem.obs)
    times, _ = _mesh_times(problem, M)
    for m in range(M + 1):
        X = _vars(dag, [layout.x(m, i) for i in range(n_s)])
        G = substitute(obs, dag, X, P, times[m])
        for j in range(n_y):
            rows.append(Expr(dag, dag.var(layout.y(m, j))) - G[j])
        lo.extend([0.0] * n_y)
        hi.extend([0.0] * n_y)
        kind.extend([ROW_OBS] * n_y)

    for i, v in enumerate(problem.fixed_x0):
        if v is not None:
            rows.append(Expr(dag, dag.var(layout.x(0, i))) - v)
            lo.append(0.0)
            hi.append(0.0)
            kind.append(ROW_IC)

    lb = np.full(layout.size, -INF)
    ub = np.full(layout.size, INF)
    for j, (a, b) in enumerate(problem.p_bounds):
        lb[layout.p(j)], ub[layout.p(j)] = a, b
    for i, (a, b) in zip(problem.estimated_states, problem.ic_bounds):
        lb[layout.x(0, i)], ub[layout.x(0, i)] = a, b
    cost = np.zeros(layout.size)
    if soft:
        lb[layout.s_offset:] = 0.0
        cost[layout.s_offset:] = formulation.param

    midx = measurement_indices(problem, M)
    fit_index = np.array([layout.y(m, j) for m in midx for j in range(n_y)], dtype=np.intp)
    fit_target = np.asarray(data.values, dtype=float).reshape(-1)
    terms = [
        (Expr(dag, dag.var(int(v))) - float(target)) ** 2 for v, target in zip(fit_index, fit_target)
    ]
    objective = balanced_sum(terms, dag)
    if soft and formulation.param > 0:
        slacks = _vars(dag, [layout.s(j) for j in range(n_dyn)])
        objective = objective + formulation.param * balanced_sum(slacks, dag)

    return NlpInstance(
        problem=problem,
        scheme=scheme,
        M=M,
        formulation=formulation,
        data=data,
        layout=layout,
        dag=dag,
        lb=lb,
        ub=ub,
        objective=objective,
        rows=rows,
        lo=np.array(lo),
        hi=np.array(hi),
        row_kind=np.array(kind, dtype=np.int8),
        dynamic=dyn,
        fit_index=fit_index,
        fit_target=fit_target,
        cost=cost,
        meas_index=midx,
    )


def eval_instance(nlp: NlpInstance, xi: np.ndarray) -> tuple[float, np.ndarray]:
    """Objective value and raw constraint row values at ``xi``.

    Raises :class:`EvaluationError` when the point hits an arithmetic fault.
    """
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (nlp.n_vars,):
        raise TranscriptionError(f"point has length {xi.shape}, layout needs {nlp.n_vars}")
    obj = float(nlp._obj_program(xi)[0])
    return obj, nlp._row_program(xi)


def jacobian_structure(nlp: NlpInstance) -> tuple[np.ndarray, np.ndarray]:
    rows, cols, _ = nlp._jacobian
    return rows, cols


def jacobian_values(nlp: NlpInstance, xi: np.ndarray) -> sp.csr_matrix:
    rows, cols, prog = nlp._jacobian
    vals = prog(np.asarray(xi, dtype=float))
    return sp.csr_matrix((vals, (rows, cols)), shape=(nlp.n_rows, nlp.n_vars))


# ---------------------------------------------------------------------------
# Points


def _fill_slacks(nlp: NlpInstance, xi: np.ndarray) -> np.ndarray:
    if nlp.layout.n_slack:
        xi[nlp.layout.s_offset:] = 0.0
        xi[nlp.layout.s_offset:] = np.abs(nlp.dynamic_residuals(xi))
    return xi


def _fill_nodes(nlp: NlpInstance, X: np.ndarray, p: np.ndarray, stages: np.ndarray | None) -> np.ndarray:
    from .integrate import observe

    lay = nlp.layout
    xi = np.zeros(lay.size)
    nodes = xi[: lay.p_offset].reshape(lay.M + 1, lay.node_width)
    nodes[:, : lay.n_s] = X
    nodes[:, lay.n_s:] = observe(nlp.problem, X, p)
    xi[lay.p_offset: lay.k_offset] = p
    if lay.rk4:
        xi[lay.k_offset: lay.s_offset] = np.asarray(stages).reshape(-1)
    return _fill_slacks(nlp, xi)


def point_from_trajectory(nlp: NlpInstance, traj: Trajectory, theta: Sequence[float]) -> np.ndarray:
    """Decision vector holding ``traj`` (and its stages), outputs g(x, p) and p."""
    if traj.M != nlp.M:
        raise TranscriptionError("trajectory mesh does not match the instance")
    p, _ = nlp.problem.split(theta)
    stages = traj.stages
    if nlp.layout.rk4 and stages is None:
        raise TranscriptionError("RK4 instance needs a trajectory with stage values")
    return _fill_nodes(nlp, traj.states, p, stages)


def initial_point(nlp: NlpInstance, theta: Sequence[float]) -> np.ndarray:
    """Start point: explicit-Euler rollout at ``theta`` with outputs and stages filled in.

    A rollout that overflows or faults is frozen at its last sane state, so
    the result is always finite.
    """
    prob = nlp.problem
    p, x0 = prob.split(theta)
    f = prob.rhs_function()
    pl = tuple(float(v) for v in p)
    M = nlp.M
    t, h = _mesh_times(prob, M)
    X = np.empty((M + 1, prob.n_s))
    Fv = np.zeros((M + 1, prob.n_s))
    X[0] = x0
    cap = 1e6 * (1.0 + np.max(np.abs(x0)))
    frozen = False
    for m in range(M + 1):
        if not frozen:
            try:
                fm = np.array(f(t[m], tuple(X[m]), pl))
                if not np.isfinite(fm).all():
                    raise EvaluationError("non-finite rhs")
            except EvaluationError:
                fm = np.zeros(prob.n_s)
                frozen = True
            Fv[m] = fm
        if m == M:
            break
        nxt = X[m] + h * Fv[m]
        if frozen or not np.isfinite(nxt).all() or np.max(np.abs(nxt)) > cap:
            frozen = True
            nxt = X[m].copy()
        X[m + 1] = nxt
    stages = None
    if nlp.layout.rk4:
        stages = np.repeat(Fv[:M, None, :], 4, axis=1)
    try:
        xi = _fill_nodes(nlp, X, p, stages)
    except EvaluationError:
        xi = _fill_nodes(nlp, np.repeat(x0[None, :], M + 1, axis=0), p, None if stages is None else np.zeros_like(stages))
    return xi
