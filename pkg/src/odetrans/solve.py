"""Local NLP solver and multistart driver.

The local method is an augmented Lagrangian over the constraint rows
``lo <= c(xi) <= hi`` with a projected Levenberg-Marquardt inner loop. The
objective is the least-squares fit plus a linear slack cost, so the inner
model is Gauss-Newton on the fit residuals and on the shifted constraint
distances, which makes each step one sparse symmetric solve.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .expr import EvaluationError
from .transcribe import NlpInstance, eval_instance, initial_point, jacobian_values

log = logging.getLogger(__name__)

SOLVED = "solved-local"
ITERATION_LIMIT = "iteration-limit"
TIME_LIMIT = "time-limit"
NUMERICAL_FAILURE = "numerical-failure"
STATUSES = (SOLVED, ITERATION_LIMIT, TIME_LIMIT, NUMERICAL_FAILURE)


@dataclass(frozen=True)
class SolverOptions:
    time_limit_s: float = 600.0
    max_iterations: int = 3000  # inner iterations, summed over outer passes
    max_outer: int = 40
    max_inner: int = 300  # per outer pass
    mu0: float = 10.0
    mu_growth: float = 10.0
    mu_max: float = 1e10
    stationarity_tol: float = 1e-8
    constraint_tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if not self.time_limit_s > 0:
            raise ValueError("time_limit_s must be positive")
        if not (self.stationarity_tol > 0 and self.constraint_tol > 0):
            raise ValueError("tolerances must be positive")
        if self.max_iterations < 1 or self.max_outer < 1 or self.max_inner < 1:
            raise ValueError("iteration limits must be >= 1")
        if not (self.mu0 > 0 and self.mu_growth > 1 and self.mu_max >= self.mu0):
            raise ValueError("penalty schedule needs mu0 > 0, growth > 1, mu_max >= mu0")


@dataclass(frozen=True)
class LogEntry:
    outer: int
    objective: float
    max_violation: float
    mu: float
    step_norm: float


@dataclass
class SolveResult:
    status: str
    xi: np.ndarray
    p_hat: np.ndarray
    objective: float
    max_violation: float
    wall_time_s: float
    iterations: int
    starts: int = 1
    stationarity: float = float("nan")
    start_index: int = 0
    message: str = ""
    history: list[LogEntry] = field(default_factory=list)

    @property
    def feasible(self) -> bool:
        return self.status != NUMERICAL_FAILURE and np.isfinite(self.max_violation)

    def same_outcome(self, other: "SolveResult") -> bool:
        return (
            self.status == other.status
            and self.iterations == other.iterations
            and self.start_index == other.start_index
            and np.array_equal(self.xi, other.xi)
        )


class _Model:
    """Objective and constraint pieces of one instance.

    Rows with lo < hi get a bounded slack w (lo <= w <= hi) so the penalty
    acts on the smooth equations c(xi) - w = 0; equality rows use c - lo = 0.
    The inner variables are z = (xi, w).
    """

    def __init__(self, nlp: NlpInstance):
        self.nlp = nlp
        self.n = nlp.n_vars
        self.lo, self.hi = nlp.lo, nlp.hi
        self.ranged = np.flatnonzero(self.lo < self.hi)
        self.n_w = len(self.ranged)
        self.lb = nlp.lb
        self.ub = nlp.ub
        self.zlb = np.concatenate([nlp.lb, self.lo[self.ranged]])
        self.zub = np.concatenate([nlp.ub, self.hi[self.ranged]])
        self.target = np.where(self.lo < self.hi, 0.0, self.lo)
        self.fi = nlp.fit_index
        self.ft = nlp.fit_target
        self.q = nlp.cost
        self.has_q = bool(np.any(self.q))
        nz = self.n + self.n_w
        A = sp.csr_matrix((np.ones(len(self.fi)), (np.arange(len(self.fi)), self.fi)), shape=(len(self.fi), nz))
        self.AtA = (A.T @ A).tocsc()
        m = nlp.n_rows
        self.S = sp.csr_matrix((-np.ones(self.n_w), (self.ranged, np.arange(self.n_w))), shape=(m, self.n_w))
        self.rows = nlp._row_program

    def objective(self, xi: np.ndarray) -> float:
        r = xi[self.fi] - self.ft
        val = float(r @ r)
        if self.has_q:
            val += float(self.q @ xi[: self.n])
        return val

    def grad_objective(self, z: np.ndarray) -> np.ndarray:
        g = np.zeros(len(z))
        g[: self.n] = self.q
        np.add.at(g, self.fi, 2.0 * (z[self.fi] - self.ft))
        return g

    def constraints(self, xi: np.ndarray) -> np.ndarray:
        return self.rows(xi[: self.n])

    def violation(self, c: np.ndarray) -> float:
        if len(c) == 0:
            return 0.0
        return float(np.max(np.maximum(self.lo - c, 0.0) + np.maximum(c - self.hi, 0.0)))

    def residual(self, c: np.ndarray, z: np.ndarray) -> np.ndarray:
        e = c - self.target
        e[self.ranged] -= z[self.n:]
        return e

    def best_slack(self, c: np.ndarray, lam: np.ndarray, mu: float) -> np.ndarray:
        u = c[self.ranged] + lam[self.ranged] / mu
        return np.clip(u, self.lo[self.ranged], self.hi[self.ranged])

    def full_jacobian(self, xi: np.ndarray) -> sp.csr_matrix:
        J = jacobian_values(self.nlp, xi[: self.n])
        return sp.hstack([J, self.S], format="csr") if self.n_w else J

    def merit(self, f: float, e: np.ndarray, lam: np.ndarray, mu: float) -> float:
        u = e + lam / mu
        return f + 0.5 * mu * float(u @ u)


def _projected_gradient(xi: np.ndarray, g: np.ndarray, lb: np.ndarray, ub: np.ndarray) -> float:
    if len(xi) == 0:
        return 0.0
    return float(np.max(np.abs(xi - np.clip(xi - g, lb, ub))))


class _Deadline(Exception):
    pass


def solve_local(nlp: NlpInstance, start: np.ndarray, opts: SolverOptions | None = None,
                deadline: float | None = None) -> SolveResult:
    """Solve ``nlp`` from ``start`` (projected onto the bounds first)."""
    opts = opts or SolverOptions()
    t_start = time.perf_counter()
    if deadline is None:
        deadline = t_start + opts.time_limit_s
    model = _Model(nlp)
    lb, ub = model.lb, model.ub
    xi = np.clip(np.asarray(start, dtype=float), lb, ub)
    if xi.shape != (nlp.n_vars,):
        raise ValueError(f"start has shape {xi.shape}, instance needs ({nlp.n_vars},)")
    history: list[LogEntry] = []

    def result(status: str, xi_out: np.ndarray, c_out, it: int, stat: float, msg: str = ""):
        ok = c_out is not None and np.isfinite(xi_out).all()
        return SolveResult(
            status=status,
            xi=xi_out.copy(),
            p_hat=nlp.theta(xi_out),
            objective=model.objective(xi_out) if ok else float("nan"),
            max_violation=model.violation(c_out) if ok else float("inf"),
            wall_time_s=time.perf_counter() - t_start,
            iterations=it,
            stationarity=stat,
            message=msg,
            history=history,
        )

    if not np.isfinite(xi).all():
        return result(NUMERICAL_FAILURE, xi, None, 0, float("nan"), "non-finite start")
    try:
        c = model.constraints(xi)
    except EvaluationError as exc:
        return result(NUMERICAL_FAILURE, xi, None, 0, float("nan"), f"start point: {exc}")

    lam = np.zeros(nlp.n_rows)
    mu = opts.mu0
    z = np.concatenate([xi, model.best_slack(c, lam, mu)])
    viol = model.violation(c)
    iters = 0
    omega = None
    best_viol = viol  # violation of the last accepted outer pass
    nu = 1e-3
    stat = float("inf")
    status = ITERATION_LIMIT
    msg = "outer iteration limit"

    for outer in range(1, opts.max_outer + 1):
        saved = (z.copy(), c.copy(), lam.copy())
        try:
            z, c, inner_iters, step_norm, nu, omega_used = _inner(
                model, z, c, lam, mu, omega, nu, opts, deadline, opts.max_iterations - iters
            )
        except _Deadline as dl:
            z, c, inner_iters = dl.args
            iters += inner_iters
            status, msg = TIME_LIMIT, "time limit reached"
            break
        except EvaluationError as exc:
            z, c, lam = saved
            status, msg = NUMERICAL_FAILURE, f"evaluation fault: {exc}"
            break
        iters += inner_iters
        xi = z[: model.n]
        new_viol = model.violation(c)
        try:
            J = jacobian_values(nlp, xi)
        except EvaluationError as exc:
            z, c, lam = saved
            status, msg = NUMERICAL_FAILURE, f"jacobian fault: {exc}"
            break
        e = model.residual(c, z)
        lam_new = lam + mu * e
        g = model.grad_objective(z)[: model.n] + J.T @ lam_new
        stat = _projected_gradient(xi, g, lb, ub)

        if mu > opts.mu0 and new_viol > best_viol and new_viol > opts.constraint_tol:
            # keep the violation path monotone: retry the pass with a stiffer penalty
            z, c, lam = saved
            history.append(LogEntry(outer, model.objective(z), best_viol, mu, 0.0))
            if mu >= opts.mu_max:
                msg = "penalty reached its cap without reducing the violation"
                break
            mu = min(mu * opts.mu_growth, opts.mu_max)
            continue

        viol = new_viol
        lam = lam_new
        reduced = viol <= 0.25 * best_viol
        best_viol = min(best_viol, viol) if mu > opts.mu0 else viol
        history.append(LogEntry(outer, model.objective(z), viol, mu, step_norm))
        log.debug("outer %d f=%.3e viol=%.3e mu=%.1e stat=%.3e", outer, history[-1].objective, viol, mu, stat)
        if viol <= opts.constraint_tol and stat <= opts.stationarity_tol:
            status, msg = SOLVED, "converged"
            break
        if iters >= opts.max_iterations:
            msg = "iteration budget exhausted"
            break
        if viol > opts.constraint_tol and not reduced:
            if mu >= opts.mu_max and step_norm == 0.0:
                msg = "no progress at maximum penalty"
                break
            mu = min(mu * opts.mu_growth, opts.mu_max)
        z[model.n:] = model.best_slack(c, lam, mu)
        omega = max(opts.stationarity_tol, 0.1 * omega_used)

    return result(status, z[: model.n], c, iters, stat, msg)


def _inner(model: _Model, z, c, lam, mu, omega, nu, opts: SolverOptions, deadline: float, budget: int):
    """Projected Levenberg-Marquardt on the augmented Lagrangian at fixed (lam, mu)."""
    lb, ub = model.zlb, model.zub
    f = model.objective(z)
    e = model.residual(c, z)
    phi = model.merit(f, e, lam, mu)
    nu_mult = 2.0
    its = 0
    max_step = 0.0
    omega_used = omega
    J = model.full_jacobian(z)
    need_jac = False
    budget = min(max(budget, 1), opts.max_inner)
    while its < budget:
        if time.perf_counter() > deadline:
            raise _Deadline(z, c, its)
        if need_jac:
            J = model.full_jacobian(z)
            need_jac = False
        g = model.grad_objective(z) + (mu * J.T) @ (e + lam / mu)
        pg = _projected_gradient(z, g, lb, ub)
        if omega_used is None:
            omega_used = max(opts.stationarity_tol, 1e-2 * max(1.0, pg))
        if pg <= omega_used:
            break
        B = (mu * (J.T @ J)).tocsc() + 2.0 * model.AtA
        diagB = B.diagonal()
        D = np.maximum(diagB, 1e-12 * max(1.0, float(diagB.max(initial=0.0))))
        # variables held at a bound by the gradient stay fixed this step
        free = ~(((z <= lb) & (g > 0)) | ((z >= ub) & (g < 0)))
        fidx = np.flatnonzero(free)
        Bf = B[fidx][:, fidx]
        gf = g[fidx]
        while True:
            if nu > 1e20:
                return z, c, its, max_step, 1e-3, omega_used
            if time.perf_counter() > deadline:
                raise _Deadline(z, c, its)
            K = (Bf + sp.diags(nu * D[fidx])).tocsc()
            try:
                with np.errstate(all="ignore"):
                    step_f = spla.spsolve(K, -gf)
            except (RuntimeError, ValueError):
                step_f = None
            rho = -1.0
            if step_f is not None and np.isfinite(step_f).all():
                trial = z.copy()
                trial[fidx] += step_f
                np.clip(trial, lb, ub, out=trial)
                delta = trial - z
                pred = -(g @ delta + 0.5 * delta @ (B @ delta))
                try:
                    c_t = model.constraints(trial)
                except EvaluationError:
                    c_t = None
                if c_t is not None:
                    f_t = model.objective(trial)
                    e_t = model.residual(c_t, trial)
                    phi_t = model.merit(f_t, e_t, lam, mu)
                    actual = phi - phi_t
                    if np.isfinite(phi_t) and pred > 0:
                        rho = actual / pred
            if rho > 1e-4:
                nu = max(nu * max(1.0 / 3.0, 1.0 - (2.0 * rho - 1.0) ** 3), 1e-12)
                nu_mult = 2.0
                break
            nu *= nu_mult
            nu_mult *= 2.0
        its += 1
        step = float(np.max(np.abs(delta)))
        max_step = max(max_step, step)
        small = actual <= 1e-15 * abs(phi)
        z, c, f, e, phi = trial, c_t, f_t, e_t, phi_t
        need_jac = True
        scale = 1.0 + float(np.max(np.abs(z)))
        if step <= 1e-15 * scale or (small and step <= 1e-10 * scale):
            break
    return z, c, its, max_step, nu, omega_used


def sample_start(nlp: NlpInstance, rng: np.random.Generator) -> np.ndarray:
    """Uniform draw of (p, estimated x0) within bounds, lifted to a full point."""
    lo, hi = nlp.problem.theta_bounds
    theta = rng.uniform(lo, hi)
    return initial_point(nlp, theta)


def multistart(nlp: NlpInstance, count: int, opts: SolverOptions | None = None) -> SolveResult:
    """Best of ``count`` seeded local solves; the time limit covers all of them."""
    if count < 1:
        raise ValueError("multistart needs count >= 1")
    opts = opts or SolverOptions()
    t0 = time.perf_counter()
    deadline = t0 + opts.time_limit_s
    rng = np.random.default_rng(opts.seed)
    starts = [sample_start(nlp, rng) for _ in range(count)]
    best: SolveResult | None = None
    least_bad: SolveResult | None = None
    attempted = 0
    for k, xi0 in enumerate(starts):
        if attempted and time.perf_counter() > deadline:
            break
        attempted += 1
        r = solve_local(nlp, xi0, opts, deadline=deadline)
        r.start_index = k
        if r.status != NUMERICAL_FAILURE and r.max_violation <= opts.constraint_tol:
            if best is None or r.objective < best.objective:
                best = r
        if r.status != NUMERICAL_FAILURE and (
            least_bad is None or least_bad.status == NUMERICAL_FAILURE or r.max_violation < least_bad.max_violation
        ):
            least_bad = r
        elif least_bad is None:
            least_bad = r
        if r.status == TIME_LIMIT:
            break
    out = best if best is not None else least_bad
    out = replace(out, starts=attempted, wall_time_s=time.perf_counter() - t0)
    if best is None and out.status == SOLVED:
        out.status = ITERATION_LIMIT
    return out


def solve_start(nlp: NlpInstance, theta: Sequence[float], opts: SolverOptions | None = None) -> SolveResult:
    """Local solve from the point lifted from a given (p, estimated x0)."""
    return solve_local(nlp, initial_point(nlp, theta), opts)


def evaluate_point(nlp: NlpInstance, xi: np.ndarray) -> tuple[float, float]:
    """Objective and maximum violation of ``xi``."""
    f, c = eval_instance(nlp, xi)
    return f, float(nlp.violation(c).max(initial=0.0))


from .export import ExportReport, export_ampl, verify_export, write_ampl  # noqa: E402,F401  (export is part of this module's API)
