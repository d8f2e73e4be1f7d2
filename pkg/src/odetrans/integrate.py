"""Fixed-step forward integration and synthetic measurement data.

:func:`step_scheme` marches a problem with exactly the algebraic relations the
transcription imposes, so its trajectories are feasible points of the NLP.
:func:`rk4_integrate` on a fine mesh produces the reference data.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .expr import EvaluationError
from .pool import OdeProblem, measurement_indices

NEWTON_TOL = 1e-12
NEWTON_MAX_ITER = 50


class Scheme(str, enum.Enum):
    EULER = "Euler"
    TRAPEZOID = "Trapezoid"
    ADAMS_MOULTON3 = "AdamsMoulton3"
    SIMPSON = "Simpson"
    RK4 = "RK4"

    @classmethod
    def parse(cls, name: "str | Scheme") -> "Scheme":
        if isinstance(name, Scheme):
            return name
        key = str(name).replace("-", "").replace("_", "").lower()
        for s in cls:
            if key == s.value.lower():
                return s
        aliases = {"am3": cls.ADAMS_MOULTON3, "adamsmoulton": cls.ADAMS_MOULTON3, "rungekutta": cls.RK4}
        if key in aliases:
            return aliases[key]
        raise ValueError(f"unknown scheme {name!r}")

    @property
    def min_mesh(self) -> int:
        return 4 if self is Scheme.ADAMS_MOULTON3 else 2 if self is Scheme.SIMPSON else 1


class IntegrationError(ArithmeticError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (M+1, n_s)
    scheme: Scheme
    h: float
    # RK4 stage values k^1..k^4 per step, shape (M, 4, n_s)
    stages: np.ndarray | None = None

    @property
    def M(self) -> int:
        return len(self.times) - 1


@dataclass(frozen=True)
class MeasurementSet:
    taus: np.ndarray
    values: np.ndarray  # (n, n_y)
    provenance: str = "external"

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] != len(self.taus):
            raise ValueError("measurement values must be an (n, n_y) matrix matching taus")
        if not np.isfinite(self.values).all():
            raise ValueError("measurement values must be finite")

    @property
    def n(self) -> int:
        return len(self.taus)

    @property
    def n_y(self) -> int:
        return self.values.shape[1]


def write_measurements(data: MeasurementSet, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["tau"] + [f"y{j + 1}" for j in range(data.n_y)])
        for tau, row in zip(data.taus, data.values):
            w.writerow([format(float(tau), ".17g")] + [format(float(v), ".17g") for v in row])


def read_measurements(path: str | Path) -> MeasurementSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], [r for r in rows[1:] if r]
    if not header or header[0] != "tau":
        raise ValueError("measurement file must start with a 'tau' column")
    arr = np.array(body, dtype=float).reshape(len(body), len(header))
    return MeasurementSet(arr[:, 0].copy(), arr[:, 1:].copy(), "external")


# ---------------------------------------------------------------------------


def _rhs(problem: OdeProblem, p: np.ndarray):
    f = problem.rhs_function()
    pl = tuple(float(v) for v in p)

    def F(t: float, x) -> np.ndarray:
        return np.array(f(t, tuple(x), pl))

    return F


def _rhs_jac(problem: OdeProblem, p: np.ndarray):
    jf = problem.rhs_jacobian()
    n = problem.n_s
    pl = tuple(float(v) for v in p)

    def J(t: float, x) -> np.ndarray:
        return np.array(jf(t, tuple(x), pl)).reshape(n, n)

    return J


def _newton(G, JG, z0: np.ndarray, step: int) -> np.ndarray:
    """Damped Newton on G(z) = 0 from z0."""
    z = z0.copy()
    g = G(z)
    eps = np.finfo(float).eps
    for _ in range(NEWTON_MAX_ITER):
        r = np.max(np.abs(g))
        # below NEWTON_TOL, or at the rounding floor of large-magnitude states
        if r <= max(NEWTON_TOL, 16 * eps * (1.0 + np.max(np.abs(z)))):
            return z
        try:
            d = np.linalg.solve(JG(z), -g)
        except np.linalg.LinAlgError as exc:
            raise IntegrationError("singular Newton matrix", step) from exc
        alpha = 1.0
        while True:
            zt = z + alpha * d
            gt = G(zt)
            if np.max(np.abs(gt)) < (1 - 1e-4 * alpha) * r or alpha < 1e-3:
                break
            alpha *= 0.5
        z, g = zt, gt
        if not np.isfinite(g).all():
            break
    if np.max(np.abs(g)) <= max(NEWTON_TOL, 16 * eps * (1.0 + np.max(np.abs(z)))):
        return z
    raise IntegrationError("implicit step did not converge", step)


def _times(problem: OdeProblem, M: int) -> tuple[np.ndarray, float]:
    h = (problem.tf - problem.t0) / M
    return np.array([problem.t0 + m * h for m in range(M + 1)]), h


def _check(x: np.ndarray, step: int) -> None:
    if not np.isfinite(x).all():
        raise IntegrationError("non-finite state", step)


def _rk4_step(F, t: float, x: np.ndarray, h: float, t_next: float):
    half = h / 2
    k1 = F(t, x)
    k2 = F(t + half, x + half * k1)
    k3 = F(t + half, x + half * k2)
    k4 = F(t_next, x + h * k3)
    x_new = x + (h / 6) * (((k1 + 2 * k2) + 2 * k3) + k4)
    return x_new, (k1, k2, k3, k4)


def step_scheme(
    problem: OdeProblem,
    theta: Sequence[float],
    scheme: Scheme | str,
    M: int,
    bootstrap: Sequence[Sequence[float]] | None = None,
) -> Trajectory:
    """March ``problem`` at ``theta`` with the discrete relations of ``scheme``.

    Adams-Moulton obtains x_1, x_2 and Simpson obtains x_1 from Trapezoid
    steps unless ``bootstrap`` supplies those starting values explicitly.
    """
    scheme = Scheme.parse(scheme)
    if M < scheme.min_mesh:
        raise ValueError(f"{scheme.value} needs M >= {scheme.min_mesh}")
    p, x0 = problem.split(theta)
    F = _rhs(problem, p)
    J = _rhs_jac(problem, p)
    t, h = _times(problem, M)
    n_s = problem.n_s
    X = np.empty((M + 1, n_s))
    X[0] = x0
    eye = np.eye(n_s)
    stages = None
    try:
        fs = [F(t[0], X[0])]
        if scheme is Scheme.EULER:
            for m in range(M):
                X[m + 1] = X[m] + h * fs[m]
                _check(X[m + 1], m + 1)
                fs.append(F(t[m + 1], X[m + 1]))
        elif scheme is Scheme.RK4:
            stages = np.empty((M, 4, n_s))
            for m in range(M):
                X[m + 1], ks = _rk4_step(F, t[m], X[m], h, t[m + 1])
                stages[m] = ks
                _check(X[m + 1], m + 1)
        else:
            n_boot = {Scheme.TRAPEZOID: M, Scheme.ADAMS_MOULTON3: 2, Scheme.SIMPSON: 1}[scheme]
            if bootstrap is not None:
                if scheme is Scheme.TRAPEZOID:
                    raise ValueError("Trapezoid takes no bootstrap values")
                boot = np.asarray(bootstrap, dtype=float).reshape(n_boot, n_s)
            c = h / 2
            for m in range(n_boot):
                if bootstrap is not None:
                    X[m + 1] = boot[m]
                else:
                    xm, fm, tn = X[m], fs[m], t[m + 1]
                    X[m + 1] = _newton(
                        lambda z: (z - xm) - c * (fm + F(tn, z)),
                        lambda z: eye - c * J(tn, z),
                        xm,
                        m + 1,
                    )
                _check(X[m + 1], m + 1)
                fs.append(F(t[m + 1], X[m + 1]))
            if scheme is Scheme.ADAMS_MOULTON3:
                c = h / 24
                for m in range(M - 2):
                    x2, f2, f1, f0, tn = X[m + 2], fs[m + 2], fs[m + 1], fs[m], t[m + 3]
                    X[m + 3] = _newton(
                        lambda z: (z - x2) - c * (((9 * F(tn, z) + 19 * f2) - 5 * f1) + f0),
                        lambda z: eye - (9 * c) * J(tn, z),
                        x2,
                        m + 3,
                    )
                    _check(X[m + 3], m + 3)
                    fs.append(F(t[m + 3], X[m + 3]))
            elif scheme is Scheme.SIMPSON:
                c = h / 3
                for m in range(1, M):
                    xp, fm, fp, tn = X[m - 1], fs[m], fs[m - 1], t[m + 1]
                    X[m + 1] = _newton(
                        lambda z: (z - xp) - c * ((F(tn, z) + 4 * fm) + fp),
                        lambda z: eye - c * J(tn, z),
                        X[m],
                        m + 1,
                    )
                    _check(X[m + 1], m + 1)
                    fs.append(F(t[m + 1], X[m + 1]))
    except EvaluationError as exc:
        raise IntegrationError(f"evaluation fault: {exc}", -1) from exc
    return Trajectory(t, X, scheme, h, stages)


def rk4_integrate(problem: OdeProblem, theta: Sequence[float], M: int) -> Trajectory:
    """Classical explicit RK4 over the problem horizon with M uniform steps."""
    if M < 1:
        raise ValueError("M must be >= 1")
    p, x0 = problem.split(theta)
    F = _rhs(problem, p)
    t, h = _times(problem, M)
    X = np.empty((M + 1, problem.n_s))
    X[0] = x0
    try:
        for m in range(M):
            X[m + 1], _ = _rk4_step(F, t[m], X[m], h, t[m + 1])
            _check(X[m + 1], m + 1)
    except EvaluationError as exc:
        raise IntegrationError(f"evaluation fault: {exc}", m) from exc
    return Trajectory(t, X, Scheme.RK4, h)


def observe(problem: OdeProblem, states: np.ndarray, p: Sequence[float]) -> np.ndarray:
    """g(x, p) for every row of ``states``."""
    g = problem.obs_function()
    pl = tuple(float(v) for v in p)
    return np.array([g(0.0, tuple(x), pl) for x in np.atleast_2d(states)])


def synthesize_measurements(
    problem: OdeProblem, theta: Sequence[float] | None = None, oversample: int = 10
) -> MeasurementSet:
    """Noiseless data from RK4 on a mesh ``oversample`` times the finest shipped one."""
    if oversample < 1:
        raise ValueError("oversample must be >= 1")
    theta = problem.theta_nominal if theta is None else np.asarray(theta, dtype=float)
    M = oversample * max(problem.mesh_options)
    traj = rk4_integrate(problem, theta, M)
    idx = measurement_indices(problem, M)
    p, _ = problem.split(theta)
    return MeasurementSet(np.array(problem.grid.taus), observe(problem, traj.states[idx], p), "synthetic-RK4")


def scheme_measurements(
    problem: OdeProblem, theta: Sequence[float], scheme: Scheme | str, M: int
) -> tuple[MeasurementSet, Trajectory]:
    """Data that the ``scheme`` transcription on mesh ``M`` fits exactly at ``theta``."""
    traj = step_scheme(problem, theta, scheme, M)
    idx = measurement_indices(problem, M)
    p, _ = problem.split(theta)
    data = MeasurementSet(np.array(problem.grid.taus), observe(problem, traj.states[idx], p), "scheme-consistent")
    return data, traj
