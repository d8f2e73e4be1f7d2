"""The benchmark pool of ODE parameter-estimation problems.

Built-in problems are declared as plain document dictionaries, the same shape
accepted by :func:`load_problem` from YAML files, so user-supplied problems go
through exactly the same construction path.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .expr import Dag, Expr, ExprSyntaxError, Naming, diff, lambdify, parse, render


class ProblemError(ValueError):
    """Malformed or inconsistent problem definition."""


def _parse_field(what: str, src, symbols) -> Expr:
    try:
        return parse(str(src), symbols)
    except ExprSyntaxError as exc:
        raise ProblemError(f"{what}: {exc}") from exc


class AlignmentError(ProblemError):
    """A measurement time does not coincide with a mesh node."""


# relative slack when deciding whether tau sits exactly on a mesh node
_ALIGN_TOL = 1e-9


@dataclass(frozen=True)
class MeasurementGrid:
    taus: tuple[float, ...]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.taus, self.taus[1:])):
            raise ProblemError("measurement times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.taus)

    def indices(self, t0: float, tf: float, M: int) -> list[int]:
        """Mesh node index m(i) with t0 + m(i)*h == tau_i, for h = (tf-t0)/M."""
        out = []
        for tau in self.taus:
            if tau < t0 - _ALIGN_TOL * abs(tf - t0) or tau > tf + _ALIGN_TOL * abs(tf - t0):
                raise AlignmentError(f"tau={tau} outside [{t0}, {tf}]")
            r = (tau - t0) * M / (tf - t0)
            m = int(round(r))
            if abs(r - m) > _ALIGN_TOL * max(1.0, abs(r)):
                raise AlignmentError(f"tau={tau!r} is not a node of the M={M} mesh on [{t0}, {tf}]")
            out.append(m)
        return out


@dataclass(frozen=True, eq=False)
class OdeProblem:
    name: str
    state_names: tuple[str, ...]
    param_names: tuple[str, ...]
    t0: float
    tf: float
    rhs: tuple[Expr, ...]
    obs: tuple[Expr, ...]
    # x0 value for fixed states, None for estimated ones
    fixed_x0: tuple[float | None, ...]
    ic_bounds: tuple[tuple[float, float], ...]
    p_bounds: tuple[tuple[float, float], ...]
    p_nominal: tuple[float, ...]
    ic_nominal: tuple[float, ...]
    grid: MeasurementGrid
    mesh_options: tuple[int, ...]
    dag: Dag

    @property
    def n_s(self) -> int:
        return len(self.state_names)

    @property
    def n_y(self) -> int:
        return len(self.obs)

    @property
    def n_p(self) -> int:
        return len(self.param_names)

    @property
    def n_ic(self) -> int:
        return sum(v is None for v in self.fixed_x0)

    @property
    def n(self) -> int:
        return len(self.grid)

    @property
    def estimated_states(self) -> list[int]:
        return [i for i, v in enumerate(self.fixed_x0) if v is None]

    @property
    def h_options(self) -> tuple[float, ...]:
        return tuple((self.tf - self.t0) / M for M in self.mesh_options)

    @property
    def naming(self) -> Naming:
        return Naming(states=self.state_names, params=self.param_names)

    # theta = (rate parameters, estimated initial states)
    @property
    def theta_nominal(self) -> np.ndarray:
        return np.array(self.p_nominal + self.ic_nominal, dtype=float)

    @property
    def theta_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        b = self.p_bounds + self.ic_bounds
        return np.array([lo for lo, _ in b]), np.array([hi for _, hi in b])

    def split(self, theta: Sequence[float]) -> tuple[np.ndarray, np.ndarray]:
        """Rate parameters and the full initial state vector encoded by ``theta``."""
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.n_p + self.n_ic,):
            raise ProblemError(f"expected {self.n_p + self.n_ic} values, got {theta.shape}")
        p = theta[: self.n_p]
        x0 = np.empty(self.n_s)
        it = iter(theta[self.n_p:])
        for i, v in enumerate(self.fixed_x0):
            x0[i] = next(it) if v is None else v
        return p, x0

    def rhs_function(self):
        """Compiled f(t, x, p) -> tuple of n_s floats."""
        return _compiled(self, "rhs")

    def rhs_jacobian(self):
        """Compiled df/dx as a flat row-major tuple of n_s*n_s floats."""
        return _compiled(self, "jac")

    def obs_function(self):
        return _compiled(self, "obs")

    def state_leaves(self) -> list[Expr]:
        return [Expr(self.dag, self.dag.state(i)) for i in range(self.n_s)]

    def param_leaves(self) -> list[Expr]:
        return [Expr(self.dag, self.dag.param(i)) for i in range(self.n_p)]

    def describe(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "n_s": self.n_s,
            "n_y": self.n_y,
            "n_p": self.n_p,
            "n_ic": self.n_ic,
            "n": self.n,
            "horizon": [self.t0, self.tf],
            "meshes": list(self.mesh_options),
        }


_COMPILED: dict[tuple[int, str], tuple[OdeProblem, Any]] = {}


def _compiled(problem: OdeProblem, what: str):
    key = (id(problem), what)
    hit = _COMPILED.get(key)
    if hit is None:
        if what == "rhs":
            roots = list(problem.rhs)
        elif what == "obs":
            roots = list(problem.obs)
        else:
            xs = problem.state_leaves()
            roots = [diff(f, x) for f in problem.rhs for x in xs]
        # holding the problem keeps id() unique for the cache lifetime
        hit = (problem, lambdify(roots))
        _COMPILED[key] = hit
    return hit[1]


# ---------------------------------------------------------------------------
# Built-in pool

_NOMINAL_FAMILY = {
    "alpha_pinene": "alpha_pinene",
    "BBG": "BBG",
    "FHN": "FHN",
    "harmonic": "harmonic",
    "lv_f": "lotka_volterra",
    "lv_p": "lotka_volterra",
    "daisy_mamil3_f": "daisy_mamil3",
    "daisy_mamil3_p": "daisy_mamil3",
    "hiv_f": "hiv",
    "hiv_p": "hiv",
    "crauste_f": "crauste",
    "crauste_p": "crauste",
}

_FAMILIES: dict[str, dict[str, Any]] = {
    "alpha_pinene": {
        "horizon": [0.0, 36900.0],
        "states": [{"name": f"x{i}", "ic": v} for i, v in zip(range(1, 6), [100.0, 0.0, 0.0, 0.0, 0.0])],
        "parameters": [{"name": f"p{i}", "lo": 0.0, "hi": 1.0} for i in range(1, 6)],
        "odes": {
            "x1": "-(p1+p2)*x1",
            "x2": "p1*x1",
            "x3": "p2*x1 - (p3+p4)*x3 + p5*x5",
            "x4": "p3*x3",
            "x5": "-p4*x3 + p5*x5",
        },
        "measurements": {"times": [1230, 3060, 4920, 7800, 10680, 15030, 22620, 36420]},
        "meshes": [1230, 3690],
        "variants": {"alpha_pinene": {"observations": ["x1", "x2", "x3", "x4", "x5"]}},
    },
    "BBG": {
        "horizon": [0.0, 12.0],
        "states": [{"name": "Cb", "ic": 2.0}, {"name": "Cs", "ic": 30.0}],
        "parameters": [{"name": n, "lo": 0.0001, "hi": 100.0} for n in ("mu_max", "Ks", "kd", "yield")],
        "odes": {
            "Cb": "mu_max*Cs*Cb/(Ks+Cs) - kd*Cb",
            "Cs": "-(mu_max/yield)*Cs*Cb/(Ks+Cs)",
        },
        "measurements": {"count": 7, "convention": "inclusive"},
        "meshes": [120, 1200],
        "variants": {"BBG": {"observations": ["Cb", "Cs"]}},
    },
    "FHN": {
        "horizon": [0.0, 20.0],
        "states": [{"name": "V", "ic": -1.0}, {"name": "R", "ic": 1.0}],
        "parameters": [{"name": n, "lo": 1e-5, "hi": 1e5} for n in ("g", "a", "b")],
        "odes": {
            "V": "g*(V - V^3/3 + R)",
            # standard FitzHugh-Nagumo sign; problems/fhn_plus_sign.yaml has the variant without it
            "R": "-(1/g)*(V - a + b*R)",
        },
        "measurements": {"count": 6, "convention": "inclusive"},
        "meshes": [200, 2000],
        "variants": {"FHN": {"observations": ["V"]}},
    },
    "harmonic": {
        "horizon": [0.0, 2.3],
        "states": [{"name": "x1", "ic": {"lo": 0.0, "hi": 1.5}}, {"name": "x2", "ic": {"lo": 0.0, "hi": 1.5}}],
        "parameters": [{"name": n, "lo": 0.0001, "hi": 10.0} for n in ("p1", "p2")],
        "odes": {"x1": "-p1*x2", "x2": "(1/p2)*x1"},
        "measurements": {"count": 10, "convention": "exclusive"},
        "meshes": [230, 2300],
        "variants": {"harmonic": {"observations": ["x1", "x2"]}},
    },
    "lotka_volterra": {
        "horizon": [0.0, 1.0],
        "states": [{"name": "r", "ic": {"lo": 90.0, "hi": 110.0}}, {"name": "w", "ic": {"lo": 90.0, "hi": 110.0}}],
        "parameters": [{"name": n, "lo": 0.0001, "hi": 1.0} for n in ("k1", "k2", "k3")],
        "odes": {"r": "k1*r - k2*r*w", "w": "k2*r*w - k3*w"},
        "measurements": {"count": 20, "convention": "exclusive"},
        "meshes": [100, 1000],
        "variants": {
            "lv_f": {"observations": ["r", "w"]},
            "lv_p": {"observations": ["r"], "meshes": [100, 1000, 10000]},
        },
    },
    "daisy_mamil3": {
        "horizon": [0.0, 1.0],
        "states": [{"name": f"x{i}", "ic": {"lo": -1.0, "hi": 2.0}} for i in (1, 2, 3)],
        "parameters": [{"name": n, "lo": -1.0, "hi": 2.0} for n in ("a21", "a31", "a01", "a12", "a13")],
        "odes": {
            "x1": "-(a21+a31+a01)*x1 + a12*x2 + a13*x3",
            "x2": "a21*x1 - a12*x2",
            "x3": "a31*x1 - a13*x3",
        },
        "measurements": {"count": 20, "convention": "exclusive"},
        "meshes": [100, 1000],
        "variants": {
            "daisy_mamil3_f": {"observations": ["x1", "x2", "x3"]},
            "daisy_mamil3_p": {"observations": ["x1", "x2"]},
        },
    },
    "hiv": {
        "horizon": [0.0, 10.0],
        "states": [{"name": n, "ic": {"lo": 0.001, "hi": 2.0}} for n in ("x", "y", "v", "w", "z")],
        "parameters": [
            {"name": n, "lo": 0.0001, "hi": 1.0} for n in ("lm", "d", "beta", "a", "k", "u", "c", "q", "b", "h")
        ],
        "odes": {
            "x": "lm - d*x - beta*x*v",
            "y": "beta*x*v - a*y",
            "v": "k*y - u*v",
            "w": "c*x*y*w - c*q*y*w - b*w",
            "z": "c*q*y*w - h*z",
        },
        "measurements": {"count": 20, "convention": "exclusive"},
        "meshes": [100, 1000],
        "variants": {
            "hiv_f": {"observations": ["x", "y", "v", "w", "z"]},
            "hiv_p": {"observations": ["x", "y+v", "w", "z"]},
        },
    },
    "crauste": {
        "horizon": [0.0, 1.0],
        "states": [{"name": n, "ic": {"lo": -1.1, "hi": 1.1}} for n in ("N", "E", "S", "M", "P")],
        "parameters": [
            {"name": n, "lo": -2.0, "hi": 2.0}
            for n in (
                "mu_N", "delta_NE", "mu_EE", "delta_EL", "rho_E", "delta_LM", "mu_LL",
                "mu_LE", "mu_M", "rho_P", "mu_P", "mu_PE", "mu_PL",
            )
        ],
        "odes": {
            "N": "mu_N*N - delta_NE*N*P",
            "E": "delta_NE*N*P - mu_EE*E^2 - delta_EL*E + rho_E*E*P",
            "S": "delta_EL*S - S*delta_LM - mu_LL*S^2 - mu_LE*E*S",
            "M": "delta_LM*S - mu_M*M",
            "P": "rho_P*P^2 - mu_P*P - mu_PE*E*P - mu_PL*S*P",
        },
        "measurements": {"count": 20, "convention": "exclusive"},
        "meshes": [100, 1000],
        "variants": {
            "crauste_f": {"observations": ["N", "E", "S", "M", "P"]},
            "crauste_p": {"observations": ["N", "E", "S+M", "P"]},
        },
    },
}

POOL_NAMES: tuple[str, ...] = tuple(_NOMINAL_FAMILY)


@lru_cache(maxsize=1)
def _nominal_table() -> dict[str, dict[str, list[float]]]:
    text = resources.files("odetrans").joinpath("data/nominal.yaml").read_text()
    return yaml.safe_load(text)


def _measurement_times(spec: Mapping[str, Any], t0: float, tf: float) -> tuple[float, ...]:
    if "times" in spec:
        return tuple(float(v) for v in spec["times"])
    try:
        n = int(spec["count"])
        convention = spec.get("convention", "exclusive")
    except (KeyError, TypeError, ValueError) as exc:
        raise ProblemError("measurements need either 'times' or 'count'") from exc
    if n < 1:
        raise ProblemError("measurement count must be positive")
    if convention == "exclusive":
        # t0 excluded, tf included
        return tuple(t0 + i * (tf - t0) / n for i in range(1, n + 1))
    if convention == "inclusive":
        if n < 2:
            raise ProblemError("an endpoint-inclusive grid needs at least two points")
        return tuple(t0 + i * (tf - t0) / (n - 1) for i in range(n))
    raise ProblemError(f"unknown measurement convention {convention!r}")


def _check_interval(what: str, lo: float, hi: float, value: float | None = None) -> None:
    if not lo < hi:
        raise ProblemError(f"{what}: lower bound {lo} must be below upper bound {hi}")
    if value is not None and not lo <= value <= hi:
        raise ProblemError(f"{what}: nominal {value} outside [{lo}, {hi}]")


def _build_family(doc: Mapping[str, Any], variants: Mapping[str, Mapping[str, Any]]) -> dict[str, OdeProblem]:
    """Construct every variant of ``doc``; variants share the rhs DAG."""
    try:
        t0, tf = (float(v) for v in doc["horizon"])
        states = list(doc["states"])
        params = list(doc["parameters"])
        odes = dict(doc["odes"])
        meas = doc["measurements"]
        base_meshes = [int(M) for M in doc.get("meshes", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise ProblemError(f"problem document is missing or has a malformed field: {exc}") from exc
    if not tf > t0:
        raise ProblemError("horizon must satisfy t0 < tf")
    dag = Dag()
    state_names = tuple(str(s["name"]) for s in states)
    param_names = tuple(str(q["name"]) for q in params)
    if "t" in state_names or "t" in param_names:
        raise ProblemError("'t' is reserved for time")
    if len(set(state_names + param_names)) != len(state_names) + len(param_names):
        raise ProblemError("state and parameter names must be unique")
    symbols: dict[str, Expr] = {"t": Expr(dag, dag.time())}
    symbols.update({n: Expr(dag, dag.state(i)) for i, n in enumerate(state_names)})
    symbols.update({n: Expr(dag, dag.param(i)) for i, n in enumerate(param_names)})

    if set(odes) != set(state_names):
        raise ProblemError("odes must define exactly one right-hand side per state")
    rhs = tuple(_parse_field(f"ode {n}", odes[n], symbols) for n in state_names)

    fixed_x0: list[float | None] = []
    ic_bounds, ic_nominal = [], []
    for s in states:
        ic = s.get("ic")
        if isinstance(ic, Mapping):
            lo, hi = float(ic["lo"]), float(ic["hi"])
            nom = ic.get("nominal")
            _check_interval(f"initial state {s['name']}", lo, hi, None if nom is None else float(nom))
            fixed_x0.append(None)
            ic_bounds.append((lo, hi))
            ic_nominal.append(None if nom is None else float(nom))
        elif ic is None:
            raise ProblemError(f"state {s['name']} needs an 'ic'")
        else:
            fixed_x0.append(float(ic))

    p_bounds, p_nominal = [], []
    for q in params:
        lo, hi = float(q["lo"]), float(q["hi"])
        nom = q.get("nominal")
        _check_interval(f"parameter {q['name']}", lo, hi, None if nom is None else float(nom))
        p_bounds.append((lo, hi))
        p_nominal.append(None if nom is None else float(nom))

    taus = _measurement_times(meas, t0, tf)
    grid = MeasurementGrid(taus)

    out = {}
    for vname, vdoc in variants.items():
        obs_src = vdoc.get("observations", doc.get("observations"))
        if not obs_src:
            raise ProblemError(f"{vname}: at least one observation is required")
        obs = tuple(_parse_field(f"{vname} observation", o, symbols) for o in obs_src)
        meshes = tuple(int(M) for M in vdoc.get("meshes", base_meshes))
        pn = list(vdoc.get("p_nominal", p_nominal))
        icn = list(vdoc.get("ic_nominal", ic_nominal))
        if any(v is None for v in pn) or any(v is None for v in icn):
            raise ProblemError(f"{vname}: nominal values missing")
        for (lo, hi), v in zip(p_bounds + ic_bounds, pn + icn):
            _check_interval(vname, lo, hi, float(v))
        for M in meshes:
            if M < 1:
                raise ProblemError("mesh sizes must be positive")
            grid.indices(t0, tf, M)
        out[vname] = OdeProblem(
            name=vname,
            state_names=state_names,
            param_names=param_names,
            t0=t0,
            tf=tf,
            rhs=rhs,
            obs=obs,
            fixed_x0=tuple(fixed_x0),
            ic_bounds=tuple(ic_bounds),
            p_bounds=tuple(p_bounds),
            p_nominal=tuple(float(v) for v in pn),
            ic_nominal=tuple(float(v) for v in icn),
            grid=grid,
            mesh_options=meshes,
            dag=dag,
        )
    return out


@lru_cache(maxsize=None)
def _family(family: str) -> dict[str, OdeProblem]:
    doc = _FAMILIES[family]
    nominal = _nominal_table()[family]
    variants = {
        name: {**v, "p_nominal": nominal["p"], "ic_nominal": nominal.get("ic", [])}
        for name, v in doc["variants"].items()
    }
    return _build_family(doc, variants)


def build_problem(name: str) -> OdeProblem:
    """Return the built-in pool problem ``name``."""
    family = _NOMINAL_FAMILY.get(name)
    if family is None:
        raise ProblemError(f"unknown problem {name!r}; choose from {', '.join(POOL_NAMES)}")
    return _family(family)[name]


def problem_from_document(doc: Mapping[str, Any]) -> OdeProblem:
    if not isinstance(doc, Mapping) or "name" not in doc:
        raise ProblemError("problem document must be a mapping with a 'name'")
    name = str(doc["name"])
    return _build_family(doc, {name: {"observations": doc.get("observations")}})[name]


def load_problem(path: str | Path) -> OdeProblem:
    """Read a YAML problem document."""
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    return problem_from_document(doc)


def problem_document(problem: OdeProblem) -> dict[str, Any]:
    """Inverse of :func:`problem_from_document` (explicit measurement times)."""
    naming = problem.naming
    states = []
    it = iter(zip(problem.ic_bounds, problem.ic_nominal))
    for name, v in zip(problem.state_names, problem.fixed_x0):
        if v is None:
            (lo, hi), nom = next(it)
            states.append({"name": name, "ic": {"lo": lo, "hi": hi, "nominal": nom}})
        else:
            states.append({"name": name, "ic": v})
    return {
        "name": problem.name,
        "horizon": [problem.t0, problem.tf],
        "states": states,
        "parameters": [
            {"name": n, "lo": lo, "hi": hi, "nominal": nom}
            for n, (lo, hi), nom in zip(problem.param_names, problem.p_bounds, problem.p_nominal)
        ],
        "odes": {n: render(f, naming) for n, f in zip(problem.state_names, problem.rhs)},
        "observations": [render(g, naming) for g in problem.obs],
        "measurements": {"times": list(problem.grid.taus)},
        "meshes": list(problem.mesh_options),
    }


def measurement_indices(problem: OdeProblem, M: int) -> list[int]:
    return problem.grid.indices(problem.t0, problem.tf, M)


def same_structure(a: OdeProblem, b: OdeProblem) -> bool:
    """Field-wise equality with expressions compared by rendered text."""
    na, nb = a.naming, b.naming
    return (
        a.name == b.name
        and a.state_names == b.state_names
        and a.param_names == b.param_names
        and (a.t0, a.tf) == (b.t0, b.tf)
        and a.fixed_x0 == b.fixed_x0
        and a.ic_bounds == b.ic_bounds
        and a.p_bounds == b.p_bounds
        and a.p_nominal == b.p_nominal
        and a.ic_nominal == b.ic_nominal
        and np.allclose(a.grid.taus, b.grid.taus, rtol=1e-14, atol=0)
        and a.mesh_options == b.mesh_options
        and [render(f, na) for f in a.rhs] == [render(f, nb) for f in b.rhs]
        and [render(g, na) for g in a.obs] == [render(g, nb) for g in b.obs]
    )
