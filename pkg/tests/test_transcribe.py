import numpy as np
import pytest
from hypothesis import given, strategies as st

from odetrans.integrate import MeasurementSet, Scheme, scheme_measurements, step_scheme, synthesize_measurements
from odetrans.pool import build_problem, problem_from_document
from odetrans.transcribe import (
    ROW_DYN, ROW_IC, ROW_OBS, ROW_SOFT_HI, ROW_SOFT_LO, Formulation, TranscriptionError, VariableLayout,
    discretize, dynamic_row_count, eval_instance, formulate, initial_point, jacobian_structure,
    point_from_trajectory,
)


@pytest.fixture(scope="module")
def fhn():
    p = build_problem("FHN")
    return p, synthesize_measurements(p, oversample=1)


@pytest.mark.parametrize("scheme, n_dyn", [("Euler", 400), ("Trapezoid", 400), ("Simpson", 400),
                                           ("AdamsMoulton3", 400), ("RK4", 2000)])
def test_fhn_row_counts(fhn, scheme, n_dyn):
    p, data = fhn
    nlp = formulate(p, scheme, 200, Formulation(), data)
    kinds = nlp.row_kind
    assert (kinds == ROW_DYN).sum() == n_dyn
    assert (kinds == ROW_OBS).sum() == 201
    assert (kinds == ROW_IC).sum() == 2
    assert dynamic_row_count(scheme, 200, 2) == n_dyn


def test_multistep_bootstrap_rows():
    p = build_problem("FHN")
    # the first rows of AM3 and Simpson are the Trapezoid start rows
    trap = discretize(p, "Trapezoid", 200)
    am3 = discretize(p, "AdamsMoulton3", 200)
    simp = discretize(p, "Simpson", 200)
    assert len(am3) == 396 + 4 and len(simp) == 398 + 2
    assert [e.id for e in am3[:4]] == [e.id for e in trap[:4]]
    assert [e.id for e in simp[:2]] == [e.id for e in trap[:2]]


def test_harmonic_variable_count():
    p = build_problem("harmonic")
    nlp = formulate(p, "Trapezoid", 230, Formulation(), synthesize_measurements(p, oversample=1))
    assert nlp.n_vars == 926
    # estimated initial states are bounds on x_0, not rows
    lay = nlp.layout
    assert (nlp.row_kind == ROW_IC).sum() == 0
    assert nlp.lb[lay.x(0, 0)] == p.ic_bounds[0][0]


def test_layout_blocks():
    lay = VariableLayout(M=3, n_s=2, n_y=1, n_p=2, rk4=True, n_slack=5)
    seen = set()
    for m in range(4):
        for i in range(2):
            seen.add(lay.x(m, i))
        seen.add(lay.y(m, 0))
    seen |= {lay.p(0), lay.p(1)}
    seen |= {lay.k(m, s, i) for m in range(3) for s in range(4) for i in range(2)}
    seen |= {lay.s(j) for j in range(5)}
    assert seen == set(range(lay.size))
    assert lay.block_of(lay.k(2, 3, 1)) == ("k", (2, 3, 1))
    assert lay.block_of(lay.p(1))[0] == "p"


def test_euler_m1_row(decay_m1):
    data = MeasurementSet(np.array([0.1]), np.array([[1.1]]))
    nlp = formulate(decay_m1, "Euler", 1, Formulation(), data)
    lay = nlp.layout
    xi = np.zeros(nlp.n_vars)
    xi[lay.x(0, 0)], xi[lay.x(1, 0)], xi[lay.p(0)] = 1.0, 1.3, 2.0
    _, c = eval_instance(nlp, xi)
    assert c[0] == pytest.approx(1.3 - 1.0 - 0.1 * 2.0 * 1.0, abs=1e-15)


def test_zero_rhs_rows_only_difference():
    doc = {
        "name": "still", "horizon": [0.0, 1.0],
        "states": [{"name": "x", "ic": 2.0}],
        "parameters": [{"name": "k", "lo": 0.0, "hi": 1.0, "nominal": 0.5}],
        "odes": {"x": "0*k"}, "observations": ["x"],
        "measurements": {"times": [1.0]}, "meshes": [4],
    }
    p = problem_from_document(doc)
    data = MeasurementSet(np.array([1.0]), np.array([[2.0]]))
    for scheme in Scheme:
        nlp = formulate(p, scheme, 4, Formulation(), data)
        xi = point_from_trajectory(nlp, step_scheme(p, [0.5], scheme, 4), [0.5])
        obj, c = eval_instance(nlp, xi)
        assert obj == 0.0 and np.all(c == 0.0)


def test_rk4_first_stage_support(decay):
    data = synthesize_measurements(decay, oversample=1)
    nlp = formulate(decay, "RK4", 10, Formulation(), data)
    lay = nlp.layout
    sup = nlp.sparsity[0]
    # k^1_0 - f(x_0, p): depends on k^1_0, x_0 and p only
    assert sorted(sup) == sorted([lay.k(0, 0, 0), lay.x(0, 0), lay.p(0)])


def test_extratol_ranges(decay):
    data = synthesize_measurements(decay, oversample=1)
    nlp = formulate(decay, "Trapezoid", 10, Formulation.extratol(1e-4), data)
    dyn = nlp.row_kind == ROW_DYN
    assert np.all(nlp.lo[dyn] == -1e-4) and np.all(nlp.hi[dyn] == 1e-4)
    assert np.all(nlp.lo[~dyn] == 0.0) and np.all(nlp.hi[~dyn] == 0.0)


def test_softcons_shape(decay):
    data = synthesize_measurements(decay, oversample=1)
    nlp = formulate(decay, "Euler", 10, Formulation.softcons(1e3), data)
    assert (nlp.row_kind == ROW_SOFT_LO).sum() == 10 == (nlp.row_kind == ROW_SOFT_HI).sum()
    assert np.all(nlp.lb[nlp.layout.s_offset:] == 0.0)
    assert np.all(nlp.cost[nlp.layout.s_offset:] == 1e3)


def test_formulation_labels():
    assert Formulation.parse("ExtraTol(1e-4)") == Formulation.extratol(1e-4)
    assert Formulation.parse("SoftCons:1e3").label == "SoftCons(1000)"
    assert Formulation.parse("Baseline") == Formulation()
    for bad in ("ExtraTol", "ExtraTol(0)", "SoftCons(-1)", "Baseline(1)", "Hard"):
        with pytest.raises(TranscriptionError):
            Formulation.parse(bad)


def test_mesh_and_grid_checks(decay):
    data = synthesize_measurements(decay, oversample=1)
    with pytest.raises(TranscriptionError):
        formulate(decay, "AdamsMoulton3", 2, Formulation(), data)
    with pytest.raises(TranscriptionError):
        formulate(decay, "Euler", 10, Formulation(), MeasurementSet(data.taus * 0.5, data.values))
    with pytest.raises(Exception):
        formulate(decay, "Euler", 7, Formulation(), data)  # tau = 0.1 is not a node


def test_objective_quadratic_perturbation(decay):
    data, traj = scheme_measurements(decay, [1.0], "Euler", 20)
    nlp = formulate(decay, "Euler", 20, Formulation(), data)
    xi = point_from_trajectory(nlp, traj, [1.0])
    assert eval_instance(nlp, xi)[0] == 0.0
    for d in (1e-3, 0.25, 2.0):
        z = xi.copy()
        z[nlp.fit_index[3]] += d
        assert eval_instance(nlp, z)[0] == pytest.approx(d * d, rel=1e-12)


def test_jacobian_matches_support(decay):
    data = synthesize_measurements(decay, oversample=1)
    nlp = formulate(decay, "Simpson", 10, Formulation(), data)
    rows, cols = jacobian_structure(nlp)
    assert len(rows) == sum(len(s) for s in nlp.sparsity)


def test_initial_point_is_finite():
    p = build_problem("FHN")
    nlp = formulate(p, "Euler", 200, Formulation(), synthesize_measurements(p, oversample=1))
    theta = np.array(p.theta_nominal)
    theta[0] = 1e-3
    with np.errstate(all="ignore"):
        xi = initial_point(nlp, theta)
    assert np.isfinite(xi).all()


@given(k=st.floats(0.7, 1.3), scheme=st.sampled_from(list(Scheme)), M=st.sampled_from([10, 20, 40]))
def test_constructive_feasibility_near_nominal(decay, k, scheme, M):
    data, traj = scheme_measurements(decay, [k], scheme, M)
    nlp = formulate(decay, scheme, M, Formulation(), data)
    obj, c = eval_instance(nlp, point_from_trajectory(nlp, traj, [k]))
    assert obj <= 1e-16
    assert np.max(np.abs(c)) <= 1e-10
