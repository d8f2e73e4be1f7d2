import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from odetrans.expr import (
    CONST, Dag, EvaluationError, Expr, ExprError, ExprSyntaxError, Naming, Point, Program,
    balanced_sum, constant, diff, evaluate, lambdify, parse, render, substitute,
)


def leaves(n_s=2, n_p=3):
    g = Dag()
    xs = [Expr(g, g.state(i)) for i in range(n_s)]
    ps = [Expr(g, g.param(i)) for i in range(n_p)]
    return g, xs, ps


def symtab(g, names_x=("x1", "x2"), names_p=("p1", "p2", "p3")):
    out = {n: Expr(g, g.state(i)) for i, n in enumerate(names_x)}
    out.update({n: Expr(g, g.param(i)) for i, n in enumerate(names_p)})
    out["t"] = Expr(g, g.time())
    return out


def test_hash_consing_shares_nodes():
    g, (x, y), (a, b, c) = leaves()
    e1 = a * x + b
    e2 = a * x + b
    assert e1 == e2
    assert len({e1, e2}) == 1


def test_constant_folding():
    g = Dag()
    e = constant(g, 2.0) * 3.0 + 1.0
    assert e.kind == CONST and g.value[e.id] == 7.0
    x = Expr(g, g.state(0))
    assert (x * 1.0) == x
    assert (x + 0.0) == x
    assert (x * 0.0).kind == CONST


def test_children_precede_parents():
    g, (x, y), (a, b, c) = leaves()
    e = (a * x - b * y) / (c + x) ** 2
    for n in g.reachable((e.id,)):
        assert all(ch < n for ch in g.children(n))


def test_division_by_constant_zero_rejected():
    g, (x, _), _ = leaves()
    with pytest.raises(ExprError):
        x / 0.0


@pytest.mark.parametrize("k", [0, -1, 1.5])
def test_pow_needs_positive_integer(k):
    g, (x, _), _ = leaves()
    with pytest.raises(ExprError):
        x ** k


def test_diff_product_rule():
    g, (x, y), (a, b, c) = leaves()
    e = a * x * y
    assert diff(e, x) == diff(a * x * y, x)
    pt = Point(0.0, [2.0, 3.0], [5.0, 0.0, 0.0])
    assert evaluate(diff(e, x), pt) == 15.0
    assert evaluate(diff(e, a), pt) == 6.0


def test_diff_of_unrelated_leaf_is_zero():
    g, (x, y), (a, b, c) = leaves()
    d = diff(a * x, y)
    assert d.kind == CONST and g.value[d.id] == 0.0


def test_parse_node_count_example():
    g = Dag()
    e = parse("-(p1+p2)*x1", symtab(g))
    # p1, p2, +, neg, x1, *
    assert e.node_count() == 6


def test_parse_precedence():
    g = Dag()
    s = symtab(g)
    e = parse("x1 + x2 * p1 ^ 2", s)
    pt = Point(0.0, [1.0, 2.0], [3.0, 0.0, 0.0])
    assert evaluate(e, pt) == 1.0 + 2.0 * 9.0


def test_parse_unary_minus_and_power():
    g = Dag()
    e = parse("-x1^2", symtab(g))
    assert evaluate(e, Point(0.0, [3.0, 0.0], [0.0] * 3)) == -9.0


@pytest.mark.parametrize(
    "src, pos",
    [("x1 ^ 2.5", 5), ("x1 ^ -1", 5), ("x1 + q", 5), ("(x1 + x2", 8), ("x1 +", 4)],
)
def test_parse_errors_report_position(src, pos):
    g = Dag()
    with pytest.raises(ExprSyntaxError) as err:
        parse(src, symtab(g))
    assert err.value.position == pos


def test_parse_indexed():
    g = Dag()
    e = parse("xi[3] * xi[10] - 2", indexed={"xi": lambda i: Expr(g, g.var(i))}, dag=g)
    assert e.variables() == [3, 10]


def test_eval_division_by_zero_is_flagged():
    g, (x, y), _ = leaves()
    e = x / y
    with pytest.raises(EvaluationError):
        evaluate(e, Point(0.0, [1.0, 0.0], [0.0] * 3))
    with pytest.raises(EvaluationError):
        Program(g, [e.id])(x=[1.0, 0.0])


def test_balanced_sum_depth_is_logarithmic():
    g = Dag()
    terms = [Expr(g, g.var(i)) for i in range(1024)]
    s = balanced_sum(terms)
    depth = {}
    for n in g.reachable((s.id,)):
        ch = g.children(n)
        depth[n] = 1 + max((depth[c] for c in ch), default=0)
    assert depth[s.id] == 11
    assert Program(g, [s.id])(np.arange(1024.0))[0] == sum(range(1024))


def test_substitute_rebuilds_in_target():
    src = Dag()
    s = symtab(src)
    rhs = parse("p1 * x1 + t", s)
    tgt = Dag()
    v = [Expr(tgt, tgt.var(0)), Expr(tgt, tgt.var(1))]
    q = [Expr(tgt, tgt.var(2)), Expr(tgt, tgt.var(3)), Expr(tgt, tgt.var(4))]
    (out,) = substitute([rhs], tgt, v, q, time=0.5)
    assert out.dag is tgt
    assert Program(tgt, [out.id])([2.0, 0.0, 3.0, 0.0, 0.0])[0] == 6.5


def test_render_generic_names():
    g, (x, y), (a, b, c) = leaves()
    assert render(a * x - y, Naming.generic()) == "((p[0] * x[0]) - x[1])"


def test_lambdify_matches_program():
    g = Dag()
    s = symtab(g)
    es = [parse("p1*x1 - x2/p2", s), parse("x1^3/3 + t*p3", s)]
    f = lambdify(es)
    x, p, t = (0.3, -1.2), (2.0, 0.5, 4.0), 0.7
    ref = Program(g, [e.id for e in es])(t=t, x=x, p=p)
    assert np.array_equal(np.array(f(t, x, p)), ref)


# ---------------------------------------------------------------------------
# property tests

OPS = ["+", "-", "*", "/"]


@st.composite
def expressions(draw, depth=4):
    if depth == 0 or draw(st.booleans()):
        kind = draw(st.sampled_from(["x1", "x2", "p1", "p2", "p3", "num"]))
        if kind == "num":
            return repr(draw(st.floats(0.1, 5.0, allow_nan=False)))
        return kind
    op = draw(st.sampled_from(OPS + ["^", "neg"]))
    a = draw(expressions(depth=depth - 1))
    if op == "neg":
        return f"(-{a})"
    if op == "^":
        return f"({a})^{draw(st.integers(1, 3))}"
    b = draw(expressions(depth=depth - 1))
    if op == "/":
        b = f"(1.5 + ({b})^2)"
    return f"({a} {op} {b})"


points = st.tuples(
    st.lists(st.floats(-2, 2), min_size=2, max_size=2),
    st.lists(st.floats(-2, 2), min_size=3, max_size=3),
)


@given(expressions(), points)
def test_render_parse_round_trip(src, pt):
    g = Dag()
    s = symtab(g)
    e = parse(src, s)
    text = render(e, Naming(("x1", "x2"), ("p1", "p2", "p3")))
    e2 = parse(text, s)
    assert e2 == e


@given(expressions(), points)
def test_program_matches_scalar_evaluation(src, pt):
    g = Dag()
    e = parse(src, symtab(g))
    x, p = pt
    try:
        ref = evaluate(e, Point(0.0, x, p))
    except EvaluationError:
        return
    assert Program(g, [e.id])(x=x, p=p)[0] == ref


@given(expressions(), points, st.sampled_from(["x1", "x2", "p1", "p2", "p3"]))
def test_diff_matches_central_difference(src, pt, wrt):
    g = Dag()
    s = symtab(g)
    e = parse(src, s)
    x, p = list(pt[0]), list(pt[1])
    d = diff(e, s[wrt])
    try:
        val = evaluate(d, Point(0.0, x, p))
        h = 1e-6
        vec, i = (x, int(wrt[1]) - 1) if wrt[0] == "x" else (p, int(wrt[1]) - 1)
        base = vec[i]
        vec[i] = base + h
        fp = evaluate(e, Point(0.0, x, p))
        vec[i] = base - h
        fm = evaluate(e, Point(0.0, x, p))
    except EvaluationError:
        return
    fd = (fp - fm) / (2 * h)
    scale = max(1.0, abs(val), abs(fp), abs(fm))
    assert math.isclose(val, fd, rel_tol=0, abs_tol=1e-4 * scale)
