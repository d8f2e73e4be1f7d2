"""Immutable symbolic expression DAG.

Nodes live in a shared, append-only :class:`Dag`. Structurally identical nodes
are hash-consed to one id and constant operands are folded at construction, so
child ids are always smaller than their parents and ascending id order is a
topological order. The grammar is closed over ``+ - * /``, unary minus and
integer powers, which is all the problem pool needs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

CONST, TIME, STATE, PARAM, VAR, NEG, ADD, SUB, MUL, DIV, POW = range(11)

_LEAVES = frozenset((CONST, TIME, STATE, PARAM, VAR))
_BINARY_SYMBOL = {ADD: "+", SUB: "-", MUL: "*", DIV: "/"}
_EMPTY: frozenset = frozenset()


class ExprError(ValueError):
    """Invalid expression construction or rendering."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


class EvaluationError(ArithmeticError):
    """Arithmetic fault (division by zero, overflow) at an evaluation point."""


class Dag:
    """Append-only node store shared by every :class:`Expr` built from it."""

    def __init__(self) -> None:
        self.op: list[int] = []
        self.a: list[int] = []
        self.b: list[int] = []
        self.value: list[float] = []
        # leaf node ids each node depends on; drives derivative pruning
        self.support: list[frozenset] = []
        self._index: dict[tuple, int] = {}
        self._diff: dict[tuple[int, int], int] = {}
        self._reach: dict[tuple[int, ...], list[int]] = {}

    def __len__(self) -> int:
        return len(self.op)

    def _make(self, op: int, a: int = -1, b: int = -1, value: float = 0.0) -> int:
        key = (op, a, b, value)
        nid = self._index.get(key)
        if nid is not None:
            return nid
        nid = len(self.op)
        self.op.append(op)
        self.a.append(a)
        self.b.append(b)
        self.value.append(value)
        if op in (STATE, PARAM, VAR):
            sup = frozenset((nid,))
        elif op in (CONST, TIME):
            sup = _EMPTY
        elif op in (NEG, POW):
            sup = self.support[a]
        else:
            sa, sb = self.support[a], self.support[b]
            if sb <= sa:
                sup = sa
            elif sa <= sb:
                sup = sb
            else:
                sup = sa | sb
        self.support.append(sup)
        self._index[key] = nid
        return nid

    # leaves ---------------------------------------------------------------
    def const(self, v: float) -> int:
        v = float(v) + 0.0  # folds -0.0 into 0.0
        if v != v:
            raise ExprError("NaN constant")
        return self._make(CONST, value=v)

    def time(self) -> int:
        return self._make(TIME)

    def state(self, i: int) -> int:
        return self._make(STATE, a=int(i))

    def param(self, i: int) -> int:
        return self._make(PARAM, a=int(i))

    def var(self, i: int) -> int:
        return self._make(VAR, a=int(i))

    # folding predicates ---------------------------------------------------
    def is_const(self, n: int, v: float | None = None) -> bool:
        return self.op[n] == CONST and (v is None or self.value[n] == v)

    # operators ------------------------------------------------------------
    def neg(self, a: int) -> int:
        if self.op[a] == CONST:
            return self.const(-self.value[a])
        if self.op[a] == NEG:
            return self.a[a]
        return self._make(NEG, a)

    def add(self, a: int, b: int) -> int:
        if self.op[a] == CONST and self.op[b] == CONST:
            return self.const(self.value[a] + self.value[b])
        if self.is_const(a, 0.0):
            return b
        if self.is_const(b, 0.0):
            return a
        return self._make(ADD, a, b)

    def sub(self, a: int, b: int) -> int:
        if self.op[a] == CONST and self.op[b] == CONST:
            return self.const(self.value[a] - self.value[b])
        if self.is_const(b, 0.0):
            return a
        if self.is_const(a, 0.0):
            return self.neg(b)
        return self._make(SUB, a, b)

    def mul(self, a: int, b: int) -> int:
        if self.op[a] == CONST and self.op[b] == CONST:
            return self.const(self.value[a] * self.value[b])
        if self.is_const(a, 0.0) or self.is_const(b, 0.0):
            return self.const(0.0)
        if self.is_const(a, 1.0):
            return b
        if self.is_const(b, 1.0):
            return a
        return self._make(MUL, a, b)

    def div(self, a: int, b: int) -> int:
        if self.is_const(b, 0.0):
            raise ExprError("division by the constant zero")
        if self.op[a] == CONST and self.op[b] == CONST:
            return self.const(self.value[a] / self.value[b])
        if self.is_const(a, 0.0):
            return self.const(0.0)
        if self.is_const(b, 1.0):
            return a
        return self._make(DIV, a, b)

    def pow(self, a: int, k: int) -> int:
        if int(k) != k or k < 1:
            raise ExprError(f"exponent must be an integer >= 1, got {k!r}")
        k = int(k)
        if k == 1:
            return a
        if self.op[a] == CONST:
            return self.const(_ipow(self.value[a], k))
        return self._make(POW, a, k)

    # traversal ------------------------------------------------------------
    def children(self, n: int) -> tuple[int, ...]:
        op = self.op[n]
        if op in _LEAVES:
            return ()
        if op in (NEG, POW):
            return (self.a[n],)
        return (self.a[n], self.b[n])

    def reachable(self, roots: Iterable[int]) -> list[int]:
        """Ids reachable from ``roots`` in ascending (topological) order."""
        key = tuple(roots)
        hit = self._reach.get(key)
        if hit is not None:
            return hit
        seen: set[int] = set()
        stack = list(key)
        while stack:
            n = stack.pop()
            if n in seen:
                continue
            seen.add(n)
            stack.extend(self.children(n))
        out = sorted(seen)
        if len(key) <= 64:
            self._reach[key] = out
        return out

    def diff(self, e: int, w: int) -> int:
        """Node id of d(e)/d(w); memoised per (e, w)."""
        if self.op[w] not in (STATE, PARAM, VAR):
            raise ExprError("can only differentiate with respect to a state, parameter or variable")
        cache = self._diff
        hit = cache.get((e, w))
        if hit is not None:
            return hit
        zero = self.const(0.0)
        stack = [e]
        while stack:
            n = stack[-1]
            if (n, w) in cache:
                stack.pop()
                continue
            if w not in self.support[n]:
                cache[(n, w)] = zero
                stack.pop()
                continue
            op = self.op[n]
            if op in _LEAVES:
                cache[(n, w)] = self.const(1.0) if n == w else zero
                stack.pop()
                continue
            pending = [c for c in self.children(n) if (c, w) not in cache]
            if pending:
                stack.extend(pending)
                continue
            u = self.a[n]
            du = cache[(u, w)]
            if op == NEG:
                d = self.neg(du)
            elif op == POW:
                k = self.b[n]
                d = self.mul(self.mul(self.const(k), self.pow(u, k - 1)), du)
            else:
                v = self.b[n]
                dv = cache[(v, w)]
                if op == ADD:
                    d = self.add(du, dv)
                elif op == SUB:
                    d = self.sub(du, dv)
                elif op == MUL:
                    d = self.add(self.mul(du, v), self.mul(u, dv))
                else:
                    d = self.sub(self.div(du, v), self.div(self.mul(u, dv), self.pow(v, 2)))
            cache[(n, w)] = d
            stack.pop()
        return cache[(e, w)]

    def variables(self, n: int) -> list[int]:
        """Sorted flat indices of the ``VAR`` leaves ``n`` depends on."""
        return sorted(self.a[s] for s in self.support[n] if self.op[s] == VAR)


def _ipow(x: float, k: int) -> float:
    # repeated multiplication keeps every evaluation path bit-identical
    r = x
    for _ in range(k - 1):
        r = r * x
    return r


class Expr:
    """Handle on one node of a :class:`Dag` with arithmetic overloads."""

    __slots__ = ("dag", "id")

    def __init__(self, dag: Dag, nid: int):
        self.dag = dag
        self.id = nid

    def _lift(self, other) -> int:
        if isinstance(other, Expr):
            if other.dag is not self.dag:
                raise ExprError("cannot combine expressions from different DAGs")
            return other.id
        if isinstance(other, (int, float, np.floating, np.integer)):
            return self.dag.const(float(other))
        return NotImplemented

    def _bin(self, fn, other, reverse=False):
        o = self._lift(other)
        if o is NotImplemented:
            return NotImplemented
        a, b = (o, self.id) if reverse else (self.id, o)
        return Expr(self.dag, fn(a, b))

    def __add__(self, other):
        return self._bin(self.dag.add, other)

    def __radd__(self, other):
        return self._bin(self.dag.add, other, True)

    def __sub__(self, other):
        return self._bin(self.dag.sub, other)

    def __rsub__(self, other):
        return self._bin(self.dag.sub, other, True)

    def __mul__(self, other):
        return self._bin(self.dag.mul, other)

    def __rmul__(self, other):
        return self._bin(self.dag.mul, other, True)

    def __truediv__(self, other):
        return self._bin(self.dag.div, other)

    def __rtruediv__(self, other):
        return self._bin(self.dag.div, other, True)

    def __neg__(self):
        return Expr(self.dag, self.dag.neg(self.id))

    def __pos__(self):
        return self

    def __pow__(self, k):
        return Expr(self.dag, self.dag.pow(self.id, k))

    def __eq__(self, other):
        return isinstance(other, Expr) and other.dag is self.dag and other.id == self.id

    def __hash__(self):
        return hash((id(self.dag), self.id))

    @property
    def kind(self) -> int:
        return self.dag.op[self.id]

    @property
    def index(self) -> int:
        """Leaf index for state/param/var references."""
        return self.dag.a[self.id]

    def node_count(self) -> int:
        return len(self.dag.reachable((self.id,)))

    def variables(self) -> list[int]:
        return self.dag.variables(self.id)

    def __repr__(self) -> str:
        return f"Expr({render(self, Naming.generic())})"


def constant(dag: Dag, v: float) -> Expr:
    return Expr(dag, dag.const(v))


def balanced_sum(terms: Sequence[Expr], dag: Dag | None = None) -> Expr:
    """Sum as a balanced binary tree (bounded depth for long sums)."""
    if not terms:
        if dag is None:
            raise ExprError("empty sum needs an explicit DAG")
        return constant(dag, 0.0)
    ids = [t.id for t in terms]
    g = terms[0].dag
    while len(ids) > 1:
        nxt = [g.add(ids[i], ids[i + 1]) for i in range(0, len(ids) - 1, 2)]
        if len(ids) % 2:
            nxt.append(ids[-1])
        ids = nxt
    return Expr(g, ids[0])


# ---------------------------------------------------------------------------
# Evaluation


@dataclass(frozen=True)
class Point:
    """Evaluation point: time, states, parameters and flat NLP variables."""

    t: float = 0.0
    x: Sequence[float] = ()
    p: Sequence[float] = ()
    aux: Sequence[float] = ()


def evaluate(e: Expr, pt: Point) -> float:
    """Scalar evaluation of ``e`` at ``pt`` with plain float arithmetic."""
    g = e.dag
    vals: dict[int, float] = {}
    try:
        for n in g.reachable((e.id,)):
            op = g.op[n]
            if op == CONST:
                v = g.value[n]
            elif op == TIME:
                v = float(pt.t)
            elif op == STATE:
                v = float(pt.x[g.a[n]])
            elif op == PARAM:
                v = float(pt.p[g.a[n]])
            elif op == VAR:
                v = float(pt.aux[g.a[n]])
            elif op == NEG:
                v = -vals[g.a[n]]
            elif op == POW:
                v = _ipow(vals[g.a[n]], g.b[n])
            else:
                x, y = vals[g.a[n]], vals[g.b[n]]
                if op == ADD:
                    v = x + y
                elif op == SUB:
                    v = x - y
                elif op == MUL:
                    v = x * y
                else:
                    v = x / y
            vals[n] = v
    except (ZeroDivisionError, OverflowError) as exc:
        raise EvaluationError(str(exc)) from exc
    out = vals[e.id]
    if out != out or out in (float("inf"), float("-inf")):
        raise EvaluationError("non-finite value")
    return out


class Program:
    """A vectorised evaluator for a fixed set of root nodes.

    Nodes are grouped by depth level and opcode so that one evaluation costs a
    handful of numpy gather/scatter operations per level.
    """

    def __init__(self, dag: Dag, roots: Sequence[int]):
        roots = [int(r) for r in roots]
        ids = dag.reachable(roots) if roots else []
        pos = {n: k for k, n in enumerate(ids)}
        self.size = len(ids)
        self.roots = np.fromiter((pos[r] for r in roots), dtype=np.intp, count=len(roots))
        leaves: dict[int, tuple[list[int], list[float]]] = {
            CONST: ([], []), TIME: ([], []), STATE: ([], []), PARAM: ([], []), VAR: ([], [])
        }
        level = [0] * len(ids)
        groups: dict[tuple[int, int, int], tuple[list, list, list]] = {}
        for k, n in enumerate(ids):
            op = dag.op[n]
            if op in _LEAVES:
                pl, vl = leaves[op]
                pl.append(k)
                vl.append(dag.value[n] if op == CONST else dag.a[n])
                continue
            a = pos[dag.a[n]]
            if op in (NEG, POW):
                lv = level[a] + 1
                b = 0
                expo = dag.b[n] if op == POW else 0
            else:
                b = pos[dag.b[n]]
                lv = max(level[a], level[b]) + 1
                expo = 0
            level[k] = lv
            grp = groups.setdefault((lv, op, expo), ([], [], []))
            grp[0].append(k)
            grp[1].append(a)
            grp[2].append(b)
        self._const_pos = np.array(leaves[CONST][0], dtype=np.intp)
        self._const_val = np.array(leaves[CONST][1], dtype=float)
        self._time_pos = np.array(leaves[TIME][0], dtype=np.intp)
        self._leaf = {
            op: (np.array(leaves[op][0], dtype=np.intp), np.array(leaves[op][1], dtype=np.intp))
            for op in (STATE, PARAM, VAR)
        }
        self._groups = [
            (op, expo, np.array(o, dtype=np.intp), np.array(a, dtype=np.intp), np.array(b, dtype=np.intp))
            for (lv, op, expo), (o, a, b) in sorted(groups.items())
        ]

    def __call__(self, xi=None, t: float = 0.0, x=None, p=None) -> np.ndarray:
        vals = np.empty(self.size)
        vals[self._const_pos] = self._const_val
        vals[self._time_pos] = t
        for op, src in ((STATE, x), (PARAM, p), (VAR, xi)):
            where, idx = self._leaf[op]
            if len(where):
                vals[where] = np.asarray(src, dtype=float)[idx]
        with np.errstate(all="ignore"):
            for op, expo, o, a, b in self._groups:
                if op == ADD:
                    vals[o] = vals[a] + vals[b]
                elif op == SUB:
                    vals[o] = vals[a] - vals[b]
                elif op == MUL:
                    vals[o] = vals[a] * vals[b]
                elif op == DIV:
                    vals[o] = vals[a] / vals[b]
                elif op == NEG:
                    vals[o] = -vals[a]
                else:
                    base = vals[a]
                    acc = base
                    for _ in range(expo - 1):
                        acc = acc * base
                    vals[o] = acc
        if not np.isfinite(vals).all():
            raise EvaluationError("non-finite value during evaluation")
        return vals[self.roots]


def lambdify(roots: Sequence[Expr]) -> Callable:
    """Compile ``roots`` into a plain Python function ``f(t, x, p, v=())``.

    Intended for small systems evaluated many times (time stepping), where the
    per-call overhead of :class:`Program` dominates.
    """
    if not roots:
        return lambda t, x, p, v=(): ()
    g = roots[0].dag
    ids = g.reachable(tuple(r.id for r in roots))
    lines = ["def _compiled(t, x, p, v=()):", "    try:"]
    name = {}
    for n in ids:
        op = g.op[n]
        if op == CONST:
            name[n] = f"({g.value[n]!r})"
            continue
        if op == TIME:
            rhs = "t"
        elif op == STATE:
            rhs = f"x[{g.a[n]}]"
        elif op == PARAM:
            rhs = f"p[{g.a[n]}]"
        elif op == VAR:
            rhs = f"v[{g.a[n]}]"
        elif op == NEG:
            rhs = f"-{name[g.a[n]]}"
        elif op == POW:
            u = name[g.a[n]]
            rhs = " * ".join([u] * g.b[n])
        else:
            rhs = f"{name[g.a[n]]} {_BINARY_SYMBOL[op]} {name[g.b[n]]}"
        name[n] = f"n{n}"
        lines.append(f"        n{n} = {rhs}")
    if len(lines) == 2:
        lines.append("        pass")
    lines.append("    except (ZeroDivisionError, OverflowError) as exc:")
    lines.append("        raise EvaluationError(str(exc)) from exc")
    lines.append("    return (" + ", ".join(name[r.id] for r in roots) + ",)")
    scope = {"EvaluationError": EvaluationError}
    exec("\n".join(lines), scope)
    return scope["_compiled"]


# ---------------------------------------------------------------------------
# Derivatives and substitution


def diff(e: Expr, wrt: Expr) -> Expr:
    """Exact partial derivative of ``e`` with respect to the leaf ``wrt``."""
    if wrt.dag is not e.dag:
        raise ExprError("cannot differentiate across DAGs")
    return Expr(e.dag, e.dag.diff(e.id, wrt.id))


def substitute(
    roots: Sequence[Expr],
    target: Dag,
    states: Sequence[Expr] = (),
    params: Sequence[Expr] = (),
    time: Expr | float = 0.0,
) -> list[Expr]:
    """Rebuild ``roots`` in ``target`` with leaves replaced.

    State and parameter references become the given expressions (which must
    live in ``target``); the time symbol becomes ``time``.
    """
    if not roots:
        return []
    src = roots[0].dag
    t_id = time.id if isinstance(time, Expr) else target.const(time)
    s_ids = [s.id for s in states]
    p_ids = [q.id for q in params]
    m: dict[int, int] = {}
    for n in src.reachable(tuple(r.id for r in roots)):
        op = src.op[n]
        if op == CONST:
            m[n] = target.const(src.value[n])
        elif op == TIME:
            m[n] = t_id
        elif op == STATE:
            m[n] = s_ids[src.a[n]]
        elif op == PARAM:
            m[n] = p_ids[src.a[n]]
        elif op == VAR:
            m[n] = target.var(src.a[n])
        elif op == NEG:
            m[n] = target.neg(m[src.a[n]])
        elif op == POW:
            m[n] = target.pow(m[src.a[n]], src.b[n])
        elif op == ADD:
            m[n] = target.add(m[src.a[n]], m[src.b[n]])
        elif op == SUB:
            m[n] = target.sub(m[src.a[n]], m[src.b[n]])
        elif op == MUL:
            m[n] = target.mul(m[src.a[n]], m[src.b[n]])
        else:
            m[n] = target.div(m[src.a[n]], m[src.b[n]])
    return [Expr(target, m[r.id]) for r in roots]


# ---------------------------------------------------------------------------
# Rendering


@dataclass(frozen=True)
class Naming:
    """Symbol table for rendering: names of states, parameters, variables."""

    states: Sequence[str] = ()
    params: Sequence[str] = ()
    time: str = "t"
    var: Callable[[int], str] | None = None

    @classmethod
    def generic(cls) -> "Naming":
        return _GenericNaming()

    def state_name(self, i: int) -> str:
        return self.states[i]

    def param_name(self, i: int) -> str:
        return self.params[i]

    def var_name(self, i: int) -> str:
        if self.var is None:
            raise KeyError(i)
        return self.var(i)


@dataclass(frozen=True)
class _GenericNaming(Naming):
    def state_name(self, i: int) -> str:
        return f"x[{i}]"

    def param_name(self, i: int) -> str:
        return f"p[{i}]"

    def var_name(self, i: int) -> str:
        return f"xi[{i}]"


def format_number(v: float) -> str:
    return format(v, ".17g")


def render(e: Expr, naming: Naming) -> str:
    """Fully parenthesised infix text; ``parse`` reads it back."""
    g = e.dag
    text: dict[int, str] = {}
    for n in g.reachable((e.id,)):
        op = g.op[n]
        try:
            if op == CONST:
                s = format_number(g.value[n])
                if g.value[n] < 0:
                    s = f"({s})"
            elif op == TIME:
                s = naming.time
            elif op == STATE:
                s = naming.state_name(g.a[n])
            elif op == PARAM:
                s = naming.param_name(g.a[n])
            elif op == VAR:
                s = naming.var_name(g.a[n])
            elif op == NEG:
                s = f"(-{text[g.a[n]]})"
            elif op == POW:
                s = f"({text[g.a[n]]}^{g.b[n]})"
            else:
                s = f"({text[g.a[n]]} {_BINARY_SYMBOL[op]} {text[g.b[n]]})"
        except (KeyError, IndexError) as exc:
            raise ExprError(f"no name for symbol of kind {op} index {g.a[n]}") from exc
        text[n] = s
    return text[e.id]


# ---------------------------------------------------------------------------
# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^()\[\]]))"
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    out = []
    pos = 0
    n = len(source)
    while pos < n:
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            if source[pos:].strip() == "":
                break
            raise ExprSyntaxError(f"unexpected character {source[pos]!r}", pos)
        kind = m.lastgroup
        if kind is None:
            break
        out.append((kind, m.group(kind), m.start(kind)))
        pos = m.end()
    out.append(("end", "", n))
    return out


@dataclass
class _Parser:
    tokens: list
    dag: Dag
    symbols: Mapping[str, Expr]
    indexed: Mapping[str, Callable[[int], Expr]]
    i: int = field(default=0)

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value:
            raise ExprSyntaxError(f"expected {value!r}, found {val or 'end of input'!r}", pos)

    def expr(self) -> int:
        left = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            _, val, _ = self.take()
            right = self.term()
            left = self.dag.add(left, right) if val == "+" else self.dag.sub(left, right)
        return left

    def term(self) -> int:
        left = self.factor()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, val, pos = self.take()
            right = self.factor()
            if val == "*":
                left = self.dag.mul(left, right)
            else:
                if self.dag.is_const(right, 0.0):
                    raise ExprSyntaxError("division by the constant zero", pos)
                left = self.dag.div(left, right)
        return left

    def factor(self) -> int:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return self.dag.neg(self.factor())
        if kind == "op" and val == "+":
            self.take()
            return self.factor()
        return self.power()

    def power(self) -> int:
        base = self.atom()
        kind, val, pos = self.peek()
        if kind == "op" and val in ("^", "**"):
            self.take()
            kind, val, pos = self.take()
            if kind == "op" and val == "-":
                raise ExprSyntaxError("negative exponent", pos)
            if kind != "num":
                raise ExprSyntaxError("exponent must be an integer literal", pos)
            if not re.fullmatch(r"\d+", val):
                raise ExprSyntaxError(f"non-integer exponent {val!r}", pos)
            k = int(val)
            if k < 1:
                raise ExprSyntaxError("exponent must be >= 1", pos)
            return self.dag.pow(base, k)
        return base

    def atom(self) -> int:
        kind, val, pos = self.take()
        if kind == "num":
            return self.dag.const(float(val))
        if kind == "name":
            if self.peek()[1] == "[":
                self.take()
                ikind, ival, ipos = self.take()
                if ikind != "num" or not ival.isdigit():
                    raise ExprSyntaxError("index must be a non-negative integer", ipos)
                self.expect("]")
                fn = self.indexed.get(val)
                if fn is None:
                    raise ExprSyntaxError(f"unknown indexed identifier {val!r}", pos)
                e = fn(int(ival))
                return self._own(e, pos)
            e = self.symbols.get(val)
            if e is None:
                raise ExprSyntaxError(f"unknown identifier {val!r}", pos)
            return self._own(e, pos)
        if kind == "op" and val == "(":
            inner = self.expr()
            self.expect(")")
            return inner
        raise ExprSyntaxError(f"unexpected token {val or 'end of input'!r}", pos)

    def _own(self, e: Expr, pos: int) -> int:
        if e.dag is not self.dag:
            raise ExprSyntaxError("symbol belongs to a different DAG", pos)
        return e.id


def parse(
    source: str,
    symbols: Mapping[str, Expr] | None = None,
    *,
    indexed: Mapping[str, Callable[[int], Expr]] | None = None,
    dag: Dag | None = None,
) -> Expr:
    """Parse infix text into ``dag``.

    ``symbols`` maps plain identifiers to leaf expressions; ``indexed`` maps
    identifiers used as ``name[k]`` to a factory for the k-th leaf. Every
    symbol must live in the same DAG, which is also used for constants.
    """
    symbols = dict(symbols or {})
    indexed = dict(indexed or {})
    if dag is None:
        dag = next(iter(symbols.values())).dag if symbols else Dag()
    p = _Parser(_tokenize(source), dag, symbols, indexed)
    root = p.expr()
    kind, val, pos = p.peek()
    if kind != "end":
        raise ExprSyntaxError(f"unexpected trailing token {val!r}", pos)
    return Expr(dag, root)
