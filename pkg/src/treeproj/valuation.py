"""Weights, weight functions, structured valuations, parse trees and embeddings.

Weights are exact ``Fraction`` values plus two sentinels: ``BOTTOM`` sits
below every rational and absorbs under every operator, ``NEUTRAL`` is the
identity element used when a relation carries no weight information yet.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Mapping, Sequence

from .model import Hypergraph, JoinTree, is_acyclic


class _Bottom:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "BOTTOM"

    def __lt__(self, other):
        return other is not self

    def __le__(self, other):
        return True

    def __gt__(self, other):
        return False

    def __ge__(self, other):
        return other is self

    def __eq__(self, other):
        return other is self

    def __hash__(self):
        return hash("treeproj-bottom")


class _Neutral:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NEUTRAL"

    def __eq__(self, other):
        return other is self

    def __hash__(self):
        return hash("treeproj-neutral")

    def _refuse(self, other):
        if other is self:
            return False
        raise TypeError("the neutral weight is not ordered against other weights")

    __lt__ = __gt__ = _refuse

    def __le__(self, other):
        return other is self or self._refuse(other)

    __ge__ = __le__


BOTTOM = _Bottom()
NEUTRAL = _Neutral()


def to_weight(x) -> Fraction | _Bottom | _Neutral:
    if x is BOTTOM or x is NEUTRAL:
        return x
    if isinstance(x, str):
        s = x.strip()
        if s in ("bottom", "⊥"):
            return BOTTOM
        return Fraction(s)
    return Fraction(x)


def weight_str(w) -> str:
    if w is BOTTOM:
        return "bottom"
    if w is NEUTRAL:
        return "neutral"
    if w.denominator == 1:
        return str(w.numerator)
    return f"{w.numerator}/{w.denominator}"


class Operator(enum.Enum):
    SUM = "sum"
    PRODUCT = "product"
    MIN = "min"

    def combine(self, a, b):
        if a is BOTTOM or b is BOTTOM:
            return BOTTOM
        if a is NEUTRAL:
            return b
        if b is NEUTRAL:
            return a
        if self is Operator.SUM:
            return a + b
        if self is Operator.PRODUCT:
            if a < 0 or b < 0:
                raise ValueError("product is only defined on non-negative weights")
            return a * b
        return min(a, b)

    @property
    def symbol(self) -> str:
        return {"sum": "+", "product": "*", "min": "min"}[self.value]


class UnboundVariable(KeyError):
    pass


class NonNumericToken(ValueError):
    pass


class MissingTableEntry(KeyError):
    pass


@dataclass(frozen=True, eq=False)
class WeightFunction:
    """A function from assignments over ``vars`` to weights.

    ``kind`` is ``"table"`` (explicit mapping keyed by value tuples in
    ``vars`` order), ``"identity"`` (the numeric reading of one variable's
    token) or ``"constant"``.
    """

    name: str
    vars: tuple
    kind: str = "table"
    table: Mapping = field(default_factory=dict)
    constant: object = None

    def __post_init__(self):
        object.__setattr__(self, "vars", tuple(self.vars))
        if self.kind == "identity" and len(self.vars) != 1:
            raise ValueError("identity functions read exactly one variable")
        if self.kind == "constant":
            object.__setattr__(self, "constant", to_weight(self.constant))
            object.__setattr__(self, "vars", ())
        if self.kind == "table":
            object.__setattr__(self, "table", {tuple(k): to_weight(v) for k, v in self.table.items()})
        if self.kind not in ("table", "identity", "constant"):
            raise ValueError(f"unknown weight function kind {self.kind!r}")

    @classmethod
    def identity(cls, var: str, name: str | None = None) -> "WeightFunction":
        return cls(name or f"f_{var}", (var,), "identity")

    @classmethod
    def const(cls, value, name: str = "c") -> "WeightFunction":
        return cls(name, (), "constant", constant=value)

    @property
    def var_set(self) -> frozenset:
        return frozenset(self.vars)

    def __call__(self, theta: Mapping):
        try:
            key = tuple(theta[v] for v in self.vars)
        except KeyError as exc:
            raise UnboundVariable(exc.args[0]) from None
        return self.on_tuple(key)

    def on_tuple(self, key: tuple):
        if self.kind == "constant":
            return self.constant
        if self.kind == "identity":
            try:
                return Fraction(key[0])
            except (ValueError, TypeError):
                raise NonNumericToken(f"{key[0]!r} is not a rational number") from None
        try:
            return self.table[key]
        except KeyError:
            raise MissingTableEntry(f"{self.name} has no entry for {key}") from None

    def __repr__(self):
        return f"WeightFunction({self.name})"


# --------------------------------------------------------------------------
# expressions


class StructuredValuation:
    """Binary expression tree over weight functions."""

    def evaluate(self, theta: Mapping):
        raise NotImplementedError

    def functions(self) -> list[WeightFunction]:
        raise NotImplementedError

    def canonical(self) -> tuple:
        raise NotImplementedError

    def operators(self) -> set:
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Leaf(StructuredValuation):
    function: WeightFunction

    def evaluate(self, theta):
        return self.function(theta)

    def functions(self):
        return [self.function]

    def operators(self):
        return set()

    def canonical(self):
        return ("leaf", self.function.name)

    def __str__(self):
        return self.function.name


@dataclass(frozen=True, eq=False)
class Combine(StructuredValuation):
    op: Operator
    left: StructuredValuation
    right: StructuredValuation

    def evaluate(self, theta):
        return self.op.combine(self.left.evaluate(theta), self.right.evaluate(theta))

    def functions(self):
        return self.left.functions() + self.right.functions()

    def operators(self):
        return {self.op} | self.left.operators() | self.right.operators()

    def canonical(self):
        a, b = sorted([self.left.canonical(), self.right.canonical()], key=repr)
        return (self.op.value, a, b)

    def __str__(self):
        return f"({self.left} {self.op.symbol} {self.right})"


def evaluate(f: StructuredValuation, theta: Mapping):
    return f.evaluate(theta)


@dataclass(frozen=True)
class FlatValuation:
    op: Operator
    functions: tuple

    def __post_init__(self):
        object.__setattr__(self, "functions", tuple(self.functions))
        if not self.functions:
            raise ValueError("a valuation needs at least one weight function")

    def evaluate(self, theta):
        acc = self.functions[0](theta)
        for fn in self.functions[1:]:
            acc = self.op.combine(acc, fn(theta))
        return acc

    def left_deep(self) -> StructuredValuation:
        expr: StructuredValuation = Leaf(self.functions[0])
        for fn in self.functions[1:]:
            expr = Combine(self.op, expr, Leaf(fn))
        return expr


# --------------------------------------------------------------------------
# output-aware parse trees


@dataclass
class OutputAwareParseTree:
    """Vertices are numbered in post-order, left child first; the root is last.

    ``kind[v]`` is ``"leaf"``, ``"op"`` or ``"root"``. ``label[v]`` is the
    variable set for leaves and the root, the operator for internal vertices.
    """

    kind: list
    label: list
    children: list
    parent: list
    function: list
    output: frozenset

    @property
    def root(self) -> int:
        return len(self.kind) - 1

    def __len__(self):
        return len(self.kind)

    def variables(self, v: int) -> frozenset:
        return self.label[v] if self.kind[v] != "op" else frozenset()

    def neighbors(self, v: int) -> list[int]:
        out = list(self.children[v])
        if self.parent[v] is not None:
            out.append(self.parent[v])
        return out

    def ancestors(self, v: int) -> set[int]:
        out = set()
        p = self.parent[v]
        while p is not None:
            out.add(p)
            p = self.parent[p]
        return out


def build_output_aware_tree(f: StructuredValuation, o) -> OutputAwareParseTree:
    t = OutputAwareParseTree([], [], [], [], [], frozenset(o))

    def visit(node) -> int:
        if isinstance(node, Leaf):
            kids: tuple = ()
            kind, label, fn = "leaf", node.function.var_set, node.function
        else:
            kids = (visit(node.left), visit(node.right))
            kind, label, fn = "op", node.op, None
        idx = len(t.kind)
        t.kind.append(kind)
        t.label.append(label)
        t.children.append(kids)
        t.parent.append(None)
        t.function.append(fn)
        for k in kids:
            t.parent[k] = idx
        return idx

    top = visit(f)
    t.kind.append("root")
    t.label.append(frozenset(o))
    t.children.append((top,))
    t.parent.append(None)
    t.function.append(None)
    t.parent[top] = len(t.kind) - 1
    return t


# --------------------------------------------------------------------------
# embeddings


class PreconditionViolated(ValueError):
    pass


class ConditionFailed(ValueError):
    def __init__(self, which: str, detail: str = ""):
        super().__init__(f"condition ({which}) fails" + (f": {detail}" if detail else ""))
        self.which = which


@dataclass(frozen=True)
class Embedding:
    xi: Mapping
    witness: JoinTree


def _injective(xi: Mapping, t: OutputAwareParseTree, jt: JoinTree) -> bool:
    if set(xi) != set(range(len(t))):
        return False
    images = list(xi.values())
    return len(set(images)) == len(images) and all(0 <= v < len(jt) for v in images)


def _covering(xi, t, jt, nodes) -> bool:
    return all((t.variables(p) & nodes) <= jt.labels[xi[p]] for p in range(len(t)))


def check_embedding(e: Embedding, t: OutputAwareParseTree, ha: Hypergraph) -> bool:
    jt = e.witness
    if not _injective(e.xi, t, jt) or not _covering(e.xi, t, jt, ha.nodes):
        return False
    adj = jt.neighbors()
    for p in range(len(t)):
        cut = e.xi[p]
        comp = _components_without(adj, cut)
        seen = set()
        for q in t.neighbors(p):
            c = comp[e.xi[q]]
            if c in seen:
                return False
            seen.add(c)
    return True


def _components_without(adj, cut: int) -> dict[int, int]:
    comp: dict[int, int] = {}
    for s in range(len(adj)):
        if s == cut or s in comp:
            continue
        comp[s] = s
        stack = [s]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v != cut and v not in comp:
                    comp[v] = s
                    stack.append(v)
    return comp


def _jt_ancestors(jt: JoinTree, root: int) -> list[set]:
    parent, _ = jt.rooted(root)
    out = []
    for v in range(len(jt)):
        anc = set()
        p = parent[v]
        while p is not None:
            anc.add(p)
            p = parent[p]
        out.append(anc)
    return out


def descendant_preserved(e: Embedding, t: OutputAwareParseTree) -> bool:
    xi = e.xi
    anc = _jt_ancestors(e.witness, xi[t.root])
    pt_anc = [t.ancestors(v) for v in range(len(t))]
    for a in range(len(t)):
        for b in range(len(t)):
            if a == b:
                continue
            if (xi[b] in anc[xi[a]]) != (b in pt_anc[a]):
                return False
    return True


def complete_embedding(xi: Mapping, t: OutputAwareParseTree, jt: JoinTree) -> Embedding:
    """Remap each internal vertex to the branching point of its children's images."""
    xi = dict(xi)
    if not _injective(xi, t, jt):
        raise PreconditionViolated("map is not an injective total map into the join tree")
    if not _covering(xi, t, jt, frozenset().union(*jt.labels)):
        raise PreconditionViolated("a leaf or the root is not covered by its image")
    if not descendant_preserved(Embedding(xi, jt), t):
        raise PreconditionViolated("map does not preserve descendants")
    parent, depth = jt.rooted(xi[t.root])

    def lca(a: int, b: int) -> int:
        while depth[a] > depth[b]:
            a = parent[a]
        while depth[b] > depth[a]:
            b = parent[b]
        while a != b:
            a, b = parent[a], parent[b]
        return a

    out = dict(xi)
    for v in range(len(t)):
        if t.kind[v] == "op":
            y, z = t.children[v]
            out[v] = lca(xi[y], xi[z])
    return Embedding(out, jt)


# --------------------------------------------------------------------------
# structured forms of a flat valuation


def _shapes(m: int) -> list:
    """Unordered full binary trees over leaves ``0..m-1`` by leaf insertion."""
    if m == 1:
        return [0]
    out = []
    for shape in _shapes(m - 1):
        out.extend(_insertions(shape, m - 1))
    return out


def _insertions(shape, leaf: int) -> list:
    res = [(shape, leaf)]
    if isinstance(shape, tuple):
        a, b = shape
        res += [(x, b) for x in _insertions(a, leaf)]
        res += [(a, x) for x in _insertions(b, leaf)]
    return res


def _min_leaf(shape) -> int:
    return shape if isinstance(shape, int) else min(_min_leaf(shape[0]), _min_leaf(shape[1]))


def _canonical_shape(shape):
    if isinstance(shape, int):
        return shape
    a, b = (_canonical_shape(s) for s in shape)
    return (a, b) if _min_leaf(a) < _min_leaf(b) else (b, a)


def _shape_to_expr(shape, f: FlatValuation) -> StructuredValuation:
    if isinstance(shape, int):
        return Leaf(f.functions[shape])
    return Combine(f.op, _shape_to_expr(shape[0], f), _shape_to_expr(shape[1], f))


def enumerate_svf(f: FlatValuation) -> Iterator[StructuredValuation]:
    """All parenthesizations and leaf orders, up to swapping children."""
    seen = set()
    for shape in _shapes(len(f.functions)):
        canon = _canonical_shape(shape)
        if canon in seen:
            continue
        seen.add(canon)
        yield _shape_to_expr(canon, f)


def svf_count(m: int) -> int:
    return sum(1 for _ in enumerate_svf(FlatValuation(Operator.SUM, [WeightFunction.const(0, f"f{i}") for i in range(m)])))


def svf_from_tree_projection(f: FlatValuation, o, ha: Hypergraph) -> tuple[StructuredValuation, Embedding]:
    """Read a structured form of ``f`` off a join tree of ``ha`` and embed it."""
    o = frozenset(o)
    ok, jt = is_acyclic(ha)
    if not ok:
        raise ConditionFailed("acyclic", "hypergraph has no join tree")
    labels = list(jt.labels)
    p_out = next((i for i, l in enumerate(labels) if o <= l), None)
    if p_out is None:
        raise ConditionFailed("a", f"no hyperedge covers {sorted(o)}")
    homes = []
    for fn in f.functions:
        home = next((i for i, l in enumerate(labels) if fn.var_set <= l), None)
        if home is None:
            raise ConditionFailed("b", f"no hyperedge covers {fn.name}")
        homes.append(home)

    parent, _ = jt.rooted(p_out)
    children: list[list[int]] = [[] for _ in labels]
    for v, p in enumerate(parent):
        if p is not None:
            children[p].append(v)
    fn_vertex = {}
    for i, home in enumerate(homes):
        labels.append(labels[home])
        children.append([])
        children[home].append(len(labels) - 1)
        fn_vertex[len(labels) - 1] = i
    labels.append(labels[p_out])
    children.append([p_out])
    top = len(labels) - 1

    stack = [top]
    while stack:
        v = stack.pop()
        if len(children[v]) > 2:
            first, rest = children[v][0], children[v][1:]
            labels.append(labels[v])
            children.append(rest)
            children[v] = [first, len(labels) - 1]
        stack.extend(children[v])

    holds = {}

    def has_fn(v: int) -> bool:
        if v not in holds:
            holds[v] = v in fn_vertex or any(has_fn(c) for c in children[v])
        return holds[v]

    # Post-order walk mirroring build_output_aware_tree's numbering.
    xi_list: list[int] = []

    def build(v: int) -> StructuredValuation:
        while True:
            live = [c for c in children[v] if has_fn(c)]
            if len(live) == 2:
                left, right = build(live[0]), build(live[1])
                xi_list.append(v)
                return Combine(f.op, left, right)
            if not live:
                xi_list.append(v)
                return Leaf(f.functions[fn_vertex[v]])
            v = live[0]

    expr = build(top)
    xi_list.append(top)
    edges = tuple((p, c) for p in range(len(labels)) for c in children[p])
    witness = JoinTree(tuple(labels), edges)
    t = build_output_aware_tree(expr, o)
    xi = dict(enumerate(xi_list))
    return expr, complete_embedding(xi, t, witness)


def all_structured(ops: Sequence[Operator], fns: Sequence[WeightFunction]) -> Iterator[StructuredValuation]:
    """Every expression tree over ``fns`` in the given leaf order (for tests)."""
    if len(fns) == 1:
        yield Leaf(fns[0])
        return
    for k in range(1, len(fns)):
        for left in all_structured(ops, fns[:k]):
            for right in all_structured(ops, fns[k:]):
                for op in ops:
                    yield Combine(op, left, right)

