"""Relational core: atoms, relations, CSP instances, hypergraphs and join trees.

Values are opaque tokens. Relations are duplicate-free sets of tuples over an
ordered scope; iteration helpers always go through ``sorted_tuples`` so output
is reproducible.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

Assignment = dict  # variable name -> value token


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class Relation:
    scope: tuple
    tuples: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        scope = tuple(self.scope)
        if len(set(scope)) != len(scope):
            raise ModelError(f"duplicate variable in scope {scope}")
        tuples = frozenset(tuple(t) for t in self.tuples)
        for t in tuples:
            if len(t) != len(scope):
                raise ModelError(f"tuple {t} does not match scope {scope}")
        object.__setattr__(self, "scope", scope)
        object.__setattr__(self, "tuples", tuples)

    @classmethod
    def from_assignments(cls, scope: Sequence[str], rows: Iterable[Mapping]) -> "Relation":
        scope = tuple(scope)
        return cls(scope, frozenset(tuple(r[v] for v in scope) for r in rows))

    def __len__(self) -> int:
        return len(self.tuples)

    def __iter__(self):
        return iter(self.sorted_tuples())

    def __contains__(self, t) -> bool:
        return tuple(t) in self.tuples

    def sorted_tuples(self) -> list:
        return sorted(self.tuples, key=_tuple_key)

    def assignments(self) -> list[dict]:
        return [dict(zip(self.scope, t)) for t in self.sorted_tuples()]

    def reorder(self, scope: Sequence[str]) -> "Relation":
        scope = tuple(scope)
        if set(scope) != set(self.scope) or len(scope) != len(self.scope):
            raise ModelError(f"cannot reorder {self.scope} as {scope}")
        idx = [self.scope.index(v) for v in scope]
        return Relation(scope, frozenset(tuple(t[i] for i in idx) for t in self.tuples))

    def same_as(self, other: "Relation") -> bool:
        """Set equality up to column order."""
        if set(self.scope) != set(other.scope):
            return False
        return other.reorder(self.scope).tuples == self.tuples

    def select(self, bindings: Mapping) -> "Relation":
        """Keep tuples agreeing with ``bindings`` on the variables of the scope."""
        checks = [(self.scope.index(v), val) for v, val in bindings.items() if v in self.scope]
        return Relation(self.scope, frozenset(t for t in self.tuples if all(t[i] == val for i, val in checks)))


def _tuple_key(t):
    return tuple(_value_key(v) for v in t)


def _value_key(v):
    # Mixed token types sort by type name first, then value.
    return (type(v).__name__, v) if not isinstance(v, str) else ("", v)


@dataclass(frozen=True)
class Atom:
    symbol: str
    scope: tuple

    def __post_init__(self):
        scope = tuple(self.scope)
        if len(set(scope)) != len(scope):
            raise ModelError(f"atom {self.symbol} repeats a variable: {scope}")
        object.__setattr__(self, "scope", scope)

    @property
    def vars(self) -> frozenset:
        return frozenset(self.scope)

    def __str__(self) -> str:
        return f"{self.symbol}({','.join(self.scope)})"


@dataclass(frozen=True)
class CspInstance:
    formula: tuple
    database: Mapping

    def __post_init__(self):
        formula = tuple(self.formula)
        object.__setattr__(self, "formula", formula)
        for atom in formula:
            rel = self.database.get(atom.symbol)
            if rel is None:
                raise ModelError(f"no relation for symbol {atom.symbol}")
            if len(rel.scope) != len(atom.scope):
                raise ModelError(f"arity mismatch for {atom.symbol}")

    @property
    def variables(self) -> list[str]:
        return sorted({v for a in self.formula for v in a.scope})

    def relation_of(self, atom: Atom) -> Relation:
        """The relation of ``atom`` with columns named by the atom's own scope."""
        rel = self.database[atom.symbol]
        if rel.scope == atom.scope:
            return rel
        return Relation(atom.scope, rel.tuples)

    def active_domains(self) -> dict[str, list]:
        """Per-variable values allowed by every atom mentioning the variable."""
        doms: dict[str, set] = {}
        for atom in self.formula:
            rel = self.relation_of(atom)
            for i, v in enumerate(atom.scope):
                vals = {t[i] for t in rel.tuples}
                doms[v] = vals if v not in doms else doms[v] & vals
        return {v: sorted(d, key=_value_key) for v, d in doms.items()}

    def satisfies(self, theta: Mapping) -> bool:
        for atom in self.formula:
            rel = self.relation_of(atom)
            if tuple(theta[v] for v in atom.scope) not in rel.tuples:
                return False
        return True

    def with_relations(self, updates: Mapping[str, Relation]) -> "CspInstance":
        db = dict(self.database)
        db.update(updates)
        return CspInstance(self.formula, db)


# --------------------------------------------------------------------------
# relational algebra


def join(r1: Relation, r2: Relation) -> Relation:
    shared = [v for v in r1.scope if v in r2.scope]
    extra = [v for v in r2.scope if v not in r1.scope]
    i1 = [r1.scope.index(v) for v in shared]
    i2 = [r2.scope.index(v) for v in shared]
    ie = [r2.scope.index(v) for v in extra]
    index = defaultdict(list)
    for t in r2.tuples:
        index[tuple(t[i] for i in i2)].append(tuple(t[i] for i in ie))
    out = set()
    for t in r1.tuples:
        for rest in index.get(tuple(t[i] for i in i1), ()):
            out.add(t + rest)
    return Relation(r1.scope + tuple(extra), frozenset(out))


def project(r: Relation, variables: Iterable[str]) -> Relation:
    wanted = set(variables)
    missing = wanted - set(r.scope)
    if missing:
        raise ModelError(f"cannot project {r.scope} on missing {sorted(missing)}")
    keep = [i for i, v in enumerate(r.scope) if v in wanted]
    return Relation(tuple(r.scope[i] for i in keep), frozenset(tuple(t[i] for i in keep) for t in r.tuples))


def semijoin(r1: Relation, r2: Relation) -> Relation:
    shared = [v for v in r1.scope if v in r2.scope]
    i1 = [r1.scope.index(v) for v in shared]
    i2 = [r2.scope.index(v) for v in shared]
    keys = {tuple(t[i] for i in i2) for t in r2.tuples}
    return Relation(r1.scope, frozenset(t for t in r1.tuples if tuple(t[i] for i in i1) in keys))


def product(r: Relation, variable: str, values: Iterable) -> Relation:
    """Cartesian extension of ``r`` by a fresh column."""
    if variable in r.scope:
        raise ModelError(f"{variable} already in scope")
    vals = list(values)
    return Relation(r.scope + (variable,), frozenset(t + (x,) for t in r.tuples for x in vals))


# --------------------------------------------------------------------------
# hypergraphs


def _edge_key(e) -> tuple:
    return tuple(sorted(e))


@dataclass(frozen=True)
class Hypergraph:
    nodes: frozenset
    edges: frozenset

    def __post_init__(self):
        edges = frozenset(frozenset(e) for e in self.edges)
        nodes = frozenset(self.nodes)
        for e in edges:
            if not e <= nodes:
                raise ModelError(f"hyperedge {sorted(e)} has unknown nodes")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "nodes", nodes)

    @classmethod
    def from_edges(cls, edges: Iterable[Iterable[str]]) -> "Hypergraph":
        es = [frozenset(e) for e in edges]
        return cls(frozenset().union(*es) if es else frozenset(), frozenset(es))

    def sorted_edges(self) -> list[frozenset]:
        return sorted(self.edges, key=_edge_key)


def hypergraph_of(formula: Sequence[Atom]) -> Hypergraph:
    if not formula:
        raise ModelError("empty formula")
    return Hypergraph.from_edges(a.scope for a in formula)


def covers(h1: Hypergraph, h2: Hypergraph) -> bool:
    return all(any(e1 <= e2 for e2 in h2.edges) for e1 in h1.edges)


# --------------------------------------------------------------------------
# join trees


@dataclass(frozen=True)
class JoinTree:
    """Labeled tree over vertices ``0..n-1``; labels may repeat."""

    labels: tuple
    edges: tuple
    root: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "labels", tuple(frozenset(l) for l in self.labels))
        object.__setattr__(self, "edges", tuple(tuple(sorted(e)) for e in self.edges))

    def __len__(self) -> int:
        return len(self.labels)

    def neighbors(self) -> list[list[int]]:
        adj = [[] for _ in self.labels]
        for a, b in self.edges:
            adj[a].append(b)
            adj[b].append(a)
        for lst in adj:
            lst.sort()
        return adj

    def is_tree(self) -> bool:
        n = len(self.labels)
        if n == 0 or len(self.edges) != n - 1:
            return False
        return len(self.component(0, frozenset())) == n

    def component(self, start: int, removed: frozenset) -> set[int]:
        adj = self.neighbors()
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen and v not in removed:
                    seen.add(v)
                    stack.append(v)
        return seen

    def rooted(self, root: int) -> tuple[list, list]:
        """Return (parent, depth) arrays for the tree rooted at ``root``."""
        adj = self.neighbors()
        parent = [None] * len(self.labels)
        depth = [0] * len(self.labels)
        order = [root]
        seen = {root}
        for u in order:
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    parent[v] = u
                    depth[v] = depth[u] + 1
                    order.append(v)
        return parent, depth

    def hypergraph(self) -> Hypergraph:
        return Hypergraph.from_edges(self.labels)


def check_join_tree(jt: JoinTree, h: Hypergraph) -> bool:
    if not jt.is_tree():
        return False
    labels = set(jt.labels)
    if not all(e in labels for e in h.edges):
        return False
    return _connected_occurrences(jt)


def _connected_occurrences(jt: JoinTree) -> bool:
    adj = jt.neighbors()
    for x in set().union(*jt.labels):
        holders = {i for i, l in enumerate(jt.labels) if x in l}
        start = min(holders)
        seen = {start}
        stack = [start]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v in holders and v not in seen:
                    seen.add(v)
                    stack.append(v)
        if seen != holders:
            return False
    return True


def is_acyclic(h: Hypergraph) -> tuple[bool, JoinTree | None]:
    """GYO-style ear removal; ties broken by the smallest sorted edge.

    An edge ``e`` is an ear when the nodes it shares with the remaining edges
    all lie inside a single other edge ``f`` (its witness). Ears hang off their
    witness in the resulting join tree.
    """
    edges = h.sorted_edges()
    if not edges:
        return False, None
    alive = list(range(len(edges)))
    tree_edges = []
    while len(alive) > 1:
        picked = None
        for i in alive:
            others = [j for j in alive if j != i]
            shared = edges[i] & frozenset().union(*(edges[j] for j in others))
            for j in others:
                if shared <= edges[j]:
                    picked = (i, j)
                    break
            if picked:
                break
        if picked is None:
            return False, None
        tree_edges.append(picked)
        alive.remove(picked[0])
    return True, JoinTree(tuple(edges), tuple(tree_edges))


def is_tree_projection(ha: Hypergraph, h1: Hypergraph, h2: Hypergraph) -> bool:
    return is_acyclic(ha)[0] and covers(h1, ha) and covers(ha, h2)


def contract_edge(jt: JoinTree, a: int, b: int) -> JoinTree:
    """Merge vertex ``a`` into ``b``; intended for ``labels[a] <= labels[b]``."""
    if (min(a, b), max(a, b)) not in jt.edges:
        raise ModelError(f"{a}-{b} is not a tree edge")
    remap = {}
    k = 0
    for i in range(len(jt.labels)):
        if i == a:
            continue
        remap[i] = k
        k += 1
    remap[a] = remap[b]
    labels = tuple(l for i, l in enumerate(jt.labels) if i != a)
    edges = {tuple(sorted((remap[u], remap[v]))) for u, v in jt.edges if {u, v} != {a, b}}
    return JoinTree(labels, tuple(sorted(edges)))
