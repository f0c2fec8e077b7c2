"""Pairwise consistency, the sequential full reducer and e-join trees."""

from __future__ import annotations

import random
from collections import deque
from dataclasses import dataclass, field
from operator import itemgetter
from typing import Mapping

from .model import CspInstance, JoinTree, Relation, check_join_tree, hypergraph_of, project, semijoin
from .oracle import brute_force_solutions
from .views import ViewDatabase, ViewSet


class NotAcyclic(ValueError):
    pass


# --------------------------------------------------------------------------
# pairwise consistency


def pairwise_fixpoint(scopes: Mapping, rels: dict, dirty=None, rng: random.Random | None = None, counter=None) -> bool:
    """Greatest semijoin fixpoint, updating ``rels`` (name -> set of tuples) in place.

    For every set ``s`` of variables shared by some pair of relations, the
    fixpoint forces each relation over ``s`` to project into the common
    projection of all such relations. Relations are revised against these
    per-set intersections until nothing changes, which yields the same
    fixpoint as applying the pairwise semijoin rule directly.

    When ``dirty`` is given, relations outside it are assumed to be pairwise
    consistent among themselves already. With ``rng`` the revision order is
    randomized; ``counter["semijoin"]`` counts projection intersections.
    Returns True when some relation ends up empty.
    """
    names = list(scopes)
    varsets = [frozenset(scopes[n]) for n in names]
    holders: dict = {}
    sets_of: list = [set() for _ in names]
    neighbours: list = [set() for _ in names]
    for i in range(len(names)):
        vi = varsets[i]
        for j in range(i + 1, len(names)):
            shared = vi & varsets[j]
            if shared:
                hs = holders.get(shared)
                if hs is None:
                    hs = holders[shared] = set()
                hs.add(i)
                hs.add(j)
                sets_of[i].add(shared)
                sets_of[j].add(shared)
                neighbours[i].add(j)
                neighbours[j].add(i)
    sets_of = [sorted(ss, key=len) for ss in sets_of]

    getters: dict = {}

    def getter(i, shared):
        g = getters.get((i, shared))
        if g is None:
            g = itemgetter(*(scopes[names[i]].index(x) for x in sorted(shared, key=str)))
            getters[(i, shared)] = g
        return g

    current = [rels[n] for n in names]
    version = [0] * len(names)
    key_cache: dict = {}

    def keys(i, shared):
        hit = key_cache.get((i, shared))
        if hit is not None and hit[0] == version[i]:
            return hit[1]
        get = getter(i, shared)
        ks = {get(t) for t in current[i]}
        key_cache[(i, shared)] = (version[i], ks)
        return ks

    common: dict = {}

    def allowed(shared):
        got = common.get(shared)
        if got is None:
            if counter is not None:
                counter["semijoin"] += len(holders[shared])
            got = None
            for b in holders[shared]:
                kb = keys(b, shared)
                got = set(kb) if got is None else got & kb
                if not got:
                    break
            common[shared] = got
        return got

    if dirty is None:
        pending = list(range(len(names)))
    else:
        start = {i for i, n in enumerate(names) if n in dirty}
        for i in list(start):
            start |= neighbours[i]
        pending = sorted(start)
    queued = set(pending)
    queue = deque(pending)

    while queue:
        if rng is not None and len(queue) > 1:
            k = rng.randrange(len(queue))
            queue[k], queue[-1] = queue[-1], queue[k]
            a = queue.pop()
        else:
            a = queue.popleft()
        queued.discard(a)
        filters = []
        for shared in sets_of[a]:
            ok = allowed(shared)
            if not keys(a, shared) <= ok:
                filters.append((getter(a, shared), ok))
        if not filters:
            continue
        current[a] = {t for t in current[a] if all(get(t) in ok for get, ok in filters)}
        version[a] += 1
        for shared in sets_of[a]:
            common.pop(shared, None)
        for b in neighbours[a]:
            if b not in queued:
                queued.add(b)
                queue.append(b)
    for n, rel in zip(names, current):
        rels[n] = rel
    return any(not rel for rel in current)


def enforce_pairwise(v: ViewSet, vdb: ViewDatabase, rng: random.Random | None = None) -> tuple[ViewDatabase, bool]:
    scopes = {w.symbol: w.scope for w in v.views}
    rels = {w.symbol: set(vdb[w.symbol].reorder(w.scope).tuples) for w in v.views}
    empty = pairwise_fixpoint(scopes, rels, rng=rng)
    out = dict(vdb.relations)
    for w in v.views:
        out[w.symbol] = Relation(w.scope, frozenset(rels[w.symbol]))
    return ViewDatabase(out), empty


# --------------------------------------------------------------------------
# acyclic instances


def _vertex_relations(inst: CspInstance, jt: JoinTree) -> tuple[list[Relation], list[int]]:
    """Relation per join-tree vertex and the vertex hosting each atom."""
    if not check_join_tree(jt, hypergraph_of(inst.formula)):
        raise NotAcyclic("join tree does not validate against the instance")
    home = []
    for atom in inst.formula:
        home.append(next(i for i, l in enumerate(jt.labels) if l == atom.vars))
    rels = []
    for label in jt.labels:
        scope = tuple(sorted(label))
        exact = [inst.relation_of(a).reorder(scope).tuples for a in inst.formula if a.vars == label]
        if not exact:
            exact = [project(inst.relation_of(a), label).reorder(scope).tuples for a in inst.formula if label <= a.vars]
        if not exact:
            raise NotAcyclic(f"vertex label {sorted(label)} is not covered by any atom")
        rels.append(Relation(scope, frozenset.intersection(*exact)))
    return rels, home


def _from_vertices(inst: CspInstance, rels: list[Relation], home: list[int]) -> CspInstance:
    db = dict(inst.database)
    for atom, h in zip(inst.formula, home):
        db[atom.symbol] = rels[h].reorder(atom.scope)
    # An atom symbol shared by several atoms keeps the intersection.
    for atom, h in zip(inst.formula, home):
        db[atom.symbol] = Relation(atom.scope, db[atom.symbol].tuples & rels[h].reorder(atom.scope).tuples)
    return CspInstance(inst.formula, db)


def full_reduce_acyclic(inst: CspInstance, jt: JoinTree) -> CspInstance:
    """Yannakakis: semijoins from the leaves up, then from the root down."""
    rels, home = _vertex_relations(inst, jt)
    root = jt.root if jt.root is not None else 0
    parent, depth = jt.rooted(root)
    order = sorted(range(len(jt)), key=lambda v: depth[v])
    for v in reversed(order):
        if parent[v] is not None:
            rels[parent[v]] = semijoin(rels[parent[v]], rels[v])
    for v in order:
        if parent[v] is not None:
            rels[v] = semijoin(rels[v], rels[parent[v]])
    return _from_vertices(inst, rels, home)


def is_globally_consistent(inst: CspInstance) -> bool:
    sols = brute_force_solutions(inst)
    for atom in inst.formula:
        rel = inst.relation_of(atom)
        reachable = {tuple(theta[v] for v in atom.scope) for theta in sols}
        if rel.tuples != reachable:
            return False
    return True


# --------------------------------------------------------------------------
# e-join trees


@dataclass
class EVertex:
    ident: int
    ret: tuple
    iet: tuple = ()
    oet: tuple = ()
    rel: Relation | None = None
    val: dict | None = None
    mark: int | None = None
    parent: int | None = None
    children: list = field(default_factory=list)
    label: int | None = None
    origin: int | None = None

    @property
    def sch(self) -> tuple:
        return self.ret + self.iet + self.oet


@dataclass
class EJoinTree:
    vertices: list
    root: int

    def copy(self) -> "EJoinTree":
        return EJoinTree(
            [
                EVertex(v.ident, v.ret, v.iet, v.oet, v.rel, None if v.val is None else dict(v.val), v.mark, v.parent, list(v.children), v.label, v.origin)
                for v in self.vertices
            ],
            self.root,
        )

    def __len__(self):
        return len(self.vertices)

    def unmarked_children(self, i: int) -> list[int]:
        return [c for c in self.vertices[i].children if self.vertices[c].mark is None]

    def depth_of(self, i: int) -> int:
        d = 0
        while self.vertices[i].parent is not None:
            i = self.vertices[i].parent
            d += 1
        return d

    def depth(self) -> int:
        """Height of the tree induced by unmarked vertices."""
        best = 0
        stack = [(self.root, 0)]
        while stack:
            v, d = stack.pop()
            best = max(best, d)
            stack.extend((c, d + 1) for c in self.unmarked_children(v))
        return best

    def unmarked_leaves(self) -> list[int]:
        return [v.ident for v in self.vertices if v.mark is None and not self.unmarked_children(v.ident)]

    def is_strictly_binary(self) -> bool:
        return all(len(v.children) in (0, 2) for v in self.vertices)

    def preorder(self) -> list[int]:
        out, stack = [], [self.root]
        while stack:
            v = stack.pop()
            out.append(v)
            stack.extend(reversed(self.vertices[v].children))
        return out

    def connected(self) -> bool:
        """Every variable's holders form a connected subtree."""
        holders: dict = {}
        for v in self.vertices:
            for x in v.sch:
                holders.setdefault(x, set()).add(v.ident)
        for hs in holders.values():
            tops = [h for h in hs if self.vertices[h].parent not in hs]
            if len(tops) != 1:
                return False
        return True


def build_ejointree(inst: CspInstance, jt: JoinTree) -> EJoinTree:
    """Strictly binary copy of ``jt``; extra vertices duplicate their parent."""
    rels, _ = _vertex_relations(inst, jt)
    root = jt.root if jt.root is not None else 0
    parent, _ = jt.rooted(root)
    kids: list[list[int]] = [[] for _ in range(len(jt))]
    for v, p in enumerate(parent):
        if p is not None:
            kids[p].append(v)

    verts: list[EVertex] = []

    def new_vertex(origin: int, par: int | None) -> int:
        rel = rels[origin]
        verts.append(EVertex(len(verts), rel.scope, rel=rel, parent=par, origin=origin))
        return len(verts) - 1

    def grow(origin: int, par: int | None, children: list[int]) -> int:
        me = new_vertex(origin, par)
        if not children:
            return me
        if len(children) == 1:
            first = grow(children[0], me, kids[children[0]])
            dup = new_vertex(origin, me)
            verts[me].children = [first, dup]
        elif len(children) == 2:
            verts[me].children = [grow(c, me, kids[c]) for c in children]
        else:
            first = grow(children[0], me, kids[children[0]])
            rest = grow(origin, me, children[1:])
            verts[me].children = [first, rest]
        return me

    top = grow(root, None, kids[root])
    if not verts[top].children:
        verts[top].children = [new_vertex(root, top), new_vertex(root, top)]
    tree = EJoinTree(verts, top)
    n = 0
    for v in tree.preorder():
        if not verts[v].children:
            n += 1
            verts[v].label = n
    return tree


def ejointree_instance(inst: CspInstance, t: EJoinTree) -> CspInstance:
    """Read back one relation per atom from the vertices that copy its home vertex."""
    by_origin: dict = {}
    for v in t.vertices:
        by_origin.setdefault(v.origin, []).append(project(v.rel, v.ret))
    db = dict(inst.database)
    for atom in inst.formula:
        parts = []
        for rs in by_origin.values():
            if set(rs[0].scope) == atom.vars:
                parts.extend(r.reorder(atom.scope).tuples for r in rs)
        if parts:
            db[atom.symbol] = Relation(atom.scope, frozenset.intersection(*parts))
    return CspInstance(inst.formula, db)
