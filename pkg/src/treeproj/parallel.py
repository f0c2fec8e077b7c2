"""Simulated parallel database machine running tree-contraction algorithms.

Both algorithms contract a strictly binary e-join tree by repeatedly
shunting leaves. Shunts of one batch are computed from a snapshot of the
relations and then applied together, so the outcome does not depend on the
order inside a batch or on the number of processors; the processor count only
changes how many machine steps a batch takes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

from .consistency import EJoinTree, NotAcyclic, ejointree_instance
from .model import CspInstance, Relation, project, semijoin
from .oracle import assignment_key
from .valuation import NEUTRAL, FlatValuation, Operator


class PreconditionViolated(ValueError):
    pass


class NotGloballyConsistent(ValueError):
    pass


class UncoveredFunction(ValueError):
    pass


class NoSolutionFound(LookupError):
    pass


# --------------------------------------------------------------------------
# annotated relations


@dataclass
class AnnotatedRelation:
    """Relation whose tuples each carry one weight (``rows`` maps tuple -> val)."""

    scope: tuple
    rows: dict = field(default_factory=dict)

    @classmethod
    def from_relation(cls, rel: Relation, value=NEUTRAL) -> "AnnotatedRelation":
        return cls(rel.scope, {t: value for t in rel.tuples})

    @property
    def relation(self) -> Relation:
        return Relation(self.scope, frozenset(self.rows))

    def __len__(self):
        return len(self.rows)

    def reorder(self, scope) -> "AnnotatedRelation":
        scope = tuple(scope)
        idx = [self.scope.index(x) for x in scope]
        return AnnotatedRelation(scope, {tuple(t[i] for i in idx): v for t, v in self.rows.items()})

    def assignments(self) -> list[tuple[dict, object]]:
        out = [(dict(zip(self.scope, t)), v) for t, v in self.rows.items()]
        return sorted(out, key=lambda item: assignment_key(item[0]))


def _better(a, b) -> bool:
    """a > b on weights, where the neutral value only meets itself."""
    if a is NEUTRAL or b is NEUTRAL:
        return False
    return a > b


def extended_join(r1: AnnotatedRelation, r2: AnnotatedRelation, op: Operator) -> AnnotatedRelation:
    shared = [x for x in r1.scope if x in r2.scope]
    extra = [x for x in r2.scope if x not in r1.scope]
    i1 = [r1.scope.index(x) for x in shared]
    i2 = [r2.scope.index(x) for x in shared]
    ie = [r2.scope.index(x) for x in extra]
    index: dict = {}
    for t, v in r2.rows.items():
        index.setdefault(tuple(t[i] for i in i2), []).append((tuple(t[i] for i in ie), v))
    rows: dict = {}
    for t, v in r1.rows.items():
        for rest, v2 in index.get(tuple(t[i] for i in i1), ()):
            key = t + rest
            val = op.combine(v, v2)
            if key not in rows or _better(val, rows[key]):
                rows[key] = val
    return AnnotatedRelation(r1.scope + tuple(extra), rows)


def extended_project(r: AnnotatedRelation, variables) -> AnnotatedRelation:
    wanted = set(variables)
    keep = [i for i, x in enumerate(r.scope) if x in wanted]
    if len(keep) != len(wanted):
        raise ValueError(f"cannot project {r.scope} on {sorted(wanted)}")
    rows: dict = {}
    for t, v in r.rows.items():
        key = tuple(t[i] for i in keep)
        if key not in rows or _better(v, rows[key]):
            rows[key] = v
    return AnnotatedRelation(tuple(r.scope[i] for i in keep), rows)


# --------------------------------------------------------------------------
# machine bookkeeping


@dataclass
class ShuntRecord:
    step: int
    vertex: int
    scope: tuple
    relation: Relation
    p_children: tuple = ()  # children of p before the shunt, restored by the r-shunt


@dataclass
class MachineStats:
    processors: int
    vertices: int = 0
    input_max: int = 0
    parallel_steps: int = 0
    ascending_steps: int = 0
    descending_steps: int = 0
    shunt_count: int = 0
    r_shunt_count: int = 0
    max_intermediate: int = 0
    max_weight_magnitude: Fraction = Fraction(0)
    oet_violations: int = 0

    def step_bound(self) -> int:
        """4(ceil(log c) + 2 ceil(n / 4c)) with n the vertex count."""
        c = self.processors
        return 4 * (math.ceil(math.log2(c)) + 2 * math.ceil(self.vertices / (4 * c)))

    def note_relation(self, size: int) -> None:
        self.max_intermediate = max(self.max_intermediate, size)

    def note_weights(self, values) -> None:
        for v in values:
            if isinstance(v, Fraction) and abs(v) > self.max_weight_magnitude:
                self.max_weight_magnitude = abs(v)

    def as_dict(self) -> dict:
        return {
            "processors": self.processors,
            "vertices": self.vertices,
            "input_max": self.input_max,
            "parallel_steps": self.parallel_steps,
            "ascending_steps": self.ascending_steps,
            "descending_steps": self.descending_steps,
            "shunt_count": self.shunt_count,
            "r_shunt_count": self.r_shunt_count,
            "max_intermediate": self.max_intermediate,
            "max_weight_magnitude": str(self.max_weight_magnitude),
            "oet_violations": self.oet_violations,
            "step_bound": self.step_bound(),
        }


def _batch_steps(size: int, c: int) -> int:
    # Round-robin over c processor slots.
    return -(-size // c)


def _replace_child(t: EJoinTree, parent: int, old: int, new: int) -> None:
    kids = t.vertices[parent].children
    kids[kids.index(old)] = new


def _unmarked_sibling(t: EJoinTree, p: int, l: int) -> int:
    others = [c for c in t.unmarked_children(p) if c != l]
    if len(others) != 1:
        raise PreconditionViolated(f"vertex {p} does not have exactly two unmarked children")
    return others[0]


def _shunt_context(t: EJoinTree, l: int) -> tuple[int, int, int]:
    lv = t.vertices[l]
    if lv.mark is not None or t.unmarked_children(l):
        raise PreconditionViolated(f"vertex {l} is not an unmarked leaf")
    p = lv.parent
    if p is None or t.vertices[p].parent is None:
        raise PreconditionViolated(f"leaf {l} has depth at most 1")
    s = _unmarked_sibling(t, p, l)
    return p, s, t.vertices[p].parent


def _rel(v) -> Relation:
    return v.rel.reorder(v.sch) if v.rel.scope != v.sch else v.rel


def _join_project(r1: Relation, r2: Relation, scope: tuple) -> Relation:
    """π_scope(r1 ⋈ r2) without keeping the join."""
    shared = [x for x in r1.scope if x in r2.scope]
    i1 = [r1.scope.index(x) for x in shared]
    i2 = [r2.scope.index(x) for x in shared]
    pick = []
    for x in scope:
        pick.append((0, r1.scope.index(x)) if x in r1.scope else (1, r2.scope.index(x)))
    index: dict = {}
    for t in r2.tuples:
        index.setdefault(tuple(t[i] for i in i2), []).append(t)
    out = set()
    for a in r1.tuples:
        for b in index.get(tuple(a[i] for i in i1), ()):
            out.add(tuple((a, b)[side][i] for side, i in pick))
    return Relation(tuple(scope), frozenset(out))


# --------------------------------------------------------------------------
# global consistency


def _plan_shunt(t: EJoinTree, l: int, w: int) -> dict:
    p, s, q = _shunt_context(t, l)
    lv, pv, sv, qv = (t.vertices[i] for i in (l, p, s, q))
    p_red = semijoin(_rel(pv), _rel(qv))
    # l - p - s is a path of an acyclic query, so a semijoin sweep yields
    # every projection of C = l ⋈ (p ⋉ q) ⋈ s.
    l_rel, s_rel = _rel(lv), _rel(sv)
    p_new = semijoin(semijoin(p_red, l_rel), s_rel)
    l_new = semijoin(l_rel, p_new)
    s_full = semijoin(s_rel, p_new)
    iet = tuple(x for x in qv.ret if x in pv.sch and x not in sv.ret)
    s_new = _join_project(p_new, s_full, sv.ret + iet)
    return {
        "l": l, "p": p, "s": s, "q": q, "w": w,
        "l_rel": l_new, "p_rel": p_new, "s_rel": s_new, "s_iet": iet,
        "record": ShuntRecord(w, s, sv.sch, s_full, tuple(pv.children)),
    }


def _apply_shunt(t: EJoinTree, plan: dict, store: dict, stats: MachineStats | None) -> None:
    l, p, s, q, w = plan["l"], plan["p"], plan["s"], plan["q"], plan["w"]
    lv, pv, sv = t.vertices[l], t.vertices[p], t.vertices[s]
    lv.rel, pv.rel = plan["l_rel"], plan["p_rel"]
    sv.iet = plan["s_iet"]
    sv.rel = plan["s_rel"]
    lv.mark = pv.mark = w
    _replace_child(t, q, p, s)
    sv.parent = q
    pv.children.remove(s)
    pv.parent = s
    sv.children.append(p)
    store[(w, s)] = plan["record"]
    if stats is not None:
        stats.shunt_count += 1
        for r in (plan["l_rel"], plan["p_rel"], plan["s_rel"], plan["record"].relation):
            stats.note_relation(len(r))


def shunt_gc(t: EJoinTree, l: int, w: int, store: dict, stats: MachineStats | None = None) -> EJoinTree:
    """Shunt leaf ``l`` with mark ``w``; the old relation of its sibling goes to ``store``."""
    _apply_shunt(t, _plan_shunt(t, l, w), store, stats)
    return t


def _plan_r_shunt(t: EJoinTree, l: int, p: int, w: int, store: dict) -> dict:
    lv, pv = t.vertices[l], t.vertices[p]
    if lv.mark != w or pv.mark != w or lv.parent != p:
        raise PreconditionViolated(f"({l}, {p}) is not a pair marked {w}")
    s = pv.parent
    if s is None or t.vertices[s].mark is not None:
        raise PreconditionViolated(f"vertex {p} has no unmarked parent")
    q = t.vertices[s].parent
    if q is None or t.vertices[q].mark is not None:
        raise PreconditionViolated(f"vertex {s} has no unmarked parent")
    record = store[(w, s)]
    sv, qv = t.vertices[s], t.vertices[q]
    s_w = semijoin(record.relation, _rel(sv))
    p_rel = semijoin(semijoin(_rel(pv), _rel(qv)), s_w)
    p_new = project(p_rel, pv.ret).reorder(pv.ret)
    l_new = project(semijoin(_rel(lv), p_new), lv.ret).reorder(lv.ret)
    return {"l": l, "p": p, "s": s, "q": q, "p_rel": p_new, "l_rel": l_new, "record": record}


def _apply_r_shunt(t: EJoinTree, plan: dict, stats: MachineStats | None) -> None:
    l, p, s, q = plan["l"], plan["p"], plan["s"], plan["q"]
    lv, pv, sv = t.vertices[l], t.vertices[p], t.vertices[s]
    lv.rel, pv.rel = plan["l_rel"], plan["p_rel"]
    lv.iet = pv.iet = ()
    lv.mark = pv.mark = None
    _replace_child(t, q, s, p)
    pv.parent = q
    sv.children.remove(p)
    sv.parent = p
    pv.children = list(plan["record"].p_children)
    if stats is not None:
        stats.r_shunt_count += 1
        stats.note_relation(len(plan["p_rel"]))
        stats.note_relation(len(plan["l_rel"]))


def r_shunt(t: EJoinTree, l: int, p: int, w: int, store: dict, stats: MachineStats | None = None) -> EJoinTree:
    _apply_r_shunt(t, _plan_r_shunt(t, l, p, w, store), stats)
    return t


def _ascending_batches(t: EJoinTree, run_batch) -> int:
    """Fig. 7 style contraction loop; returns the last mark used."""
    mark = 0
    while t.depth() > 1:
        for side in (0, 1):
            mark += 1
            batch = []
            for leaf in sorted(t.unmarked_leaves(), key=lambda i: t.vertices[i].label):
                lv = t.vertices[leaf]
                if lv.label % 2 == 0 or t.depth_of(leaf) <= 1:
                    continue
                siblings = t.unmarked_children(lv.parent)
                if siblings.index(leaf) == side:
                    batch.append(leaf)
            run_batch(batch, mark)
        for leaf in t.unmarked_leaves():
            t.vertices[leaf].label >>= 1
    return mark


def _check_input(t: EJoinTree) -> None:
    if not t.is_strictly_binary():
        raise NotAcyclic("the e-join tree is not strictly binary")
    if not t.connected():
        raise NotAcyclic("the e-join tree violates connectedness")


def global_consistency(inst: CspInstance, t: EJoinTree, c: int = 1) -> tuple[CspInstance, MachineStats]:
    """Make an acyclic instance globally consistent by contracting and re-expanding ``t``."""
    if c < 1:
        raise ValueError("at least one processor is needed")
    _check_input(t)
    t = t.copy()
    stats = MachineStats(c, len(t), max(len(v.rel) for v in t.vertices))
    store: dict = {}

    def run_batch(batch, mark):
        plans = [_plan_shunt(t, leaf, mark) for leaf in batch]
        for plan in plans:
            _apply_shunt(t, plan, store, stats)
        stats.ascending_steps += _batch_steps(len(batch), c)

    top = _ascending_batches(t, run_batch)

    root = t.vertices[t.root]
    kids = t.unmarked_children(t.root)
    rel = _rel(root)
    for k in kids:
        rel = semijoin(rel, _rel(t.vertices[k]))
    root.rel = rel
    for k in kids:
        kv = t.vertices[k]
        kv.rel = project(semijoin(_rel(kv), rel), kv.ret).reorder(kv.ret)
        kv.iet = ()
        stats.note_relation(len(kv.rel))

    for w in range(top, 0, -1):
        pairs = []
        for v in t.vertices:
            if v.mark == w and t.vertices[v.parent].mark != w:
                p = v.ident
                leaf = next(ch for ch in v.children if t.vertices[ch].mark == w)
                pairs.append((leaf, p))
        plans = [_plan_r_shunt(t, leaf, p, w, store) for leaf, p in pairs]
        for plan in plans:
            _apply_r_shunt(t, plan, stats)
        stats.descending_steps += _batch_steps(len(pairs), c)
    stats.parallel_steps = stats.ascending_steps + stats.descending_steps
    return ejointree_instance(inst, t), stats


# --------------------------------------------------------------------------
# best solutions


def _annotated(v) -> AnnotatedRelation:
    if v.val is None:
        return AnnotatedRelation.from_relation(_rel(v))
    return AnnotatedRelation(v.rel.scope, dict(v.val)).reorder(v.sch)


def _locally_consistent(t: EJoinTree) -> bool:
    for v in t.vertices:
        if v.parent is None:
            continue
        a, b = v.rel, t.vertices[v.parent].rel
        if semijoin(a, b).tuples != a.tuples or semijoin(b, a).tuples != b.tuples:
            return False
    return True


def _initial_values(t: EJoinTree, f: FlatValuation) -> None:
    order = t.preorder()
    homes: dict = {}
    for fn in f.functions:
        home = next((i for i in order if fn.var_set <= set(t.vertices[i].ret)), None)
        if home is None:
            raise UncoveredFunction(f"no vertex covers the variables of {fn.name}")
        homes.setdefault(home, []).append(fn)
    for v in t.vertices:
        fns = homes.get(v.ident)
        rel = _rel(v)
        if not fns:
            v.val = {row: NEUTRAL for row in rel.tuples}
            continue
        vals = {}
        for row in rel.tuples:
            theta = dict(zip(rel.scope, row))
            acc = fns[0](theta)
            for fn in fns[1:]:
                acc = f.op.combine(acc, fn(theta))
            vals[row] = acc
        v.val = vals


def _acq_run(inst: CspInstance, f: FlatValuation, o, t: EJoinTree, c: int, log: list | None):
    if c < 1:
        raise ValueError("at least one processor is needed")
    _check_input(t)
    o = frozenset(o)
    unknown = o - set(inst.variables)
    if unknown:
        raise ValueError(f"output variables {sorted(unknown)} do not occur in the instance")
    t = t.copy()
    if not _locally_consistent(t):
        raise NotGloballyConsistent("relations are not consistent along the join tree")
    _initial_values(t, f)
    stats = MachineStats(c, len(t), max(len(v.rel) for v in t.vertices))
    for v in t.vertices:
        stats.note_weights(v.val.values())
    op = f.op
    produced: list = []

    def plan(leaf, mark):
        p, s, q = _shunt_context(t, leaf)
        lv, pv, sv, qv = (t.vertices[i] for i in (leaf, p, s, q))
        iet = tuple(x for x in qv.ret if x in pv.sch and x not in sv.ret)
        everything = set(lv.sch) | set(pv.sch) | set(sv.sch)
        oet = tuple(sorted((everything & o) - set(sv.ret) - set(iet), key=str))
        l_ann, p_ann, s_ann = _annotated(lv), _annotated(pv), _annotated(sv)
        joined = extended_join(extended_join(l_ann, p_ann, op), s_ann, op)
        new = extended_project(joined, sv.ret + iet + oet).reorder(sv.ret + iet + oet)
        return leaf, p, s, q, mark, iet, oet, new, (l_ann, p_ann, s_ann)

    def run_batch(batch, mark):
        plans = [plan(leaf, mark) for leaf in batch]
        for leaf, p, s, q, mark_, iet, oet, new, before in plans:
            lv, pv, sv = t.vertices[leaf], t.vertices[p], t.vertices[s]
            lv.mark = pv.mark = mark_
            _replace_child(t, q, p, s)
            sv.parent = q
            pv.children.remove(s)
            sv.iet, sv.oet = iet, oet
            sv.rel = new.relation
            sv.val = dict(new.rows)
            stats.shunt_count += 1
            stats.note_relation(len(new))
            stats.note_weights(new.rows.values())
            if oet:
                produced.append(new)
            if log is not None:
                log.append((leaf, p, s, before, new.scope))
        stats.ascending_steps += _batch_steps(len(batch), c)

    _ascending_batches(t, run_batch)
    root = t.vertices[t.root]
    kids = t.unmarked_children(t.root)
    final = _annotated(root)
    for k in kids:
        final = extended_join(final, _annotated(t.vertices[k]), op)
    out = extended_project(final, sorted(o, key=str)).reorder(tuple(sorted(o, key=str)))
    stats.parallel_steps = stats.ascending_steps
    stats.note_weights(out.rows.values())
    for rel in produced:
        # Output-variable tuples seen during the loop must survive to the end.
        outs = [x for x in rel.scope if x in o]
        seen = {tuple(row[rel.scope.index(x)] for x in outs) for row in rel.rows}
        final_seen = {tuple(row[out.scope.index(x)] for x in outs) for row in out.rows}
        stats.oet_violations += len(seen - final_seen)
    return out, stats, t, (t.root, kids)


def acq(inst: CspInstance, f: FlatValuation, o, t: EJoinTree, c: int = 1, log: list | None = None) -> tuple[AnnotatedRelation, MachineStats]:
    """Best-extension value of every output tuple of a globally consistent acyclic instance.

    When ``log`` is a list, one ``(leaf, parent, sibling, before, new_scope)``
    entry is appended per shunt.
    """
    out, stats, _, _ = _acq_run(inst, f, o, t, c, log)
    return out, stats


def _best_match(rels, fixed: dict, op: Operator, target=None):
    """Lexicographically least joint choice of tuples agreeing with ``fixed``, maximizing the ⊕ value."""
    joined = AnnotatedRelation((), {(): NEUTRAL})
    for r in rels:
        picked = {row: v for row, v in r.rows.items() if all(row[i] == fixed[x] for i, x in enumerate(r.scope) if x in fixed)}
        joined = extended_join(joined, AnnotatedRelation(r.scope, picked), op)
    best = None
    for row, v in joined.rows.items():
        if target is not None and v != target:
            continue
        theta = dict(zip(joined.scope, row))
        if best is None or _better(v, best[1]) or (v == best[1] and assignment_key(theta) < assignment_key(best[0])):
            best = (theta, v)
    return best


def extract_one_best(inst: CspInstance, f: FlatValuation, t: EJoinTree, c: int = 1) -> tuple[dict, object]:
    """One total solution of maximum weight, rebuilt top-down from the contraction log."""
    log: list = []
    out, _, tree, (root, kids) = _acq_run(inst, f, (), t, c, log)
    if not out.rows:
        raise NoSolutionFound("the instance has no solution")
    best_value = out.rows[()]
    finals = [_annotated(tree.vertices[v]) for v in [root, *kids]]
    choice = _best_match(finals, {}, f.op, best_value)
    theta = dict(choice[0])
    # Value carried by the current tuple of each vertex.
    carried = {}
    for v, rel in zip([root, *kids], finals):
        row = tuple(theta[x] for x in rel.scope)
        carried[v] = rel.rows[row]
    for leaf, p, s, before, new_scope in reversed(log):
        fixed = {x: theta[x] for rel in before for x in rel.scope if x in theta}
        assert set(new_scope) <= set(fixed)
        match = _best_match(before, fixed, f.op, carried[s])
        if match is None:
            raise AssertionError("contraction log is inconsistent")
        theta.update(match[0])
        for v, rel in zip((leaf, p, s), before):
            carried[v] = rel.rows[tuple(theta[x] for x in rel.scope)]
    theta = {x: theta[x] for x in sorted(theta, key=str)}
    if not inst.satisfies(theta) or f.evaluate(theta) != best_value:
        raise AssertionError("reconstructed solution does not attain the optimum")
    return theta, best_value
