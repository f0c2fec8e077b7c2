"""Max and Top-K over views: the consistency-based solver and its certified wrappers.

The core routine keeps, for every vertex of the output-aware parse tree, a set
of candidate views augmented with weight columns. Candidates are filtered by
marginalizing weights bottom-up; weights travel from a child to its parent
through pairwise consistency over carrier views. The result is only trusted
under an embedding promise, so ``certified_max`` fixes one variable at a time
and re-checks the final assignment against the instance.
"""

from __future__ import annotations

import heapq
import itertools
from collections import Counter
from dataclasses import dataclass
from typing import Callable, Iterator

from .consistency import enforce_pairwise, pairwise_fixpoint
from .model import Atom, CspInstance, Relation, project
from .oracle import assignment_key
from .outcome import Fail, NoSolution, Solution
from .valuation import FlatValuation, StructuredValuation, build_output_aware_tree, enumerate_svf
from .views import ViewDatabase, ViewSet

DEFAULT_PARAMETER_BUDGET = 6

# Basic relational-operation counters, shared by every solve in the process.
OPS: Counter = Counter()


class ParameterBudgetExceeded(RuntimeError):
    pass


class _NoVal:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "noval"


NOVAL = _NoVal()


@dataclass
class AugmentedView:
    """A view together with one or two weight columns appended to its scope."""

    base: Atom
    weight_vars: tuple
    relation: Relation

    @property
    def scope(self) -> tuple:
        return self.relation.scope


@dataclass
class CandidateSeparatorSet:
    node: int
    candidates: list  # of (tag, AugmentedView)

    def tags(self) -> list[str]:
        return [tag for tag, _ in self.candidates]


def _weight_var(node: int, tag: str) -> str:
    return f"#X{node}[{tag}]"


def _combine_max(values):
    best = None
    for x in values:
        if best is None or x > best:
            best = x
    return best


class _Run:
    """Mutable state of one promise-based solve."""

    def __init__(self, inst: CspInstance, f: StructuredValuation, v: ViewSet, vdb: ViewDatabase, o, trace):
        self.inst = inst
        self.f = f
        self.o = frozenset(o)
        self.tree = build_output_aware_tree(f, self.o)
        self.trace = trace
        self.views = list(v.views)
        self.vdb = vdb
        self.rels: dict[str, frozenset] = {}

    # -- initialization -------------------------------------------------

    def add_function_views(self) -> str | None:
        """Make sure every weight function has a view over exactly its variables."""
        self.function_view: dict[int, str] = {}
        for i, fn in enumerate(self.tree.function):
            if fn is None:
                continue
            exact = next((w for w in self.views if w.vars == fn.var_set), None)
            if exact is None:
                cover = next((w for w in self.views if fn.var_set <= w.vars), None)
                if cover is None:
                    return f"no view covers the variables of {fn.name}"
                scope = tuple(x for x in cover.scope if x in fn.var_set)
                exact = Atom(f"#fv{i}", scope)
                self.views.append(exact)
                self.rels[exact.symbol] = project(Relation(cover.scope, self.rels[cover.symbol]), scope).tuples
            self.function_view[i] = exact.symbol
        return None

    def leaf_candidates(self, i: int) -> CandidateSeparatorSet:
        tag = self.function_view[i]
        w = self.view(tag)
        fn = self.tree.function[i]
        xv = _weight_var(i, tag)
        rows = frozenset(t + (fn(dict(zip(w.scope, t))),) for t in self.rels[tag])
        return CandidateSeparatorSet(i, [(tag, AugmentedView(w, (xv,), Relation(w.scope + (xv,), rows)))])

    def view(self, symbol: str) -> Atom:
        for w in self.views:
            if w.symbol == symbol:
                return w
        raise KeyError(symbol)

    # -- propagation ----------------------------------------------------

    def maximal_views(self) -> list[Atom]:
        """Views whose variables are not covered by an earlier or larger view."""
        out: list[Atom] = []
        for w in sorted(self.views, key=lambda w: -len(w.vars)):
            if not any(w.vars <= m.vars for m in out):
                out.append(w)
        return out

    def propagate(self, child: CandidateSeparatorSet, parent_views: dict) -> None:
        """Push each child candidate's weights into the parent views carrying its column.

        The fixpoint runs over the candidate and the carriers of scope-maximal
        views only: a carrier whose variables lie inside another one's is the
        projection of it at the fixpoint, since the views are already pairwise
        consistent. Each parent view is then restricted against a covering
        carrier on its own, so parent views never prune one another.
        """
        maximal = self.maximal_views()
        for tag, sep in child.candidates:
            xv = sep.weight_vars[0]
            # Weights are replaced by their rank while consistency runs.
            dom_values = sorted({t[-1] for t in sep.relation.tuples})
            code = {x: n for n, x in enumerate(dom_values)}
            dom = range(len(dom_values))
            scopes: dict = {"#sep": sep.scope}
            rels: dict = {"#sep": {t[:-1] + (code[t[-1]],) for t in sep.relation.tuples}}
            for w in maximal:
                name = "#carrier:" + w.symbol
                scopes[name] = w.scope + (xv,)
                rels[name] = {t + (x,) for t in self.rels[w.symbol] for x in dom}
            OPS["propagate"] += 1
            pairwise_fixpoint(scopes, rels, dirty={"#sep"}, counter=OPS)
            best_by_scope: dict = {}
            for key, av in parent_views.items():
                if xv not in av.weight_vars:
                    continue
                base = av.base.scope
                best = best_by_scope.get(base)
                if best is None:
                    cover = next(m for m in maximal if av.base.vars <= m.vars)
                    idx = [cover.scope.index(x) for x in base]
                    best = {}
                    for t in rels["#carrier:" + cover.symbol]:
                        r = tuple(t[i] for i in idx)
                        if r not in best or t[-1] > best[r]:
                            best[r] = t[-1]
                    best_by_scope[base] = best
                n = len(base)
                pos = av.scope.index(xv)
                rows = frozenset(
                    t[:pos] + (dom_values[best[t[:n]]],) + t[pos + 1 :] for t in av.relation.tuples if t[:n] in best
                )
                parent_views[key] = AugmentedView(av.base, av.weight_vars, Relation(av.scope, rows))

    # -- evaluation -----------------------------------------------------

    def internal_views(self, i: int, left: CandidateSeparatorSet, right: CandidateSeparatorSet) -> dict:
        r, t = self.tree.children[i]
        out = {}
        for w in self.views:
            for a in left.tags():
                for b in right.tags():
                    xa, xb = _weight_var(r, a), _weight_var(t, b)
                    rows = frozenset(row + (NOVAL, NOVAL) for row in self.rels[w.symbol])
                    out[(w.symbol, a, b)] = AugmentedView(w, (xa, xb), Relation(w.scope + (xa, xb), rows))
        return out

    def evaluate_internal(self, i: int, parent_views: dict, left, right) -> CandidateSeparatorSet:
        op = self.tree.label[i]
        survivors = []
        for w in self.views:
            best: dict = {}
            dead = False
            for a in left.tags():
                for b in right.tags():
                    av = parent_views[(w.symbol, a, b)]
                    n = len(w.scope)
                    marg: dict = {}
                    for row in av.relation.tuples:
                        val = op.combine(row[n], row[n + 1])
                        key = row[:n]
                        if key not in marg or val > marg[key]:
                            marg[key] = val
                    OPS["marginalize"] += 1
                    for key in self.rels[w.symbol]:
                        if key not in marg:
                            dead = True
                            break
                        if key not in best or marg[key] < best[key]:
                            best[key] = marg[key]
                    if dead:
                        break
                if dead:
                    break
            if dead or not best:
                continue
            xv = _weight_var(i, w.symbol)
            rel = Relation(w.scope + (xv,), frozenset(k + (x,) for k, x in best.items()))
            survivors.append((w.symbol, AugmentedView(w, (xv,), rel), _combine_max(best.values())))
        if not survivors:
            return CandidateSeparatorSet(i, [])
        floor = min(m for _, _, m in survivors)
        return CandidateSeparatorSet(i, [(tag, av) for tag, av, m in survivors if m == floor])

    def root_views(self, child: CandidateSeparatorSet) -> dict | None:
        w_out = next((w for w in self.views if self.o <= w.vars), None)
        if w_out is None:
            return None
        scope = tuple(x for x in w_out.scope if x in self.o)
        rows = project(Relation(w_out.scope, self.rels[w_out.symbol]), scope).tuples
        c = self.tree.children[self.tree.root][0]
        out = {}
        for tag in child.tags():
            xv = _weight_var(c, tag)
            base = Atom(w_out.symbol, scope)
            out[("#root", tag)] = AugmentedView(base, (xv,), Relation(scope + (xv,), frozenset(r + (NOVAL,) for r in rows)))
        return out

    def evaluate_root(self, views: dict) -> tuple | None:
        """First view whose weights never exceed another view's weight on the same output tuple."""
        tables = []
        for key, av in views.items():
            tables.append((key, av, {t[:-1]: t[-1] for t in av.relation.tuples}))
        for key, av, mine in tables:
            ok = all(
                mine[k] <= other[k]
                for _, _, other in tables
                for k in mine
                if k in other
            )
            if ok:
                return key, av
        return None

    # -- driver ---------------------------------------------------------

    def solve(self):
        vset = ViewSet(self.views, ())
        db1, empty = enforce_pairwise(vset, self.vdb)
        OPS["enforce"] += 1
        if empty:
            return NoSolution()
        self.rels = {w.symbol: db1[w.symbol].reorder(w.scope).tuples for w in self.views}
        problem = self.add_function_views()
        if problem:
            return Fail(problem)

        tree = self.tree
        seps: dict[int, CandidateSeparatorSet] = {}
        for i in range(len(tree)):
            kind = tree.kind[i]
            if kind == "leaf":
                seps[i] = self.leaf_candidates(i)
            elif kind == "op":
                r, t = tree.children[i]
                pv = self.internal_views(i, seps[r], seps[t])
                self.propagate(seps[r], pv)
                self.propagate(seps[t], pv)
                seps[i] = self.evaluate_internal(i, pv, seps[r], seps[t])
                if not seps[i].candidates:
                    return Fail(f"no candidate separator survives at parse-tree vertex {i}")
            else:
                (c,) = tree.children[i]
                pv = self.root_views(seps[c])
                if pv is None:
                    return Fail(f"no view covers the output variables {sorted(self.o)}")
                self.propagate(seps[c], pv)
                chosen = self.evaluate_root(pv)
                if chosen is None:
                    return Fail("no root candidate is pointwise minimal")
                key, av = chosen
                seps[i] = CandidateSeparatorSet(i, [(key[1], av)])
            if self.trace is not None:
                for tag, av in seps[i].candidates:
                    self.trace(i, tag, av)
        (_, root_view), = seps[tree.root].candidates
        rows = root_view.relation.tuples
        if not rows:
            return Fail("the surviving root view is empty")
        top = _combine_max(t[-1] for t in rows)
        out_scope = root_view.scope[:-1]
        best = min(
            (dict(zip(out_scope, t[:-1])) for t in rows if t[-1] == top),
            key=assignment_key,
        )
        return Solution(best, top, certified=False)


def compute_max_promise(
    inst: CspInstance,
    f: StructuredValuation,
    v: ViewSet,
    vdb: ViewDatabase,
    o,
    trace: Callable | None = None,
):
    """Consistency-based Max; correct whenever (f, o) embeds in the views.

    ``trace(node, tag, augmented_view)`` is called for every surviving
    candidate after each vertex is evaluated.
    """
    return _Run(inst, f, v, vdb, o, trace).solve()


def evaluate_step(run_state, cs: CandidateSeparatorSet, parent_views: dict, left, right) -> CandidateSeparatorSet:
    """Internal-node evaluation on an explicit run state (exposed for tests)."""
    return run_state.evaluate_internal(cs.node, parent_views, left, right)


def propagate_step(run_state, cs_i: CandidateSeparatorSet, parent_views: dict) -> dict:
    run_state.propagate(cs_i, parent_views)
    return parent_views


# --------------------------------------------------------------------------
# certified and fixed-parameter wrappers


def _augment(v: ViewSet, vdb: ViewDatabase, variable: str, values: list) -> tuple[ViewSet, ViewDatabase]:
    views, rels = [], {}
    for w in v.views:
        rel = vdb[w.symbol].reorder(w.scope)
        if variable in w.vars:
            views.append(w)
            rels[w.symbol] = rel
        else:
            scope = w.scope + (variable,)
            views.append(Atom(w.symbol, scope))
            rels[w.symbol] = Relation(scope, frozenset(t + (x,) for t in rel.tuples for x in values))
    return ViewSet(views, v.base), ViewDatabase(rels)


def _fix(inst: CspInstance, v: ViewSet, vdb: ViewDatabase, variable: str, value):
    db = {}
    for atom in inst.formula:
        db[atom.symbol] = inst.relation_of(atom).select({variable: value})
    fixed = CspInstance(inst.formula, {**inst.database, **db})
    rels = {w.symbol: vdb[w.symbol].reorder(w.scope).select({variable: value}) for w in v.views}
    return fixed, ViewDatabase(rels)


def certified_max(inst: CspInstance, f: StructuredValuation, v: ViewSet, vdb: ViewDatabase, o):
    """Max whose answer is verified against ``inst``; Fail when the views cannot vouch for it."""
    o = frozenset(o)
    cur_inst, cur_vdb = inst, vdb
    theta: dict = {}
    target = None
    for variable in inst.variables:
        values = cur_inst.active_domains().get(variable, [])
        aug_v, aug_db = _augment(v, cur_vdb, variable, values)
        res = compute_max_promise(cur_inst, f, aug_v, aug_db, {variable})
        if isinstance(res, NoSolution):
            return res if target is None else Fail(f"no solution left after fixing {sorted(theta)}")
        if isinstance(res, Fail):
            return res
        if target is None:
            target = res.weight
        elif res.weight != target:
            return Fail(f"weight changed from {target} to {res.weight} while fixing {variable}")
        theta[variable] = res.assignment[variable]
        cur_inst, cur_vdb = _fix(cur_inst, v, cur_vdb, variable, theta[variable])
    if not inst.variables:
        return Fail("the instance has no variables")
    if not inst.satisfies(theta):
        return Fail("the assembled assignment violates a constraint")
    if f.evaluate(theta) != target:
        return Fail("the assembled assignment does not reach the claimed weight")
    return Solution({x: theta[x] for x in sorted(o)}, target, certified=True)


def fpt_max(inst: CspInstance, f: FlatValuation, v: ViewSet, vdb: ViewDatabase, o, max_functions: int = DEFAULT_PARAMETER_BUDGET):
    """Try every structured form of ``f`` until one is certified."""
    if len(f.functions) > max_functions:
        raise ParameterBudgetExceeded(f"{len(f.functions)} weight functions exceed the budget of {max_functions}")
    tried = 0
    for form in enumerate_svf(f):
        tried += 1
        res = certified_max(inst, form, v, vdb, o)
        if not isinstance(res, Fail):
            return res
    return Fail(f"none of the {tried} structured forms embeds in the views")


# --------------------------------------------------------------------------
# top-k


class _Desc:
    """Heap key: heavier weights first, then lexicographically smaller assignments."""

    __slots__ = ("weight", "key")

    def __init__(self, weight, key):
        self.weight, self.key = weight, key

    def __lt__(self, other):
        if self.weight != other.weight:
            return self.weight > other.weight
        return self.key < other.key


def _output_atom_symbol(var: str) -> str:
    return f"#out[{var}]"


def top_k(inst: CspInstance, f, v: ViewSet, vdb: ViewDatabase, o, k: int) -> Iterator:
    """Yield up to ``k`` (assignment, weight) pairs, best first; a Fail ends the stream.

    ``f`` may be structured, or flat (its first certified structured form is used).
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    order = sorted(set(o))
    doms = inst.active_domains()
    unary = [Atom(_output_atom_symbol(x), (x,)) for x in order]
    formula = tuple(inst.formula) + tuple(unary)
    views = list(v.views) + unary
    base = tuple(v.base) + tuple(a.symbol for a in unary)

    forms = [f] if isinstance(f, StructuredValuation) else list(enumerate_svf(f))

    def solve(allowed: dict, form):
        unary_rels = {_output_atom_symbol(x): Relation((x,), frozenset((val,) for val in allowed[x])) for x in order}
        sub = CspInstance(formula, {**inst.database, **unary_rels})
        sub_db = ViewDatabase({**vdb.relations, **unary_rels})
        OPS["solve"] += 1
        return certified_max(sub, form, ViewSet(views, base), sub_db, order)

    root_allowed = {x: list(doms.get(x, [])) for x in order}
    form = None
    first = Fail("no structured form embeds in the views")
    for candidate in forms:
        first = solve(root_allowed, candidate)
        if not isinstance(first, Fail):
            form = candidate
            break
    if isinstance(first, Fail):
        yield first
        return
    if isinstance(first, NoSolution):
        return

    counter = itertools.count()
    heap = [(_Desc(first.weight, assignment_key(first.assignment, order)), next(counter), first, root_allowed)]
    emitted = 0
    while heap and emitted < k:
        _, _, sol, allowed = heapq.heappop(heap)
        yield sol.assignment, sol.weight
        emitted += 1
        if emitted == k:
            return
        for i, x in enumerate(order):
            child = {}
            for j, y in enumerate(order):
                if j < i:
                    child[y] = [sol.assignment[y]]
                elif j == i:
                    child[y] = [val for val in allowed[y] if val != sol.assignment[y]]
                else:
                    child[y] = list(allowed[y])
            if not child[x]:
                continue
            res = solve(child, form)
            if isinstance(res, Fail):
                yield res
                return
            if isinstance(res, Solution):
                heapq.heappush(heap, (_Desc(res.weight, assignment_key(res.assignment, order)), next(counter), res, child))
