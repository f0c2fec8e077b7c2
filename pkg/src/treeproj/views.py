"""View sets, legal view databases and the two decomposition-based generators."""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import reduce
from typing import Mapping, Sequence

from .config import BudgetExceeded, budget
from .model import Atom, CspInstance, Hypergraph, Relation, join, project
from .oracle import brute_force_solutions


class UncoveredAtom(ValueError):
    pass


@dataclass(frozen=True)
class ViewSet:
    """``views`` in canonical order; ``base[i]`` names the base view of atom ``i``."""

    views: tuple
    base: tuple

    def __post_init__(self):
        object.__setattr__(self, "views", tuple(self.views))
        object.__setattr__(self, "base", tuple(self.base))
        symbols = [w.symbol for w in self.views]
        if len(set(symbols)) != len(symbols):
            raise ValueError("view symbols must be distinct")

    def __iter__(self):
        return iter(self.views)

    def __len__(self):
        return len(self.views)

    def by_symbol(self, symbol: str) -> Atom:
        for w in self.views:
            if w.symbol == symbol:
                return w
        raise KeyError(symbol)

    def hypergraph(self) -> Hypergraph:
        return Hypergraph.from_edges(w.scope for w in self.views)


@dataclass(frozen=True)
class ViewDatabase:
    relations: Mapping

    def __getitem__(self, symbol: str) -> Relation:
        return self.relations[symbol]

    def replace(self, updates: Mapping[str, Relation]) -> "ViewDatabase":
        rels = dict(self.relations)
        rels.update(updates)
        return ViewDatabase(rels)


@dataclass(frozen=True)
class SandwichFormula:
    atoms: tuple

    def hypergraph(self) -> Hypergraph:
        return Hypergraph.from_edges(a.scope for a in self.atoms)


def _base_symbol(i: int, atom: Atom) -> str:
    return f"b{i}_{atom.symbol}"


def make_base_views(inst: CspInstance) -> tuple[ViewSet, ViewDatabase]:
    views, base, rels = [], [], {}
    for i, atom in enumerate(inst.formula):
        sym = _base_symbol(i, atom)
        views.append(Atom(sym, atom.scope))
        base.append(sym)
        rels[sym] = inst.relation_of(atom)
    return ViewSet(views, base), ViewDatabase(rels)


def check_legal(v: ViewSet, vdb: ViewDatabase, inst: CspInstance) -> bool:
    for atom, sym in zip(inst.formula, v.base):
        view = v.by_symbol(sym)
        if view.scope != atom.scope:
            return False
        if not vdb[sym].reorder(atom.scope).tuples <= inst.relation_of(atom).tuples:
            return False
    sols = brute_force_solutions(inst)
    for w in v.views:
        rel = vdb[w.symbol].reorder(w.scope)
        needed = {tuple(theta[x] for x in w.scope) for theta in sols}
        if not needed <= rel.tuples:
            return False
    return True


def gen_tree_decomposition_views(inst: CspInstance, k: int, limit: int | None = None) -> tuple[ViewSet, ViewDatabase]:
    """Base views plus a full-product view for every set of at most k+1 variables."""
    if k < 1:
        raise ValueError("k must be at least 1")
    limit = budget() if limit is None else limit
    v, vdb = make_base_views(inst)
    views, rels = list(v.views), dict(vdb.relations)
    doms = inst.active_domains()
    variables = inst.variables
    count = 0
    for size in range(1, k + 2):
        for combo in itertools.combinations(variables, size):
            count += 1
            cells = 1
            for x in combo:
                cells *= len(doms[x])
            if cells > limit or count > limit:
                raise BudgetExceeded(f"view over {combo} needs {cells} tuples")
            sym = "td_" + "_".join(combo)
            views.append(Atom(sym, combo))
            rels[sym] = Relation(combo, frozenset(itertools.product(*(doms[x] for x in combo))))
    return ViewSet(views, v.base), ViewDatabase(rels)


def gen_ghw_views(inst: CspInstance, k: int, limit: int | None = None) -> tuple[ViewSet, ViewDatabase]:
    """Base views plus, for every set of 2..k distinct atoms, the join of their relations."""
    if k < 1:
        raise ValueError("k must be at least 1")
    limit = budget() if limit is None else limit
    v, vdb = make_base_views(inst)
    views, rels = list(v.views), dict(vdb.relations)
    atoms = list(inst.formula)
    count = 0
    for size in range(2, min(k, len(atoms)) + 1):
        for combo in itertools.combinations(range(len(atoms)), size):
            count += 1
            if count > limit:
                raise BudgetExceeded("too many subformulas")
            joined = reduce(join, (inst.relation_of(atoms[i]) for i in combo))
            if len(joined) > limit:
                raise BudgetExceeded(f"subformula {combo} has {len(joined)} solutions")
            scope = tuple(sorted(joined.scope))
            sym = "ghw_" + "_".join(str(i) for i in combo)
            views.append(Atom(sym, scope))
            rels[sym] = joined.reorder(scope)
    return ViewSet(views, v.base), ViewDatabase(rels)


def materialize_sandwich(sf: SandwichFormula, v: ViewSet, vdb: ViewDatabase) -> CspInstance:
    """Each sandwich atom gets the intersection of its covering views' projections."""
    db = {}
    for atom in sf.atoms:
        covering = [w for w in v.views if atom.vars <= w.vars]
        if not covering:
            raise UncoveredAtom(f"no view covers {atom}")
        parts = [project(vdb[w.symbol].reorder(w.scope), atom.scope).reorder(atom.scope).tuples for w in covering]
        db[atom.symbol] = Relation(atom.scope, frozenset.intersection(*parts))
    return CspInstance(tuple(sf.atoms), db)


def views_from_relations(named: Sequence[tuple[str, Sequence[str], Relation]], base: Sequence[str]) -> tuple[ViewSet, ViewDatabase]:
    views = [Atom(sym, scope) for sym, scope, _ in named]
    rels = {sym: rel.reorder(scope) for sym, scope, rel in named}
    return ViewSet(views, base), ViewDatabase(rels)
