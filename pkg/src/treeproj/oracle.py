"""Brute-force reference answers: solution sets, best values and ranked lists."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .config import OracleTooLarge, budget
from .model import CspInstance, _value_key
from .outcome import NoSolution, Solution


def assignment_key(theta: dict, order: Iterable[str] | None = None) -> tuple:
    """Lexicographic sort key over the canonical (sorted) variable order."""
    names = sorted(theta) if order is None else list(order)
    return tuple(_value_key(theta[v]) for v in names)


@dataclass(frozen=True)
class SolutionSet:
    variables: tuple
    assignments: tuple
    weights: tuple | None = None

    def __len__(self):
        return len(self.assignments)

    def __iter__(self):
        return iter(self.assignments)

    def project(self, variables) -> list[dict]:
        vs = sorted(set(variables))
        seen = {}
        for a in self.assignments:
            key = tuple(a[v] for v in vs)
            seen.setdefault(key, {v: a[v] for v in vs})
        return sorted(seen.values(), key=assignment_key)


def brute_force_solutions(inst: CspInstance, limit: int | None = None) -> SolutionSet:
    """Backtracking over active domains; each atom is checked once bound."""
    limit = budget() if limit is None else limit
    variables = inst.variables
    doms = inst.active_domains()
    position = {v: i for i, v in enumerate(variables)}
    checks: list[list] = [[] for _ in variables]
    for atom in inst.formula:
        rel = inst.relation_of(atom)
        last = max(position[v] for v in atom.scope)
        checks[last].append((atom.scope, rel.tuples))

    out = []
    theta: dict = {}
    visited = 0

    def extend(i: int):
        nonlocal visited
        if i == len(variables):
            out.append(dict(theta))
            return
        var = variables[i]
        for val in doms.get(var, []):
            visited += 1
            if visited > limit:
                raise OracleTooLarge(f"more than {limit} candidate assignments")
            theta[var] = val
            if all(tuple(theta[v] for v in scope) in tuples for scope, tuples in checks[i]):
                extend(i + 1)
            del theta[var]

    if variables:
        extend(0)
    return SolutionSet(tuple(variables), tuple(sorted(out, key=assignment_key)))


def grouped_weights(inst: CspInstance, f, o, solutions: SolutionSet | None = None) -> list[tuple[dict, object]]:
    """Each O-projection with the best weight of any solution extending it."""
    sols = brute_force_solutions(inst) if solutions is None else solutions
    o = sorted(set(o))
    best: dict = {}
    for theta in sols:
        key = tuple(theta[v] for v in o)
        w = f.evaluate(theta)
        if key not in best or w > best[key]:
            best[key] = w
    return [(dict(zip(o, key)), w) for key, w in best.items()]


def _rank(groups):
    # Heavier first; equal weights in lexicographic order of the assignment.
    by_key = sorted(groups, key=lambda g: assignment_key(g[0]))
    return sorted(by_key, key=lambda g: g[1], reverse=True)


def oracle_max(inst: CspInstance, f, o):
    groups = grouped_weights(inst, f, o)
    if not groups:
        return NoSolution()
    theta, w = _rank(groups)[0]
    return Solution(theta, w, certified=True)


def oracle_topk(inst: CspInstance, f, o, k: int) -> list[tuple[dict, object]]:
    return _rank(grouped_weights(inst, f, o))[:k]


def best_extension_values(inst: CspInstance, f, o) -> dict[tuple, object]:
    """Map from O-tuples (sorted variable order) to their best weight."""
    o = sorted(set(o))
    return {tuple(theta[v] for v in o): w for theta, w in grouped_weights(inst, f, o)}
