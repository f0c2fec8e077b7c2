"""Acceptance criteria 1-10, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py -v`` or ``python tests/test_acceptance.py``.
Weights are compared exactly (Fractions, zero tolerance) and every count
bound is a hard assertion.
"""

from __future__ import annotations

import io
import itertools
import json
import math
import random
import sys
import time
from functools import lru_cache
from importlib import resources
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

import treeproj.maxsolver as ms  # noqa: E402
from instances import best_extension, has_tree_projection, random_flat, random_instance, random_output, random_table_function, subvaluations  # noqa: E402
from treeproj.cli import main  # noqa: E402
from treeproj.consistency import build_ejointree, enforce_pairwise, full_reduce_acyclic  # noqa: E402
from treeproj.maxsolver import certified_max, compute_max_promise, fpt_max, top_k  # noqa: E402
from treeproj.model import Atom, CspInstance, Hypergraph, JoinTree, Relation, hypergraph_of, is_acyclic  # noqa: E402
from treeproj.oracle import best_extension_values, brute_force_solutions, oracle_max, oracle_topk  # noqa: E402
from treeproj.outcome import Fail, NoSolution, Solution  # noqa: E402
from treeproj.parallel import acq, extract_one_best, global_consistency  # noqa: E402
from treeproj.valuation import (  # noqa: E402
    Combine,
    Embedding,
    FlatValuation,
    Leaf,
    Operator,
    WeightFunction,
    build_output_aware_tree,
    check_embedding,
    complete_embedding,
    descendant_preserved,
    svf_count,
    svf_from_tree_projection,
)
from treeproj.views import gen_ghw_views, gen_tree_decomposition_views  # noqa: E402

EX2 = str(resources.files("treeproj") / "fixtures" / "ex2.json")

FUZZ_INSTANCES = 1000
CORRUPTED_RUNS = 200
FPT_INSTANCES = 300
CONFLUENCE_INSTANCES, CONFLUENCE_ORDERS = 200, 20
ACYCLIC_INSTANCES = 200
ACQ_INSTANCES = 200
SEPARATOR_INSTANCES = 200
EX2_TIME_LIMIT = 1.0
GRID_N, GRID_C = (8, 16, 64, 128), (1, 2, 4, 16)


_terminal = None


@pytest.fixture(autouse=True)
def _report_to_terminal(pytestconfig):
    global _terminal
    _terminal = pytestconfig.pluginmanager.getplugin("terminalreporter")
    yield


def report(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    if _terminal is not None:
        _terminal.write_line("")
        _terminal.write_line(line)
    else:
        print(line)


def outcome(number: int, problems: list, detail: str) -> None:
    report(number, not problems, detail + (f"; first problem: {problems[0]}" if problems else ""))
    assert not problems, problems[:5]


def run_cli(*argv):
    out = io.StringIO()
    code = main(list(argv), out=out)
    return code, out.getvalue()


def assignment_of(theta: dict, o) -> dict:
    return {x: theta[x] for x in sorted(o)}


def structural_edges(inst, f, o):
    return [a.vars for a in inst.formula] + [fn.var_set for fn in f.functions] + [frozenset(o)]


# --------------------------------------------------------------------------
# 1


def test_criterion_1_example_reproduction():
    problems = []
    code, text = run_cli("oracle", "solutions", EX2)
    sols = json.loads(text)["solutions"]
    if code != 0 or sorted(map(json.dumps, sols)) != sorted(json.dumps(dict.fromkeys("ABCD", v)) for v in (0, 1)):
        problems.append(f"oracle solutions {sols}")
    start = time.perf_counter()
    code, text = run_cli("solve", "max", EX2)
    elapsed = time.perf_counter() - start
    doc = json.loads(text)
    if code != 0 or doc["status"] != "Solution" or doc["weight"] != "1" or doc["certified"] is not True:
        problems.append(f"solve max gave {doc}")
    if elapsed >= EX2_TIME_LIMIT:
        problems.append(f"solve max took {elapsed:.3f}s")
    outcome(1, problems, f"solutions={len(sols)} weight={doc.get('weight')} certified={doc.get('certified')} time={elapsed:.3f}s (< {EX2_TIME_LIMIT}s)")


# --------------------------------------------------------------------------
# 2 and 3 share one fuzz corpus


def fuzz_case(seed: int):
    rng = random.Random(seed)
    inst = random_instance(rng, max_vars=8, max_dom=3, max_constraints=8)
    f = random_flat(rng, inst, max_functions=3)
    o = random_output(rng, inst)
    method = rng.choice([gen_tree_decomposition_views, gen_ghw_views])
    v, vdb = method(inst, 2)
    k = rng.randint(1, 10)
    return inst, f, o, v, vdb, k


@lru_cache(maxsize=None)
def fuzz_solutions(seed: int):
    inst = fuzz_case(seed)[0]
    return brute_force_solutions(inst)


def test_criterion_2_promise_free_soundness():
    problems = []
    counts = {"Solution": 0, "NoSolution": 0, "Fail": 0}
    for seed in range(FUZZ_INSTANCES):
        inst, f, o, v, vdb, _ = fuzz_case(seed)
        res = certified_max(inst, f.left_deep(), v, vdb, o)
        expected = oracle_max(inst, f, o)
        counts[res.status] += 1
        if isinstance(res, Solution):
            projections = [assignment_of(theta, o) for theta in fuzz_solutions(seed)]
            if not (res.certified and isinstance(expected, Solution) and res.weight == expected.weight and res.assignment in projections):
                problems.append(f"seed {seed}: {res} vs {expected}")
        elif isinstance(res, NoSolution):
            if not isinstance(expected, NoSolution):
                problems.append(f"seed {seed}: NoSolution vs {expected}")
        elif has_tree_projection(structural_edges(inst, f, o), [w.vars for w in v.views]):
            problems.append(f"seed {seed}: Fail although a tree projection exists")
    outcome(2, problems, f"{FUZZ_INSTANCES} instances {counts}; wrong answers and unjustified Fails: {len(problems)}")


def corrupt(rng: random.Random, inst, v, vdb):
    """Add a few random tuples to some views."""
    doms = inst.active_domains()
    updates = {}
    for w in v.views:
        if rng.random() < 0.5 and all(doms[x] for x in w.scope):
            extra = {tuple(rng.choice(sorted(doms[x], key=str)) for x in w.scope) for _ in range(rng.randint(1, 3))}
            updates[w.symbol] = Relation(w.scope, vdb[w.symbol].tuples | extra)
    return vdb.replace(updates)


def test_criterion_3_top_k():
    problems = []
    emitted = 0
    for seed in range(FUZZ_INSTANCES):
        inst, f, o, v, vdb, k = fuzz_case(seed)
        got = list(top_k(inst, f, v, vdb, o, k))
        expected = oracle_topk(inst, f, o, k)
        if got and isinstance(got[-1], Fail):
            problems.append(f"seed {seed}: Fail on legal views")
            continue
        emitted += len(got)
        if [w for _, w in got] != [w for _, w in expected]:
            problems.append(f"seed {seed}: weights {[w for _, w in got]} vs {[w for _, w in expected]}")

    fails = 0
    for seed in range(CORRUPTED_RUNS):
        inst, f, o, v, vdb, k = fuzz_case(seed)
        rng = random.Random(10**6 + seed)
        bad = corrupt(rng, inst, v, vdb)
        got = list(top_k(inst, f, v, bad, o, k))
        if got and isinstance(got[-1], Fail):
            fails += 1
            got = got[:-1]
        ranked = oracle_topk(inst, f, o, 10**6)
        projections = {json.dumps(assignment_of(theta, o), sort_keys=True, default=str) for theta in fuzz_solutions(seed)}
        keys = [json.dumps(a, sort_keys=True, default=str) for a, _ in got]
        if [w for _, w in got] != [w for _, w in ranked][: len(got)]:
            problems.append(f"corrupted seed {seed}: prefix {[w for _, w in got]} vs {[w for _, w in ranked][:len(got)]}")
        elif len(set(keys)) != len(keys) or not set(keys) <= projections:
            problems.append(f"corrupted seed {seed}: emitted assignments are not distinct solutions")
    outcome(3, problems, f"{FUZZ_INSTANCES} ranked runs ({emitted} answers) match; {CORRUPTED_RUNS} corrupted runs, {fails} ended in Fail, all prefixes valid")


# --------------------------------------------------------------------------
# 4


def test_criterion_4_fpt_loop(monkeypatch):
    problems = []
    real = ms.certified_max
    calls = []
    monkeypatch.setattr(ms, "certified_max", lambda *a: calls.append(1) or real(*a))
    expected_counts = {1: 1, 2: 1, 3: 3, 4: 15}
    for m, want in expected_counts.items():
        if svf_count(m) != want:
            problems.append(f"svf_count({m}) = {svf_count(m)}")
    by_m = {m: 0 for m in expected_counts}
    fails = not_embeddable = 0
    for seed in range(FPT_INSTANCES):
        rng = random.Random(7 * 10**6 + seed)
        inst = random_instance(rng, max_vars=6, max_constraints=6)
        m = 1 + seed % 4
        fns = [random_table_function(rng, inst, f"f{i}") for i in range(m)]
        f = FlatValuation(rng.choice([Operator.SUM, Operator.MIN, Operator.PRODUCT]), fns)
        o = random_output(rng, inst)
        v, vdb = rng.choice([gen_tree_decomposition_views, gen_ghw_views])(inst, 2)
        calls.clear()
        res = fpt_max(inst, f, v, vdb, o)
        by_m[m] += 1
        if len(calls) > expected_counts[m]:
            problems.append(f"seed {seed}: {len(calls)} tries for m={m}")
        fails += isinstance(res, Fail)
        embeds = has_tree_projection(structural_edges(inst, f, o), [w.vars for w in v.views])
        if not embeds:
            not_embeddable += 1
            continue
        expected = oracle_max(inst, f, o)
        if isinstance(res, Fail) or res.status != expected.status or (isinstance(res, Solution) and res.weight != expected.weight):
            problems.append(f"seed {seed}: {res} vs {expected}")
    outcome(4, problems, f"{FPT_INSTANCES} flat valuations by m {by_m}; tries within svf counts {expected_counts}; {fails} Fails, {not_embeddable} without any embedding; all embeddable cases match")


# --------------------------------------------------------------------------
# 5


def test_criterion_5_confluence():
    problems = []
    for seed in range(CONFLUENCE_INSTANCES):
        rng = random.Random(5 * 10**6 + seed)
        inst = random_instance(rng)
        v, vdb = rng.choice([gen_tree_decomposition_views, gen_ghw_views])(inst, 2)
        first, empty = enforce_pairwise(v, vdb)
        for order in range(CONFLUENCE_ORDERS):
            again, again_empty = enforce_pairwise(v, vdb, rng=random.Random(order))
            if again_empty != empty or any(again[w.symbol].tuples != first[w.symbol].tuples for w in v.views):
                problems.append(f"seed {seed} order {order}")
                break
    outcome(5, problems, f"{CONFLUENCE_INSTANCES} instances x {CONFLUENCE_ORDERS} orders bit-identical")


# --------------------------------------------------------------------------
# 6, 7 and 8: acyclic instances


def acyclic_instance(rng: random.Random, m: int, dom: int, max_arity=4) -> tuple[CspInstance, list]:
    """Scopes grown from earlier scopes; returns the instance and each atom's parent atom.

    Fresh variables are never reused, so the parent links form a join tree.
    Relations hold at most 200 tuples.
    """
    count = itertools.count()
    scopes = [[f"V{next(count):03d}" for _ in range(rng.randint(1, 3))]]
    parents = [None]
    for _ in range(1, m):
        p = rng.randrange(len(scopes))
        shared = rng.sample(scopes[p], rng.randint(1, min(len(scopes[p]), max_arity)))
        fresh = [f"V{next(count):03d}" for _ in range(rng.randint(0, max_arity - len(shared)))]
        scope = shared + fresh
        rng.shuffle(scope)
        scopes.append(scope)
        parents.append(p)
    atoms, db = [], {}
    for j, s in enumerate(scopes):
        every = list(itertools.product(range(dom), repeat=len(s)))
        rows = rng.sample(every, rng.randint(1, min(len(every), 200)))
        atoms.append(Atom(f"r{j}", tuple(s)))
        db[f"r{j}"] = Relation(tuple(s), frozenset(rows))
    return CspInstance(tuple(atoms), db), parents


def extendable_tuples(inst: CspInstance, parents: list) -> list[set]:
    """Per atom, the tuples that extend to a full solution.

    Memoised top-down search over the atom tree re-rooted at each atom in
    turn: a subtree is satisfiable under the values it shares with its
    parent when some tuple of its atom agrees and all child subtrees are.
    """
    atoms = inst.formula
    adj = [set() for _ in atoms]
    for v, p in enumerate(parents):
        if p is not None:
            adj[v].add(p)
            adj[p].add(v)
    out = []
    for root in range(len(atoms)):
        memo: dict = {}

        def satisfiable(v, came_from, fixed: tuple) -> bool:
            key = (v, came_from, fixed)
            if key not in memo:
                scope = atoms[v].scope
                memo[key] = any(
                    all(row[x] == val for x, val in fixed) and extends(v, came_from, row)
                    for row in (dict(zip(scope, t)) for t in inst.relation_of(atoms[v]).tuples)
                )
            return memo[key]

        def extends(v, came_from, row) -> bool:
            return all(
                satisfiable(c, v, tuple(sorted((x, row[x]) for x in atoms[c].vars & atoms[v].vars)))
                for c in sorted(adj[v])
                if c != came_from
            )

        scope = atoms[root].scope
        out.append({t for t in inst.relation_of(atoms[root]).tuples if extends(root, None, dict(zip(scope, t)))})
    return out


def test_criterion_6_global_consistency():
    problems = []
    sizes = []
    for seed in range(ACYCLIC_INSTANCES):
        rng = random.Random(6 * 10**6 + seed)
        inst, parents = acyclic_instance(rng, rng.randint(1, 32), rng.randint(2, 3))
        sizes.append(len(inst.formula))
        ok, jt = is_acyclic(hypergraph_of(inst.formula))
        t = build_ejointree(inst, jt)
        c = rng.choice([1, 2, 4, 16])
        out, _ = global_consistency(inst, t, c)
        reference = full_reduce_acyclic(inst, jt)
        if any(out.relation_of(a).tuples != reference.relation_of(a).tuples for a in inst.formula):
            problems.append(f"seed {seed}: differs from the full reducer")
            continue
        if any(out.relation_of(a).tuples != keep for a, keep in zip(inst.formula, extendable_tuples(inst, parents))):
            problems.append(f"seed {seed}: a kept tuple does not extend or an extendable tuple was dropped")
    outcome(6, problems, f"{ACYCLIC_INSTANCES} acyclic instances ({min(sizes)}-{max(sizes)} constraints, <= 200 tuples) equal the full reducer; per-tuple extension checks pass")


def shaped_instance(rng: random.Random, n: int) -> CspInstance:
    return acyclic_instance(rng, n, 2, max_arity=3)[0]


def test_criterion_7_complexity_bounds():
    problems = []
    worst = 0.0
    for n in GRID_N:
        for c in GRID_C:
            for rep in range(3):
                rng = random.Random(70 * 10**6 + 1000 * n + 10 * c + rep)
                inst = shaped_instance(rng, n)
                ok, jt = is_acyclic(hypergraph_of(inst.formula))
                t = build_ejointree(inst, jt)
                out, stats = global_consistency(inst, t, c)
                bound = 4 * (math.ceil(math.log2(c)) + 2 * math.ceil(n / (4 * c)))
                worst = max(worst, stats.parallel_steps / bound)
                if stats.parallel_steps > stats.step_bound():
                    problems.append(f"n={n} c={c}: {stats.parallel_steps} steps > {stats.step_bound()} (vertex count {stats.vertices})")
                if stats.parallel_steps > bound:
                    problems.append(f"n={n} c={c}: {stats.parallel_steps} steps > {bound} (n = constraints)")
                if stats.max_intermediate > stats.input_max**2:
                    problems.append(f"n={n} c={c}: intermediate {stats.max_intermediate} > d^2 = {stats.input_max ** 2}")
    outcome(7, problems, f"grid n={GRID_N} x c={GRID_C}, 3 instances each; worst steps/bound ratio {worst:.2f}; intermediates <= d^2")


def test_criterion_8_acq():
    problems = []
    done = 0
    for seed in range(8 * 10**6, 8 * 10**6 + 10**5):
        if done == ACQ_INSTANCES:
            break
        rng = random.Random(seed)
        inst, _ = acyclic_instance(rng, rng.randint(1, 8), 2, max_arity=3)
        ok, jt = is_acyclic(hypergraph_of(inst.formula))
        red = full_reduce_acyclic(inst, jt)
        if any(len(red.relation_of(a)) == 0 for a in red.formula):
            continue
        t = build_ejointree(red, jt)
        op = rng.choice([Operator.SUM, Operator.MIN, Operator.PRODUCT])
        fns = []
        for i in range(rng.randint(1, 3)):
            atom = rng.choice(red.formula)
            scope = tuple(rng.sample(atom.scope, rng.randint(1, len(atom.scope))))
            table = {k: rng.randint(0, 5) for k in itertools.product(range(2), repeat=len(scope))}
            fns.append(WeightFunction(f"f{i}", scope, "table", table))
        f = FlatValuation(op, fns)
        o = set(rng.sample(red.variables, rng.randint(0, min(3, len(red.variables)))))
        done += 1
        got, _ = acq(red, f, o, t, rng.choice([1, 2, 4]))
        if got.rows != best_extension_values(red, f, o):
            problems.append(f"seed {seed}: acq values differ from the oracle")
            continue
        theta, w = extract_one_best(red, f, t)
        best = oracle_max(red, f, set())
        if not (red.satisfies(theta) and f.evaluate(theta) == w == best.weight):
            problems.append(f"seed {seed}: extracted {w}, oracle {best.weight}")
    outcome(8, problems, f"{done} globally consistent acyclic instances: acq values exact, extracted solutions optimal")


# --------------------------------------------------------------------------
# 9


def free_trees(n: int) -> list[list[tuple[int, int]]]:
    """Non-isomorphic free trees on n vertices, from Pruefer sequences."""
    if n == 1:
        return [[]]
    if n == 2:
        return [[(0, 1)]]
    seen, out = set(), []
    for seq in itertools.product(range(n), repeat=n - 2):
        edges = prufer_edges(list(seq), n)
        form = canonical_tree(edges, n)
        if form not in seen:
            seen.add(form)
            out.append(edges)
    return out


def prufer_edges(seq: list, n: int) -> list:
    degree = [1] * n
    for x in seq:
        degree[x] += 1
    edges = []
    for x in seq:
        leaf = min(i for i in range(n) if degree[i] == 1)
        edges.append((leaf, x))
        degree[leaf] -= 1
        degree[x] -= 1
    u, w = [i for i in range(n) if degree[i] == 1]
    edges.append((u, w))
    return edges


def canonical_tree(edges, n) -> str:
    adj = {v: [] for v in range(n)}
    for a, b in edges:
        adj[a].append(b)
        adj[b].append(a)

    def encode(v, parent):
        return "(" + "".join(sorted(encode(c, v) for c in adj[v] if c != parent)) + ")"

    return min(encode(r, None) for r in range(n))


def parse_shapes():
    """Binary parse-tree shapes with at most 7 vertices once the root is added."""
    leaf = "leaf"
    return [leaf, (leaf, leaf), ((leaf, leaf), leaf), (leaf, (leaf, leaf))]


def build_shape(shape, names):
    names = iter(names)

    def go(s):
        if s == "leaf":
            return Leaf(WeightFunction.identity(next(names)))
        return Combine(Operator.SUM, go(s[0]), go(s[1]))

    return go(shape)


def count_leaves(shape) -> int:
    return 1 if shape == "leaf" else count_leaves(shape[0]) + count_leaves(shape[1])


def test_criterion_9_embeddings():
    problems = []
    cases = completions = 0
    trees = [(n, edges) for n in range(1, 8) for edges in free_trees(n)]
    for n, edges in trees:
        labels = tuple(frozenset({f"x{v}"}) for v in range(n))
        jt = JoinTree(labels, tuple(edges))
        ha = Hypergraph.from_edges(labels)
        for shape in parse_shapes():
            m = count_leaves(shape)
            size = 2 * m
            if size > n:
                continue
            for sigma in itertools.permutations(range(n), m + 1):
                f = build_shape(shape, [f"x{v}" for v in sigma[:m]])
                t = build_output_aware_tree(f, {f"x{sigma[m]}"})
                leaves = [v for v in range(len(t)) if t.kind[v] == "leaf"]
                ops = [v for v in range(len(t)) if t.kind[v] == "op"]
                fixed = dict(zip(leaves + [t.root], sigma))
                free = [v for v in range(n) if v not in sigma]
                preserving = embedded = False
                for images in itertools.permutations(free, len(ops)):
                    xi = {**fixed, **dict(zip(ops, images))}
                    e = Embedding(xi, jt)
                    if descendant_preserved(e, t):
                        preserving = True
                        completions += 1
                        if not check_embedding(complete_embedding(xi, t, jt), t, ha):
                            problems.append(f"completion of {xi} on tree {edges} fails the embedding check")
                    if check_embedding(e, t, ha):
                        embedded = True
                cases += 1
                if preserving != embedded:
                    problems.append(f"tree {edges}, shape {shape}, sigma {sigma}: preserving={preserving} embedded={embedded}")

    svf_cases = 0
    for n, edges in trees:
        labels = []
        for v in range(n):
            incident = {f"e{min(a, b)}_{max(a, b)}" for a, b in edges if v in (a, b)}
            labels.append(frozenset({f"x{v}"} | incident))
        ha = Hypergraph.from_edges(labels)
        for m in (1, 2, 3):
            for homes in itertools.combinations_with_replacement(range(n), m):
                for wide in itertools.product((False, True), repeat=m):
                    fns = [
                        WeightFunction(f"g{i}", tuple(sorted(labels[h])) if big else (f"x{h}",), "table", {})
                        for i, (h, big) in enumerate(zip(homes, wide))
                    ]
                    f = FlatValuation(Operator.SUM, fns)
                    for out in [set()] + [{f"x{u}"} for u in range(n)]:
                        form, e = svf_from_tree_projection(f, out, ha)
                        svf_cases += 1
                        if not check_embedding(e, build_output_aware_tree(form, out), ha):
                            problems.append(f"svf_from_tree_projection on tree {edges}, homes {homes}, output {out}")
    outcome(
        9,
        problems,
        f"{len(trees)} join trees (<= 7 vertices) x 4 parse shapes: {cases} leaf/root maps, {completions} completions checked; {svf_cases} svf_from_tree_projection cases",
    )


# --------------------------------------------------------------------------
# 10


def test_criterion_10_separator_weights():
    problems = []
    checked = 0
    for seed in range(SEPARATOR_INSTANCES):
        rng = random.Random(10 * 10**6 + seed)
        inst = random_instance(rng, max_vars=6, max_constraints=5)
        f = random_flat(rng, inst, max_functions=3).left_deep()
        o = random_output(rng, inst)
        # One view over every atom: its single hyperedge is a tree projection.
        v, vdb = gen_ghw_views(inst, len(inst.formula))
        sols = list(brute_force_solutions(inst))
        subs = subvaluations(f)
        root = len(subs) - 1
        states = []
        compute_max_promise(inst, f, v, vdb, o, trace=lambda i, tag, av: states.append((i, av)))
        for i, av in states:
            names = av.scope[: -len(av.weight_vars)]
            for row in av.relation.tuples:
                checked += 1
                best = best_extension(sols, subs[i], dict(zip(names, row[: len(names)])))
                if best is not None and not row[-1] >= best:
                    problems.append(f"seed {seed} vertex {i}: {row[-1]} below {best}")
                if i == root and (best is None or row[-1] != best):
                    problems.append(f"seed {seed} root: {row[-1]} != {best}")
    outcome(10, problems, f"{SEPARATOR_INSTANCES} instances under a whole-formula tree projection, {checked} candidate tuples, zero violations required")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
