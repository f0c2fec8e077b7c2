"""Command-line entry point.

Exit codes: 0 solution (or success), 2 no solution, 3 fail, 64 usage or
input errors, 65 budget exhausted.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import BudgetExceeded
from .consistency import NotAcyclic, build_ejointree, enforce_pairwise
from .harness import (
    INSTANCE_SCHEMA,
    ParseError,
    SchemaError,
    as_flat,
    instance_to_json,
    negate_valuation,
    parse_instance,
    ranked_to_json,
    relation_to_json,
    result_to_json,
    with_explicit_views,
)
from .maxsolver import ParameterBudgetExceeded, certified_max, fpt_max, top_k
from .model import Hypergraph, hypergraph_of, is_acyclic
from .oracle import brute_force_solutions, oracle_max, oracle_topk
from .outcome import Fail, Solution
from .parallel import NotGloballyConsistent, acq, global_consistency
from .valuation import ConditionFailed, FlatValuation, build_output_aware_tree, check_embedding, svf_from_tree_projection, weight_str
from .views import gen_ghw_views, gen_tree_decomposition_views

EXIT_OK = 0
EXIT_NO_SOLUTION = 2
EXIT_FAIL = 3
EXIT_USAGE = 64
EXIT_BUDGET = 65

STATUS_CODES = {"Solution": EXIT_OK, "NoSolution": EXIT_NO_SOLUTION, "Fail": EXIT_FAIL}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _emit(doc, out) -> None:
    out.write(json.dumps(doc, sort_keys=False) + "\n")
    out.flush()


def _write_stats(path, stats: dict) -> None:
    if path:
        Path(path).write_text(json.dumps(stats, indent=2) + "\n")


def _objective(parsed):
    """Valuation to maximize and a function mapping its weights back to the file's direction."""
    f = parsed.valuation
    if f is None:
        raise UsageError("the instance has no valuation")
    if parsed.options["direction"] == "min-sum-shim":
        return negate_valuation(f, parsed.instance), lambda w: -w
    return f, lambda w: w


def _restore(outcome, back):
    if isinstance(outcome, Solution):
        return Solution(outcome.assignment, back(outcome.weight), outcome.certified)
    return outcome


# --------------------------------------------------------------------------
# subcommands


def cmd_solve_max(args, out) -> int:
    parsed = parse_instance(args.file)
    f, back = _objective(parsed)
    v, vdb = parsed.views
    if args.fpt:
        if not isinstance(f, FlatValuation):
            raise UsageError("--fpt needs a flat valuation (an args list)")
        res = fpt_max(parsed.instance, f, v, vdb, parsed.output)
    else:
        form = f.left_deep() if isinstance(f, FlatValuation) else f
        res = certified_max(parsed.instance, form, v, vdb, parsed.output)
    res = _restore(res, back)
    _emit(result_to_json(res), out)
    return STATUS_CODES[res.status]


def cmd_solve_topk(args, out) -> int:
    parsed = parse_instance(args.file)
    k = args.k if args.k is not None else parsed.options.get("k")
    if k is None:
        raise UsageError("give -k or a k field in the instance")
    f, back = _objective(parsed)
    v, vdb = parsed.views
    records, status, reason = [], "NoSolution", None
    for item in top_k(parsed.instance, f, v, vdb, parsed.output, k):
        if isinstance(item, Fail):
            status, reason = "Fail", item.reason
            if args.ndjson:
                _emit(result_to_json(item), out)
            break
        status = "Solution"
        rec = ranked_to_json(len(records) + 1, item[0], back(item[1]))
        records.append(rec)
        if args.ndjson:
            _emit(rec, out)
    if not args.ndjson:
        doc = {"status": status, "solutions": records}
        if reason is not None:
            doc["fail_reason"] = reason
        _emit(doc, out)
    return STATUS_CODES[status]


def cmd_consistency(args, out) -> int:
    parsed = parse_instance(args.file)
    if args.mode == "pairwise":
        v, vdb = parsed.views
        reduced, empty = enforce_pairwise(v, vdb)
        doc = {
            "status": "NoSolution" if empty else "consistent",
            "views": {w.symbol: relation_to_json(reduced[w.symbol]) for w in v.views},
        }
        _write_stats(args.stats_out, {"views": len(v), "tuples_before": sum(len(vdb[w.symbol]) for w in v.views), "tuples_after": sum(len(reduced[w.symbol]) for w in v.views)})
        _emit(doc, out)
        return EXIT_NO_SOLUTION if empty else EXIT_OK
    inst = parsed.instance
    ok, jt = is_acyclic(hypergraph_of(inst.formula))
    if not ok:
        raise UsageError("global consistency needs an acyclic instance")
    reduced, stats = global_consistency(inst, build_ejointree(inst, jt), args.processors)
    empty = any(len(reduced.relation_of(a)) == 0 for a in reduced.formula)
    doc = {
        "status": "NoSolution" if empty else "consistent",
        "constraints": {a.symbol: relation_to_json(reduced.relation_of(a)) for a in reduced.formula},
        "stats": stats.as_dict(),
    }
    _write_stats(args.stats_out, stats.as_dict())
    _emit(doc, out)
    return EXIT_NO_SOLUTION if empty else EXIT_OK


def cmd_parallel_acq(args, out) -> int:
    parsed = parse_instance(args.file)
    inst = parsed.instance
    if parsed.valuation is None:
        raise UsageError("the instance has no valuation")
    f, back = _objective(parsed)
    try:
        f = as_flat(f)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    ok, jt = is_acyclic(hypergraph_of(inst.formula))
    if not ok:
        raise UsageError("acq needs an acyclic instance")
    reduced, _ = global_consistency(inst, build_ejointree(inst, jt), args.processors)
    if any(len(reduced.relation_of(a)) == 0 for a in reduced.formula):
        _emit({"status": "NoSolution", "scope": sorted(parsed.output), "rows": []}, out)
        return EXIT_NO_SOLUTION
    log = [] if args.log_contraction else None
    result, stats = acq(reduced, f, parsed.output, build_ejointree(reduced, jt), args.processors, log)
    if log is not None:
        for leaf, p, s, _, scope in log:
            print(f"shunt leaf={leaf} parent={p} sibling={s} scope={list(scope)}", file=sys.stderr)
    rows = [{"assignment": theta, "weight": weight_str(back(w))} for theta, w in result.assignments()]
    doc = {"status": "Solution" if rows else "NoSolution", "scope": list(result.scope), "rows": rows, "stats": stats.as_dict()}
    _write_stats(args.stats_out, stats.as_dict())
    _emit(doc, out)
    return EXIT_OK if rows else EXIT_NO_SOLUTION


def cmd_oracle(args, out) -> int:
    parsed = parse_instance(args.file)
    inst = parsed.instance
    if args.what == "solutions":
        sols = brute_force_solutions(inst)
        _emit({"status": "Solution" if len(sols) else "NoSolution", "solutions": list(sols)}, out)
        return EXIT_OK if len(sols) else EXIT_NO_SOLUTION
    f, back = _objective(parsed)
    if args.what == "max":
        res = _restore(oracle_max(inst, f, parsed.output), back)
        _emit(result_to_json(res), out)
        return STATUS_CODES[res.status]
    k = args.k if args.k is not None else parsed.options.get("k")
    if k is None:
        raise UsageError("give -k or a k field in the instance")
    ranked = oracle_topk(inst, f, parsed.output, k)
    records = [ranked_to_json(i + 1, theta, back(w)) for i, (theta, w) in enumerate(ranked)]
    _emit({"status": "Solution" if records else "NoSolution", "solutions": records}, out)
    return EXIT_OK if records else EXIT_NO_SOLUTION


def cmd_views_generate(args, out) -> int:
    parsed = parse_instance(args.file)
    gen = gen_tree_decomposition_views if args.method == "td" else gen_ghw_views
    v, vdb = gen(parsed.instance, args.k)
    doc = instance_to_json(with_explicit_views(parsed, v, vdb))
    text = json.dumps(doc, indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text)
    else:
        out.write(text)
    return EXIT_OK


def cmd_check_embedding(args, out) -> int:
    parsed = parse_instance(args.file)
    if parsed.valuation is None:
        raise UsageError("the instance has no valuation")
    try:
        f = as_flat(parsed.valuation)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    try:
        tp = json.loads(Path(args.tree_projection).read_text())
        ha = Hypergraph.from_edges(tp["hyperedges"])
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise UsageError(f"cannot read tree projection: {exc}") from None
    try:
        form, emb = svf_from_tree_projection(f, parsed.output, ha)
    except ConditionFailed as exc:
        _emit({"status": "Fail", "fail_reason": str(exc)}, out)
        return EXIT_FAIL
    ok = check_embedding(emb, build_output_aware_tree(form, parsed.output), ha)
    doc = {
        "status": "embedded" if ok else "Fail",
        "structured": str(form),
        "xi": {str(p): q for p, q in sorted(emb.xi.items())},
        "witness": {"labels": [sorted(l) for l in emb.witness.labels], "edges": [list(e) for e in emb.witness.edges]},
    }
    _emit(doc, out)
    return EXIT_OK if ok else EXIT_FAIL


def cmd_schema(args, out) -> int:
    out.write(json.dumps(INSTANCE_SCHEMA, indent=2) + "\n")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="treeproj", description="Weighted CSP optimization over views and acyclic instances.")
    sub = parser.add_subparsers(dest="command", required=True)

    solve = sub.add_parser("solve", help="certified Max or Top-K")
    solve_sub = solve.add_subparsers(dest="mode", required=True)
    p = solve_sub.add_parser("max")
    p.add_argument("file")
    p.add_argument("--fpt", action="store_true", help="try every structured form of a flat valuation")
    p.set_defaults(run=cmd_solve_max)
    p = solve_sub.add_parser("topk")
    p.add_argument("file")
    p.add_argument("-k", type=int)
    p.add_argument("--ndjson", action="store_true", help="one record per line, flushed as found")
    p.set_defaults(run=cmd_solve_topk)

    p = sub.add_parser("consistency", help="pairwise or global consistency")
    p.add_argument("mode", choices=["pairwise", "global"])
    p.add_argument("file")
    p.add_argument("--processors", type=int, default=1)
    p.add_argument("--stats-out")
    p.set_defaults(run=cmd_consistency)

    par = sub.add_parser("parallel", help="parallel acyclic evaluation")
    par_sub = par.add_subparsers(dest="mode", required=True)
    p = par_sub.add_parser("acq")
    p.add_argument("file")
    p.add_argument("--processors", type=int, default=1)
    p.add_argument("--stats-out")
    p.add_argument("--log-contraction", action="store_true", help="print each shunt to stderr")
    p.set_defaults(run=cmd_parallel_acq)

    p = sub.add_parser("oracle", help="brute-force reference answers")
    p.add_argument("what", choices=["max", "topk", "solutions"])
    p.add_argument("file")
    p.add_argument("-k", type=int)
    p.set_defaults(run=cmd_oracle)

    views = sub.add_parser("views", help="view generation")
    views_sub = views.add_subparsers(dest="mode", required=True)
    p = views_sub.add_parser("generate")
    p.add_argument("file")
    p.add_argument("--method", choices=["td", "ghw"], required=True)
    p.add_argument("-k", type=int, required=True)
    p.add_argument("-o", "--output")
    p.set_defaults(run=cmd_views_generate)

    check = sub.add_parser("check", help="structural checks")
    check_sub = check.add_subparsers(dest="mode", required=True)
    p = check_sub.add_parser("embedding")
    p.add_argument("file")
    p.add_argument("--tree-projection", required=True)
    p.set_defaults(run=cmd_check_embedding)

    p = sub.add_parser("schema", help="print the instance JSON schema")
    p.set_defaults(run=cmd_schema)
    return parser


def main(argv=None, out=None) -> int:
    out = sys.stdout if out is None else out
    args = build_parser().parse_args(argv)
    if getattr(args, "processors", 1) < 1 or (getattr(args, "k", None) is not None and args.k < 1):
        print("treeproj: error: counts must be positive", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.run(args, out)
    except (ParseError, SchemaError, UsageError, NotAcyclic, NotGloballyConsistent) as exc:
        print(f"treeproj: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BudgetExceeded, ParameterBudgetExceeded) as exc:
        print(f"treeproj: budget exhausted: {exc}", file=sys.stderr)
        return EXIT_BUDGET


if __name__ == "__main__":
    sys.exit(main())
