"""Instance and result files.

Instances are JSON documents validated against ``INSTANCE_SCHEMA``. Value
tokens are JSON integers or strings; weights are decimal strings (or
integers) read as exact rationals, with ``"bottom"`` for the absorbing
minimum. Results serialize outcomes and machine statistics back to JSON.
"""

from __future__ import annotations

import json
from fractions import Fraction
from pathlib import Path
from typing import Any, NamedTuple

import jsonschema

from .model import Atom, CspInstance, Relation, _value_key
from .outcome import Fail, NoSolution, Solution
from .valuation import (
    BOTTOM,
    Combine,
    FlatValuation,
    Leaf,
    Operator,
    WeightFunction,
    to_weight,
    weight_str,
)
from .views import ViewDatabase, ViewSet, gen_ghw_views, gen_tree_decomposition_views, make_base_views

DIRECTIONS = ("max", "min-sum-shim")

_TOKEN = {"type": ["integer", "string"]}
_WEIGHT = {"type": ["integer", "string"]}
_NAME = {"type": "string", "minLength": 1}
_SCOPE = {"type": "array", "items": _NAME, "uniqueItems": True}
_ROWS = {"type": "array", "items": {"type": "array", "items": _TOKEN}}

INSTANCE_SCHEMA: dict = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "treeproj instance",
    "type": "object",
    "required": ["constraints"],
    "additionalProperties": False,
    "properties": {
        "variables": {
            "type": "object",
            "additionalProperties": {"oneOf": [{"type": "null"}, {"type": "array", "items": _TOKEN, "uniqueItems": True}]},
        },
        "constraints": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "scope", "tuples"],
                "additionalProperties": False,
                "properties": {"name": _NAME, "scope": _SCOPE, "tuples": _ROWS},
            },
        },
        "views": {
            "oneOf": [
                {"const": "base"},
                {
                    "type": "object",
                    "required": ["method", "k"],
                    "additionalProperties": False,
                    "properties": {
                        "method": {"enum": ["td", "ghw"]},
                        "k": {"type": "integer", "minimum": 1},
                        "budget": {"type": "integer", "minimum": 1},
                    },
                },
                {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["name", "scope", "tuples"],
                        "additionalProperties": False,
                        "properties": {"name": _NAME, "scope": _SCOPE, "tuples": _ROWS},
                    },
                },
            ]
        },
        "valuation": {"$ref": "#/$defs/node"},
        "output": _SCOPE,
        "direction": {"enum": list(DIRECTIONS)},
        "k": {"type": "integer", "minimum": 1},
    },
    "$defs": {
        "operator": {"enum": [op.value for op in Operator]},
        "function": {
            "type": "object",
            "required": ["kind"],
            "additionalProperties": False,
            "properties": {
                "kind": {"enum": ["table", "identity", "constant"]},
                "name": _NAME,
                "vars": _SCOPE,
                "table": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "required": ["key", "weight"],
                        "additionalProperties": False,
                        "properties": {"key": {"type": "array", "items": _TOKEN}, "weight": _WEIGHT},
                    },
                },
                "value": _WEIGHT,
            },
        },
        "node": {
            "oneOf": [
                {"$ref": "#/$defs/function"},
                {
                    "type": "object",
                    "required": ["op", "args"],
                    "additionalProperties": False,
                    "properties": {
                        "op": {"$ref": "#/$defs/operator"},
                        "args": {"type": "array", "minItems": 1, "items": {"$ref": "#/$defs/function"}},
                    },
                },
                {
                    "type": "object",
                    "required": ["op", "left", "right"],
                    "additionalProperties": False,
                    "properties": {
                        "op": {"$ref": "#/$defs/operator"},
                        "left": {"$ref": "#/$defs/node"},
                        "right": {"$ref": "#/$defs/node"},
                    },
                },
            ]
        },
    },
}


class ParseError(ValueError):
    """Malformed JSON; ``line`` and ``column`` locate the problem."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None, source: str = "<memory>"):
        where = source if line is None else f"{source}:{line}:{column}"
        super().__init__(f"{where}: {message}")
        self.line, self.column, self.source = line, column, source


class SchemaError(ValueError):
    """Well-formed JSON that does not describe a valid instance; ``field`` is a JSON path."""

    def __init__(self, message: str, field: str = "$"):
        super().__init__(f"{field}: {message}")
        self.field = field


class ParsedInstance(NamedTuple):
    instance: CspInstance
    views: tuple  # (ViewSet, ViewDatabase), generators already expanded
    valuation: Any  # StructuredValuation, FlatValuation or None
    output: frozenset
    options: dict  # direction, k, domains, view_source


def _path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


# --------------------------------------------------------------------------
# reading


def parse_instance(path) -> ParsedInstance:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(exc.strerror or str(exc), source=str(path)) from None
    return parse_instance_text(text, str(path))


def parse_instance_text(text: str, source: str = "<memory>") -> ParsedInstance:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, exc.lineno, exc.colno, source) from None
    return load_instance(doc)


def load_instance(doc) -> ParsedInstance:
    validator = jsonschema.Draft202012Validator(INSTANCE_SCHEMA)
    err = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if err is not None:
        raise SchemaError(err.message, _path(err.absolute_path))

    declared = doc.get("variables")
    domains = None
    if declared is not None:
        domains = {x: (None if d is None else list(d)) for x, d in declared.items()}

    formula, database = [], {}
    for i, c in enumerate(doc["constraints"]):
        where = f"$.constraints[{i}]"
        if c["name"] in database:
            raise SchemaError(f"duplicate constraint name {c['name']!r}", where + ".name")
        scope = tuple(c["scope"])
        if not scope:
            raise SchemaError("empty scope", where + ".scope")
        for x in scope:
            if domains is not None and x not in domains:
                raise SchemaError(f"variable {x!r} is not declared", where + ".scope")
        database[c["name"]] = _relation(scope, c["tuples"], where + ".tuples", domains)
        formula.append(Atom(c["name"], scope))
    inst = CspInstance(tuple(formula), database)
    known = set(inst.variables) | set(domains or ())

    output = frozenset(doc.get("output", ()))
    for x in sorted(output):
        if x not in known:
            raise SchemaError(f"output variable {x!r} is unknown", "$.output")

    valuation = None
    if "valuation" in doc:
        valuation = _valuation(doc["valuation"], "$.valuation", known, [0])

    view_source = doc.get("views", "base")
    views = _views(inst, view_source)
    direction = doc.get("direction", "max")
    if direction == "min-sum-shim" and valuation is not None and _operators(valuation) - {Operator.SUM}:
        raise SchemaError("min-sum-shim needs a sum-only valuation", "$.direction")
    options = {"direction": direction, "k": doc.get("k"), "domains": domains, "view_source": view_source}
    return ParsedInstance(inst, views, valuation, output, options)


def _relation(scope, rows, where, domains=None) -> Relation:
    for j, row in enumerate(rows):
        if len(row) != len(scope):
            raise SchemaError(f"tuple of length {len(row)} for scope of length {len(scope)}", f"{where}[{j}]")
        if domains is not None:
            for x, val in zip(scope, row):
                dom = domains.get(x)
                if dom is not None and val not in dom:
                    raise SchemaError(f"value {val!r} is outside the domain of {x!r}", f"{where}[{j}]")
    return Relation(scope, frozenset(tuple(r) for r in rows))


def _weight(raw, where):
    try:
        return to_weight(raw)
    except (ValueError, ZeroDivisionError):
        raise SchemaError(f"{raw!r} is not a rational weight", where) from None


def _function(node, where, known, counter) -> WeightFunction:
    kind = node["kind"]
    counter[0] += 1
    name = node.get("name", f"f{counter[0]}")
    if kind == "constant":
        if "value" not in node:
            raise SchemaError("constant function needs a value", where)
        return WeightFunction(name, (), "constant", constant=_weight(node["value"], where + ".value"))
    scope = tuple(node.get("vars", ()))
    for x in scope:
        if x not in known:
            raise SchemaError(f"variable {x!r} is unknown", where + ".vars")
    if kind == "identity":
        if len(scope) != 1:
            raise SchemaError("identity functions read exactly one variable", where + ".vars")
        return WeightFunction(name, scope, "identity")
    table = {}
    for j, entry in enumerate(node.get("table", ())):
        key = tuple(entry["key"])
        if len(key) != len(scope):
            raise SchemaError("key length does not match vars", f"{where}.table[{j}].key")
        table[key] = _weight(entry["weight"], f"{where}.table[{j}].weight")
    return WeightFunction(name, scope, "table", table)


def _valuation(node, where, known, counter):
    if "kind" in node:
        return Leaf(_function(node, where, known, counter))
    op = Operator(node["op"])
    if "args" in node:
        fns = [_function(a, f"{where}.args[{j}]", known, counter) for j, a in enumerate(node["args"])]
        return FlatValuation(op, fns)
    left = _valuation(node["left"], where + ".left", known, counter)
    right = _valuation(node["right"], where + ".right", known, counter)
    if isinstance(left, FlatValuation) or isinstance(right, FlatValuation):
        raise SchemaError("an args list may only appear at the top of the valuation", where)
    return Combine(op, left, right)


def _operators(f) -> set:
    if isinstance(f, FlatValuation):
        return {f.op} if len(f.functions) > 1 else set()
    return f.operators()


def _views(inst: CspInstance, source) -> tuple[ViewSet, ViewDatabase]:
    if source == "base":
        return make_base_views(inst)
    if isinstance(source, dict):
        gen = gen_tree_decomposition_views if source["method"] == "td" else gen_ghw_views
        return gen(inst, source["k"], limit=source.get("budget"))
    v, vdb = make_base_views(inst)
    views, rels = list(v.views), dict(vdb.relations)
    known = set(inst.variables)
    for i, w in enumerate(source):
        where = f"$.views[{i}]"
        if w["name"] in rels:
            raise SchemaError(f"view name {w['name']!r} is already used", where + ".name")
        scope = tuple(w["scope"])
        if not set(scope) <= known:
            raise SchemaError("view scope mentions unknown variables", where + ".scope")
        views.append(Atom(w["name"], scope))
        rels[w["name"]] = _relation(scope, w["tuples"], where + ".tuples")
    try:
        return ViewSet(views, v.base), ViewDatabase(rels)
    except ValueError as exc:
        raise SchemaError(str(exc), "$.views") from None


# --------------------------------------------------------------------------
# writing


def _rows(rel: Relation, scope) -> list:
    return [list(t) for t in rel.reorder(scope).sorted_tuples()]


def function_to_json(fn: WeightFunction) -> dict:
    if fn.kind == "constant":
        return {"kind": "constant", "name": fn.name, "value": weight_str(fn.constant)}
    out = {"kind": fn.kind, "name": fn.name, "vars": list(fn.vars)}
    if fn.kind == "table":
        keys = sorted(fn.table, key=lambda k: tuple(_value_key(v) for v in k))
        out["table"] = [{"key": list(k), "weight": weight_str(fn.table[k])} for k in keys]
    return out


def valuation_to_json(f) -> dict:
    if isinstance(f, FlatValuation):
        return {"op": f.op.value, "args": [function_to_json(fn) for fn in f.functions]}
    if isinstance(f, Leaf):
        return function_to_json(f.function)
    return {"op": f.op.value, "left": valuation_to_json(f.left), "right": valuation_to_json(f.right)}


def instance_to_json(parsed: ParsedInstance) -> dict:
    inst, (v, vdb), f, o, options = parsed
    doc: dict = {}
    if options.get("domains") is not None:
        doc["variables"] = options["domains"]
    doc["constraints"] = [
        {"name": a.symbol, "scope": list(a.scope), "tuples": _rows(inst.relation_of(a), a.scope)} for a in inst.formula
    ]
    source = options.get("view_source", "base")
    if isinstance(source, dict):
        doc["views"] = dict(source)
    elif source != "base":
        base = set(v.base)
        doc["views"] = [
            {"name": w.symbol, "scope": list(w.scope), "tuples": _rows(vdb[w.symbol], w.scope)} for w in v.views if w.symbol not in base
        ]
    if f is not None:
        doc["valuation"] = valuation_to_json(f)
    if o:
        doc["output"] = sorted(o)
    if options.get("direction", "max") != "max":
        doc["direction"] = options["direction"]
    if options.get("k") is not None:
        doc["k"] = options["k"]
    return doc


def with_explicit_views(parsed: ParsedInstance, v: ViewSet, vdb: ViewDatabase) -> ParsedInstance:
    """The same instance, carrying ``v`` as an explicit view list."""
    base = set(v.base)
    extra = [{"name": w.symbol, "scope": list(w.scope), "tuples": _rows(vdb[w.symbol], w.scope)} for w in v.views if w.symbol not in base]
    return parsed._replace(views=(v, vdb), options={**parsed.options, "view_source": extra})


# --------------------------------------------------------------------------
# minimization through negation


def negate_valuation(f, inst: CspInstance):
    """Sum-only valuation with every weight negated; identity functions become tables."""
    if _operators(f) - {Operator.SUM}:
        raise ValueError("only sum valuations can be negated")
    doms = inst.active_domains()

    def neg(w):
        if w is BOTTOM:
            raise ValueError("the absorbing weight has no negation")
        return -w

    def fn(w: WeightFunction) -> WeightFunction:
        if w.kind == "constant":
            return WeightFunction(w.name, (), "constant", constant=neg(w.constant))
        if w.kind == "identity":
            x = w.vars[0]
            return WeightFunction(w.name, w.vars, "table", {(val,): neg(Fraction(val)) for val in doms.get(x, [])})
        return WeightFunction(w.name, w.vars, "table", {k: neg(val) for k, val in w.table.items()})

    def walk(node):
        if isinstance(node, Leaf):
            return Leaf(fn(node.function))
        return Combine(node.op, walk(node.left), walk(node.right))

    if isinstance(f, FlatValuation):
        return FlatValuation(f.op, [fn(w) for w in f.functions])
    return walk(f)


def as_flat(f) -> FlatValuation:
    """A single-operator valuation as a flat one."""
    if isinstance(f, FlatValuation):
        return f
    ops = f.operators()
    if len(ops) > 1:
        raise ValueError("the valuation mixes operators")
    return FlatValuation(ops.pop() if ops else Operator.SUM, f.functions())


# --------------------------------------------------------------------------
# results


def assignment_to_json(theta) -> dict:
    return {x: theta[x] for x in sorted(theta)}


def result_to_json(outcome, stats: dict | None = None) -> dict:
    doc: dict = {"status": outcome.status}
    if isinstance(outcome, Solution):
        doc["assignment"] = assignment_to_json(outcome.assignment)
        doc["weight"] = weight_str(outcome.weight)
        doc["certified"] = bool(outcome.certified)
    elif isinstance(outcome, Fail):
        doc["fail_reason"] = outcome.reason
    if stats is not None:
        doc["stats"] = stats
    return doc


def result_from_json(doc: dict):
    status = doc.get("status")
    if status == "Solution":
        return Solution(dict(doc["assignment"]), to_weight(doc["weight"]), bool(doc.get("certified", False)))
    if status == "NoSolution":
        return NoSolution()
    if status == "Fail":
        return Fail(doc.get("fail_reason", ""))
    raise SchemaError(f"unknown status {status!r}", "$.status")


def ranked_to_json(rank: int, theta: dict, weight, certified: bool = True) -> dict:
    return {"rank": rank, **result_to_json(Solution(theta, weight, certified))}


def relation_to_json(rel: Relation) -> dict:
    return {"scope": list(rel.scope), "tuples": [list(t) for t in rel.sorted_tuples()]}
