"""Typed predicate expressions used by Filter operators.

Expressions are small immutable trees: column references, literals,
comparisons and boolean connectives. They render to a canonical text form
that the operator-expression parser reads back.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Any, Callable, Union

COMPARATORS = ("==", "!=", "<", "<=", ">", ">=", "contains")


class PredicateTypeError(TypeError):
    """Raised when a comparison mixes incompatible value types."""


class UnknownColumnError(KeyError):
    def __init__(self, name: str, available: tuple[str, ...] = ()):
        super().__init__(name)
        self.name = name
        self.available = available

    def __str__(self) -> str:
        return f"unknown column {self.name!r}"


@dataclass(frozen=True)
class Col:
    name: str

    def render(self) -> str:
        return self.name


@dataclass(frozen=True)
class Lit:
    value: Any

    def render(self) -> str:
        v = self.value
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, str):
            return json.dumps(v, ensure_ascii=False)
        return repr(v)


@dataclass(frozen=True)
class Cmp:
    op: str
    left: Union[Col, Lit]
    right: Union[Col, Lit]

    def __post_init__(self):
        if self.op not in COMPARATORS:
            raise ValueError(f"unknown comparator {self.op!r}")

    def render(self) -> str:
        return f"{self.left.render()} {self.op} {self.right.render()}"


@dataclass(frozen=True)
class And:
    left: "Expr"
    right: "Expr"

    def render(self) -> str:
        return f"({self.left.render()} and {self.right.render()})"


@dataclass(frozen=True)
class Or:
    left: "Expr"
    right: "Expr"

    def render(self) -> str:
        return f"({self.left.render()} or {self.right.render()})"


@dataclass(frozen=True)
class Not:
    operand: "Expr"

    def render(self) -> str:
        return f"not {self.operand.render()}"


@dataclass(frozen=True)
class Const:
    """Boolean constant (``true`` / ``false``) used as a whole predicate."""

    value: bool

    def render(self) -> str:
        return "true" if self.value else "false"


Expr = Union[Cmp, And, Or, Not, Const]


def columns(expr: Expr) -> set[str]:
    """Column names referenced anywhere in ``expr``."""
    if isinstance(expr, Cmp):
        return {t.name for t in (expr.left, expr.right) if isinstance(t, Col)}
    if isinstance(expr, (And, Or)):
        return columns(expr.left) | columns(expr.right)
    if isinstance(expr, Not):
        return columns(expr.operand)
    return set()


def conjuncts(expr: Expr) -> list[Expr]:
    if isinstance(expr, And):
        return conjuncts(expr.left) + conjuncts(expr.right)
    return [expr]


def conjunction(parts: list[Expr]) -> Expr:
    if not parts:
        return Const(True)
    out = parts[0]
    for p in parts[1:]:
        out = And(out, p)
    return out


def resolve_column(name: str, available: tuple[str, ...]) -> int:
    """Index of ``name`` in ``available``.

    Exact matches win; otherwise an unqualified name matches a unique
    ``table.name`` entry.
    """
    if name in available:
        return available.index(name)
    suffix = "." + name
    hits = [i for i, c in enumerate(available) if c.endswith(suffix)]
    if len(hits) == 1:
        return hits[0]
    if len(hits) > 1:
        raise UnknownColumnError(f"{name} (ambiguous)", available)
    raise UnknownColumnError(name, available)


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _compare(op: str, a: Any, b: Any) -> bool:
    if a is None or b is None:
        return False
    if op == "contains":
        if not isinstance(a, str) or not isinstance(b, str):
            raise PredicateTypeError(f"contains needs strings, got {a!r}, {b!r}")
        return b in a
    same_kind = (_is_num(a) and _is_num(b)) or type(a) is type(b)
    if not same_kind:
        raise PredicateTypeError(f"cannot compare {type(a).__name__} with {type(b).__name__}")
    if op == "==":
        return a == b
    if op == "!=":
        return a != b
    if isinstance(a, bool) or not isinstance(a, (int, float, str)):
        raise PredicateTypeError(f"ordering comparison on {type(a).__name__}")
    if op == "<":
        return a < b
    if op == "<=":
        return a <= b
    if op == ">":
        return a > b
    return a >= b


def compile_predicate(expr: Expr, available: tuple[str, ...]) -> Callable[[tuple], bool]:
    """Bind column names to positions and return a row -> bool function."""
    if isinstance(expr, Const):
        value = expr.value
        return lambda row: value
    if isinstance(expr, Cmp):
        def term(t):
            if isinstance(t, Col):
                idx = resolve_column(t.name, available)
                return lambda row: row[idx]
            v = t.value
            return lambda row: v

        lhs, rhs, op = term(expr.left), term(expr.right), expr.op
        return lambda row: _compare(op, lhs(row), rhs(row))
    if isinstance(expr, And):
        a, b = compile_predicate(expr.left, available), compile_predicate(expr.right, available)
        return lambda row: a(row) and b(row)
    if isinstance(expr, Or):
        a, b = compile_predicate(expr.left, available), compile_predicate(expr.right, available)
        return lambda row: a(row) or b(row)
    if isinstance(expr, Not):
        a = compile_predicate(expr.operand, available)
        return lambda row: not a(row)
    raise TypeError(f"not an expression: {expr!r}")


def to_json(expr: Expr) -> Any:
    if isinstance(expr, Const):
        return {"const": expr.value}
    if isinstance(expr, Cmp):
        def term(t):
            return {"col": t.name} if isinstance(t, Col) else {"lit": t.value}

        return {"cmp": expr.op, "left": term(expr.left), "right": term(expr.right)}
    if isinstance(expr, And):
        return {"and": [to_json(expr.left), to_json(expr.right)]}
    if isinstance(expr, Or):
        return {"or": [to_json(expr.left), to_json(expr.right)]}
    if isinstance(expr, Not):
        return {"not": to_json(expr.operand)}
    raise TypeError(f"not an expression: {expr!r}")


def from_json(doc: Any) -> Expr:
    if "const" in doc:
        return Const(bool(doc["const"]))
    if "cmp" in doc:
        def term(t):
            return Col(t["col"]) if "col" in t else Lit(t["lit"])

        return Cmp(doc["cmp"], term(doc["left"]), term(doc["right"]))
    if "and" in doc:
        a, b = doc["and"]
        return And(from_json(a), from_json(b))
    if "or" in doc:
        a, b = doc["or"]
        return Or(from_json(a), from_json(b))
    if "not" in doc:
        return Not(from_json(doc["not"]))
    raise ValueError(f"bad expression document: {doc!r}")
