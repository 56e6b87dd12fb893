"""Operator-expression language: parser and renderer.

Grammar::

    pipeline  := stage ('|' stage)*
    stage     := name '(' [arg (',' arg)*] ')'

    scan(<dataset>)
    filter(<predicate>)
    project(<column>, ...)
    limit(<int>)
    join(<pipeline>, <column> == <column>)
    sem_match(<modality>, "<text>" [, <threshold>])
    sem_join(<pipeline>, <modality>, "<text>" [, <threshold>])
    sem_extract(<modality>, <field>, ...)

    predicate := disj
    disj      := conj ('or' conj)*
    conj      := neg ('and' neg)*
    neg       := 'not' neg | '(' predicate ')' | 'true' | 'false' | term cmp term
    cmp       := '==' | '!=' | '<' | '<=' | '>' | '>=' | 'contains'
    term      := column | "string" | number | true | false

The first stage of every pipeline must be ``scan``; each later stage takes
the previous stage as its (left) input.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Mapping, Optional

from . import algebra as A
from . import expr as E

DEFAULT_THRESHOLD = 0.5


class ExpressionError(ValueError):
    """Base class for rejected operator expressions."""


class ExpressionSyntaxError(ExpressionError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} at byte {offset}")
        self.offset = offset


class UnknownDatasetError(ExpressionError):
    def __init__(self, name: str):
        super().__init__(f"unknown dataset {name!r}")
        self.name = name


class UnknownOperatorError(ExpressionError):
    def __init__(self, name: str, offset: int):
        super().__init__(f"unknown operator {name!r} at byte {offset}")
        self.name = name
        self.offset = offset


class ArityError(ExpressionError):
    pass


_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>"(?:[^"\\]|\\.)*")
  | (?P<number>-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)
  | (?P<op>==|!=|<=|>=|<|>)
  | (?P<punct>[(),|])
  | (?P<ident>[A-Za-z_][A-Za-z0-9_.]*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    offset: int  # byte offset into the UTF-8 source


def tokenize(source: str) -> list[Token]:
    tokens = []
    pos = 0
    byte_pos = 0
    while pos < len(source):
        m = _TOKEN.match(source, pos)
        if m is None:
            raise ExpressionSyntaxError(f"unexpected character {source[pos]!r}", byte_pos)
        text = m.group()
        if m.lastgroup != "ws":
            tokens.append(Token(m.lastgroup, text, byte_pos))
        byte_pos += len(text.encode("utf-8"))
        pos = m.end()
    tokens.append(Token("eof", "", byte_pos))
    return tokens


STAGES = ("scan", "filter", "project", "limit", "join", "sem_match", "sem_join", "sem_extract")


class _Parser:
    def __init__(self, source: str, catalog: Mapping[str, A.DatasetRef]):
        self.tokens = tokenize(source)
        self.i = 0
        self.catalog = catalog
        self.builder = A.PlanBuilder()

    # -- token helpers
    def peek(self) -> Token:
        return self.tokens[self.i]

    def next(self) -> Token:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, kind: str, text: Optional[str] = None) -> Token:
        tok = self.next()
        if tok.kind != kind or (text is not None and tok.text != text):
            want = text or kind
            got = tok.text or tok.kind
            raise ExpressionSyntaxError(f"expected {want!r}, found {got!r}", tok.offset)
        return tok

    def at(self, kind: str, text: Optional[str] = None) -> bool:
        tok = self.peek()
        return tok.kind == kind and (text is None or tok.text == text)

    # -- grammar
    def parse(self) -> A.QueryPlan:
        if self.at("eof"):
            raise ExpressionSyntaxError("empty expression", 0)
        self.pipeline()
        tok = self.peek()
        if tok.kind != "eof":
            raise ExpressionSyntaxError(f"unexpected {tok.text!r}", tok.offset)
        return A.check_plan(self.builder.build())

    def pipeline(self) -> str:
        node = self.stage(None)
        while self.at("punct", "|"):
            self.next()
            node = self.stage(node)
        return node

    def stage(self, upstream: Optional[str]) -> str:
        name_tok = self.expect("ident")
        name = name_tok.text
        if name not in STAGES:
            raise UnknownOperatorError(name, name_tok.offset)
        if name == "scan" and upstream is not None:
            raise ArityError(f"scan takes no input (byte {name_tok.offset})")
        if name != "scan" and upstream is None:
            raise ArityError(f"{name} needs an input; pipelines start with scan (byte {name_tok.offset})")
        self.expect("punct", "(")
        node = getattr(self, "_" + name)(upstream)
        self.expect("punct", ")")
        return node

    def comma(self):
        self.expect("punct", ",")

    def ident(self) -> str:
        return self.expect("ident").text

    def _scan(self, _):
        tok = self.expect("ident")
        ds = self.catalog.get(tok.text)
        if ds is None:
            raise UnknownDatasetError(tok.text)
        return self.builder.add(A.scan(ds))

    def _filter(self, up):
        return self.builder.add(A.filter_(self.predicate()), up)

    def _project(self, up):
        cols = [self.ident()]
        while self.at("punct", ","):
            self.next()
            cols.append(self.ident())
        return self.builder.add(A.project(*cols), up)

    def _limit(self, up):
        tok = self.expect("number")
        if not re.fullmatch(r"\d+", tok.text):
            raise ExpressionSyntaxError("limit needs a non-negative integer", tok.offset)
        return self.builder.add(A.limit(int(tok.text)), up)

    def _join(self, up):
        right = self.pipeline()
        self.comma()
        left_key = self.ident()
        self.expect("op", "==")
        right_key = self.ident()
        return self.builder.add(A.join(left_key, right_key), up, right)

    def _modality(self) -> A.Modality:
        tok = self.expect("ident")
        try:
            return A.Modality.parse(tok.text)
        except ValueError:
            raise ExpressionSyntaxError(f"unknown modality {tok.text!r}", tok.offset) from None

    def _threshold(self) -> float:
        if not self.at("punct", ","):
            return DEFAULT_THRESHOLD
        self.next()
        tok = self.expect("number")
        value = float(tok.text)
        if not 0.0 <= value <= 1.0:
            raise ExpressionSyntaxError("threshold must lie in [0, 1]", tok.offset)
        return value

    def _string(self) -> str:
        return json.loads(self.expect("string").text)

    def _sem_match(self, up):
        modality = self._modality()
        self.comma()
        text = self._string()
        return self.builder.add(A.sem_match(modality, text, self._threshold()), up)

    def _sem_join(self, up):
        right = self.pipeline()
        self.comma()
        modality = self._modality()
        self.comma()
        text = self._string()
        return self.builder.add(A.sem_join(modality, text, self._threshold()), up, right)

    def _sem_extract(self, up):
        modality = self._modality()
        fields = []
        while self.at("punct", ","):
            self.next()
            fields.append(self.ident())
        if not fields:
            raise ExpressionSyntaxError("sem_extract needs at least one field", self.peek().offset)
        return self.builder.add(A.sem_extract(modality, *fields), up)

    # -- predicates
    def predicate(self) -> E.Expr:
        left = self.conj()
        while self.at("ident", "or"):
            self.next()
            left = E.Or(left, self.conj())
        return left

    def conj(self) -> E.Expr:
        left = self.neg()
        while self.at("ident", "and"):
            self.next()
            left = E.And(left, self.neg())
        return left

    def neg(self) -> E.Expr:
        if self.at("ident", "not"):
            self.next()
            return E.Not(self.neg())
        if self.at("punct", "("):
            self.next()
            inner = self.predicate()
            self.expect("punct", ")")
            return inner
        # Bare boolean constant, unless it starts a comparison.
        if self.at("ident", "true") or self.at("ident", "false"):
            nxt = self.tokens[self.i + 1]
            if not (nxt.kind == "op" or (nxt.kind == "ident" and nxt.text == "contains")):
                return E.Const(self.next().text == "true")
        left = self.term()
        tok = self.next()
        if tok.kind == "op" or (tok.kind == "ident" and tok.text == "contains"):
            return E.Cmp(tok.text, left, self.term())
        raise ExpressionSyntaxError(f"expected comparison, found {tok.text or tok.kind!r}", tok.offset)

    def term(self):
        tok = self.next()
        if tok.kind == "string":
            return E.Lit(json.loads(tok.text))
        if tok.kind == "number":
            return E.Lit(float(tok.text) if re.search(r"[.eE]", tok.text) else int(tok.text))
        if tok.kind == "ident":
            if tok.text in ("true", "false"):
                return E.Lit(tok.text == "true")
            if tok.text in ("and", "or", "not", "contains"):
                raise ExpressionSyntaxError(f"unexpected keyword {tok.text!r}", tok.offset)
            return E.Col(tok.text)
        raise ExpressionSyntaxError(f"expected a value, found {tok.text or tok.kind!r}", tok.offset)


def parse_expression(source: str, catalog: Mapping[str, A.DatasetRef]) -> A.QueryPlan:
    """Parse an operator expression into a validated plan."""
    return _Parser(source, catalog).parse()


def render(plan: A.QueryPlan) -> str:
    """Render a plan back into the expression language.

    Shared sub-plans are written out once per use; the result parses to a
    plan with the same signature.
    """
    A.check_plan(plan)
    ops = plan.ops

    def go(node: str) -> str:
        op = ops[node]
        ins = plan.inputs(node)
        if op.kind is A.OpKind.SCAN:
            return op.signature()
        head = go(ins[0])
        if op.kind is A.OpKind.JOIN:
            stage = f"join({go(ins[1])}, {op.keys[0]} == {op.keys[1]})"
        elif op.kind is A.OpKind.SEM_JOIN:
            stage = (f"sem_join({go(ins[1])}, {op.modality.token}, "
                     f"{json.dumps(op.text, ensure_ascii=False)}, {op.threshold!r})")
        else:
            stage = op.signature()
        return f"{head} | {stage}"

    return go(plan.sink)
