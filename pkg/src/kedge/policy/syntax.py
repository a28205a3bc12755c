"""Lexer, parser and serializer for ``.kpol`` policy files.

Grammar::

    policy     := { annotation } effect "(" head ")" [ "when" "{" expr "}" ] ";"
    annotation := "@" IDENT "(" STRING ")"
    effect     := "permit" | "forbid" | "escalate"
    head       := principal "," action "," resource
    principal  := "principal" [ ("==" | "in") role-ref | "in" "[" role-ref {"," role-ref} "]" ]
    action     := "action" [ ("==" | "in") Action::"name" | "in" "[" ... "]" ]
    resource   := "resource" [ "==" Resource::"id" | "in" "[" ... "]" | "is" TypeName ]
    expr       := and { "||" and }
    and        := unary { "&&" unary }
    unary      := "!" unary | cmp
    cmp        := primary [ ("<" | "<=" | ">" | ">=" | "==" | "!=") primary ]
    primary    := INT | DECIMAL | STRING | "true" | "false" | "context" "." IDENT | "(" expr ")"

``// ...`` comments run to end of line. Decimal literals carry at most four
fractional digits and must lie in [0, 1].
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from decimal import Decimal
from enum import Enum
from typing import Union

from ..errors import KedgeError


class PolicyError(KedgeError):
    def __init__(self, message: str, line: int = 0, col: int = 0):
        super().__init__(f"{message} (line {line}, column {col})" if line else message)
        self.line = line
        self.col = col


class PolicySyntaxError(PolicyError):
    pass


class PolicyTypeError(PolicyError):
    pass


class Effect(str, Enum):
    PERMIT = "permit"
    FORBID = "forbid"
    ESCALATE = "escalate"


# known context attribute kinds; anything else is checked at evaluation time
CONTEXT_SCHEMA = {
    "time_since_owner_update": "number",
    "trust_score": "number",
    "authority": "number",
    "dependency_count": "number",
    "capacity_delta": "number",
    "traffic_level": "string",
}


@dataclass(frozen=True)
class Literal:
    value: Union[int, Decimal, str, bool]


@dataclass(frozen=True)
class Attr:
    name: str


@dataclass(frozen=True)
class Not:
    operand: "Expr"


@dataclass(frozen=True)
class Compare:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class BoolOp:
    op: str  # "&&" | "||"
    left: "Expr"
    right: "Expr"


Expr = Union[Literal, Attr, Not, Compare, BoolOp]


@dataclass(frozen=True)
class Constraint:
    """Head clause: ``op`` is None (unconstrained), "==", "in" or "is"."""

    op: str | None = None
    values: tuple[str, ...] = ()


@dataclass(frozen=True)
class PolicyRule:
    effect: Effect
    principal: Constraint
    action: Constraint
    resource: Constraint
    condition: Expr | None
    rule_id: str
    annotations: tuple[tuple[str, str], ...] = ()

    def annotation(self, name: str) -> str | None:
        for k, v in self.annotations:
            if k == name:
                return v
        return None


@dataclass(frozen=True)
class PolicySet:
    rules: tuple[PolicyRule, ...]
    source_digest: str

    def __len__(self) -> int:
        return len(self.rules)

    def rule(self, rule_id: str) -> PolicyRule:
        for r in self.rules:
            if r.rule_id == rule_id:
                return r
        raise KeyError(rule_id)


# -- lexer

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>//[^\n]*)
  | (?P<decimal>-?\d+\.\d+)
  | (?P<int>-?\d+)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<op>==|!=|<=|>=|&&|\|\||::|[<>!(){}\[\],;.@])
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    col: int


def tokenize(source: str) -> list[Token]:
    tokens = []
    pos, line, line_start = 0, 1, 0
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            raise PolicySyntaxError(f"unexpected character {source[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            tokens.append(Token(kind, m.group(), line, pos - line_start + 1))
        pos = m.end()
    tokens.append(Token("eof", "", line, pos - line_start + 1))
    return tokens


# -- parser

class _Parser:
    def __init__(self, source: str):
        self.toks = tokenize(source)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def error(self, msg: str, tok: Token | None = None) -> PolicySyntaxError:
        tok = tok or self.tok
        found = tok.text or "end of input"
        return PolicySyntaxError(f"{msg}, found {found!r}", tok.line, tok.col)

    def at(self, text: str) -> bool:
        t = self.tok
        return t.kind in ("op", "ident") and t.text == text

    def advance(self) -> Token:
        t = self.tok
        self.i += 1
        return t

    def expect(self, text: str) -> Token:
        if not self.at(text):
            raise self.error(f"expected {text!r}")
        return self.advance()

    def expect_kind(self, kind: str, what: str) -> Token:
        if self.tok.kind != kind:
            raise self.error(f"expected {what}")
        return self.advance()

    def string(self, tok: Token) -> str:
        try:
            return json.loads(tok.text)
        except ValueError:
            raise PolicySyntaxError("bad string literal", tok.line, tok.col) from None

    # rules

    def parse(self) -> list[PolicyRule]:
        rules = []
        seen: set[str] = set()
        while self.tok.kind != "eof":
            start = self.tok
            rule = self.rule(len(rules))
            if rule.rule_id in seen:
                raise PolicySyntaxError(f"duplicate rule id {rule.rule_id!r}", start.line, start.col)
            seen.add(rule.rule_id)
            rules.append(rule)
        return rules

    def rule(self, position: int) -> PolicyRule:
        annotations = []
        while self.at("@"):
            self.advance()
            name = self.expect_kind("ident", "annotation name").text
            self.expect("(")
            value = self.string(self.expect_kind("string", "annotation string"))
            self.expect(")")
            annotations.append((name, value))
        tok = self.tok
        try:
            effect = Effect(tok.text) if tok.kind == "ident" else None
        except ValueError:
            effect = None
        if effect is None:
            raise self.error("expected 'permit', 'forbid' or 'escalate'")
        self.advance()
        self.expect("(")
        principal = self.principal()
        self.expect(",")
        action = self.action()
        self.expect(",")
        resource = self.resource()
        self.expect(")")
        condition = None
        if self.at("when"):
            self.advance()
            self.expect("{")
            cond_tok = self.tok
            condition, kind = self.expr()
            if kind not in ("bool", None):
                raise PolicyTypeError("condition must be boolean", cond_tok.line, cond_tok.col)
            self.expect("}")
        self.expect(";")
        rule_id = dict(annotations).get("id", f"policy{position}")
        annotations = [(k, v) for k, v in annotations if k != "id"]
        return PolicyRule(effect, principal, action, resource, condition, rule_id, tuple(annotations))

    def entity_ref(self, namespace: str) -> str:
        ns = self.expect_kind("ident", f"{namespace}::\"...\"")
        if ns.text != namespace:
            raise self.error(f"expected {namespace}::", ns)
        self.expect("::")
        return self.string(self.expect_kind("string", "quoted name"))

    def ref_list(self, namespace: str) -> tuple[str, ...]:
        self.expect("[")
        values = [self.entity_ref(namespace)]
        while self.at(","):
            self.advance()
            values.append(self.entity_ref(namespace))
        self.expect("]")
        return tuple(values)

    def scoped(self, keyword: str, namespace: str, allow_is: bool = False) -> Constraint:
        self.expect(keyword)
        if self.at("=="):
            self.advance()
            return Constraint("==", (self.entity_ref(namespace),))
        if self.at("in"):
            self.advance()
            if self.at("["):
                return Constraint("in", self.ref_list(namespace))
            return Constraint("in", (self.entity_ref(namespace),))
        if allow_is and self.at("is"):
            self.advance()
            return Constraint("is", (self.expect_kind("ident", "entity type").text,))
        return Constraint()

    def principal(self) -> Constraint:
        return self.scoped("principal", "Role")

    def action(self) -> Constraint:
        return self.scoped("action", "Action")

    def resource(self) -> Constraint:
        return self.scoped("resource", "Resource", allow_is=True)

    # expressions return (node, kind) where kind is None when unknown until runtime

    def expr(self):
        left, lk = self.conj()
        while self.at("||"):
            op = self.advance()
            right, rk = self.conj()
            self.require_bool(op, lk, rk)
            left, lk = BoolOp("||", left, right), "bool"
        return left, lk

    def conj(self):
        left, lk = self.unary()
        while self.at("&&"):
            op = self.advance()
            right, rk = self.unary()
            self.require_bool(op, lk, rk)
            left, lk = BoolOp("&&", left, right), "bool"
        return left, lk

    def unary(self):
        if self.at("!"):
            op = self.advance()
            operand, kind = self.unary()
            self.require_bool(op, kind)
            return Not(operand), "bool"
        return self.comparison()

    def comparison(self):
        left, lk = self.primary()
        if self.tok.kind == "op" and self.tok.text in ("<", "<=", ">", ">=", "==", "!="):
            op = self.advance()
            right, rk = self.primary()
            if op.text in ("==", "!="):
                if lk is not None and rk is not None and lk != rk:
                    raise PolicyTypeError(f"cannot compare {lk} with {rk}", op.line, op.col)
            else:
                for k in (lk, rk):
                    if k is not None and k != "number":
                        raise PolicyTypeError(f"ordering comparison on {k}", op.line, op.col)
            return Compare(op.text, left, right), "bool"
        return left, lk

    def require_bool(self, op: Token, *kinds) -> None:
        for k in kinds:
            if k is not None and k != "bool":
                raise PolicyTypeError(f"operand of {op.text!r} must be boolean, not {k}", op.line, op.col)

    def primary(self):
        tok = self.tok
        if tok.kind == "int":
            self.advance()
            return Literal(int(tok.text)), "number"
        if tok.kind == "decimal":
            self.advance()
            value = Decimal(tok.text)
            if -value.as_tuple().exponent > 4:
                raise PolicySyntaxError("decimal literal has more than 4 fractional digits", tok.line, tok.col)
            if not Decimal(0) <= value <= Decimal(1):
                raise PolicySyntaxError("decimal literal outside [0, 1]", tok.line, tok.col)
            return Literal(value), "number"
        if tok.kind == "string":
            self.advance()
            return Literal(self.string(tok)), "string"
        if self.at("true") or self.at("false"):
            self.advance()
            return Literal(tok.text == "true"), "bool"
        if self.at("context"):
            self.advance()
            self.expect(".")
            name = self.expect_kind("ident", "attribute name").text
            return Attr(name), CONTEXT_SCHEMA.get(name)
        if self.at("("):
            self.advance()
            node, kind = self.expr()
            self.expect(")")
            return node, kind
        raise self.error("expected an expression")


def parse(source: str) -> PolicySet:
    rules = _Parser(source).parse()
    return PolicySet(tuple(rules), hashlib.sha256(source.encode("utf-8")).hexdigest())


# -- serializer

def _lit(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    return str(value)


def serialize_expr(node: Expr) -> str:
    if isinstance(node, Literal):
        return _lit(node.value)
    if isinstance(node, Attr):
        return f"context.{node.name}"
    if isinstance(node, Not):
        return f"!({serialize_expr(node.operand)})"
    return f"({serialize_expr(node.left)} {node.op} {serialize_expr(node.right)})"


def _clause(keyword: str, namespace: str, c: Constraint) -> str:
    if c.op is None:
        return keyword
    if c.op == "is":
        return f"{keyword} is {c.values[0]}"
    refs = [f"{namespace}::{json.dumps(v)}" for v in c.values]
    if c.op == "in" and len(refs) > 1:
        return f"{keyword} in [{', '.join(refs)}]"
    return f"{keyword} {c.op} {refs[0]}"


def serialize_rule(rule: PolicyRule) -> str:
    lines = [f"@id({json.dumps(rule.rule_id)})"]
    lines += [f"@{k}({json.dumps(v)})" for k, v in rule.annotations]
    head = ", ".join(
        [
            _clause("principal", "Role", rule.principal),
            _clause("action", "Action", rule.action),
            _clause("resource", "Resource", rule.resource),
        ]
    )
    text = f"{rule.effect.value} ({head})"
    if rule.condition is not None:
        text += f"\nwhen {{ {serialize_expr(rule.condition)} }}"
    lines.append(text + ";")
    return "\n".join(lines)


def serialize(ps: PolicySet) -> str:
    return "\n\n".join(serialize_rule(r) for r in ps.rules) + ("\n" if ps.rules else "")
