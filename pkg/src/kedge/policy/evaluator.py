"""Deterministic policy evaluation.

Precedence of matched effects: escalate > forbid > permit > default deny.
"""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Any

from ..errors import KedgeError
from .syntax import Attr, BoolOp, Constraint, Effect, Expr, Literal, Not, PolicyRule, PolicySet

# flat role groups: a principal is "in" its own role and every group listed here
ROLE_GROUPS: dict[str, frozenset[str]] = {
    "VerifiedAgent": frozenset({"Agent"}),
    "UnverifiedAgent": frozenset({"Agent"}),
}

_PRECEDENCE = {Effect.ESCALATE: 0, Effect.FORBID: 1, Effect.PERMIT: 2}


class EvaluationError(KedgeError):
    pass


class MissingAttribute(EvaluationError):
    def __init__(self, name: str, rule_id: str):
        super().__init__(f"context attribute {name!r} referenced by {rule_id} is missing")
        self.name = name
        self.rule_id = rule_id


class AttributeTypeError(EvaluationError):
    pass


class Outcome(str, Enum):
    APPROVE = "Approve"
    REJECT = "Reject"
    ESCALATE = "Escalate"


@dataclass(frozen=True)
class Principal:
    actor_id: str
    role: str

    @property
    def roles(self) -> frozenset[str]:
        return frozenset({self.role}) | ROLE_GROUPS.get(self.role, frozenset())


@dataclass(frozen=True)
class ResourceRef:
    entity_id: str
    entity_type: str = ""


@dataclass(frozen=True)
class EvaluationRequest:
    principal: Principal
    action: str
    resource: ResourceRef
    context: Mapping[str, Any] = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> EvaluationRequest:
        """Build from the JSON request-file shape used by ``kedge policy check``."""
        p = data["principal"]
        r = data["resource"]
        return cls(
            Principal(p.get("id", ""), p["role"]),
            data["action"],
            ResourceRef(r["id"], r.get("type", "")),
            {k: coerce_value(v) for k, v in data.get("context", {}).items()},
        )


def coerce_value(value: Any) -> Any:
    """Normalize a JSON context value onto the evaluation numeric model."""
    if isinstance(value, float):
        return Decimal(repr(value))
    return value


@dataclass(frozen=True)
class RuleEvaluation:
    rule_id: str
    matched: bool
    effect: Effect

    def to_dict(self) -> dict[str, Any]:
        return {"rule_id": self.rule_id, "matched": self.matched, "effect": self.effect.value}


@dataclass(frozen=True)
class Decision:
    outcome: Outcome
    evaluated_rules: tuple[RuleEvaluation, ...]
    explanation: tuple[str, ...]
    notes: tuple[tuple[str, str], ...] = ()  # (rule_id, reason annotation) for matched rules

    def to_dict(self) -> dict[str, Any]:
        return {
            "outcome": self.outcome.value,
            "evaluated_rules": [e.to_dict() for e in self.evaluated_rules],
            "explanation": list(self.explanation),
        }


def _scope_matches(c: Constraint, value: str, roles: frozenset[str] | None = None, type_: str = "") -> bool:
    if c.op is None:
        return True
    if c.op == "is":
        return type_ == c.values[0]
    if roles is not None:
        if c.op == "==":
            return value == c.values[0]
        return bool(roles.intersection(c.values))
    return value in c.values


def _kind(value: Any) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, (int, Decimal)):
        return "number"
    if isinstance(value, str):
        return "string"
    return type(value).__name__


def _eval(node: Expr, ctx: Mapping[str, Any], rule_id: str) -> Any:
    if isinstance(node, Literal):
        return node.value
    if isinstance(node, Attr):
        if node.name not in ctx:
            raise MissingAttribute(node.name, rule_id)
        return ctx[node.name]
    if isinstance(node, Not):
        v = _eval(node.operand, ctx, rule_id)
        _need(v, "bool", "!", rule_id)
        return not v
    if isinstance(node, BoolOp):
        left = _eval(node.left, ctx, rule_id)
        _need(left, "bool", node.op, rule_id)
        if node.op == "&&" and not left:
            return False
        if node.op == "||" and left:
            return True
        right = _eval(node.right, ctx, rule_id)
        _need(right, "bool", node.op, rule_id)
        return right
    left = _eval(node.left, ctx, rule_id)
    right = _eval(node.right, ctx, rule_id)
    lk, rk = _kind(left), _kind(right)
    op = node.op
    if op in ("==", "!="):
        if lk != rk:
            raise AttributeTypeError(f"{rule_id}: cannot compare {lk} with {rk}")
        return (left == right) == (op == "==")
    _need(left, "number", op, rule_id)
    _need(right, "number", op, rule_id)
    if op == "<":
        return left < right
    if op == "<=":
        return left <= right
    if op == ">":
        return left > right
    return left >= right


def _need(value: Any, kind: str, op: str, rule_id: str) -> None:
    if _kind(value) != kind:
        raise AttributeTypeError(f"{rule_id}: operand of {op!r} must be {kind}, got {_kind(value)}")


def rule_matches(rule: PolicyRule, req: EvaluationRequest) -> bool:
    p = req.principal
    if not _scope_matches(rule.principal, p.role, roles=p.roles):
        return False
    if not _scope_matches(rule.action, req.action):
        return False
    if not _scope_matches(rule.resource, req.resource.entity_id, type_=req.resource.entity_type):
        return False
    if rule.condition is None:
        return True
    return bool(_eval(rule.condition, req.context, rule.rule_id))


def evaluate(ps: PolicySet, req: EvaluationRequest) -> Decision:
    """Evaluate every rule; raises MissingAttribute/AttributeTypeError on bad context."""
    evaluated = []
    matched: list[PolicyRule] = []
    for rule in ps.rules:
        hit = rule_matches(rule, req)
        evaluated.append(RuleEvaluation(rule.rule_id, hit, rule.effect))
        if hit:
            matched.append(rule)
    effects = {r.effect for r in matched}
    if Effect.ESCALATE in effects:
        outcome = Outcome.ESCALATE
    elif Effect.FORBID in effects:
        outcome = Outcome.REJECT
    elif Effect.PERMIT in effects:
        outcome = Outcome.APPROVE
    else:
        outcome = Outcome.REJECT
    ordered = sorted(matched, key=lambda r: _PRECEDENCE[r.effect])  # stable: source order within an effect
    notes = tuple((r.rule_id, r.annotation("reason")) for r in ordered if r.annotation("reason"))
    return Decision(outcome, tuple(evaluated), tuple(r.rule_id for r in ordered), notes)


def explain(decision: Decision) -> str:
    effect_of = {e.rule_id: e.effect.value for e in decision.evaluated_rules}
    notes = dict(decision.notes)
    lines = [f"decision: {decision.outcome.value}"]
    if not decision.explanation:
        lines.append("  no rule matched (default deny)")
    for rule_id in decision.explanation:
        line = f"  {effect_of[rule_id]:<8} {rule_id}"
        if rule_id in notes:
            line += f"  -- {notes[rule_id]}"
        lines.append(line)
    n_matched = sum(e.matched for e in decision.evaluated_rules)
    lines.append(f"  ({len(decision.evaluated_rules)} rules evaluated, {n_matched} matched)")
    return "\n".join(lines)
