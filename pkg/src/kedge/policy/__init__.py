from .evaluator import (
    AttributeTypeError,
    Decision,
    EvaluationError,
    EvaluationRequest,
    MissingAttribute,
    Outcome,
    Principal,
    ResourceRef,
    RuleEvaluation,
    evaluate,
    explain,
)
from .syntax import (
    Effect,
    PolicyError,
    PolicyRule,
    PolicySet,
    PolicySyntaxError,
    PolicyTypeError,
    parse,
    serialize,
)


def load_policies(path) -> PolicySet:
    with open(path, encoding="utf-8") as fh:
        return parse(fh.read())

__all__ = [
    "AttributeTypeError",
    "Decision",
    "Effect",
    "EvaluationError",
    "EvaluationRequest",
    "MissingAttribute",
    "Outcome",
    "PolicyError",
    "PolicyRule",
    "PolicySet",
    "PolicySyntaxError",
    "PolicyTypeError",
    "Principal",
    "ResourceRef",
    "RuleEvaluation",
    "evaluate",
    "explain",
    "load_policies",
    "parse",
    "serialize",
]
