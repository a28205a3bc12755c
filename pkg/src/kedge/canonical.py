"""Canonical JSON encoding and SHA-256 digests.

Every value that is hashed or persisted goes through :func:`dumps`, so the
byte form is fixed: sorted keys, no insignificant whitespace, UTF-8.
Only JSON-native values are accepted (no floats); decimals are carried as
strings by the callers.
"""
from __future__ import annotations

import hashlib
import json
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Any

ZERO_DIGEST = "0" * 64
FOURPLACES = Decimal("0.0001")


def _reject(obj: Any) -> Any:
    raise TypeError(f"value of type {type(obj).__name__} is not canonically encodable")


def _check(value: Any) -> None:
    stack = [value]
    while stack:
        v = stack.pop()
        t = type(v)
        if t is dict:
            for k in v:
                if not isinstance(k, str):
                    raise TypeError("object keys must be strings")
            stack.extend(v.values())
        elif t is list or t is tuple:
            stack.extend(v)
        elif isinstance(v, float):
            raise TypeError("floats are not canonically encodable; use a decimal string")
        elif isinstance(v, dict):
            stack.append(dict(v))
        elif isinstance(v, (list, tuple)):
            stack.extend(v)


def dumps(value: Any) -> str:
    _check(value)
    return dumps_checked(value)


def dumps_checked(value: Any) -> str:
    """Encode a value already known to be float-free (e.g. parsed with no_floats)."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, default=_reject)


def no_floats(text: str) -> Any:
    raise ValueError(f"non-integer number {text!r} is not canonical")


def encode(value: Any) -> bytes:
    return dumps(value).encode("utf-8")


def digest(value: Any) -> str:
    return hashlib.sha256(encode(value)).hexdigest()


def fixed4(value: Any) -> Decimal:
    """Parse a score into a 4-fractional-digit decimal."""
    if isinstance(value, float):
        value = repr(value)
    return Decimal(value).quantize(FOURPLACES, rounding=ROUND_HALF_EVEN)


def fmt4(value: Decimal) -> str:
    return str(value.quantize(FOURPLACES, rounding=ROUND_HALF_EVEN))


def fmt_exact(value: Decimal) -> str:
    """Plain (non-exponent) rendering of an exact decimal."""
    text = format(value.normalize(), "f")
    return text if text != "-0" else "0"
