"""Execution contracts (action, resource scope, time window) and the
ephemeral task tokens that enforce them."""
from __future__ import annotations

import random
import secrets
from dataclasses import dataclass
from typing import TYPE_CHECKING, Any

from .errors import KedgeError
from .evidence import ChainEntry, EventKind, EvidenceChain

if TYPE_CHECKING:
    from .governance import IntentProposal

DEFAULT_TTL = 300


class NotApproved(KedgeError):
    pass


class Expired(KedgeError):
    pass


class UnknownToken(KedgeError):
    pass


@dataclass(frozen=True)
class ExecutionContract:
    contract_id: str
    intent_id: str
    action: str
    resource_scope: frozenset[str]
    valid_from: int
    valid_until: int
    issued_at: int

    def __post_init__(self) -> None:
        if self.valid_from > self.valid_until:
            raise ValueError("contract window is empty")
        if not self.resource_scope:
            raise ValueError("contract resource scope is empty")

    def covers(self, action: str, resource: str, tick: int) -> bool:
        return (
            action == self.action
            and resource in self.resource_scope
            and self.valid_from <= tick <= self.valid_until
        )

    def to_payload(self) -> dict[str, Any]:
        return {
            "action": self.action,
            "contract_id": self.contract_id,
            "issued_at": self.issued_at,
            "resource_scope": sorted(self.resource_scope),
            "valid_from": self.valid_from,
            "valid_until": self.valid_until,
        }

    @classmethod
    def from_entry(cls, entry: ChainEntry) -> ExecutionContract:
        p = entry.payload
        return cls(
            p["contract_id"],
            entry.intent_id,
            p["action"],
            frozenset(p["resource_scope"]),
            p["valid_from"],
            p["valid_until"],
            p["issued_at"],
        )


@dataclass(frozen=True)
class TokenScope:
    action: str
    resource_scope: frozenset[str]
    valid_from: int
    valid_until: int


@dataclass
class TaskToken:
    token_id: str
    contract_id: str
    scope: TokenScope
    revoked: bool = False


@dataclass(frozen=True)
class AuthorizationOutcome:
    decision: str  # "Allow" | "Deny"
    reason: str | None = None

    @property
    def allowed(self) -> bool:
        return self.decision == "Allow"

    @classmethod
    def allow(cls) -> AuthorizationOutcome:
        return cls("Allow")

    @classmethod
    def deny(cls, reason: str) -> AuthorizationOutcome:
        return cls("Deny", reason)

    def to_dict(self) -> dict[str, Any]:
        return {"decision": self.decision, "reason": self.reason}

    def __str__(self) -> str:
        return self.decision if self.reason is None else f"{self.decision}({self.reason})"


def compile_contract(
    decision: ChainEntry,
    proposal: IntentProposal,
    now: int,
    ttl: int = DEFAULT_TTL,
    log: EvidenceChain | None = None,
) -> ExecutionContract:
    """Turn an approval into a contract; appends ContractIssued when a log is given."""
    if decision.kind is not EventKind.DECISION_RENDERED:
        raise NotApproved(f"entry {decision.index} is not a decision")
    if decision.intent_id != proposal.intent_id:
        raise NotApproved(f"decision is for {decision.intent_id!r}, not {proposal.intent_id!r}")
    if decision.payload["outcome"] != "Approve":
        raise NotApproved(f"intent {proposal.intent_id!r} was {decision.payload['outcome']}")
    if ttl < 0:
        raise ValueError("ttl must be non-negative")
    scope = frozenset({proposal.target} | {f.entity_id for f in proposal.asserted_facts})
    contract = ExecutionContract(
        contract_id=f"ctr-{decision.digest[:16]}",
        intent_id=proposal.intent_id,
        action=proposal.action,
        resource_scope=scope,
        valid_from=now,
        valid_until=now + ttl,
        issued_at=now,
    )
    if log is not None:
        log.record(EventKind.CONTRACT_ISSUED, proposal.intent_id, contract.to_payload(), now)
    return contract


class TokenRegistry:
    """Issuance registry. Seeded for reproducible runs, OS entropy otherwise."""

    def __init__(self, seed: int | None = None) -> None:
        self._rng = random.Random(seed) if seed is not None else None
        self.tokens: dict[str, TaskToken] = {}
        self.live_by_contract: dict[str, str] = {}

    def _new_id(self) -> str:
        if self._rng is not None:
            return f"{self._rng.getrandbits(128):032x}"
        return secrets.token_hex(16)

    def mint(self, contract: ExecutionContract, now: int) -> TaskToken:
        if now > contract.valid_until:
            raise Expired(f"contract {contract.contract_id} expired at {contract.valid_until}")
        prior = self.live_by_contract.get(contract.contract_id)
        if prior is not None:
            self.revoke(prior)
        scope = TokenScope(contract.action, contract.resource_scope, contract.valid_from, contract.valid_until)
        token = TaskToken(self._new_id(), contract.contract_id, scope)
        while token.token_id in self.tokens:
            token.token_id = self._new_id()
        self.tokens[token.token_id] = token
        self.live_by_contract[contract.contract_id] = token.token_id
        return token

    def revoke(self, token_id: str) -> None:
        token = self.tokens.get(token_id)
        if token is None:
            raise UnknownToken(token_id)
        token.revoked = True
        if self.live_by_contract.get(token.contract_id) == token_id:
            del self.live_by_contract[token.contract_id]


def mint_token(contract: ExecutionContract, registry: TokenRegistry, now: int) -> TaskToken:
    return registry.mint(contract, now)


def revoke(registry: TokenRegistry, token: TaskToken | str) -> None:
    registry.revoke(token if isinstance(token, str) else token.token_id)


def authorize(token: TaskToken, action: str, resource: str, now: int) -> AuthorizationOutcome:
    scope = token.scope
    if token.revoked:
        return AuthorizationOutcome.deny("Revoked")
    if action != scope.action:
        return AuthorizationOutcome.deny("WrongAction")
    if resource not in scope.resource_scope:
        return AuthorizationOutcome.deny("OutOfScope")
    if not scope.valid_from <= now <= scope.valid_until:
        return AuthorizationOutcome.deny("Expired")
    return AuthorizationOutcome.allow()
