"""Meta-protocol negotiation: propose, counter, accept/reject, joint test, go live.

The "generate protocol code" step is a handler registry: agreeing on a
descriptor selects the handler registered under its ``protocol_id``. Decision
making is pluggable through :class:`Negotiator.evaluator`; the default is the
deterministic first-intersection rule.

Initiator flow::

    propose ──► accept ──► testVectors ──► testResult(passed) ──► goLive
            └─► counter ─► (accept | counter | reject) ...

The initiator always supplies the test vectors; the responder runs them
through its handler and reports the outputs.
"""

from __future__ import annotations

import enum
import secrets
import threading
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Iterable, Mapping, Sequence

from anp.clock import Clock, system_clock
from anp.encoding import canonical_json, sha256_hex
from anp.errors import (
    EmptyCandidatesError,
    MalformedMessageError,
    NoHandlerRegisteredError,
    ProtocolViolationError,
)

DEFAULT_MAX_ROUNDS = 4


class Transport(str, enum.Enum):
    HTTP_JSON = "http-json"
    ENVELOPE_BINARY = "envelope-binary"


@dataclass(frozen=True)
class SchemaField:
    name: str
    type: str
    required: bool = True

    def to_json(self) -> dict[str, Any]:
        return {"name": self.name, "type": self.type, "required": self.required}

    @classmethod
    def from_json(cls, data: Any) -> "SchemaField":
        if not isinstance(data, dict) or set(data) - {"name", "type", "required"}:
            raise MalformedMessageError("schema field must be {name, type, required}")
        name, ftype, req = data.get("name"), data.get("type"), data.get("required", True)
        if not isinstance(name, str) or not isinstance(ftype, str) or not isinstance(req, bool):
            raise MalformedMessageError("schema field has wrong types")
        return cls(name, ftype, req)


def _fields(raw: Any) -> tuple[SchemaField, ...]:
    if not isinstance(raw, list):
        raise MalformedMessageError("field list must be a list")
    return tuple(SchemaField.from_json(f) for f in raw)


@dataclass(frozen=True)
class ProtocolDescriptor:
    transport: Transport
    message_schema: tuple[SchemaField, ...]
    processing_notes: str = ""

    def body(self) -> dict[str, Any]:
        return {
            "transport": Transport(self.transport).value,
            "messageSchema": [f.to_json() for f in self.message_schema],
            "processingNotes": self.processing_notes,
        }

    @property
    def protocol_id(self) -> str:
        return sha256_hex(canonical_json(self.body()))

    def to_json(self) -> dict[str, Any]:
        return {"protocolId": self.protocol_id, **self.body()}

    @classmethod
    def from_json(cls, data: Any) -> "ProtocolDescriptor":
        if not isinstance(data, dict):
            raise MalformedMessageError("descriptor must be an object")
        try:
            desc = cls(
                Transport(data["transport"]),
                _fields(data["messageSchema"]),
                str(data.get("processingNotes", "")),
            )
        except (KeyError, ValueError) as exc:
            raise MalformedMessageError(f"bad descriptor: {exc}") from exc
        claimed = data.get("protocolId")
        if claimed is not None and claimed != desc.protocol_id:
            raise MalformedMessageError("protocolId does not match descriptor body")
        return desc

    def field_names(self) -> set[str]:
        return {f.name for f in self.message_schema}


@dataclass(frozen=True)
class Requirement:
    description: str
    inputs: tuple[SchemaField, ...] = ()
    expected_outputs: tuple[SchemaField, ...] = ()

    def __post_init__(self) -> None:
        if not self.description.strip():
            raise ValueError("requirement description must be nonempty")

    def to_json(self) -> dict[str, Any]:
        return {
            "description": self.description,
            "inputs": [f.to_json() for f in self.inputs],
            "expectedOutputs": [f.to_json() for f in self.expected_outputs],
        }

    @classmethod
    def from_json(cls, data: Any) -> "Requirement":
        if not isinstance(data, dict) or not isinstance(data.get("description"), str):
            raise MalformedMessageError("requirement needs a description")
        try:
            return cls(
                data["description"],
                _fields(data.get("inputs", [])),
                _fields(data.get("expectedOutputs", [])),
            )
        except ValueError as exc:
            raise MalformedMessageError(str(exc)) from exc

    def digest(self) -> str:
        """Digest of the canonical form; field lists are order-insensitive."""
        canon = {
            "description": " ".join(self.description.split()),
            "inputs": sorted((f.to_json() for f in self.inputs), key=canonical_json),
            "expectedOutputs": sorted((f.to_json() for f in self.expected_outputs), key=canonical_json),
        }
        return sha256_hex(canonical_json(canon))


class Kind(str, enum.Enum):
    PROPOSE = "propose"
    COUNTER = "counter"
    ACCEPT = "accept"
    REJECT = "reject"
    TEST_VECTORS = "testVectors"
    TEST_RESULT = "testResult"
    GO_LIVE = "goLive"


@dataclass(frozen=True)
class NegotiationMessage:
    session_id: str
    round: int
    kind: Kind
    requirement: Requirement | None = None
    candidates: tuple[ProtocolDescriptor, ...] | None = None
    chosen: str | None = None
    payload: Mapping[str, Any] | None = None

    def __post_init__(self) -> None:
        problems = _shape_problems(self)
        if problems:
            raise MalformedMessageError(f"{self.kind.value}: {problems}")

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"sessionId": self.session_id, "round": self.round, "kind": self.kind.value}
        if self.requirement is not None:
            out["requirement"] = self.requirement.to_json()
        if self.candidates is not None:
            out["candidates"] = [c.to_json() for c in self.candidates]
        if self.chosen is not None:
            out["chosen"] = self.chosen
        if self.payload is not None:
            out["payload"] = dict(self.payload)
        return out

    @classmethod
    def from_json(cls, data: Any) -> "NegotiationMessage":
        if not isinstance(data, dict):
            raise MalformedMessageError("message must be an object")
        try:
            kind = Kind(data["kind"])
            rnd = data["round"]
            sid = data["sessionId"]
        except (KeyError, ValueError) as exc:
            raise MalformedMessageError(f"bad message envelope: {exc}") from exc
        if type(rnd) is not int or rnd < 0 or not isinstance(sid, str):
            raise MalformedMessageError("round must be a non-negative integer and sessionId a string")
        req = Requirement.from_json(data["requirement"]) if "requirement" in data else None
        cands = None
        if "candidates" in data:
            if not isinstance(data["candidates"], list):
                raise MalformedMessageError("candidates must be a list")
            cands = tuple(ProtocolDescriptor.from_json(c) for c in data["candidates"])
        payload = data.get("payload")
        if payload is not None and not isinstance(payload, dict):
            raise MalformedMessageError("payload must be an object")
        return cls(sid, rnd, kind, req, cands, data.get("chosen"), payload)


def _shape_problems(msg: NegotiationMessage) -> str:
    has_req = msg.requirement is not None
    has_cands = msg.candidates is not None
    has_chosen = msg.chosen is not None
    k = msg.kind
    if k is Kind.PROPOSE and not (has_req and has_cands and msg.candidates):
        return "requires requirement and nonempty candidates"
    if k is Kind.COUNTER and not (has_cands and msg.candidates):
        return "requires nonempty candidates"
    if k is Kind.ACCEPT and not has_chosen:
        return "requires chosen"
    if k not in (Kind.PROPOSE, Kind.COUNTER) and has_cands:
        return "must not carry candidates"
    if k is not Kind.PROPOSE and has_req:
        return "must not carry a requirement"
    if k is Kind.TEST_VECTORS and not (msg.payload and isinstance(msg.payload.get("vectors"), list)):
        return "requires payload.vectors"
    if k is Kind.TEST_RESULT and not (msg.payload and isinstance(msg.payload.get("passed"), bool)):
        return "requires payload.passed"
    return ""


class Phase(str, enum.Enum):
    PROPOSING = "proposing"
    NEGOTIATING = "negotiating"
    TESTING = "testing"
    LIVE = "live"
    FAILED = "failed"


_PHASE_ORDER = {Phase.PROPOSING: 0, Phase.NEGOTIATING: 1, Phase.TESTING: 2, Phase.LIVE: 3, Phase.FAILED: 4}


class Role(str, enum.Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


@dataclass(frozen=True)
class NegotiationSession:
    session_id: str
    role: Role
    requirement: Requirement
    phase: Phase = Phase.PROPOSING
    round: int = 0
    agreed: str | None = None
    max_rounds: int = DEFAULT_MAX_ROUNDS
    transcript: tuple[NegotiationMessage, ...] = ()
    offered: frozenset[str] = frozenset()
    known: Mapping[str, ProtocolDescriptor] = field(default_factory=dict, compare=False)
    vectors: tuple[tuple[Any, Any], ...] = ()
    failure: str | None = None

    def descriptor(self) -> ProtocolDescriptor | None:
        return self.known.get(self.agreed) if self.agreed else None

    def _move(self, phase: Phase, **changes: Any) -> "NegotiationSession":
        if phase is not Phase.FAILED and _PHASE_ORDER[phase] < _PHASE_ORDER[self.phase]:
            raise ProtocolViolationError(f"phase cannot move from {self.phase.value} to {phase.value}")
        return replace(self, phase=phase, **changes)

    def _log(self, *msgs: NegotiationMessage | None) -> tuple[NegotiationMessage, ...]:
        return self.transcript + tuple(m for m in msgs if m is not None)


class NegotiationCache:
    """Requirement digest -> agreed descriptor. Lookups are lock-free reads of an
    immutable mapping; stores swap in a new mapping under a lock."""

    def __init__(self) -> None:
        self._entries: dict[str, tuple[str, ProtocolDescriptor, float]] = {}
        self._lock = threading.Lock()

    def store(self, requirement: Requirement, descriptor: ProtocolDescriptor, now: float = 0.0) -> "NegotiationCache":
        with self._lock:
            entries = dict(self._entries)
            entries[requirement.digest()] = (descriptor.protocol_id, descriptor, now)
            self._entries = entries
        return self

    def lookup(self, requirement: Requirement) -> ProtocolDescriptor | None:
        hit = self._entries.get(requirement.digest())
        if hit is None:
            return None
        protocol_id, descriptor, _ = hit
        if descriptor.protocol_id != protocol_id:
            return None
        return descriptor

    def export(self) -> list[dict[str, Any]]:
        """Read-only listing for sharing negotiation results with other agents."""
        return [
            {"requirementDigest": digest, "protocolId": pid, "descriptor": d.to_json(), "createdAt": created}
            for digest, (pid, d, created) in sorted(self._entries.items())
        ]

    def __len__(self) -> int:
        return len(self._entries)


def cache_store(cache: NegotiationCache, requirement: Requirement, descriptor: ProtocolDescriptor) -> NegotiationCache:
    return cache.store(requirement, descriptor)


def cache_lookup(cache: NegotiationCache, requirement: Requirement) -> ProtocolDescriptor | None:
    return cache.lookup(requirement)


Handler = Callable[[Any], Any]


@dataclass
class Capabilities:
    """What one side can speak, in preference order, and what it is willing to do."""

    descriptors: Sequence[ProtocolDescriptor]
    can_serve: Callable[[Requirement], bool] = lambda _req: True

    @property
    def supported_ids(self) -> list[str]:
        return [d.protocol_id for d in self.descriptors]


Evaluator = Callable[[NegotiationMessage, Capabilities, frozenset], NegotiationMessage]


def default_evaluator(msg: NegotiationMessage, caps: Capabilities, offered: frozenset = frozenset()) -> NegotiationMessage:
    """First-intersection rule in the proposer's candidate order.

    ``offered`` holds protocol ids this side already put on the table; a counter
    only carries descriptors not offered before, and an exhausted list rejects.
    """
    requirement = msg.requirement
    if requirement is not None and not caps.can_serve(requirement):
        return NegotiationMessage(msg.session_id, msg.round, Kind.REJECT, payload={"reason": "capability"})
    supported = set(caps.supported_ids)
    for cand in msg.candidates or ():
        if cand.protocol_id in supported:
            return NegotiationMessage(msg.session_id, msg.round, Kind.ACCEPT, chosen=cand.protocol_id)
    fresh = tuple(d for d in caps.descriptors if d.protocol_id not in offered)
    if not fresh:
        return NegotiationMessage(msg.session_id, msg.round, Kind.REJECT, payload={"reason": "exhausted"})
    return NegotiationMessage(msg.session_id, msg.round + 1, Kind.COUNTER, candidates=fresh)


def evaluate_proposal(
    msg: NegotiationMessage,
    capabilities: Capabilities,
    evaluator: Evaluator = default_evaluator,
    offered: frozenset = frozenset(),
) -> NegotiationMessage:
    if msg.kind not in (Kind.PROPOSE, Kind.COUNTER):
        raise MalformedMessageError(f"cannot evaluate a {msg.kind.value} message")
    reply = evaluator(msg, capabilities, offered)
    if reply.kind not in (Kind.ACCEPT, Kind.COUNTER, Kind.REJECT):
        raise MalformedMessageError(f"evaluator produced {reply.kind.value}")
    return reply


@dataclass
class Negotiator:
    """One agent's side of negotiations: capabilities, handlers, cache, policy."""

    capabilities: Capabilities
    handlers: dict[str, Handler] = field(default_factory=dict)
    cache: NegotiationCache = field(default_factory=NegotiationCache)
    evaluator: Evaluator = default_evaluator
    max_rounds: int = DEFAULT_MAX_ROUNDS
    clock: Clock = system_clock

    def register_handler(self, descriptor: ProtocolDescriptor, handler: Handler) -> None:
        self.handlers[descriptor.protocol_id] = handler


def propose(
    requirement: Requirement,
    candidates: Sequence[ProtocolDescriptor],
    cache: NegotiationCache | None = None,
    *,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
    session_id: str | None = None,
) -> tuple[NegotiationSession, NegotiationMessage]:
    """Open a negotiation; a cached agreement for the requirement is tried first.

    Raises:
        EmptyCandidatesError: no candidates given.
    """
    if not candidates:
        raise EmptyCandidatesError("at least one candidate protocol is required")
    ordered = list(candidates)
    cached = cache.lookup(requirement) if cache is not None else None
    if cached is not None:
        ordered = [cached] + [c for c in ordered if c.protocol_id != cached.protocol_id]
    sid = session_id or secrets.token_hex(16)
    msg = NegotiationMessage(sid, 0, Kind.PROPOSE, requirement=requirement, candidates=tuple(ordered))
    session = NegotiationSession(
        session_id=sid,
        role=Role.INITIATOR,
        requirement=requirement,
        max_rounds=max_rounds,
        transcript=(msg,),
        offered=frozenset(c.protocol_id for c in ordered),
        known={c.protocol_id: c for c in ordered},
    )
    return session, msg


def accept_proposal(msg: NegotiationMessage, negotiator: Negotiator) -> tuple[NegotiationSession, NegotiationMessage]:
    """Responder entry point: open a session for an incoming propose and answer it."""
    if msg.kind is not Kind.PROPOSE or msg.requirement is None:
        raise ProtocolViolationError("a negotiation must start with propose")
    session = NegotiationSession(
        session_id=msg.session_id,
        role=Role.RESPONDER,
        requirement=msg.requirement,
        max_rounds=negotiator.max_rounds,
    )
    session, out = step_session(session, msg, negotiator)
    assert out is not None
    return session, out


def test_vectors_message(session: NegotiationSession, vectors: Sequence[tuple[Any, Any]]) -> tuple[NegotiationSession, NegotiationMessage]:
    """Initiator: propose the joint-test vectors for the agreed protocol."""
    if session.phase is not Phase.TESTING or session.role is not Role.INITIATOR:
        raise ProtocolViolationError("only an initiator in testing proposes vectors")
    msg = NegotiationMessage(
        session.session_id,
        session.round,
        Kind.TEST_VECTORS,
        chosen=session.agreed,
        payload={"vectors": [{"input": i, "expected": e} for i, e in vectors]},
    )
    return replace(session, vectors=tuple(vectors), transcript=session._log(msg)), msg


@dataclass(frozen=True)
class TestReport:
    passed: bool
    outputs: tuple[Any, ...] = ()
    mismatch_index: int | None = None
    detail: str | None = None

    __test__ = False


def run_test_phase(
    session: NegotiationSession, vectors: Sequence[tuple[Any, Any]], handlers: Mapping[str, Handler]
) -> TestReport:
    """Run each (input, expected) pair through the agreed protocol's handler.

    Raises:
        NoHandlerRegisteredError: nothing registered under the agreed protocol id.
    """
    if session.agreed is None:
        raise ProtocolViolationError("no agreed protocol")
    handler = handlers.get(session.agreed)
    if handler is None:
        raise NoHandlerRegisteredError(f"no handler for protocol {session.agreed}")
    outputs = []
    for i, (given, expected) in enumerate(vectors):
        try:
            got = handler(given)
        except Exception as exc:  # a failing handler is a failed test, not a crash
            return TestReport(False, tuple(outputs), i, f"handler raised {type(exc).__name__}: {exc}")
        outputs.append(got)
        if got != expected:
            return TestReport(False, tuple(outputs), i, f"mismatch at index {i}")
    return TestReport(True, tuple(outputs))


def _fail(session: NegotiationSession, reason: str, *msgs: NegotiationMessage | None) -> NegotiationSession:
    return session._move(Phase.FAILED, failure=reason, agreed=None, transcript=session._log(*msgs))


def step_session(
    session: NegotiationSession, incoming: NegotiationMessage, negotiator: Negotiator
) -> tuple[NegotiationSession, NegotiationMessage | None]:
    """Apply one incoming message; return the new session and the reply, if any.

    Raises:
        ProtocolViolationError: wrong session, or a message kind illegal in the
            current phase/role.
    """
    if incoming.session_id != session.session_id:
        raise ProtocolViolationError("session id mismatch")
    if session.phase in (Phase.LIVE, Phase.FAILED):
        raise ProtocolViolationError(f"session is {session.phase.value}; {incoming.kind.value} not allowed")
    if incoming.round < session.round:
        raise ProtocolViolationError("round number went backwards")

    kind = incoming.kind
    known = dict(session.known)
    for cand in incoming.candidates or ():
        known[cand.protocol_id] = cand
    session = replace(session, known=known)

    if kind in (Kind.PROPOSE, Kind.COUNTER):
        if kind is Kind.PROPOSE and (session.role is not Role.RESPONDER or session.transcript):
            raise ProtocolViolationError("propose is only valid as the first message to a responder")
        if kind is Kind.COUNTER and session.phase not in (Phase.PROPOSING, Phase.NEGOTIATING):
            raise ProtocolViolationError(f"counter not allowed in {session.phase.value}")
        if kind is Kind.COUNTER and (incoming.round > session.max_rounds or session.round >= session.max_rounds):
            return _fail(session, "max rounds exceeded", incoming), None
        rnd = incoming.round
        phase = Phase.NEGOTIATING if kind is Kind.COUNTER else session.phase
        session = session._move(phase, round=rnd)
        reply = evaluate_proposal(incoming, negotiator.capabilities, negotiator.evaluator, session.offered)
        if reply.kind is Kind.ACCEPT:
            return (
                session._move(Phase.TESTING, agreed=reply.chosen, transcript=session._log(incoming, reply)),
                reply,
            )
        if reply.kind is Kind.REJECT:
            return _fail(session, str((reply.payload or {}).get("reason", "rejected")), incoming, reply), reply
        if reply.round > session.max_rounds:
            rej = NegotiationMessage(session.session_id, rnd, Kind.REJECT, payload={"reason": "max rounds"})
            return _fail(session, "max rounds exceeded", incoming, rej), rej
        offered = session.offered | {c.protocol_id for c in reply.candidates or ()}
        for cand in reply.candidates or ():
            known[cand.protocol_id] = cand
        return (
            session._move(
                Phase.NEGOTIATING, round=reply.round, offered=offered, known=known,
                transcript=session._log(incoming, reply),
            ),
            reply,
        )

    if kind is Kind.ACCEPT:
        if session.phase not in (Phase.PROPOSING, Phase.NEGOTIATING):
            raise ProtocolViolationError(f"accept not allowed in {session.phase.value}")
        if incoming.chosen not in session.offered:
            rej = NegotiationMessage(session.session_id, session.round, Kind.REJECT, payload={"reason": "not offered"})
            return _fail(session, "peer accepted a protocol we never offered", incoming, rej), rej
        return session._move(Phase.TESTING, agreed=incoming.chosen, transcript=session._log(incoming)), None

    if kind is Kind.REJECT:
        return _fail(session, str((incoming.payload or {}).get("reason", "rejected by peer")), incoming), None

    if kind is Kind.TEST_VECTORS:
        if session.phase is not Phase.TESTING or session.role is not Role.RESPONDER:
            raise ProtocolViolationError("testVectors only valid for a responder in testing")
        if incoming.chosen != session.agreed:
            raise ProtocolViolationError("test vectors for a different protocol")
        try:
            vectors = [(v["input"], v["expected"]) for v in incoming.payload["vectors"]]  # type: ignore[index]
        except (KeyError, TypeError) as exc:
            raise MalformedMessageError(f"bad vectors: {exc}") from exc
        try:
            report = run_test_phase(session, vectors, negotiator.handlers)
        except NoHandlerRegisteredError:
            report = TestReport(False, detail="no handler registered")
        reply = NegotiationMessage(
            session.session_id,
            session.round,
            Kind.TEST_RESULT,
            chosen=session.agreed,
            payload={"passed": report.passed, "outputs": list(report.outputs), "detail": report.detail},
        )
        return replace(session, vectors=tuple(vectors), transcript=session._log(incoming, reply)), reply

    if kind is Kind.TEST_RESULT:
        if session.phase is not Phase.TESTING or session.role is not Role.INITIATOR or not session.vectors:
            raise ProtocolViolationError("testResult only valid for an initiator awaiting results")
        peer_passed = bool(incoming.payload and incoming.payload.get("passed"))
        try:
            local = run_test_phase(session, session.vectors, negotiator.handlers)
        except NoHandlerRegisteredError:
            local = TestReport(False, detail="no handler registered")
        if not (peer_passed and local.passed):
            rej = NegotiationMessage(session.session_id, session.round, Kind.REJECT, payload={"reason": "test failed"})
            return _fail(session, "joint test failed", incoming, rej), rej
        go = NegotiationMessage(session.session_id, session.round, Kind.GO_LIVE, chosen=session.agreed)
        live = session._move(Phase.LIVE, transcript=session._log(incoming, go))
        _remember(live, negotiator)
        return live, go

    if kind is Kind.GO_LIVE:
        if session.phase is not Phase.TESTING or session.role is not Role.RESPONDER or not session.vectors:
            raise ProtocolViolationError("goLive only valid for a tested responder")
        live = session._move(Phase.LIVE, transcript=session._log(incoming))
        _remember(live, negotiator)
        return live, None

    raise ProtocolViolationError(f"unhandled message kind {kind.value}")


def _remember(session: NegotiationSession, negotiator: Negotiator) -> None:
    desc = session.descriptor()
    if desc is not None:
        negotiator.cache.store(session.requirement, desc, negotiator.clock())


@dataclass(frozen=True)
class NegotiationResult:
    initiator: NegotiationSession
    responder: NegotiationSession | None
    messages: int

    @property
    def counter_rounds(self) -> int:
        return sum(1 for m in self.initiator.transcript if m.kind is Kind.COUNTER)


def negotiate_locally(
    requirement: Requirement,
    candidates: Sequence[ProtocolDescriptor],
    initiator: Negotiator,
    responder: Negotiator | None,
    vectors: Sequence[tuple[Any, Any]],
    *,
    exchange: Callable[[NegotiationMessage], NegotiationMessage | None] | None = None,
    message_limit: int = 64,
) -> NegotiationResult:
    """Drive both state machines to completion.

    ``exchange`` delivers a message to the responder and returns its reply;
    without it the responder runs in-process. The node uses the same driver
    with an HTTP-backed ``exchange``.
    """
    if responder is None and exchange is None:
        raise ValueError("need a responder or an exchange function")
    resp_state: dict[str, NegotiationSession] = {}

    def local_exchange(msg: NegotiationMessage) -> NegotiationMessage | None:
        if msg.kind is Kind.PROPOSE:
            sess, out = accept_proposal(msg, responder)
        else:
            sess, out = step_session(resp_state["s"], msg, responder)
        resp_state["s"] = sess
        return out

    send = exchange or local_exchange
    session, msg = propose(requirement, candidates, initiator.cache, max_rounds=initiator.max_rounds)
    count = 0
    outgoing: NegotiationMessage | None = msg
    while count < message_limit:
        if outgoing is None:
            if session.phase is not Phase.TESTING or session.vectors:
                break
            session, outgoing = test_vectors_message(session, vectors)
        count += 1
        reply = send(outgoing)
        if outgoing.kind in (Kind.GO_LIVE, Kind.REJECT):
            break
        outgoing = None
        if reply is not None:
            count += 1
            session, outgoing = step_session(session, reply, initiator)
    if session.phase not in (Phase.LIVE, Phase.FAILED):
        session = _fail(session, "message limit reached")
    return NegotiationResult(session, resp_state.get("s"), count)
