import hashlib
import json
import random
from dataclasses import replace

import pytest

from anp.errors import (
    EmptyCandidatesError,
    MalformedMessageError,
    NoHandlerRegisteredError,
    ProtocolViolationError,
)
from anp.metaproto import (
    Capabilities,
    Kind,
    NegotiationCache,
    NegotiationMessage,
    Negotiator,
    Phase,
    ProtocolDescriptor,
    Requirement,
    SchemaField,
    Transport,
    accept_proposal,
    negotiate_locally,
    propose,
    run_test_phase,
    step_session,
    test_vectors_message as make_vectors_message,
)

FIELDS = (SchemaField("a", "number"), SchemaField("b", "number"))
REQ = Requirement("add two numbers", FIELDS, (SchemaField("sum", "number"),))
VECTORS = (({"a": 1, "b": 2}, {"sum": 3}), ({"a": 2, "b": 2}, {"sum": 4}))
UNIVERSE = tuple(ProtocolDescriptor(Transport.HTTP_JSON, FIELDS, f"variant {i}") for i in range(8))


def add(msg):
    return {"sum": msg["a"] + msg["b"]}


def party(descriptors, handler=add):
    n = Negotiator(Capabilities(tuple(descriptors)))
    for d in descriptors:
        n.register_handler(d, handler)
    return n


class TestDescriptor:
    def test_protocol_id_is_sha256_of_canonical_body(self):
        d = UNIVERSE[0]
        body = {"transport": "http-json", "messageSchema": [f.to_json() for f in FIELDS],
                "processingNotes": "variant 0"}
        raw = json.dumps(body, sort_keys=True, separators=(",", ":")).encode()
        assert d.protocol_id == hashlib.sha256(raw).hexdigest()

    def test_round_trip(self):
        assert ProtocolDescriptor.from_json(UNIVERSE[1].to_json()) == UNIVERSE[1]

    def test_forged_id(self):
        data = {**UNIVERSE[0].to_json(), "protocolId": UNIVERSE[1].protocol_id}
        with pytest.raises(MalformedMessageError):
            ProtocolDescriptor.from_json(data)

    @pytest.mark.parametrize("data", [None, {}, {"transport": "smoke", "messageSchema": []},
                                      {"transport": "http-json", "messageSchema": [{"name": 1, "type": "x"}]}])
    def test_malformed(self, data):
        with pytest.raises(MalformedMessageError):
            ProtocolDescriptor.from_json(data)


class TestRequirement:
    def test_digest_ignores_field_order_and_spacing(self):
        a = Requirement("add  two numbers", FIELDS)
        b = Requirement("add two numbers", FIELDS[::-1])
        assert a.digest() == b.digest()

    def test_digest_separates_different_requirements(self):
        assert REQ.digest() != Requirement("multiply two numbers", FIELDS).digest()

    def test_blank_description(self):
        with pytest.raises(ValueError):
            Requirement("   ")


class TestMessages:
    def test_round_trip(self):
        _, msg = propose(REQ, UNIVERSE[:2])
        assert NegotiationMessage.from_json(msg.to_json()) == msg

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"kind": Kind.PROPOSE},
            {"kind": Kind.COUNTER, "candidates": ()},
            {"kind": Kind.ACCEPT},
            {"kind": Kind.REJECT, "candidates": UNIVERSE[:1]},
            {"kind": Kind.TEST_VECTORS, "payload": {}},
            {"kind": Kind.TEST_RESULT, "payload": {"passed": "yes"}},
            {"kind": Kind.ACCEPT, "chosen": "x", "requirement": REQ},
        ],
    )
    def test_shape_rules(self, kwargs):
        with pytest.raises(MalformedMessageError):
            NegotiationMessage("s", 0, **kwargs)

    @pytest.mark.parametrize("data", [[], {"kind": "propose"}, {"kind": "dance", "round": 0, "sessionId": "s"},
                                      {"kind": "reject", "round": -1, "sessionId": "s"},
                                      {"kind": "reject", "round": 0, "sessionId": "s", "payload": []}])
    def test_malformed_json(self, data):
        with pytest.raises(MalformedMessageError):
            NegotiationMessage.from_json(data)

    def test_empty_candidates(self):
        with pytest.raises(EmptyCandidatesError):
            propose(REQ, [])


class TestNegotiation:
    def test_direct_accept(self):
        result = negotiate_locally(REQ, UNIVERSE[:2], party(UNIVERSE[:2]), party(UNIVERSE[1:3]), VECTORS)
        assert result.initiator.phase is Phase.LIVE and result.responder.phase is Phase.LIVE
        assert result.initiator.agreed == result.responder.agreed == UNIVERSE[1].protocol_id
        assert result.counter_rounds == 0
        kinds = [m.kind for m in result.initiator.transcript]
        assert kinds == [Kind.PROPOSE, Kind.ACCEPT, Kind.TEST_VECTORS, Kind.TEST_RESULT, Kind.GO_LIVE]

    def test_counter_then_accept(self):
        result = negotiate_locally(REQ, UNIVERSE[:1], party(UNIVERSE[:3]), party(UNIVERSE[2:4]), VECTORS)
        assert result.initiator.agreed == UNIVERSE[2].protocol_id
        assert result.counter_rounds == 1

    def test_empty_intersection_fails_on_both_sides(self):
        result = negotiate_locally(REQ, UNIVERSE[:2], party(UNIVERSE[:2]), party(UNIVERSE[4:6]), VECTORS)
        assert result.initiator.phase is Phase.FAILED and result.responder.phase is Phase.FAILED
        assert result.initiator.agreed is None

    def test_capability_refusal(self):
        responder = party(UNIVERSE[:2])
        responder.capabilities.can_serve = lambda req: False
        result = negotiate_locally(REQ, UNIVERSE[:2], party(UNIVERSE[:2]), responder, VECTORS)
        assert result.initiator.failure == "capability"

    def test_test_failure_blocks_live(self):
        result = negotiate_locally(REQ, UNIVERSE[:1], party(UNIVERSE[:1]),
                                   party(UNIVERSE[:1], lambda m: {"sum": 0}), VECTORS)
        assert result.initiator.phase is Phase.FAILED
        assert result.initiator.failure == "joint test failed"

    def test_raising_handler_is_a_failed_test(self):
        def boom(_):
            raise RuntimeError("nope")

        result = negotiate_locally(REQ, UNIVERSE[:1], party(UNIVERSE[:1]), party(UNIVERSE[:1], boom), VECTORS)
        assert result.initiator.phase is Phase.FAILED

    def test_missing_handler(self):
        responder = Negotiator(Capabilities(UNIVERSE[:1]))
        result = negotiate_locally(REQ, UNIVERSE[:1], party(UNIVERSE[:1]), responder, VECTORS)
        assert result.initiator.phase is Phase.FAILED
        session, _ = propose(REQ, UNIVERSE[:1])
        with pytest.raises(ProtocolViolationError):
            run_test_phase(session, VECTORS, {})
        with pytest.raises(NoHandlerRegisteredError):
            run_test_phase(replace(session, agreed=UNIVERSE[0].protocol_id), VECTORS, {})

    def test_needs_responder_or_exchange(self):
        with pytest.raises(ValueError):
            negotiate_locally(REQ, UNIVERSE[:1], party(UNIVERSE[:1]), None, VECTORS)

    def test_random_pairs_match_brute_force_oracle(self):
        rng = random.Random(11)
        for _ in range(300):
            mine = rng.sample(UNIVERSE, rng.randint(1, 5))
            theirs = rng.sample(UNIVERSE, rng.randint(1, 5))
            theirs_ids = {d.protocol_id for d in theirs}
            mine_ids = {d.protocol_id for d in mine}
            # oracle: first of my list they speak, else first of their list I speak
            expected = next((d.protocol_id for d in mine if d.protocol_id in theirs_ids), None)
            if expected is None:
                expected = next((d.protocol_id for d in theirs if d.protocol_id in mine_ids), None)
            result = negotiate_locally(REQ, mine, party(mine), party(theirs), VECTORS)
            if expected is None:
                assert result.initiator.phase is Phase.FAILED
            else:
                assert result.initiator.phase is Phase.LIVE
                assert result.initiator.agreed == result.responder.agreed == expected
                assert result.counter_rounds <= 1


class TestStateMachine:
    def test_wrong_session(self):
        session, _ = propose(REQ, UNIVERSE[:1])
        reply = NegotiationMessage("other", 0, Kind.ACCEPT, chosen=UNIVERSE[0].protocol_id)
        with pytest.raises(ProtocolViolationError):
            step_session(session, reply, party(UNIVERSE[:1]))

    def test_accept_of_unoffered_protocol(self):
        session, msg = propose(REQ, UNIVERSE[:1])
        reply = NegotiationMessage(msg.session_id, 0, Kind.ACCEPT, chosen=UNIVERSE[5].protocol_id)
        session, out = step_session(session, reply, party(UNIVERSE[:1]))
        assert session.phase is Phase.FAILED and out.kind is Kind.REJECT

    def test_terminal_sessions_reject_more_messages(self):
        result = negotiate_locally(REQ, UNIVERSE[:1], party(UNIVERSE[:1]), party(UNIVERSE[:1]), VECTORS)
        late = NegotiationMessage(result.initiator.session_id, 9, Kind.REJECT)
        with pytest.raises(ProtocolViolationError):
            step_session(result.initiator, late, party(UNIVERSE[:1]))

    def test_round_going_backwards(self):
        _, msg = propose(REQ, UNIVERSE[:1])
        responder = party(UNIVERSE[5:6])
        session, counter = accept_proposal(msg, responder)
        assert counter.kind is Kind.COUNTER and session.round == 1
        stale = NegotiationMessage(msg.session_id, 0, Kind.REJECT)
        with pytest.raises(ProtocolViolationError):
            step_session(session, stale, responder)

    def test_vectors_only_in_testing(self):
        session, _ = propose(REQ, UNIVERSE[:1])
        with pytest.raises(ProtocolViolationError):
            make_vectors_message(session, VECTORS)

    def test_max_rounds(self):
        # both sides keep countering with fresh descriptors that the other cannot speak
        def stubborn(msg, caps, offered):
            return NegotiationMessage(msg.session_id, msg.round + 1, Kind.COUNTER, candidates=caps.descriptors)

        a, b = party(UNIVERSE[:1]), party(UNIVERSE[1:2])
        a.evaluator = b.evaluator = stubborn
        a.max_rounds = b.max_rounds = 3
        result = negotiate_locally(REQ, UNIVERSE[:1], a, b, VECTORS)
        assert result.initiator.phase is Phase.FAILED
        assert result.counter_rounds <= 3


class TestCache:
    def test_cached_agreement_skips_counter(self):
        a, b = party(UNIVERSE[:3]), party(UNIVERSE[2:4])
        first = negotiate_locally(REQ, UNIVERSE[:1], a, b, VECTORS)
        assert first.counter_rounds == 1
        assert a.cache.lookup(REQ) == UNIVERSE[2]
        second = negotiate_locally(REQ, UNIVERSE[:1], a, b, VECTORS)
        assert second.counter_rounds == 0
        assert second.initiator.agreed == first.initiator.agreed

    def test_export(self):
        cache = NegotiationCache().store(REQ, UNIVERSE[0], 5.0)
        assert cache.export() == [{"requirementDigest": REQ.digest(), "protocolId": UNIVERSE[0].protocol_id,
                                   "descriptor": UNIVERSE[0].to_json(), "createdAt": 5.0}]
        assert len(cache) == 1

    def test_miss(self):
        assert NegotiationCache().lookup(REQ) is None
