import random
import threading

import pytest

from anp import auth
from anp.auth import (
    AuditLog,
    AuthHeader,
    HumanConfirmation,
    NonceStore,
    RiskClass,
    Token,
    authorize_operation,
    classify,
    issue_token,
    normalize_url,
    sign_human_confirmation,
    sign_request,
    verify_request,
    verify_token,
)
from anp.errors import MalformedHeaderError
from anp.identity import DidResolver, generate_keypair

URL = "https://bob.example/anp/negotiate"


@pytest.fixture
def resolver(web, clock, alice, bob):
    web.publish(alice.did_document())
    web.publish(bob.did_document())
    return DidResolver(web, clock)


def signed(keys, clock, method="POST", url=URL):
    return sign_request(keys.did, keys.auth_key, method, url, clock)


class TestNormalizeUrl:
    @pytest.mark.parametrize(
        "raw,expected",
        [
            ("HTTPS://Bob.Example/anp", "https://bob.example/anp"),
            ("https://bob.example:443/x", "https://bob.example/x"),
            ("https://bob.example:8443/x", "https://bob.example:8443/x"),
            ("https://bob.example", "https://bob.example/"),
            ("https://bob.example/p?q=1#frag", "https://bob.example/p?q=1"),
        ],
    )
    def test_cases(self, raw, expected):
        assert normalize_url(raw) == expected


class TestHeader:
    def test_round_trip(self, alice, clock):
        header = signed(alice, clock)
        assert AuthHeader.parse(header.to_header()) == header

    def test_payload_layout(self, alice, clock):
        header = signed(alice, clock)
        lines = header.payload("post", URL).decode().split("\n")
        assert lines == ["wba-auth.v1", str(alice.did), "key-1", str(header.timestamp), header.nonce, "POST", URL]

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda h: h.replace("WBA ", "Bearer ", 1),
            lambda h: h + ",",
            lambda h: h + ',key="x"',
            lambda h: h.replace(",", ", ", 1),
            lambda h: h.replace("ts=", "ts=0"),
            lambda h: h.replace('nonce="', 'nonce="A'),
            lambda h: h.replace("did:wba:alice.example", "did:wba:Alice.example"),
            lambda h: h.replace('key="key-1"', 'key=""'),
            lambda h: h.split(',sig=')[0],
        ],
    )
    def test_malformed(self, alice, clock, mutate):
        with pytest.raises(MalformedHeaderError):
            AuthHeader.parse(mutate(signed(alice, clock).to_header()))


class TestVerifyRequest:
    def test_accepts(self, alice, clock, resolver):
        result = verify_request(signed(alice, clock).to_header(), "POST", URL, resolver, NonceStore(), clock)
        assert result.accepted and result.did == alice.did

    def test_replay(self, alice, clock, resolver):
        header = signed(alice, clock).to_header()
        nonces = NonceStore()
        assert verify_request(header, "POST", URL, resolver, nonces, clock).accepted
        assert verify_request(header, "POST", URL, resolver, nonces, clock).reason == auth.REPLAYED_NONCE

    def test_replay_after_window_is_expired(self, alice, clock, resolver):
        header = signed(alice, clock).to_header()
        nonces = NonceStore()
        verify_request(header, "POST", URL, resolver, nonces, clock)
        clock.advance(auth.SKEW_WINDOW + 1)
        assert verify_request(header, "POST", URL, resolver, nonces, clock).reason == auth.EXPIRED_TIMESTAMP

    @pytest.mark.parametrize("offset,ok", [(-300, True), (300, True), (-301, False), (301, False)])
    def test_skew_boundary(self, alice, clock, resolver, offset, ok):
        header = signed(alice, clock).to_header()
        clock.advance(offset)
        result = verify_request(header, "POST", URL, resolver, NonceStore(), clock)
        assert result.accepted is ok
        if not ok:
            assert result.reason == auth.EXPIRED_TIMESTAMP

    @pytest.mark.parametrize(
        "method,url",
        [("GET", URL), ("POST", "https://bob.example/anp/message"), ("POST", "https://eve.example/anp/negotiate")],
    )
    def test_signature_binds_method_and_url(self, alice, clock, resolver, method, url):
        result = verify_request(signed(alice, clock).to_header(), method, url, resolver, NonceStore(), clock)
        assert result.reason == auth.BAD_SIGNATURE

    def test_url_normalization_is_accepted(self, alice, clock, resolver):
        header = signed(alice, clock).to_header()
        assert verify_request(header, "post", "HTTPS://BOB.example:443/anp/negotiate", resolver, NonceStore(), clock).accepted

    def test_unknown_key(self, alice, clock, resolver):
        rogue = generate_keypair(key_id="key-9")
        header = sign_request(alice.did, rogue, "POST", URL, clock)
        assert verify_request(header, "POST", URL, resolver, NonceStore(), clock).reason == auth.UNKNOWN_KEY

    def test_wrong_key_material(self, alice, clock, resolver):
        rogue = generate_keypair(key_id="key-1")
        header = sign_request(alice.did, rogue, "POST", URL, clock)
        assert verify_request(header, "POST", URL, resolver, NonceStore(), clock).reason == auth.BAD_SIGNATURE

    def test_human_key_cannot_authenticate(self, alice, clock, resolver):
        header = sign_request(alice.did, alice.human_key, "POST", URL, clock)
        assert verify_request(header, "POST", URL, resolver, NonceStore(), clock).reason == auth.KEY_PURPOSE_MISMATCH

    def test_resolution_failure(self, clock, resolver):
        from anp.identity import DidId
        from anp.node.keys import AgentKeys

        ghost = AgentKeys.generate(DidId("ghost.example"))
        result = verify_request(signed(ghost, clock), "POST", URL, resolver, NonceStore(), clock)
        assert result.reason == auth.RESOLUTION_FAILURE

    def test_malformed_string(self, clock, resolver):
        assert verify_request("WBA nope", "POST", URL, resolver, NonceStore(), clock).reason == auth.MALFORMED_HEADER

    def test_rejection_does_not_burn_nonce(self, alice, clock, resolver):
        header = signed(alice, clock)
        nonces = NonceStore()
        verify_request(header, "GET", URL, resolver, nonces, clock)
        assert verify_request(header, "POST", URL, resolver, nonces, clock).accepted

    def test_thousand_nonces_are_distinct(self, alice, clock):
        assert len({signed(alice, clock).nonce for _ in range(1000)}) == 1000

    def test_concurrent_replay_accepts_exactly_one(self, alice, clock, resolver):
        header = signed(alice, clock).to_header()
        nonces = NonceStore()
        results = []
        barrier = threading.Barrier(16)

        def attempt():
            barrier.wait()
            results.append(verify_request(header, "POST", URL, resolver, nonces, clock).accepted)

        threads = [threading.Thread(target=attempt) for _ in range(16)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert results.count(True) == 1


class TestNonceStore:
    def test_scoped_per_did(self):
        store = NonceStore()
        assert store.add("a", "n", 0) and store.add("b", "n", 0)
        assert not store.add("a", "n", 1)

    def test_purges_expired(self):
        store = NonceStore(window=10)
        for i in range(100):
            store.add("a", str(i), 0)
        store.add("a", "late", 11)
        assert len(store) == 1


class TestTokens:
    def test_round_trip(self, bob, alice, clock):
        token = issue_token(alice.did, bob.did, bob.auth_key, 60, clock)
        assert Token.decode(token.encode()) == token
        check = verify_token(token.encode(), bob.did_document(), clock)
        assert check.valid and check.claims["sub"] == str(alice.did)

    def test_expiry_is_exclusive(self, bob, alice, clock):
        token = issue_token(alice.did, bob.did, bob.auth_key, 60, clock)
        clock.advance(59.9)
        assert verify_token(token, bob.did_document(), clock).valid
        clock.advance(0.1)
        assert verify_token(token, bob.did_document(), clock).reason == auth.EXPIRED

    def test_validity_is_monotone(self, bob, alice, clock):
        token = issue_token(alice.did, bob.did, bob.auth_key, 30, clock)
        validity = []
        for _ in range(60):
            validity.append(verify_token(token, bob.did_document(), clock).valid)
            clock.advance(1)
        assert validity == sorted(validity, reverse=True)
        assert validity.count(True) == 30

    def test_foreign_issuer(self, bob, alice, clock):
        token = issue_token(alice.did, alice.did, alice.auth_key, 60, clock)
        assert verify_token(token, bob.did_document(), clock).reason == auth.UNKNOWN_ISSUER_KEY

    def test_forged_signature(self, bob, alice, clock):
        forged = issue_token(alice.did, bob.did, generate_keypair(key_id="key-1"), 60, clock)
        assert verify_token(forged, bob.did_document(), clock).reason == auth.BAD_SIGNATURE

    def test_claim_tampering(self, bob, alice, clock):
        from dataclasses import replace

        token = issue_token(alice.did, bob.did, bob.auth_key, 60, clock)
        stretched = replace(token, expires_at=token.expires_at + 3600)
        assert verify_token(stretched.encode(), bob.did_document(), clock).reason == auth.BAD_SIGNATURE

    @pytest.mark.parametrize("text", ["", "abc", "a.b.c", "e30.AAAA", "!!.??"])
    def test_malformed(self, bob, clock, text):
        assert verify_token(text, bob.did_document(), clock).reason == auth.MALFORMED_TOKEN

    def test_zero_ttl(self, bob, alice, clock):
        with pytest.raises(ValueError):
            issue_token(alice.did, bob.did, bob.auth_key, 0, clock)


class TestRisk:
    def test_unlisted_route_is_high(self):
        assert classify("DELETE /x", {}) is RiskClass.HIGH

    def test_listed(self):
        assert classify("GET /x", {"GET /x": "low"}) is RiskClass.LOW


class TestAuthorize:
    ROUTE = "POST /anp/transfer"

    def test_low_risk_skips_gate_and_audit(self, alice):
        log = AuditLog()
        calls = []
        decision = authorize_operation(self.ROUTE, "low", alice.did_document(), lambda r, d: calls.append(r), log)
        assert decision.allowed and calls == [] and len(log) == 0

    def test_absent(self, alice, clock):
        log = AuditLog()
        decision = authorize_operation(self.ROUTE, "high", alice.did_document(), lambda r, d: None, log, clock)
        assert decision.reason == auth.HUMAN_CONFIRMATION_ABSENT
        assert log.records[0].decision == "deny" and log.records[0].signature is None

    def test_valid(self, alice, clock):
        log = AuditLog()
        conf = sign_human_confirmation(alice.did, alice.human_key, self.ROUTE, clock)
        decision = authorize_operation(self.ROUTE, "high", alice.did_document(), lambda r, d: conf, log, clock)
        assert decision.allowed
        record = log.records[0]
        assert (record.decision, record.key_id, record.requester) == ("allow", "human-1", str(alice.did))

    @pytest.mark.parametrize("case", ["routine_key", "other_route", "stale", "other_did", "foreign_key"])
    def test_invalid(self, alice, bob, clock, case):
        key, route, did = alice.human_key, self.ROUTE, alice.did
        if case == "routine_key":
            key = alice.auth_key
        elif case == "other_route":
            route = "POST /anp/other"
        elif case == "other_did":
            did = bob.did
        elif case == "foreign_key":
            key = bob.human_key
        conf = sign_human_confirmation(did, key, route, clock)
        if case == "stale":
            clock.advance(auth.SKEW_WINDOW + 1)
        log = AuditLog()
        decision = authorize_operation(self.ROUTE, "high", alice.did_document(), lambda r, d: conf, log, clock)
        assert decision.reason == auth.HUMAN_SIGNATURE_INVALID
        assert len(log) == 1

    def test_confirmation_header_round_trip(self, alice, clock):
        conf = sign_human_confirmation(alice.did, alice.human_key, self.ROUTE, clock)
        assert HumanConfirmation.parse(conf.to_header()) == conf


def test_random_header_bytes_never_raise(alice, clock, resolver):
    rng = random.Random(7)
    original = signed(alice, clock)
    header = original.to_header()
    for _ in range(500):
        chars = list(header)
        i = rng.randrange(len(chars))
        chars[i] = chr(rng.randrange(32, 127))
        mutated = "".join(chars)
        result = verify_request(mutated, "POST", URL, resolver, NonceStore(), clock)
        if result.accepted:
            # only an encoding-equivalent header may pass, e.g. unused base64 padding bits
            assert AuthHeader.parse(mutated) == original
