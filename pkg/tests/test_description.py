import json
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anp import description as desc
from anp.description import (
    AdDocument,
    Capability,
    CapabilityKind,
    Contact,
    InterfaceDecl,
    build_agent_description,
    canonicalize,
    interface_domains,
    parse_agent_description,
    sign_description,
    validate_agent_description,
    verify_description,
)
from anp.errors import DescriptionError, DuplicateCapabilityNameError, FetchFailureError

AD_URL = "https://alice.example/agents/alice/ad.json"


def make_doc(keys, **overrides):
    fields = dict(
        capabilities=[Capability("search", "find things", CapabilityKind.TOOL), Capability("book")],
        interfaces=[InterfaceDecl("anp-negotiate", "https://alice.example/anp/negotiate")],
        contact=Contact("ops@alice.example"),
        ad_url=AD_URL,
        owner="Alice Inc.",
    )
    fields.update(overrides)
    return build_agent_description(keys.did, "Alice", **fields)


@pytest.fixture
def signed_doc(alice, clock):
    return sign_description(make_doc(alice), alice.auth_key, f"{alice.did}#key-1", clock)


@pytest.fixture
def resolve(alice):
    doc = alice.did_document(AD_URL)
    return lambda did: doc


class TestBuild:
    def test_security_tracks_did(self, alice):
        doc = make_doc(alice)
        assert doc.to_json()["security"] == {"scheme": "didwba", "did": str(alice.did)}

    def test_empty_name(self, alice):
        with pytest.raises(ValueError):
            build_agent_description(alice.did, "", ad_url=AD_URL)

    def test_duplicate_capability(self, alice):
        with pytest.raises(DuplicateCapabilityNameError):
            make_doc(alice, capabilities=[Capability("a"), Capability("a", "again")])

    def test_interface_domains(self, alice):
        doc = make_doc(
            alice,
            interfaces=[
                InterfaceDecl("p", "https://b.example/x"),
                InterfaceDecl("q", "https://B.example/y"),
                InterfaceDecl("r", "https://c.example/z"),
            ],
        )
        assert interface_domains(doc) == ["b.example", "c.example"]


class TestCanonical:
    def test_excludes_proof_and_is_sorted(self, signed_doc):
        raw = canonicalize(signed_doc)
        assert b"proof" not in raw
        data = json.loads(raw)
        assert raw == json.dumps(data, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode()

    def test_same_for_reparsed_document(self, signed_doc):
        again = parse_agent_description(signed_doc.serialize())
        assert canonicalize(again) == canonicalize(signed_doc)


class TestSignVerify:
    def test_verifies(self, signed_doc, resolve):
        assert verify_description(signed_doc, resolve).verified

    def test_proof_shape(self, signed_doc, alice):
        proof = signed_doc.to_json()["proof"]
        assert proof["verificationMethod"] == f"{alice.did}#key-1"
        assert proof["created"] == "2023-11-14T22:13:20Z"

    def test_unsigned(self, alice, resolve):
        assert verify_description(make_doc(alice), resolve).reason == desc.NO_PROOF

    @pytest.mark.parametrize(
        "mutate",
        [
            lambda d: replace(d, name="Mallory"),
            lambda d: replace(d, owner=None),
            lambda d: replace(d, capabilities=d.capabilities[:1]),
            lambda d: replace(d, interfaces=(replace(d.interfaces[0], endpoint="https://evil.example/n"),)),
            lambda d: replace(d, contact=Contact("x@evil.example")),
            lambda d: replace(d, anp_version="1.1"),
        ],
    )
    def test_any_change_breaks_signature(self, signed_doc, resolve, mutate):
        assert verify_description(mutate(signed_doc), resolve).reason == desc.BAD_SIGNATURE

    def test_human_key_not_accepted(self, alice, resolve, clock):
        doc = sign_description(make_doc(alice), alice.human_key, f"{alice.did}#human-1", clock)
        assert verify_description(doc, resolve).reason == desc.UNKNOWN_METHOD

    def test_method_of_another_did(self, alice, bob, resolve, clock):
        doc = sign_description(make_doc(alice), bob.auth_key, f"{bob.did}#key-1", clock)
        assert verify_description(doc, resolve).reason == desc.UNKNOWN_METHOD

    def test_binding_mismatch(self, alice, clock):
        doc = sign_description(make_doc(alice), alice.auth_key, f"{alice.did}#key-1", clock)
        other = alice.did_document("https://alice.example/other/ad.json")
        assert verify_description(doc, lambda d: other).reason == desc.BINDING_MISMATCH

    def test_resolution_failure(self, signed_doc):
        def fail(did):
            raise FetchFailureError("offline")

        assert verify_description(signed_doc, fail).reason == desc.RESOLUTION_FAILURE


class TestValidate:
    def test_round_trip(self, signed_doc):
        doc, violations = validate_agent_description(signed_doc.serialize())
        assert violations == [] and doc == signed_doc

    @pytest.mark.parametrize("field", desc.REQUIRED_FIELDS)
    def test_missing_required_field(self, signed_doc, field):
        data = signed_doc.to_json()
        del data[field]
        doc, violations = validate_agent_description(json.dumps(data))
        assert doc is None
        assert f"missing required field: {field}" in violations

    @pytest.mark.parametrize(
        "patch,expected",
        [
            ({"extra": 1}, "unknown field: extra"),
            ({"@context": ["https://schema.org"]}, "@context lacks the ANP vocabulary"),
            ({"anpVersion": "2.0"}, "unsupported anpVersion: '2.0'"),
            ({"id": "http://alice.example/ad.json"}, "insecure document id: http://alice.example/ad.json"),
            ({"name": ""}, "name must be nonempty"),
            ({"did": "did:web:x"}, None),
            ({"security": {"scheme": "oauth", "did": "did:wba:alice.example:agents:alice"}}, None),
            ({"capabilities": [{"name": "a", "description": "", "kind": "magic"}]}, "invalid capability kind: 'magic'"),
            ({"capabilities": [{"name": "a", "description": "", "kind": "tool"}] * 2}, "duplicate capability name: a"),
            ({"interfaces": [{"protocol": "p", "endpoint": "ftp://x/y", "version": "1",
                              "inputDescription": "", "outputDescription": ""}]}, "unsupported endpoint scheme: ftp://x/y"),
            ({"contact": {"phone": "1"}}, None),
            ({"proof": {"verificationMethod": "x"}}, None),
        ],
    )
    def test_violations(self, signed_doc, patch, expected):
        data = {**signed_doc.to_json(), **patch}
        doc, violations = validate_agent_description(json.dumps(data))
        assert doc is None and violations
        if expected is not None:
            assert expected in violations

    def test_reports_every_violation(self, signed_doc):
        data = signed_doc.to_json()
        del data["name"]
        data["bogus"] = True
        data["anpVersion"] = "9"
        _, violations = validate_agent_description(json.dumps(data))
        assert len(violations) == 3

    def test_insecure_allowed_in_dev_mode(self, alice):
        doc = make_doc(alice, ad_url="http://alice.example/ad.json",
                       interfaces=[InterfaceDecl("p", "http://alice.example/n")])
        assert validate_agent_description(doc.serialize())[0] is None
        assert validate_agent_description(doc.serialize(), allow_insecure=True)[0] == doc

    @pytest.mark.parametrize("raw", [b"", b"[]", b"{", "\"str\""])
    def test_not_an_object(self, raw):
        assert validate_agent_description(raw)[0] is None

    def test_parse_raises(self):
        with pytest.raises(DescriptionError):
            parse_agent_description("{}")

    def test_optional_lists_may_be_absent(self, signed_doc):
        data = signed_doc.to_json()
        del data["capabilities"], data["interfaces"]
        doc, violations = validate_agent_description(json.dumps(data))
        assert violations == []
        assert doc.capabilities == () and doc.interfaces == ()


_text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=20)
_capabilities = st.lists(
    st.builds(Capability, st.text(min_size=1, max_size=10), _text, st.sampled_from(list(CapabilityKind))),
    max_size=4,
    unique_by=lambda c: c.name,
)
_interfaces = st.lists(
    st.builds(InterfaceDecl, _text, st.from_regex(r"https://[a-z]{1,8}\.example/[a-z]{0,8}", fullmatch=True),
              _text, _text, _text),
    max_size=3,
)


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=30), _capabilities, _interfaces, st.one_of(st.none(), _text))
def test_any_built_document_round_trips(name, capabilities, interfaces, owner):
    from anp.identity import DidId

    doc = build_agent_description(
        DidId("prop.example", ("x",)), name, capabilities, interfaces, ad_url="https://prop.example/ad.json", owner=owner
    )
    parsed, violations = validate_agent_description(doc.serialize())
    assert violations == []
    assert parsed == doc
    assert canonicalize(parsed) == canonicalize(doc)


def test_document_is_frozen(signed_doc):
    with pytest.raises(AttributeError):
        signed_doc.name = "x"  # type: ignore[misc]
    assert isinstance(signed_doc, AdDocument)
