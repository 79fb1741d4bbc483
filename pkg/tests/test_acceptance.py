"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""

import json
import random
import time
from dataclasses import replace

import pytest

from anp import auth
from anp.auth import NonceStore, sign_human_confirmation, sign_request, verify_request
from anp.clock import ManualClock
from anp.description import (
    REQUIRED_FIELDS,
    Capability,
    CapabilityKind,
    Contact,
    InterfaceDecl,
    build_agent_description,
    sign_description,
    validate_agent_description,
    verify_description,
)
from anp.discovery import build_collection_pages, crawl_domain, crawl_network
from anp.e2e import Envelope, decrypt, encrypt
from anp.errors import AnpError
from anp.identity import DidId, DidResolver
from anp.metaproto import Capabilities, Negotiator, Phase, ProtocolDescriptor, SchemaField, Transport
from anp.metaproto import negotiate_locally
from anp.node import AgentClient, DEFAULT_RISK_TABLE, Proxy, end_to_end_scenario
from anp.node.client import endpoint
from anp.node.keys import AgentKeys
from anp.node.netgen import (
    SUM_FIELDS,
    SUM_PROTOCOLS,
    SUM_REQUIREMENT,
    SUM_VECTORS,
    generate_network,
    sum_handler,
)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        assert ok, detail

    return emit


def corrupt_once(rng, data):
    """Change exactly one byte (or character) to a different value."""
    i = rng.randrange(len(data))
    if isinstance(data, str):
        alphabet = [chr(c) for c in range(32, 127) if chr(c) != data[i]]
        return data[:i] + rng.choice(alphabet) + data[i + 1:]
    out = bytearray(data)
    out[i] ^= rng.randrange(1, 256)
    return bytes(out)


def test_criterion_1_auth_round_trip_and_replay(web, clock, report):
    started = time.monotonic()
    rng = random.Random(1)
    agents = [AgentKeys.generate(DidId(f"agent{i}.example", ("u", f"n{i}"))) for i in range(20)]
    for a in agents:
        web.publish(a.did_document())
    resolver = DidResolver(web, clock)
    nonces = NonceStore()

    issued = []
    for _ in range(1000):
        a = rng.choice(agents)
        method = rng.choice(["GET", "POST"])
        url = f"https://svc{rng.randrange(5)}.example/anp/{rng.choice(['negotiate', 'message', 'search'])}"
        header = sign_request(a.did, a.auth_key, method, url, clock).to_header()
        issued.append((header, method, url))
    accepted = sum(verify_request(h, m, u, resolver, nonces, clock).accepted for h, m, u in issued)
    replays = [verify_request(h, m, u, resolver, nonces, clock).reason for h, m, u in issued]
    replay_rejected = replays.count(auth.REPLAYED_NONCE)

    corrupt_accepted = 0
    for _ in range(10_000):
        header, method, url = rng.choice(issued)
        mutated = corrupt_once(rng, header)
        # fresh nonce store: a corruption must fail on its own merits, not because the nonce was used
        if verify_request(mutated, method, url, resolver, NonceStore(), clock).accepted:
            corrupt_accepted += 1
    elapsed = time.monotonic() - started

    ok = accepted == 1000 and replay_rejected == 1000 and corrupt_accepted == 0 and elapsed < 30
    report(1, ok, f"{accepted}/1000 accepted, {replay_rejected}/1000 replays rejected, "
                  f"{corrupt_accepted}/10000 corruptions accepted, {elapsed:.1f}s (< 30s)")


def test_criterion_2_single_round_trip(clock, report):
    dep = generate_network(domains=3, agents=6, clock=clock)
    target = "node1.example"
    node = dep.nodes[target]
    client = AgentClient(dep.actor.keys, dep.network.transport(dep.seed), clock)
    url = endpoint(target, "GET /anp/negotiation-cache")

    mark, fetches = dep.network.mark(), node.resolver.fetch_count
    first = client.request("GET", url)
    entries = dep.network.since(mark)
    on_route = [e for e in entries if e.route == "GET /anp/negotiation-cache"]
    first_resolutions = node.resolver.fetch_count - fetches

    follow_resolutions, follow_ok = 0, True
    for _ in range(10):
        fetches = node.resolver.fetch_count
        follow_ok &= client.request("GET", url).ok
        follow_resolutions += node.resolver.fetch_count - fetches
    token_used = client.token_for(target) is not None

    ok = first.ok and len(on_route) == 2 and first_resolutions <= 1 and follow_ok and token_used \
        and follow_resolutions == 0
    report(2, ok, f"first request: {len(on_route)} messages, {first_resolutions} DID resolution(s); "
                  f"10 token follow-ups: {follow_resolutions} resolutions")


def test_criterion_3_e2e_proxy_opacity(clock, report):
    rng = random.Random(3)
    dep = generate_network(domains=2, agents=4, clock=clock, proxied=True)
    proxy: Proxy = dep.proxies[("node0.example", "node1.example")]
    node = dep.nodes["node1.example"]
    peer = DidId("node1.example")
    client = AgentClient(dep.actor.keys, dep.network.transport(dep.seed), clock)

    plaintexts = [rng.randbytes(rng.randint(16, 512)) for _ in range(1000)]
    replies_ok = sum(client.send(peer, p) == p for p in plaintexts)
    received_ok = [r.plaintext for r in node.inbox] == plaintexts

    wire = proxy.wire
    owner = {}
    for n, p in enumerate(plaintexts):
        for i in range(len(p) - 7):
            owner.setdefault(p[i:i + 8], n)
    leaked = {owner[w] for w in (wire[i:i + 8] for i in range(len(wire) - 7)) if w in owner}
    leaks = len(leaked)

    session = node._sessions[client.sessions[peer].session_id]
    sender = client.sessions[peer]
    envelopes = [encrypt(replace(sender), p).to_bytes() for p in plaintexts[:50]]
    baseline = replace(session, recv_counter=session.recv_counter)
    survived = 0
    for _ in range(10_000):
        mutated = corrupt_once(rng, rng.choice(envelopes))
        try:
            decrypt(replace(baseline), Envelope.from_bytes(mutated))
            survived += 1
        except AnpError:
            pass

    ok = replies_ok == 1000 and received_ok and leaks == 0 and survived == 0 and len(wire) > 0
    report(3, ok, f"{replies_ok}/1000 round trips decrypted, recipient inbox match={received_ok}, "
                  f"{leaks} plaintexts with an 8-byte window visible to the proxy ({len(wire)} bytes observed), "
                  f"{survived}/10000 corruptions authenticated")


def test_criterion_4_discovery_completeness(clock, report):
    started = time.monotonic()
    dep = generate_network(domains=3, agents=25, page_size=2, clock=clock)
    # oracle: every AD each node is configured to serve
    oracle = {ad.id for node in dep.nodes.values() for ad in node.config.agents}
    crawl = crawl_network([dep.seed], dep.network.transport("crawler.example"))
    found = set(crawl.documents)

    from conftest import StaticTransport

    mismatches = 0
    cases = 0
    for n in range(51):
        urls = [f"https://d.example/ad/{i}.json" for i in range(n)]
        for k in range(1, 11):
            web = StaticTransport()
            for page in build_collection_pages(urls, k, "https://d.example/.well-known/agent-descriptions"):
                web.put(page.url, json.dumps(page.to_json()).encode())
            cases += 1
            if crawl_domain("d.example", web).documents_found != urls:
                mismatches += 1
    elapsed = time.monotonic() - started

    ok = len(oracle) == 25 and found == oracle and not crawl.errors and mismatches == 0 and elapsed < 10
    report(4, ok, f"{len(found & oracle)}/{len(oracle)} discovered, {len(found - oracle)} extra, "
                  f"pagination round-trip {cases - mismatches}/{cases} (N<=50, k<=10), {elapsed:.2f}s (< 10s)")


def test_criterion_5_negotiation_convergence(report):
    started = time.monotonic()
    rng = random.Random(5)
    universe = [ProtocolDescriptor(Transport.HTTP_JSON, SUM_FIELDS, f"variant {i}") for i in range(12)]

    def party(descs):
        n = Negotiator(Capabilities(tuple(descs)))
        for d in descs:
            n.register_handler(d, sum_handler)
        return n

    live = failed = bad = countered = 0
    max_rounds_seen = 0
    for _ in range(1000):
        mine = rng.sample(universe, rng.randint(1, 6))
        theirs = rng.sample(universe, rng.randint(1, 6))
        # proposing a prefix of what the initiator supports forces counter-offers on some trials
        candidates = mine[:rng.randint(1, len(mine))]
        intersection = {d.protocol_id for d in mine} & {d.protocol_id for d in theirs}
        a, b = party(mine), party(theirs)
        result = negotiate_locally(SUM_REQUIREMENT, candidates, a, b, SUM_VECTORS)
        rounds = 1 + result.counter_rounds
        if intersection:
            max_rounds_seen = max(max_rounds_seen, rounds)
            countered += result.counter_rounds > 0
            good = (
                result.initiator.phase is Phase.LIVE
                and result.responder.phase is Phase.LIVE
                and result.initiator.agreed == result.responder.agreed
                and result.initiator.agreed in intersection
                and rounds <= 2
            )
            live += good
        else:
            good = (
                result.initiator.phase is Phase.FAILED
                and result.counter_rounds <= a.max_rounds
            )
            failed += good
        bad += not good
    elapsed = time.monotonic() - started

    ok = bad == 0 and elapsed < 60
    report(5, ok, f"{live} live in <= {max_rounds_seen} rounds ({countered} via a counter), {failed} empty intersections failed, "
                  f"{bad} violations, {elapsed:.1f}s (< 60s)")


def test_criterion_6_negotiation_cache(clock, report):
    dep = generate_network(domains=2, agents=2, clock=clock)
    target = "node1.example"
    client = AgentClient(dep.actor.keys, dep.network.transport(dep.seed), clock)
    # the first candidate is one the responder does not speak
    private = ProtocolDescriptor(Transport.HTTP_JSON, (SchemaField("a", "number"), SchemaField("b", "number")),
                                 "sum protocol, private variant")
    shared = SUM_PROTOCOLS[1]
    initiator = Negotiator(Capabilities((private, shared)), clock=clock)
    for d in (private, shared):
        initiator.register_handler(d, sum_handler)

    uncached = client.negotiate(target, SUM_REQUIREMENT, [private], initiator, SUM_VECTORS)
    cached = client.negotiate(target, SUM_REQUIREMENT, [private], initiator, SUM_VECTORS)
    ok = (
        uncached.initiator.phase is Phase.LIVE
        and uncached.counter_rounds >= 1
        and cached.initiator.phase is Phase.LIVE
        and cached.counter_rounds == 0
        and cached.initiator.agreed == uncached.initiator.agreed == shared.protocol_id
    )
    report(6, ok, f"uncached: {uncached.counter_rounds} counter round(s); cached: {cached.counter_rounds} "
                  f"counter rounds, cached descriptor chosen={cached.initiator.agreed == shared.protocol_id}")


def _random_document(rng, keys, clock):
    words = ["weather", "hotel", "flight", "maps", "news", "pay", "calendar", "translate"]
    caps = [
        Capability(f"{w}{i}", " ".join(rng.sample(words, 2)), rng.choice(list(CapabilityKind)))
        for i, w in enumerate(rng.sample(words, rng.randint(0, 4)))
    ]
    ifaces = [
        InterfaceDecl(rng.choice(["anp-message", "anp-meta-protocol"]), f"https://h{rng.randrange(9)}.example/{w}")
        for w in rng.sample(words, rng.randint(0, 3))
    ]
    contact = rng.choice([None, Contact("ops@x.example"), Contact(url="https://x.example/c")])
    name = "".join(rng.choice("abcdefgh ÄÖ日本") for _ in range(rng.randint(1, 20)))
    doc = build_agent_description(keys.did, name, caps, ifaces, contact,
                                  ad_url="https://x.example/agents/a/ad.json",
                                  owner=rng.choice([None, "Owner Ltd"]))
    return sign_description(doc, keys.auth_key, f"{keys.did}#key-1", clock)


def _mutations(data):
    """Every single-field change to the signed content, plus proof tampering."""
    out = []
    for key in sorted(data):
        if key in ("proof", "security", "did"):
            continue
        changed = json.loads(json.dumps(data))
        value = changed[key]
        if isinstance(value, str):
            changed[key] = value + "x" if key != "id" else value + "?v=2"
        elif isinstance(value, list) and key == "@context":
            changed[key] = value + ["https://example.org/extra"]
        elif isinstance(value, list):
            changed[key] = value[:-1] if value else [
                {"name": "new", "description": "", "kind": "tool"} if key == "capabilities" else
                {"protocol": "p", "endpoint": "https://z.example/", "version": "1",
                 "inputDescription": "", "outputDescription": ""}]
        elif isinstance(value, dict):
            changed[key] = {**value, "email": "evil@x.example"}
        out.append(changed)
    if "owner" not in data:
        out.append({**data, "owner": "Someone"})
    for field, value in (("proofValue", None), ("verificationMethod", data["did"] + "#human-1")):
        changed = json.loads(json.dumps(data))
        if value is None:
            sig = bytearray(changed["proof"]["proofValue"], "ascii")
            sig[0] = ord("A") if sig[0] != ord("A") else ord("B")
            value = sig.decode()
        changed["proof"][field] = value
        out.append(changed)
    return out


def test_criterion_7_ad_validation_and_signing(clock, report):
    rng = random.Random(7)
    keys = AgentKeys.generate(DidId("x.example", ("agents", "a")))
    did_doc = keys.did_document("https://x.example/agents/a/ad.json")
    resolve = lambda did: did_doc  # noqa: E731

    round_trips = deletions_caught = deletions = verified = mutations = mutations_caught = 0
    for _ in range(500):
        doc = _random_document(rng, keys, clock)
        raw = doc.serialize()
        parsed, violations = validate_agent_description(raw)
        round_trips += parsed == doc and not violations
        verified += verify_description(parsed or doc, resolve).verified
        data = json.loads(raw)
        for field in REQUIRED_FIELDS:
            deletions += 1
            trimmed = {k: v for k, v in data.items() if k != field}
            result, problems = validate_agent_description(json.dumps(trimmed))
            deletions_caught += result is None and f"missing required field: {field}" in problems
        for changed in _mutations(data):
            mutations += 1
            mutated, _ = validate_agent_description(json.dumps(changed, ensure_ascii=False))
            if mutated is None or not verify_description(mutated, resolve).verified:
                mutations_caught += 1

    ok = round_trips == 500 and verified == 500 and deletions_caught == deletions and mutations_caught == mutations
    report(7, ok, f"{round_trips}/500 round-trips, {verified}/500 signed documents verify, "
                  f"{deletions_caught}/{deletions} required-field deletions caught, "
                  f"{mutations_caught}/{mutations} post-signing mutations rejected")


def test_criterion_8_human_authorization_gate(report):
    decisions = denials_ok = allows_ok = 0
    audit_ok = True
    tables = {"default": dict(DEFAULT_RISK_TABLE), "all-high": {r: "high" for r in DEFAULT_RISK_TABLE}}
    for label, table in tables.items():
        clock = ManualClock()
        dep = generate_network(domains=2, agents=2, clock=clock)
        target = "node1.example"
        node = dep.nodes[target]
        node.config = replace(node.config, risk_table=table)
        client = AgentClient(dep.actor.keys, dep.network.transport(dep.seed), clock)
        for route, risk in table.items():
            method, path = route.split(" ")
            url = f"https://{target}{path}"
            attempts = [
                ("absent", {}),
                ("routine-key", {"Human-Authorization": sign_human_confirmation(
                    client.did, client.keys.auth_key, route, clock).to_header()}),
                ("human-key", {"Human-Authorization": sign_human_confirmation(
                    client.did, client.keys.human_key, route, clock).to_header()}),
            ]
            for kind, headers in attempts:
                before = len(node.audit_log)
                resp = client.request(method, url, b"{}", headers)
                added = node.audit_log.records[before:]
                if risk == "low":
                    audit_ok &= not added and resp.status != 403
                    continue
                decisions += 1
                audit_ok &= len(added) == 1 and added[0].route == route
                if kind == "human-key":
                    allows_ok += resp.status != 403 and added[0].decision == "allow"
                else:
                    denials_ok += resp.status == 403 and added[0].decision == "deny"
    high_routes = sum(1 for t in tables.values() for r in t.values() if r == "high")
    ok = audit_ok and allows_ok == high_routes and denials_ok == 2 * high_routes and decisions == 3 * high_routes
    report(8, ok, f"{high_routes} high-risk route checks over {len(tables)} tables: "
                  f"{denials_ok}/{2 * high_routes} denials without a human key, "
                  f"{allows_ok}/{high_routes} allows with one, one audit record per decision={audit_ok}")


def test_criterion_9_closed_loop_scenario(clock, report):
    started = time.monotonic()
    dep = generate_network(domains=3, agents=25, page_size=2, clock=clock)
    result = end_to_end_scenario(dep)
    elapsed = time.monotonic() - started
    summary = result.summary()
    ok = result.passed and elapsed < 60 and len(result.discovered) == 24 and set(summary) == {
        "crawl", "verify", "authenticate", "negotiate", "handshake", "exchange", "register", "refresh", "query"}
    steps = ", ".join(f"{s} {c['pass']}/{sum(c.values())}" for s, c in summary.items())
    report(9, ok, f"{steps}; {elapsed:.2f}s (< 60s)")
