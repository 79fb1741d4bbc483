"""Generate small simulated agent networks for tests, demos and benchmarks."""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Any

from anp.clock import Clock, system_clock
from anp.description import (
    AdDocument,
    Capability,
    CapabilityKind,
    InterfaceDecl,
    build_agent_description,
    sign_description,
)
from anp.identity import DidDocument, DidId
from anp.metaproto import (
    Capabilities,
    Negotiator,
    ProtocolDescriptor,
    Requirement,
    SchemaField,
    Transport,
)
from anp.node.config import MESSAGE, NodeConfig
from anp.node.keys import AgentKeys
from anp.node.service import Node
from anp.node.sim import Proxy, SimNetwork, serve

VOCABULARY = (
    "weather", "forecast", "booking", "hotel", "flight", "translate", "summarize",
    "invoice", "payment", "calendar", "schedule", "recipe", "news", "stocks", "maps",
    "routing", "shopping", "reviews", "music", "search",
)

SUM_FIELDS = (SchemaField("a", "number"), SchemaField("b", "number"))
SUM_REQUIREMENT = Requirement("add two numbers", SUM_FIELDS, (SchemaField("sum", "number"),))
SUM_VECTORS = (({"a": 1, "b": 2}, {"sum": 3}), ({"a": -5, "b": 5}, {"sum": 0}), ({"a": 0.5, "b": 0.25}, {"sum": 0.75}))


def sum_descriptor(variant: str) -> ProtocolDescriptor:
    return ProtocolDescriptor(Transport.HTTP_JSON, SUM_FIELDS, f"sum protocol, variant {variant}")


SUM_PROTOCOLS = tuple(sum_descriptor(v) for v in ("alpha", "beta", "gamma"))


def sum_handler(message: Any) -> Any:
    return {"sum": message["a"] + message["b"]}


def sum_negotiator(descriptors=SUM_PROTOCOLS, clock: Clock = system_clock) -> Negotiator:
    negotiator = Negotiator(Capabilities(tuple(descriptors)), clock=clock)
    for desc in descriptors:
        negotiator.register_handler(desc, sum_handler)
    return negotiator


@dataclass(frozen=True)
class SimAgent:
    keys: AgentKeys
    did_document: DidDocument
    description: AdDocument

    @property
    def url(self) -> str:
        return self.description.id


def make_agent(
    did: DidId,
    name: str,
    capabilities: tuple[Capability, ...] = (),
    extra_interfaces: tuple[InterfaceDecl, ...] = (),
    clock: Clock = system_clock,
) -> SimAgent:
    """Keys, DID document and signed AD document for one agent."""
    keys = AgentKeys.generate(did)
    suffix = "/".join(did.path_segments) or "node"
    url = f"https://{did.host}/{suffix}/ad.json"
    message_iface = InterfaceDecl("anp-message", f"https://{did.host}{MESSAGE.split(' ')[1]}", "1")
    ad = build_agent_description(
        did, name, capabilities, (message_iface, *extra_interfaces), ad_url=url, owner=f"https://{did.host}/"
    )
    signed = sign_description(ad, keys.auth_key, did.key_url(keys.auth_key.key_id), clock)
    return SimAgent(keys, keys.did_document(url), signed)


@dataclass
class SimDeployment:
    network: SimNetwork
    nodes: dict[str, Node]
    agents: dict[str, SimAgent]
    seed: str
    actor: SimAgent
    index_host: str | None
    proxies: dict[tuple[str, str], Proxy] = field(default_factory=dict)

    @property
    def expected_urls(self) -> set[str]:
        return set(self.agents)


def generate_network(
    domains: int = 3,
    agents: int = 25,
    page_size: int = 2,
    *,
    seed: int = 0,
    clock: Clock = system_clock,
    index_domain: int | None = -1,
    proxied: bool = False,
) -> SimDeployment:
    """Spread ``agents`` over ``domains`` chained by interface links.

    Domain ``i`` lists a partner interface on domain ``i+1``, so a crawl from the
    first domain reaches every agent. The first agent on each domain is the
    node identity (a path-less DID); the actor is the seed node's identity.
    """
    if domains < 1 or agents < domains:
        raise ValueError("need at least one agent per domain")
    rng = random.Random(seed)
    hosts = [f"node{i}.example" for i in range(domains)]
    per_domain: list[list[SimAgent]] = [[] for _ in hosts]
    for n in range(agents):
        d = n % domains
        host = hosts[d]
        first = not per_domain[d]
        did = DidId(host) if first else DidId(host, ("agents", f"a{n}"))
        caps = tuple(
            Capability(word, f"{word} service offered by agent {n}", rng.choice(list(CapabilityKind)))
            for word in rng.sample(VOCABULARY, 2)
        )
        extra = ()
        if first and d + 1 < domains:
            extra = (InterfaceDecl("anp-meta-protocol", f"https://{hosts[d + 1]}/anp/negotiate", "1"),)
        per_domain[d].append(make_agent(did, f"agent {n} {caps[0].name}", caps, extra, clock))

    network = SimNetwork()
    nodes: dict[str, Node] = {}
    index_host = hosts[index_domain] if index_domain is not None else None
    for host, members in zip(hosts, per_domain):
        config = NodeConfig(
            domain=host,
            did=members[0].keys.did,
            ad_document=members[0].description,
            served_agents=tuple(m.description for m in members[1:]),
            did_documents=tuple(m.did_document for m in members),
            page_size=page_size,
            index_enabled=host == index_host,
        )
        nodes[host] = serve(
            config, [m.keys for m in members], network, negotiator=sum_negotiator(clock=clock), clock=clock
        )
    proxies: dict[tuple[str, str], Proxy] = {}
    if proxied:
        for a in hosts:
            for b in hosts:
                if a < b:
                    proxies[(a, b)] = network.add_proxy(Proxy(f"proxy-{a}-{b}"), a, b)
    all_agents = {m.url: m for members in per_domain for m in members}
    return SimDeployment(network, nodes, all_agents, hosts[0], per_domain[0][0], index_host, proxies)
