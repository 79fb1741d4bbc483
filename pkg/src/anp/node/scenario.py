"""Closed-loop scenario: discover, verify, authenticate, negotiate, talk, index.

One actor starts from a single seed hostname and works through every agent it
can reach. Each step produces one result per target; a target that fails a step
is skipped by the later ones.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from typing import Sequence

from anp.description import verify_description
from anp.discovery import CrawlLimits, CrawlReport, crawl_network, tokenize
from anp.errors import AnpError
from anp.metaproto import Phase, ProtocolDescriptor
from anp.node.client import AgentClient, endpoint, strip_to_schema
from anp.node.config import NEGOTIATION_CACHE
from anp.node.netgen import SUM_PROTOCOLS, SUM_REQUIREMENT, SUM_VECTORS, SimDeployment, sum_negotiator

DEFAULT_SCRIPT = ("crawl", "verify", "authenticate", "negotiate", "handshake", "exchange", "register", "refresh", "query")

PASS, FAIL, SKIP = "pass", "fail", "skip"


@dataclass(frozen=True)
class StepResult:
    step: str
    target: str
    status: str
    detail: str = ""


@dataclass
class ScenarioReport:
    results: list[StepResult] = field(default_factory=list)
    discovered: list[str] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.status == PASS for r in self.results)

    @property
    def failures(self) -> list[StepResult]:
        return [r for r in self.results if r.status != PASS]

    def step(self, name: str) -> list[StepResult]:
        return [r for r in self.results if r.step == name]

    def summary(self) -> dict[str, dict[str, int]]:
        out: dict[str, dict[str, int]] = {}
        for r in self.results:
            out.setdefault(r.step, {PASS: 0, FAIL: 0, SKIP: 0})[r.status] += 1
        return out


def end_to_end_scenario(
    deployment: SimDeployment,
    script: Sequence[str] = DEFAULT_SCRIPT,
    *,
    limits: CrawlLimits = CrawlLimits(),
) -> ScenarioReport:
    """Run ``script`` from the deployment's actor and report per-target outcomes."""
    started = time.monotonic()
    report = ScenarioReport()
    net = deployment.network
    actor = deployment.actor
    client = AgentClient(actor.keys, net.transport(deployment.seed), deployment.nodes[deployment.seed].clock)
    negotiator = sum_negotiator(clock=client.clock)
    crawl: CrawlReport | None = None
    alive: dict[str, bool] = {}
    agreed: dict[str, ProtocolDescriptor] = {}

    def record(step: str, target: str, ok: bool, detail: str = "") -> None:
        report.results.append(StepResult(step, target, PASS if ok else FAIL, detail))
        if not ok:
            alive[target] = False

    def targets(step: str) -> list[str]:
        live = []
        for url in report.discovered:
            if alive.get(url, True):
                live.append(url)
            else:
                report.results.append(StepResult(step, url, SKIP, "earlier step failed"))
        return live

    def target_doc(url: str):
        assert crawl is not None
        return crawl.documents[url]

    for step in script:
        if step == "crawl":
            crawl = crawl_network([deployment.seed], net.transport(deployment.seed), limits)
            report.discovered = [u for u in crawl.documents_found if u != actor.url]
            for url in report.discovered:
                alive[url] = url in crawl.documents
            record("crawl", deployment.seed, bool(report.discovered),
                   f"{len(crawl.documents)} documents, {crawl.pages_fetched} pages, {len(crawl.errors)} errors")
            continue
        if crawl is None:
            raise AnpError("the scenario script must start with crawl")
        if step == "verify":
            for url in targets(step):
                check = verify_description(target_doc(url), client.resolver)
                record(step, url, check.verified, check.reason or "")
        elif step == "authenticate":
            for url in targets(step):
                host = target_doc(url).did.host
                if client.token_for(host):
                    record(step, url, True, "token reused")
                    continue
                resp = client.request("GET", endpoint(host, NEGOTIATION_CACHE))
                record(step, url, resp.ok and client.token_for(host) is not None, f"HTTP {resp.status}")
        elif step == "negotiate":
            for url in targets(step):
                try:
                    result = client.negotiate(
                        target_doc(url).did.host, SUM_REQUIREMENT, SUM_PROTOCOLS, negotiator, SUM_VECTORS
                    )
                except AnpError as exc:
                    record(step, url, False, str(exc))
                    continue
                ok = result.initiator.phase is Phase.LIVE
                if ok:
                    agreed[url] = result.initiator.descriptor()
                record(step, url, ok, f"{result.counter_rounds} counter rounds, {result.messages} messages")
        elif step == "handshake":
            for url in targets(step):
                try:
                    client.handshake(target_doc(url).did)
                    record(step, url, True)
                except AnpError as exc:
                    record(step, url, False, str(exc))
        elif step == "exchange":
            for n, url in enumerate(targets(step)):
                desc = agreed.get(url, SUM_PROTOCOLS[0])
                payload = {"a": n, "b": 1, "private_note": "never leaves the actor"}
                try:
                    reply = client.send_json(target_doc(url).did, payload, desc)
                except AnpError as exc:
                    record(step, url, False, str(exc))
                    continue
                record(step, url, reply == strip_to_schema(payload, desc), json.dumps(reply, sort_keys=True))
        elif step == "register":
            if deployment.index_host is None:
                raise AnpError("register needs a deployment with an index")
            for url in targets(step):
                outcome = client.register(deployment.index_host, url)
                record(step, url, outcome.accepted or outcome.reason == "duplicate", outcome.reason or "registered")
        elif step == "refresh":
            index_node = deployment.nodes[deployment.index_host] if deployment.index_host else None
            if index_node is None or index_node.index is None:
                raise AnpError("refresh needs a deployment with an index")
            index_node.refresh_index()
            indexed = set(index_node.index.snapshot())
            for url in targets(step):
                record(step, url, url in indexed, "indexed" if url in indexed else index_node.index.status(url) or "")
        elif step == "query":
            for url in targets(step):
                terms = sorted(tokenize(target_doc(url).name))
                try:
                    hits = [u for u, _ in client.search(deployment.index_host or "", terms, limit=100)]
                except AnpError as exc:
                    record(step, url, False, str(exc))
                    continue
                record(step, url, url in hits, f"{len(hits)} hits")
        else:
            raise AnpError(f"unknown scenario step: {step}")
    report.elapsed = time.monotonic() - started
    return report
