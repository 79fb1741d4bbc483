"""Agent discovery: well-known directories, crawling, and a registration index.

Active discovery reads ``/.well-known/agent-descriptions`` (a chain of
CollectionPage documents linked by ``next``). Passive discovery keeps a
registration-fed index that is periodically re-crawled and answers token
overlap queries.
"""

from __future__ import annotations

import json
import re
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Iterator, Sequence
from urllib.parse import quote, urlencode, urlsplit

from anp.auth import Signer
from anp.clock import Clock, system_clock
from anp.description import ANP_CONTEXT, SCHEMA_ORG_CONTEXT, AdDocument, interface_domains, validate_agent_description
from anp.errors import AnpError
from anp.identity import DidId
from anp.transport import Request, Transport, get

WELL_KNOWN_PATH = "/.well-known/agent-descriptions"
DEFAULT_PAGE_SIZE = 100
DEFAULT_REFRESH_INTERVAL = 15 * 60
DEFAULT_RETRY_BUDGET = 3

PENDING = "pending"
INDEXED = "indexed"
UNREACHABLE = "unreachable"

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


@dataclass(frozen=True)
class CollectionPage:
    items: tuple[str, ...]
    next: str | None = None
    total: int | None = None
    url: str | None = None

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "@context": [SCHEMA_ORG_CONTEXT, ANP_CONTEXT],
            "type": "CollectionPage",
            "items": list(self.items),
        }
        if self.url is not None:
            out["id"] = self.url
        if self.next is not None:
            out["next"] = self.next
        if self.total is not None:
            out["total"] = self.total
        return out

    @classmethod
    def from_json(cls, data: Any) -> "CollectionPage":
        if not isinstance(data, dict) or data.get("type") != "CollectionPage":
            raise ValueError("not a CollectionPage")
        items = data.get("items")
        if not isinstance(items, list) or not all(isinstance(i, str) for i in items):
            raise ValueError("items must be a list of URLs")
        nxt = data.get("next")
        if nxt is not None and not isinstance(nxt, str):
            raise ValueError("next must be a URL")
        total = data.get("total")
        if total is not None and (type(total) is not int or total < 0):
            raise ValueError("total must be a non-negative integer")
        return cls(tuple(items), nxt, total, data.get("id"))


def page_url(base_url: str, index: int) -> str:
    """URL of the ``index``-th page (0-based); page 0 is the base URL itself."""
    if index == 0:
        return base_url
    sep = "&" if urlsplit(base_url).query else "?"
    return f"{base_url}{sep}{urlencode({'page': index + 1})}"


def build_collection_pages(ad_urls: Sequence[str], page_size: int, base_url: str) -> list[CollectionPage]:
    if page_size < 1:
        raise ValueError("page_size must be >= 1")
    urls = list(ad_urls)
    count = max(1, -(-len(urls) // page_size))
    pages = []
    for i in range(count):
        chunk = tuple(urls[i * page_size:(i + 1) * page_size])
        nxt = page_url(base_url, i + 1) if i + 1 < count else None
        pages.append(CollectionPage(chunk, nxt, len(urls), page_url(base_url, i)))
    return pages


@dataclass(frozen=True)
class CrawlLimits:
    max_pages: int = 1000
    max_agents: int = 100_000
    timeout: float = 60.0
    max_domains: int = 10_000


@dataclass
class CrawlReport:
    domains_visited: int = 0
    pages_fetched: int = 0
    documents_found: list[str] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)
    documents: dict[str, AdDocument] = field(default_factory=dict, repr=False)


class Politeness:
    """Per-domain fetch throttling: bounded concurrency and a minimum spacing.

    Sim mode uses ``min_interval=0`` (unbounded rate); live mode defaults to one
    request per second per domain with at most two in flight.
    """

    def __init__(self, per_domain: int = 2, min_interval: float = 0.0, sleep: Callable[[float], None] = time.sleep):
        self.per_domain = per_domain
        self.min_interval = min_interval
        self.sleep = sleep
        self._lock = threading.Lock()
        self._sems: dict[str, threading.Semaphore] = {}
        self._last: dict[str, float] = {}

    @classmethod
    def live(cls) -> "Politeness":
        return cls(per_domain=2, min_interval=1.0)

    @contextmanager
    def slot(self, url: str) -> Iterator[None]:
        domain = urlsplit(url).netloc.lower()
        with self._lock:
            sem = self._sems.setdefault(domain, threading.Semaphore(self.per_domain))
        with sem:
            if self.min_interval > 0:
                with self._lock:
                    now = time.monotonic()
                    start = max(now, self._last.get(domain, 0.0) + self.min_interval)
                    self._last[domain] = start
                if start > now:
                    self.sleep(start - now)
            yield


_SIM_POLITENESS = Politeness()


def _fetch(fetcher: Transport, url: str, politeness: Politeness) -> Any:
    with politeness.slot(url):
        return get(fetcher, url, {"Accept": "application/json"})


def crawl_domain(
    domain: str,
    fetcher: Transport,
    limits: CrawlLimits = CrawlLimits(),
    *,
    well_known_path: str = WELL_KNOWN_PATH,
    politeness: Politeness = _SIM_POLITENESS,
    deadline: float | None = None,
) -> CrawlReport:
    """Walk one domain's directory pages, following ``next`` links.

    Never raises; failures are recorded in ``report.errors``. A page URL is never
    fetched twice, so a ``next`` cycle terminates with a "pagination cycle" error.
    """
    report = CrawlReport(domains_visited=1)
    if deadline is None:
        deadline = time.monotonic() + limits.timeout
    url: str | None = f"https://{domain}{well_known_path}"
    visited: set[str] = set()
    found: set[str] = set()
    while url is not None:
        if url in visited:
            report.errors.append((url, "pagination cycle"))
            break
        if report.pages_fetched >= limits.max_pages:
            report.errors.append((url, "max pages reached"))
            break
        if time.monotonic() > deadline:
            report.errors.append((url, "timeout"))
            break
        visited.add(url)
        resp = _fetch(fetcher, url, politeness)
        report.pages_fetched += 1
        if not resp.ok:
            report.errors.append((url, f"HTTP {resp.status}"))
            break
        try:
            page = CollectionPage.from_json(resp.json())
        except ValueError as exc:
            report.errors.append((url, f"invalid collection page: {exc}"))
            break
        for item in page.items:
            if len(report.documents_found) >= limits.max_agents:
                break
            if item not in found:
                found.add(item)
                report.documents_found.append(item)
        if len(report.documents_found) >= limits.max_agents:
            break
        url = page.next
    return report


def crawl_network(
    seed_domains: Iterable[str],
    fetcher: Transport,
    limits: CrawlLimits = CrawlLimits(),
    *,
    well_known_path: str = WELL_KNOWN_PATH,
    politeness: Politeness = _SIM_POLITENESS,
    workers: int = 8,
    allow_insecure: bool = False,
) -> CrawlReport:
    """Breadth-first traversal of the agent web from ``seed_domains``.

    Each domain's directory is crawled, each newly listed AD document is fetched,
    and the hosts of the documents and of their interface endpoints become the
    next level. Fetched and parsed documents are kept in ``report.documents``.
    """
    deadline = time.monotonic() + limits.timeout
    report = CrawlReport()
    visited_domains: set[str] = set()
    seen_docs: set[str] = set()
    queue: deque[str] = deque()
    for d in seed_domains:
        d = d.lower()
        if d not in visited_domains:
            visited_domains.add(d)
            queue.append(d)

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        while queue:
            if time.monotonic() > deadline:
                report.errors.append((queue[0], "timeout"))
                break
            level = list(queue)
            queue.clear()
            budget_left = limits.max_agents - len(report.documents_found)
            new_docs: list[str] = []
            for domain in level:
                if report.domains_visited >= limits.max_domains:
                    report.errors.append((domain, "max domains reached"))
                    continue
                sub = crawl_domain(
                    domain,
                    fetcher,
                    limits,
                    well_known_path=well_known_path,
                    politeness=politeness,
                    deadline=deadline,
                )
                report.domains_visited += sub.domains_visited
                report.pages_fetched += sub.pages_fetched
                report.errors.extend(sub.errors)
                for url in sub.documents_found:
                    if url not in seen_docs and len(new_docs) < budget_left:
                        seen_docs.add(url)
                        new_docs.append(url)

            results = pool.map(lambda u: (u, _fetch(fetcher, u, politeness)), new_docs)
            for url, resp in results:
                report.documents_found.append(url)
                if not resp.ok:
                    report.errors.append((url, f"HTTP {resp.status}"))
                    continue
                doc, violations = validate_agent_description(resp.body, allow_insecure=allow_insecure)
                if doc is None:
                    report.errors.append((url, "invalid AD document: " + "; ".join(violations[:3])))
                    continue
                report.documents[url] = doc
                for host in [urlsplit(url).netloc.lower(), *interface_domains(doc)]:
                    if host and host not in visited_domains:
                        visited_domains.add(host)
                        queue.append(host)
            if len(report.documents_found) >= limits.max_agents:
                break
    return report


@dataclass
class Registration:
    ad_url: str
    registrant: str
    registered_at: float
    last_crawled: float | None = None
    status: str = PENDING


@dataclass(frozen=True)
class IndexEntry:
    ad_url: str
    did: DidId
    name: str
    capability_terms: frozenset[str]
    name_terms: frozenset[str]
    fetched_at: float

    @property
    def terms(self) -> frozenset[str]:
        return self.capability_terms | self.name_terms


def index_entry(ad_url: str, doc: AdDocument, fetched_at: float) -> IndexEntry:
    cap_terms: set[str] = set()
    for cap in doc.capabilities:
        cap_terms |= tokenize(cap.name) | tokenize(cap.description)
    return IndexEntry(ad_url, doc.did, doc.name, frozenset(cap_terms), frozenset(tokenize(doc.name)), fetched_at)


@dataclass(frozen=True)
class RegistrationOutcome:
    accepted: bool
    reason: str | None = None


class SearchIndex:
    """Registration-fed agent index.

    Writers (registration, refresh) serialize on one lock and swap immutable
    entries in whole; queries read a consistent snapshot.
    """

    def __init__(
        self,
        refresh_interval: float = DEFAULT_REFRESH_INTERVAL,
        retry_budget: int = DEFAULT_RETRY_BUDGET,
        backoff: float = 1.0,
        allow_insecure: bool = False,
    ) -> None:
        self.refresh_interval = refresh_interval
        self.retry_budget = retry_budget
        self.backoff = backoff
        self.allow_insecure = allow_insecure
        self.registrations: dict[str, Registration] = {}
        self.entries: dict[str, IndexEntry] = {}
        self._lock = threading.Lock()

    def register(self, ad_url: str, registrant: str, now: float) -> RegistrationOutcome:
        with self._lock:
            if ad_url in self.registrations:
                return RegistrationOutcome(False, "duplicate")
            self.registrations[ad_url] = Registration(ad_url, registrant, now)
        return RegistrationOutcome(True)

    def status(self, ad_url: str) -> str | None:
        reg = self.registrations.get(ad_url)
        return reg.status if reg else None

    def due(self, now: float) -> list[str]:
        with self._lock:
            return sorted(
                r.ad_url
                for r in self.registrations.values()
                if r.last_crawled is None or now - r.last_crawled >= self.refresh_interval
            )

    def snapshot(self) -> dict[str, IndexEntry]:
        with self._lock:
            return dict(self.entries)

    def query(self, terms: Iterable[str], limit: int = 10) -> list[tuple[str, int]]:
        wanted: set[str] = set()
        for term in terms:
            wanted |= tokenize(term)
        if not wanted or limit < 1:
            return []
        with self._lock:
            entries = list(self.entries.values())
            unreachable = {u for u, r in self.registrations.items() if r.status == UNREACHABLE}
        scored = [
            (e.ad_url, len(wanted & e.terms)) for e in entries if e.ad_url not in unreachable
        ]
        scored = [s for s in scored if s[1] > 0]
        scored.sort(key=lambda s: (-s[1], s[0]))
        return scored[:limit]


def query(index: SearchIndex, terms: Iterable[str], limit: int = 10) -> list[tuple[str, int]]:
    return index.query(terms, limit)


@dataclass
class RefreshReport:
    started_at: float
    fetched: list[str] = field(default_factory=list)
    indexed: list[str] = field(default_factory=list)
    unreachable: list[str] = field(default_factory=list)
    errors: list[tuple[str, str]] = field(default_factory=list)


def index_refresh(
    index: SearchIndex,
    fetcher: Transport,
    clock: Clock = system_clock,
    sleep: Callable[[float], None] = time.sleep,
    politeness: Politeness = _SIM_POLITENESS,
) -> RefreshReport:
    """Re-fetch every registration that is due; never raises."""
    started = clock()
    report = RefreshReport(started)
    for url in index.due(started):
        doc = None
        reason = ""
        for attempt in range(max(1, index.retry_budget)):
            if attempt:
                sleep(index.backoff * 2 ** (attempt - 1))
            resp = _fetch(fetcher, url, politeness)
            report.fetched.append(url)
            if not resp.ok:
                reason = f"HTTP {resp.status}"
                continue
            doc, violations = validate_agent_description(resp.body, allow_insecure=index.allow_insecure)
            if doc is None:
                reason = "invalid AD document: " + "; ".join(violations[:3])
                break
            break
        now = clock()
        with index._lock:
            reg = index.registrations.get(url)
            if reg is None:
                continue
            reg.last_crawled = now
            if doc is not None:
                index.entries[url] = index_entry(url, doc, now)
                reg.status = INDEXED
                report.indexed.append(url)
            else:
                index.entries.pop(url, None)
                reg.status = UNREACHABLE
                report.unreachable.append(url)
                report.errors.append((url, reason))
    return report


def register(index_endpoint: str, ad_url: str, auth: Signer | None, transport: Transport) -> RegistrationOutcome:
    """POST an AD URL to a search service's ``/anp/register`` endpoint."""
    headers = {"Content-Type": "application/json"}
    if auth is not None:
        headers["Authorization"] = auth.header("POST", index_endpoint)
    resp = transport.send(
        Request("POST", index_endpoint, headers, json.dumps({"adUrl": ad_url}).encode("utf-8"))
    )
    if resp.status == 201:
        return RegistrationOutcome(True)
    if resp.status == 409:
        return RegistrationOutcome(False, "duplicate")
    if resp.status == 401:
        return RegistrationOutcome(False, "unauthenticated")
    return RegistrationOutcome(False, f"HTTP {resp.status}")


def search(
    search_endpoint: str, terms: Sequence[str], auth: Signer | None, transport: Transport, limit: int = 10
) -> list[tuple[str, float]]:
    """Query a search service's ``/anp/search`` endpoint."""
    url = f"{search_endpoint}?{urlencode({'q': ' '.join(terms), 'limit': limit}, quote_via=quote)}"
    headers = {"Authorization": auth.header("GET", url)} if auth else {}
    resp = get(transport, url, headers)
    if not resp.ok:
        raise AnpError(f"search failed with HTTP {resp.status}")
    return [(r["adUrl"], r["score"]) for r in resp.json()["results"]]

