"""Node configuration: what a node hosts and how it treats each route."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any, Mapping
from urllib.parse import urlsplit

from anp.auth import DEFAULT_TOKEN_TTL, RiskClass
from anp.description import AdDocument, parse_agent_description
from anp.discovery import DEFAULT_PAGE_SIZE, DEFAULT_REFRESH_INTERVAL, WELL_KNOWN_PATH
from anp.encoding import canonical_json
from anp.errors import AnpError, ConfigInvalidError
from anp.identity import DidDocument, DidId, did_to_https_url, parse_did, validate_did_document
from anp.metaproto import ProtocolDescriptor

NEGOTIATE = "POST /anp/negotiate"
HANDSHAKE = "POST /anp/handshake"
MESSAGE = "POST /anp/message"
REGISTER = "POST /anp/register"
SEARCH = "GET /anp/search"
NEGOTIATION_CACHE = "GET /anp/negotiation-cache"
TRANSFER = "POST /anp/transfer"

DEFAULT_RISK_TABLE: Mapping[str, str] = MappingProxyType(
    {
        NEGOTIATE: "low",
        HANDSHAKE: "low",
        MESSAGE: "low",
        REGISTER: "low",
        SEARCH: "low",
        NEGOTIATION_CACHE: "low",
        TRANSFER: "high",
    }
)


@dataclass(frozen=True)
class ProtocolExamples:
    """A protocol a config-driven node will agree to, answered from a fixed example table."""

    descriptor: ProtocolDescriptor
    examples: tuple[tuple[Any, Any], ...]

    def handler(self, message: Any) -> Any:
        key = canonical_json(message)
        for given, expected in self.examples:
            if canonical_json(given) == key:
                return expected
        raise KeyError("no example for this input")

    @classmethod
    def from_json(cls, data: Mapping[str, Any]) -> "ProtocolExamples":
        examples = tuple((e["input"], e["expected"]) for e in data.get("examples", ()))
        return cls(ProtocolDescriptor.from_json(data["descriptor"]), examples)


@dataclass(frozen=True)
class NodeConfig:
    """Everything a node serves.

    ``did`` is the node's own identity: it issues tokens and owns the primary
    AD document. ``served_agents`` lists further AD documents hosted on the same
    domain; every hosted agent needs its DID document in ``did_documents``.
    """

    domain: str
    did: DidId
    key_store_path: str | None = None
    ad_document: AdDocument | None = None
    served_agents: tuple[AdDocument, ...] = ()
    did_documents: tuple[DidDocument, ...] = ()
    page_size: int = DEFAULT_PAGE_SIZE
    risk_table: Mapping[str, str] = field(default_factory=lambda: dict(DEFAULT_RISK_TABLE))
    index_enabled: bool = False
    refresh_interval: float = DEFAULT_REFRESH_INTERVAL
    token_ttl: int = DEFAULT_TOKEN_TTL
    allow_insecure: bool = False
    well_known_path: str = WELL_KNOWN_PATH
    protocols: tuple[ProtocolExamples, ...] = ()

    @property
    def host(self) -> str:
        return self.domain.replace("%3A", ":")

    @property
    def agents(self) -> tuple[AdDocument, ...]:
        """Primary AD first, then the other served agents."""
        own = (self.ad_document,) if self.ad_document is not None else ()
        return own + tuple(a for a in self.served_agents if a is not self.ad_document)

    def did_document(self, did: DidId) -> DidDocument | None:
        return next((d for d in self.did_documents if d.id == did), None)

    def validate(self) -> None:
        """Raise ConfigInvalidError listing every problem found."""
        problems: list[str] = []
        if self.did.domain != self.domain:
            problems.append(f"node DID {self.did} is not on domain {self.domain}")
        if self.page_size < 1:
            problems.append("page_size must be >= 1")
        if self.refresh_interval <= 0:
            problems.append("refresh_interval must be positive")
        if self.token_ttl <= 0:
            problems.append("token_ttl must be positive")
        for route, risk in self.risk_table.items():
            if risk not in (RiskClass.LOW.value, RiskClass.HIGH.value):
                problems.append(f"risk for {route} must be low or high")
        seen_dids: set[DidId] = set()
        for doc in self.did_documents:
            if doc.id in seen_dids:
                problems.append(f"duplicate DID document for {doc.id}")
            seen_dids.add(doc.id)
            if doc.id.domain != self.domain:
                problems.append(f"DID document {doc.id} is not on domain {self.domain}")
            problems += [f"{doc.id}: {p}" for p in validate_did_document(doc)]
        if self.did not in seen_dids:
            problems.append(f"no DID document for the node DID {self.did}")
        if self.ad_document is not None and self.ad_document.did != self.did:
            problems.append("ad_document must describe the node DID")
        seen_urls: set[str] = set()
        for ad in self.agents:
            if ad.id in seen_urls:
                problems.append(f"duplicate AD URL {ad.id}")
            seen_urls.add(ad.id)
            if urlsplit(ad.id).netloc.lower() != self.host:
                problems.append(f"AD {ad.id} is not hosted on {self.host}")
            did_doc = self.did_document(ad.did)
            if did_doc is None:
                problems.append(f"no DID document for agent {ad.did}")
            elif did_doc.agent_description_url not in (None, ad.id):
                problems.append(f"DID document of {ad.did} points at {did_doc.agent_description_url}, not {ad.id}")
        if problems:
            raise ConfigInvalidError("; ".join(problems))

    @classmethod
    def from_json(cls, data: Mapping[str, Any], base_dir: str | Path = ".") -> "NodeConfig":
        """Build from a JSON config object; documents may be inline or file paths.

        Raises:
            ConfigInvalidError: missing keys, unreadable files or invalid values.
        """
        base = Path(base_dir)

        def load(item: Any) -> Any:
            if isinstance(item, str):
                return (base / item).read_bytes()
            return json.dumps(item).encode("utf-8")

        try:
            did = parse_did(data["did"])
            allow_insecure = bool(data.get("allow_insecure", False))
            ad = data.get("ad_document")
            ad_doc = parse_agent_description(load(ad), allow_insecure) if ad is not None else None
            served = tuple(parse_agent_description(load(a), allow_insecure) for a in data.get("served_agents", ()))
            did_docs = tuple(DidDocument.deserialize(load(d)) for d in data.get("did_documents", ()))
            risk = dict(DEFAULT_RISK_TABLE)
            risk.update(data.get("risk_table", {}))
            key_store = data.get("key_store_path")
            config = cls(
                domain=str(data.get("domain", did.domain)),
                did=did,
                key_store_path=str(base / key_store) if key_store else None,
                ad_document=ad_doc,
                served_agents=served,
                did_documents=did_docs,
                page_size=int(data.get("page_size", DEFAULT_PAGE_SIZE)),
                risk_table=risk,
                index_enabled=bool(data.get("index_enabled", False)),
                refresh_interval=float(data.get("refresh_interval", DEFAULT_REFRESH_INTERVAL)),
                token_ttl=int(data.get("token_ttl", DEFAULT_TOKEN_TTL)),
                allow_insecure=allow_insecure,
                well_known_path=str(data.get("well_known_path", WELL_KNOWN_PATH)),
                protocols=tuple(ProtocolExamples.from_json(p) for p in data.get("protocols", ())),
            )
        except ConfigInvalidError:
            raise
        except (KeyError, TypeError, ValueError, OSError, AnpError) as exc:
            raise ConfigInvalidError(f"invalid node config: {exc}") from exc
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "NodeConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except (OSError, ValueError) as exc:
            raise ConfigInvalidError(f"cannot read config {path}: {exc}") from exc
        return cls.from_json(data, path.parent)


def did_document_path(did: DidId) -> str:
    return urlsplit(did_to_https_url(did)).path
