"""Operator command line: ``anp <command> ...``.

Exit status is 0 on success, 1 when the protocol says no (verification failed,
negotiation failed, peer rejected the request) and 2 for usage errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import threading
from pathlib import Path
from typing import Any, Sequence
from urllib.parse import urlsplit

from anp.clock import system_clock
from anp.description import (
    Capability,
    CapabilityKind,
    Contact,
    InterfaceDecl,
    build_agent_description,
    parse_agent_description,
    sign_description,
    validate_agent_description,
    verify_description,
)
from anp.discovery import CrawlLimits, crawl_network
from anp.encoding import multibase_encode
from anp.errors import AnpError
from anp.identity import ED25519, X25519, DidDocument, DidResolver, KeyClass, generate_keypair, parse_did
from anp.metaproto import Capabilities, Negotiator, Phase, ProtocolDescriptor, Requirement
from anp.node.client import AgentClient, endpoint
from anp.node.config import REGISTER, SEARCH, NodeConfig
from anp.node.keys import AgentKeys, agent_keys_from, load_keys, passphrase_from_env, save_keys
from anp.node.server import NodeServer
from anp.node.service import Node
from anp.transport import HttpTransport, get

KEY_FILE = "keys.enc"
DID_FILE = "did.json"


class UsageError(Exception):
    """Bad arguments or unreadable input files (exit status 2)."""


def _emit(data: Any) -> None:
    print(json.dumps(data, indent=2, ensure_ascii=False))


def _read(path: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc


def _read_json(path: str) -> Any:
    try:
        return json.loads(_read(path))
    except ValueError as exc:
        raise UsageError(f"{path} is not JSON: {exc}") from exc


def _write(path: str | None, data: bytes) -> None:
    if path is None:
        sys.stdout.write(data.decode("utf-8") + "\n")
    else:
        Path(path).write_bytes(data)


def _transport(args: argparse.Namespace) -> HttpTransport:
    return HttpTransport(timeout=args.timeout, plain_http=args.plain_http)


def _identity(args: argparse.Namespace) -> AgentKeys:
    directory = Path(args.identity)
    doc = DidDocument.deserialize(_read(str(directory / DID_FILE)))
    did, keys = load_keys(directory / KEY_FILE, passphrase_from_env())
    if did != str(doc.id):
        raise AnpError(f"key store belongs to {did}, not {doc.id}")
    return agent_keys_from(doc.id, keys)


def _client(args: argparse.Namespace) -> AgentClient:
    return AgentClient(_identity(args), _transport(args))


def _route_url(base: str, route: str) -> str:
    parts = urlsplit(base)
    if not parts.netloc:
        raise UsageError(f"not a URL: {base}")
    if parts.path in ("", "/"):
        return endpoint(parts.netloc, route)
    return base


# -- commands -----------------------------------------------------------------


def cmd_keygen(args: argparse.Namespace) -> int:
    algorithm = ED25519 if args.algorithm == "ed25519" else X25519
    key_class = KeyClass.HUMAN_AUTHORIZATION if args.key_class == "human" else KeyClass.ROUTINE
    if algorithm == X25519 and key_class is KeyClass.HUMAN_AUTHORIZATION:
        raise UsageError("human-authorization keys must be ed25519")
    key = generate_keypair(algorithm, key_class, args.key_id)
    did = parse_did(args.did) if args.did else None
    save_keys(args.out, did or "unbound", [key], passphrase_from_env())
    _emit({
        "keyId": key.key_id,
        "algorithm": key.algorithm,
        "keyClass": key.key_class.value,
        "publicKeyMultibase": multibase_encode(key.algorithm, key.public_key),
    })
    return 0


def cmd_did_init(args: argparse.Namespace) -> int:
    did = parse_did(args.did)
    directory = Path(args.identity)
    if (directory / KEY_FILE).exists() and not args.force:
        raise UsageError(f"{directory / KEY_FILE} exists; pass --force to replace it")
    keys = AgentKeys.generate(did, with_human_key=not args.no_human_key)
    directory.mkdir(parents=True, exist_ok=True)
    all_keys = keys.routine_keys + ([keys.human_key] if keys.human_key else [])
    save_keys(directory / KEY_FILE, did, all_keys, passphrase_from_env())
    doc = keys.did_document(args.ad_url)
    (directory / DID_FILE).write_bytes(doc.serialize())
    _emit(doc.to_json())
    return 0


def cmd_did_show(args: argparse.Namespace) -> int:
    if args.did:
        doc = DidResolver(_transport(args)).resolve(parse_did(args.did))
    else:
        doc = DidDocument.deserialize(_read(str(Path(args.identity) / DID_FILE)))
    _emit(doc.to_json())
    return 0


def _capability(text: str) -> Capability:
    name, sep, rest = text.partition(":")
    kind, sep2, description = rest.partition(":")
    if not (sep and sep2) or not name:
        raise UsageError(f"capability must look like name:kind:description, got {text!r}")
    try:
        return Capability(name, description, CapabilityKind(kind))
    except ValueError as exc:
        kinds = ", ".join(k.value for k in CapabilityKind)
        raise UsageError(f"unknown capability kind {kind!r}; use one of {kinds}") from exc


def _interface(text: str) -> InterfaceDecl:
    protocol, sep, url = text.partition("=")
    if not sep or not protocol or not url:
        raise UsageError(f"interface must look like protocol=https://endpoint, got {text!r}")
    return InterfaceDecl(protocol, url, "1")


def cmd_ad_build(args: argparse.Namespace) -> int:
    doc = DidDocument.deserialize(_read(str(Path(args.identity) / DID_FILE)))
    ad_url = args.ad_url or doc.agent_description_url
    if not ad_url:
        raise UsageError("give --ad-url or bind one in the DID document with did init --ad-url")
    contact = Contact(args.email, args.contact_url) if args.email or args.contact_url else None
    ad = build_agent_description(
        doc.id,
        args.name,
        [_capability(c) for c in args.capability],
        [_interface(i) for i in args.interface],
        contact,
        ad_url=ad_url,
        owner=args.owner,
    )
    _write(args.out, ad.serialize())
    return 0


def cmd_ad_sign(args: argparse.Namespace) -> int:
    ad = parse_agent_description(_read(args.file), args.allow_insecure)
    keys = _identity(args)
    if ad.did != keys.did:
        raise UsageError(f"document describes {ad.did}, identity is {keys.did}")
    signed = sign_description(ad.unsigned(), keys.auth_key, keys.did.key_url(keys.auth_key.key_id), system_clock)
    _write(args.out or args.file, signed.serialize())
    return 0


def cmd_ad_validate(args: argparse.Namespace) -> int:
    transport = _transport(args)
    if urlsplit(args.source).scheme in ("http", "https"):
        resp = get(transport, args.source)
        if not resp.ok:
            print(f"fetch failed: HTTP {resp.status}", file=sys.stderr)
            return 1
        raw = resp.body
    else:
        raw = _read(args.source)
    doc, violations = validate_agent_description(raw, args.allow_insecure)
    result: dict[str, Any] = {"valid": doc is not None, "violations": violations}
    if doc is not None and args.verify:
        check = verify_description(doc, DidResolver(transport))
        result["verified"] = check.verified
        result["reason"] = check.reason
    _emit(result)
    return 0 if result["valid"] and result.get("verified", True) else 1


def cmd_serve(args: argparse.Namespace) -> int:
    config = NodeConfig.load(args.config)
    if not config.key_store_path:
        raise UsageError("config needs key_store_path")
    did, keys = load_keys(config.key_store_path, passphrase_from_env())
    if did != str(config.did):
        raise AnpError(f"key store belongs to {did}, config names {config.did}")
    node = Node(config, [agent_keys_from(config.did, keys)], _transport(args))
    server = NodeServer(node, args.host, args.port)
    stop = threading.Event()

    def refresher() -> None:
        while not stop.wait(min(config.refresh_interval, 60.0)):
            node.refresh_index()

    if node.index is not None:
        threading.Thread(target=refresher, daemon=True).start()
    print(f"serving {config.domain} as {config.did} on {args.host}:{server.port}", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        stop.set()
        server.httpd.server_close()
    return 0


def cmd_crawl(args: argparse.Namespace) -> int:
    limits = CrawlLimits(max_pages=args.max_pages, max_agents=args.max_agents, timeout=args.crawl_timeout)
    report = crawl_network([args.domain], _transport(args), limits, allow_insecure=args.allow_insecure)
    _emit({
        "domainsVisited": report.domains_visited,
        "pagesFetched": report.pages_fetched,
        "agents": [{"adUrl": u, "name": d.name, "did": str(d.did)} for u, d in report.documents.items()],
        "errors": [{"url": u, "error": e} for u, e in report.errors],
    })
    return 0 if report.documents else 1


def cmd_register(args: argparse.Namespace) -> int:
    client = _client(args)
    resp = client.post_json(_route_url(args.index_url, REGISTER), {"adUrl": args.ad_url})
    try:
        body = resp.json()
    except ValueError:
        body = resp.body.decode("utf-8", "replace")
    _emit({"status": resp.status, "body": body})
    return 0 if resp.status == 201 else 1


def cmd_search(args: argparse.Namespace) -> int:
    client = _client(args)
    host = urlsplit(_route_url(args.index_url, SEARCH)).netloc
    _emit([{"adUrl": u, "score": s} for u, s in client.search(host, args.terms, args.limit)])
    return 0


def _vector_handler(vectors: Sequence[tuple[Any, Any]]):
    table = {json.dumps(i, sort_keys=True): e for i, e in vectors}

    def handler(message: Any) -> Any:
        return table[json.dumps(message, sort_keys=True)]

    return handler


def cmd_negotiate(args: argparse.Namespace) -> int:
    request = _read_json(args.requirement)
    try:
        requirement = Requirement.from_json(request["requirement"])
        candidates = [ProtocolDescriptor.from_json(c) for c in request["candidates"]]
        vectors = [(v["input"], v["expected"]) for v in request.get("vectors", [])]
    except (KeyError, TypeError) as exc:
        raise UsageError(f"requirement file needs requirement, candidates and vectors: {exc}") from exc
    if not vectors:
        raise UsageError("at least one test vector is required")
    client = _client(args)
    peer = client.fetch_description(args.peer_ad_url, args.allow_insecure)
    negotiator = Negotiator(Capabilities(candidates))
    for desc in candidates:
        negotiator.register_handler(desc, _vector_handler(vectors))
    result = client.negotiate(peer.did.host, requirement, candidates, negotiator, vectors)
    session = result.initiator
    _emit({
        "peer": str(peer.did),
        "phase": session.phase.value,
        "protocolId": session.agreed,
        "counterRounds": result.counter_rounds,
        "messages": result.messages,
        "failure": session.failure,
    })
    return 0 if session.phase is Phase.LIVE else 1


def cmd_send(args: argparse.Namespace) -> int:
    client = _client(args)
    reply = client.send(parse_did(args.peer_did), _read(args.message))
    try:
        sys.stdout.write(reply.decode("utf-8") + "\n")
    except UnicodeDecodeError:
        sys.stdout.write(reply.hex() + "\n")
    return 0


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="anp", description="Agent network node and tools")
    parser.add_argument("--identity", default="anp-identity", help="identity directory (default: %(default)s)")
    parser.add_argument("--plain-http", action="store_true", help="talk plain HTTP to https:// URLs (local testing)")
    parser.add_argument("--timeout", type=float, default=10.0, help="per-request timeout in seconds")
    parser.add_argument("--allow-insecure", action="store_true", help="accept http:// endpoints in AD documents")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("keygen", help="generate one key into an encrypted key store")
    p.add_argument("--algorithm", choices=("ed25519", "x25519"), default="ed25519")
    p.add_argument("--class", dest="key_class", choices=("routine", "human"), default="routine")
    p.add_argument("--key-id")
    p.add_argument("--did", help="DID the key belongs to")
    p.add_argument("--out", required=True, help="key store file to write")
    p.set_defaults(func=cmd_keygen)

    did = sub.add_parser("did", help="DID documents").add_subparsers(dest="did_command", required=True)
    p = did.add_parser("init", help="create keys and a DID document in the identity directory")
    p.add_argument("did")
    p.add_argument("--ad-url", help="AD document URL to bind in the DID document")
    p.add_argument("--no-human-key", action="store_true")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_did_init)
    p = did.add_parser("show", help="print the local DID document, or resolve a remote one")
    p.add_argument("did", nargs="?")
    p.set_defaults(func=cmd_did_show)

    ad = sub.add_parser("ad", help="agent description documents").add_subparsers(dest="ad_command", required=True)
    p = ad.add_parser("build", help="build an unsigned AD document for the local identity")
    p.add_argument("--name", required=True)
    p.add_argument("--capability", action="append", default=[], metavar="NAME:KIND:DESCRIPTION")
    p.add_argument("--interface", action="append", default=[], metavar="PROTOCOL=URL")
    p.add_argument("--ad-url")
    p.add_argument("--owner")
    p.add_argument("--email")
    p.add_argument("--contact-url")
    p.add_argument("--out")
    p.set_defaults(func=cmd_ad_build)
    p = ad.add_parser("sign", help="sign an AD document with the local identity")
    p.add_argument("file")
    p.add_argument("--out", help="output file (default: overwrite the input)")
    p.set_defaults(func=cmd_ad_sign)
    p = ad.add_parser("validate", help="validate an AD document file or URL")
    p.add_argument("source")
    p.add_argument("--verify", action="store_true", help="also check the proof against the DID document")
    p.set_defaults(func=cmd_ad_validate)

    p = sub.add_parser("serve", help="run a node")
    p.add_argument("--config", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("crawl", help="crawl the agent web from one domain")
    p.add_argument("domain")
    p.add_argument("--max-agents", type=int, default=CrawlLimits.max_agents)
    p.add_argument("--max-pages", type=int, default=CrawlLimits.max_pages)
    p.add_argument("--crawl-timeout", type=float, default=CrawlLimits.timeout)
    p.set_defaults(func=cmd_crawl)

    p = sub.add_parser("register", help="register an AD URL with a search index")
    p.add_argument("index_url")
    p.add_argument("ad_url")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("search", help="query a search index")
    p.add_argument("index_url")
    p.add_argument("terms", nargs="+")
    p.add_argument("--limit", type=int, default=10)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("negotiate", help="negotiate a protocol with the agent behind an AD URL")
    p.add_argument("peer_ad_url")
    p.add_argument("--requirement", required=True, help="JSON file with requirement, candidates, vectors")
    p.set_defaults(func=cmd_negotiate)

    p = sub.add_parser("send", help="send an encrypted message and print the reply")
    p.add_argument("peer_did")
    p.add_argument("--message", required=True, help="file whose bytes are sent")
    p.set_defaults(func=cmd_send)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"anp: error: {exc}", file=sys.stderr)
        return 2
    except AnpError as exc:
        print(f"anp: {exc.code}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
