"""Agent network protocol: did:wba identity, request authentication, encrypted
envelopes, agent descriptions, discovery, and protocol negotiation."""

from anp.errors import AnpError

__version__ = "0.1.0"

__all__ = ["AnpError", "__version__"]
