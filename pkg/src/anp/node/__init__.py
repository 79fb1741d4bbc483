"""Node runtime: configuration, key storage, the service, and network harnesses."""

from anp.node.client import AgentClient, strip_to_schema
from anp.node.config import DEFAULT_RISK_TABLE, NodeConfig
from anp.node.keys import AgentKeys, load_keys, save_keys
from anp.node.scenario import ScenarioReport, end_to_end_scenario
from anp.node.service import Node
from anp.node.sim import LogEntry, Proxy, SimNetwork, connect_network, serve

__all__ = [
    "AgentClient",
    "AgentKeys",
    "DEFAULT_RISK_TABLE",
    "LogEntry",
    "Node",
    "NodeConfig",
    "Proxy",
    "ScenarioReport",
    "SimNetwork",
    "connect_network",
    "end_to_end_scenario",
    "load_keys",
    "save_keys",
    "serve",
    "strip_to_schema",
]
