"""NAT traversal by hole punching, over a deterministic simulated network."""
from .core import Endpoint, PeerId, SessionKey, Transport, parse_endpoint
from .natbox import MappingPolicy, NatBox, NatConfig, PortAlloc, Unsolicited
from .natcheck import NatProfile, classify, run_natcheck
from .puncher import PeerClient, PunchOutcome, PunchSession, PunchState, Path
from .rendezvous import RendezvousServer
from .simnet import Network, SECOND, MS

__all__ = ["Endpoint", "PeerId", "SessionKey", "Transport", "parse_endpoint",
           "MappingPolicy", "NatBox", "NatConfig", "PortAlloc", "Unsolicited",
           "NatProfile", "classify", "run_natcheck",
           "PeerClient", "PunchOutcome", "PunchSession", "PunchState", "Path",
           "RendezvousServer", "Network", "SECOND", "MS"]
__version__ = "0.1.0"
