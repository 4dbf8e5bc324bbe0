"""Protocol kernel and deterministic simulation harness for a decentralized
private social network: certificate authority, rendezvous and relay servers,
peers behind NATs, a guarded chord overlay of rendezvous servers, and a
profile replication engine with ranked mirrors.
"""

__version__ = "0.1.0"
