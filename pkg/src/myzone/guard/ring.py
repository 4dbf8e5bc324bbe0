"""Chord ring of rendezvous servers.

Node ids are SHA-1 of the server address (160-bit space). ``successor(k)``
is the first live node whose id is ``>= k``, wrapping to the smallest id.
Each node keeps a successor list and a finger table (``finger[i]`` is the
successor of ``id + 2**i``); lookups route greedily through the closest
preceding finger.

Malicious nodes are selective: their policy applies only to lookups and
locate requests about victim usernames, and only when they are the node
answering the request. As intermediate routing hops they forward honestly.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Iterable, Optional

from ..crypto import ID_BITS, ID_SPACE, dual_hash, ring_id
from ..errors import Unreachable

SUCCESSOR_LIST = 4


@dataclass(frozen=True)
class MaliciousPolicy:
    drop_lookup: bool = False    # refuse to answer or forward
    misroute: bool = False       # answer with colluding nodes
    claim_key: bool = False      # answer with itself
    bad_peer_info: bool = False  # return altered connection info
    sybil_spawn: bool = False    # spawns virtual nodes (see sybil probe)
    selectivity: frozenset = frozenset()  # victim usernames; empty = everyone

    @property
    def active(self) -> bool:
        return self.drop_lookup or self.misroute or self.claim_key or self.bad_peer_info or self.sybil_spawn

    def targets(self, username: str) -> bool:
        return not self.selectivity or username in self.selectivity


CORRECT = MaliciousPolicy()


@dataclass(frozen=True)
class ContactInfo:
    username: str
    contact: str
    genuine: bool = True


@dataclass
class RingNode:
    address: str
    node_id: int
    policy: MaliciousPolicy = CORRECT
    successors: list = field(default_factory=list)
    fingers: list = field(default_factory=list)
    predecessor: Optional["RingNode"] = None
    alive: bool = True
    registrations: dict = field(default_factory=dict)  # username -> ContactInfo

    @property
    def malicious(self) -> bool:
        return self.policy.active

    @property
    def successor(self) -> "RingNode":
        return self.successors[0]

    def __repr__(self) -> str:
        return f"RingNode({self.address})"

    def __hash__(self) -> int:
        return hash(self.node_id)

    def __eq__(self, other) -> bool:
        return isinstance(other, RingNode) and other.node_id == self.node_id


def in_half_open(x: int, a: int, b: int) -> bool:
    """x in (a, b] on the ring."""
    if a < b:
        return a < x <= b
    return x > a or x <= b


def in_open(x: int, a: int, b: int) -> bool:
    """x in (a, b) on the ring."""
    if a < b:
        return a < x < b
    return x > a or x < b


class ChordRing:
    def __init__(self):
        self.nodes: dict[int, RingNode] = {}
        self._sorted: list[int] = []
        self._cache: dict = {}
        self.isolated: set[str] = set()
        # victim -> addresses the coalition knows the victim has marked
        self.burned: dict[str, set] = {}
        self.lookups = 0
        self.hops = 0

    # --- construction -------------------------------------------------
    @classmethod
    def build(cls, addresses: Iterable[str], policies: dict | None = None) -> "ChordRing":
        ring = cls()
        policies = policies or {}
        for addr in addresses:
            node = RingNode(addr, ring_id(addr), policies.get(addr, CORRECT))
            if node.node_id in ring.nodes:
                raise ValueError(f"id collision for {addr}")
            ring.nodes[node.node_id] = node
        ring._resort()
        ring.rebuild()
        return ring

    def _resort(self) -> None:
        self._sorted = sorted(i for i, n in self.nodes.items() if n.alive)
        self._cache.clear()

    def live_nodes(self) -> list[RingNode]:
        return [self.nodes[i] for i in self._sorted]

    def by_address(self, address: str) -> RingNode:
        for n in self.nodes.values():
            if n.address == address:
                return n
        raise KeyError(address)

    def true_successor(self, key: int) -> RingNode:
        """Brute-force oracle over the live nodes."""
        ids = self._sorted
        if not ids:
            raise Unreachable("empty ring")
        i = bisect.bisect_left(ids, key % ID_SPACE)
        return self.nodes[ids[i % len(ids)]]

    def rebuild(self) -> None:
        """Exact successor lists and fingers for every live node."""
        ids = self._sorted
        k = len(ids)
        for pos, nid in enumerate(ids):
            node = self.nodes[nid]
            node.successors = [self.nodes[ids[(pos + j) % k]] for j in range(1, min(SUCCESSOR_LIST, k) + 1)] or [node]
            node.predecessor = self.nodes[ids[(pos - 1) % k]]
            node.fingers = [self.true_successor(nid + (1 << i)) for i in range(ID_BITS)]
        self._cache.clear()

    # --- standard chord maintenance -----------------------------------
    def join(self, address: str, via: Optional[RingNode] = None, policy: MaliciousPolicy = CORRECT) -> RingNode:
        node = RingNode(address, ring_id(address), policy)
        if node.node_id in self.nodes:
            raise ValueError(f"id collision for {address}")
        if via is None or not self._sorted:
            node.successors = [node]
            node.fingers = [node] * ID_BITS
            node.predecessor = None
        else:
            succ, _ = self.route(via, node.node_id)
            node.successors = [succ]
            node.fingers = [succ] * ID_BITS
        self.nodes[node.node_id] = node
        self._resort()
        return node

    def stabilize(self) -> None:
        """One stabilize + notify round at every live node, in id order."""
        for node in self.live_nodes():
            succ = self._first_live_successor(node)
            x = succ.predecessor
            if x is not None and x.alive and in_open(x.node_id, node.node_id, succ.node_id):
                succ = x
            tail = [s for s in succ.successors if s.alive and s is not node][:SUCCESSOR_LIST - 1]
            node.successors = [succ] + [s for s in tail if s is not succ]
            # notify
            p = succ.predecessor
            if p is None or not p.alive or in_open(node.node_id, p.node_id, succ.node_id):
                succ.predecessor = node
        self._cache.clear()

    def _first_live_successor(self, node: RingNode) -> RingNode:
        for s in node.successors:
            if s.alive:
                return s
        return node

    def fix_fingers(self) -> None:
        for node in self.live_nodes():
            node.fingers = [self.route(node, node.node_id + (1 << i))[0] for i in range(ID_BITS)]
        self._cache.clear()

    # --- lookup ---------------------------------------------------------
    def _closest_preceding(self, node: RingNode, key: int) -> RingNode:
        for f in reversed(node.fingers):
            if f.alive and in_open(f.node_id, node.node_id, key):
                return f
        return self._first_live_successor(node)

    def route(self, start: RingNode, key: int) -> tuple[RingNode, int]:
        """Honest iterative lookup from ``start``; returns (successor, hops)."""
        key %= ID_SPACE
        node = start
        hops = 0
        for _ in range(4 * ID_BITS):
            succ = self._first_live_successor(node)
            if node is succ or in_half_open(key, node.node_id, succ.node_id):
                return succ, hops
            nxt = self._closest_preceding(node, key)
            if nxt is node:
                return succ, hops
            node = nxt
            hops += 1
        raise Unreachable("lookup did not converge")

    def lookup(self, start: RingNode, key: int) -> tuple[RingNode, int]:
        cached = self._cache.get((start.node_id, key))
        if cached is None:
            cached = self.route(start, key)
            self._cache[(start.node_id, key)] = cached
        self.lookups += 1
        self.hops += cached[1]
        return cached

    def colluders(self, node: RingNode, victim: str = "") -> tuple[RingNode, RingNode]:
        """Malicious nodes a misrouting ``node`` hands out.

        The next malicious nodes in id order that ``victim`` has not marked
        yet; ``node`` itself when none is left.
        """
        burned = self.burned.get(victim, ())
        bad = [n for n in self.live_nodes() if n.malicious and n is not node and n.address not in burned]
        if not bad:
            return node, node
        after = [n for n in bad if n.node_id > node.node_id] + [n for n in bad if n.node_id <= node.node_id]
        return after[0], after[1 % len(after)]

    def locate_rendezvous_servers(self, via: RingNode, username: str) -> tuple[RingNode, RingNode]:
        """The two servers responsible for ``username`` as answered by ``via``."""
        if not via.alive:
            raise Unreachable(f"{via.address} is down")
        pol = via.policy
        if pol.active and pol.targets(username):
            if pol.drop_lookup:
                raise Unreachable(f"{via.address} dropped the lookup")
            if pol.claim_key:
                return via, via
            if pol.misroute:
                return self.colluders(via, username)
        id_a, id_b = dual_hash(username)
        return self.lookup(via, id_a)[0], self.lookup(via, id_b)[0]

    def locate_peer(self, server: RingNode, username: str) -> Optional[ContactInfo]:
        if not server.alive:
            raise Unreachable(f"{server.address} is down")
        info = server.registrations.get(username)
        if info is None:
            return None
        pol = server.policy
        if pol.bad_peer_info and pol.targets(username):
            return ContactInfo(username, info.contact + "?", genuine=False)
        return info

    # --- registrations and isolation ---------------------------------------
    def register_at_successors(self, username: str, contact: str) -> tuple[RingNode, RingNode]:
        id_a, id_b = dual_hash(username)
        y, z = self.true_successor(id_a), self.true_successor(id_b)
        info = ContactInfo(username, contact)
        y.registrations[username] = info
        z.registrations[username] = info
        return y, z

    def isolate(self, node: RingNode) -> None:
        """Remove ``node`` and repair every routing table that pointed at it."""
        node.alive = False
        self.isolated.add(node.address)
        self._resort()
        self.rebuild()

    def holders_of(self, node: RingNode) -> list[RingNode]:
        """Live nodes with ``node`` in their routing state."""
        return [n for n in self.live_nodes() if n is not node
                and (node in n.successors or node in n.fingers or n.predecessor is node)]


def make_addresses(count: int, prefix: str = "rv") -> list[str]:
    return [f"{prefix}-{i}.ring.example:7000" for i in range(count)]
