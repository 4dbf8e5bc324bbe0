"""Guarded registration: cross-check the servers a random entry node names
for a peer against a server vouched for by a reachable friend.

One run:

1. pick an entry server X uniformly from the unmarked live servers;
2. ask X for the servers (Y, Z) responsible for the peer's two ids;
3. for each friend j: ask Y and Z for j's servers (R, S) and (T, U), fetch
   j's connection info from each and try to connect; the first server D whose
   info led to a live connection is trusted;
4. ask D for the peer's servers (A, B); A != Y marks {Y, X}, B != Z marks
   {Z, X}, either restarts at step 1; otherwise register with Y and Z.

A run in which no friend could be reached restarts without marking anyone.
An entry server that drops the lookup is replaced within the same run.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Optional

from ..errors import NoFriendOnline, RegistrationTimeout, Unreachable
from .ring import ChordRing, ContactInfo, RingNode


@dataclass
class RunTrace:
    entry: str
    outcome: str  # "registered", "no_friend_online", "mismatch"
    marked: tuple = ()


@dataclass
class GuardResult:
    registered_with: tuple
    runs: int
    marked_malicious: set
    trace: list = field(default_factory=list)
    trusted: Optional[RingNode] = None


def _connect(ring: ChordRing, server: RingNode, friend: str, online: bool) -> bool:
    try:
        info = ring.locate_peer(server, friend)
    except Unreachable:
        return False
    return info is not None and info.genuine and online


def guarded_register(ring: ChordRing, username: str, friends: list[str], rng: random.Random,
                     online: Callable[[str, int], bool], contact: str = "", max_runs: int = 1000,
                     marked: Optional[set] = None, store: bool = True) -> GuardResult:
    """Run the guarded registration until it succeeds or ``max_runs`` is hit.

    ``online(friend, run)`` says whether a friend is reachable during a run.
    ``marked`` carries marks from earlier registrations of the same peer and
    is updated in place.
    """
    if not friends:
        raise NoFriendOnline(f"{username} has no friends to vouch for a server")
    marked = marked if marked is not None else set()
    trace: list[RunTrace] = []
    offline_runs = 0
    for run in range(1, max_runs + 1):
        pool = [n for n in ring.live_nodes() if n.address not in marked]
        x = y = z = None
        while pool:
            x = pool[rng.randrange(len(pool))]
            try:
                y, z = ring.locate_rendezvous_servers(x, username)
                break
            except Unreachable:
                pool.remove(x)
                x = None
        if x is None:
            raise RegistrationTimeout(f"{username}: no usable entry server left")
        for j in friends:
            trusted = None
            up = online(j, run)
            candidates = []
            for via in (y, z):
                try:
                    candidates.extend(ring.locate_rendezvous_servers(via, j))
                except Unreachable:
                    continue
            for d in candidates:
                if _connect(ring, d, j, up):
                    trusted = d
                    break
            if trusted is None:
                continue
            try:
                a, b = ring.locate_rendezvous_servers(trusted, username)
            except Unreachable:
                continue
            newly = ()
            if a != y:
                newly = (y.address, x.address)
            elif b != z:
                newly = (z.address, x.address)
            if newly:
                marked.update(newly)
                # the coalition notices which of its nodes were dropped
                ring.burned.setdefault(username, set()).update(newly)
                trace.append(RunTrace(x.address, "mismatch", newly))
                break
            if store:
                for server in (y, z):
                    server.registrations[username] = ContactInfo(username, contact or f"{username}@peer")
            trace.append(RunTrace(x.address, "registered"))
            return GuardResult((y, z), run, marked, trace, trusted)
        else:
            offline_runs += 1
            trace.append(RunTrace(x.address, "no_friend_online"))
    if offline_runs == max_runs:
        raise NoFriendOnline(f"{username}: no friend reachable in {max_runs} runs")
    raise RegistrationTimeout(f"{username}: not registered after {max_runs} runs")

