"""Probe how often virtual attacker nodes capture a victim's ring ids.

Every trial draws fresh honest and attacker addresses, hashes them onto the
ring and checks who succeeds each of the victim's two ids.
"""

from __future__ import annotations

import bisect
import random
from dataclasses import dataclass

from ..crypto import dual_hash, ring_id


@dataclass(frozen=True)
class TakeoverFrequency:
    single: float  # attacker succeeds at least the first id
    dual: float    # attacker succeeds both ids
    trials: int


def _owner(ids: list[int], key: int) -> int:
    i = bisect.bisect_left(ids, key)
    return ids[i % len(ids)]


def sybil_takeover_probe(attacker_virtual_nodes: int, victim: str, trials: int, honest: int = 100,
                         seed: int = 0) -> TakeoverFrequency:
    if attacker_virtual_nodes < 0 or honest < 1 or trials < 1:
        raise ValueError("need v >= 0, honest >= 1, trials >= 1")
    rng = random.Random(seed)
    id_a, id_b = dual_hash(victim)
    single = dual = 0
    for t in range(trials):
        salt = rng.getrandbits(64)
        bad = {ring_id(f"sybil-{salt}-{i}") for i in range(attacker_virtual_nodes)}
        good = {ring_id(f"honest-{salt}-{i}") for i in range(honest)} - bad
        ids = sorted(bad | good)
        a = _owner(ids, id_a) in bad
        b = _owner(ids, id_b) in bad
        single += a
        dual += a and b
    return TakeoverFrequency(single / trials, dual / trials, trials)
