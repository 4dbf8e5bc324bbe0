"""Monte Carlo of the guarded registration over a simulated ring."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass

from ..crypto import dual_hash
from .model import GuardParams
from .registration import guarded_register
from .ring import ChordRing, MaliciousPolicy, make_addresses

VICTIM = "victim"


@dataclass
class GuardFixture:
    ring: ChordRing
    victim: str
    friends: list
    malicious: list


def build_fixture(params: GuardParams, seed: int, victim: str = VICTIM) -> GuardFixture:
    """Ring of ``r_total`` servers, ``m`` of them misrouting for ``victim``.

    The servers responsible for the friends' ids are kept correct so the
    friend cross-check itself is sound; every other server is equally likely
    to be malicious.
    """
    params.validate()
    rng = random.Random(seed)
    ring = ChordRing.build(make_addresses(params.r_total))
    friends = [f"friend-{i}" for i in range(params.n)]
    protected = set()
    for f in friends:
        for key in dual_hash(f):
            protected.add(ring.true_successor(key).address)
    eligible = [n.address for n in ring.live_nodes() if n.address not in protected]
    if len(eligible) < params.m:
        raise ValueError("ring too small to place the malicious servers")
    bad = sorted(rng.sample(eligible, params.m))
    policy = MaliciousPolicy(misroute=True, selectivity=frozenset([victim]))
    for addr in bad:
        ring.by_address(addr).policy = policy
    for f in friends:
        ring.register_at_successors(f, f"{f}@peer")
    return GuardFixture(ring, victim, friends, bad)


def simulate_runs(params: GuardParams, trials: int, seed: int = 0, max_runs: int = 10_000) -> Counter:
    """Histogram of runs-to-success over ``trials`` fresh registrations."""
    fx = build_fixture(params, seed)
    rng = random.Random(seed + 1)
    p_on = params.p_on
    counts: Counter = Counter()
    ring = fx.ring

    def online(_friend, _run):
        return rng.random() < p_on

    for _ in range(trials):
        ring.burned.clear()
        res = guarded_register(ring, fx.victim, fx.friends, rng, online, max_runs=max_runs, store=False)
        counts[res.runs] += 1
    return counts


def empirical_distribution(counts: Counter, trials: int, n_max: int) -> list[float]:
    return [counts.get(i, 0) / trials for i in range(1, n_max + 1)]


def empirical_mean(counts: Counter) -> float:
    total = sum(counts.values())
    return sum(k * v for k, v in counts.items()) / total
