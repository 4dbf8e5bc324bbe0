"""Analytic run-count model of the guarded registration.

``q_n = p_on * (1 - max(0, m - 2(n-1)) / r)`` is the chance that run ``n``
succeeds given that every earlier run failed; the run-count distribution is
``P_n = q_n * prod_{i<n} (1 - q_i)``. This assumes two malicious servers
leave the candidate pool after every failed run.

:func:`detection_chain_distribution` is the exact distribution of the
process the simulator runs: a run with no reachable friend marks nobody, a
detection removes the entry server and one fresh colluder, and the draw at
line 1 is over the shrunken pool.
"""

from __future__ import annotations

from dataclasses import dataclass
from ..errors import InvalidParams

TAIL_EPS = 1e-12
MAX_TERMS = 100_000


@dataclass(frozen=True)
class GuardParams:
    n: int          # friends
    m: int          # malicious servers
    r_total: int    # servers
    p_on: float     # per-friend online probability
    r_threshold: int = 1

    def validate(self) -> None:
        if self.n < 1:
            raise InvalidParams("need at least one friend")
        if not 0 <= self.m <= self.r_total:
            raise InvalidParams("need 0 <= m <= r_total")
        if self.r_total < 1:
            raise InvalidParams("need at least one server")
        if not 0.0 <= self.p_on <= 1.0:
            raise InvalidParams("p_on must be a probability")
        if self.r_threshold < 1:
            raise InvalidParams("r_threshold must be >= 1")


def run_success(params: GuardParams, run_n: int) -> float:
    """q_n: success chance of run ``run_n`` given all earlier runs failed."""
    remaining = max(0, params.m - 2 * (run_n - 1))
    return params.p_on * (1.0 - remaining / params.r_total)


def success_probability(params: GuardParams, run_n: int) -> float:
    params.validate()
    if run_n < 1:
        raise InvalidParams("run index starts at 1")
    survive = 1.0
    for i in range(1, run_n):
        survive *= 1.0 - run_success(params, i)
        if survive == 0.0:
            return 0.0
    return survive * run_success(params, run_n)


def distribution(params: GuardParams, n_max: int) -> list[float]:
    """[P_1, ..., P_n_max]."""
    params.validate()
    out = []
    survive = 1.0
    for i in range(1, n_max + 1):
        q = run_success(params, i)
        out.append(survive * q)
        survive *= 1.0 - q
    return out


def expected_runs(params: GuardParams) -> float:
    params.validate()
    if params.p_on <= 0 or params.r_total <= params.m:
        raise InvalidParams("expected runs need p_on > 0 and r_total > m")
    total = 0.0
    survive = 1.0
    n = 0
    while survive >= TAIL_EPS and n < MAX_TERMS:
        n += 1
        q = run_success(params, n)
        total += n * survive * q
        survive *= 1.0 - q
    return total


def _chain(params: GuardParams):
    """Yield the success mass of runs 1, 2, ... of the simulated process."""
    p_any = 1.0 - (1.0 - params.p_on) ** params.n
    states = {(params.m, params.r_total): 1.0}
    while True:
        succ = 0.0
        nxt: dict = {}
        for (k, big_n), mass in states.items():
            if big_n <= 0:
                continue
            succ += mass * p_any * (big_n - k) / big_n
            stay = mass * (1.0 - p_any)
            if stay:
                nxt[(k, big_n)] = nxt.get((k, big_n), 0.0) + stay
            if k:
                gone = min(2, k)
                key = (k - gone, big_n - gone)
                nxt[key] = nxt.get(key, 0.0) + mass * p_any * k / big_n
        yield succ
        states = nxt


def detection_chain_distribution(params: GuardParams, n_max: int) -> list[float]:
    """Exact run-count distribution of the simulated process.

    State is ``(malicious left in pool, pool size)``; with ``k`` of ``N``
    malicious, a run succeeds with ``p*(N-k)/N``, detects with ``p*k/N``
    (removing the entry server and a fresh colluder) and otherwise changes
    nothing, where ``p`` is the chance that some friend is online.
    """
    params.validate()
    gen = _chain(params)
    return [next(gen) for _ in range(n_max)]


def chain_expected_runs(params: GuardParams) -> float:
    params.validate()
    if params.p_on <= 0 or params.r_total <= params.m:
        raise InvalidParams("expected runs need p_on > 0 and r_total > m")
    total = 0.0
    mass_left = 1.0
    for n, p in enumerate(_chain(params), start=1):
        total += n * p
        mass_left -= p
        if mass_left < TAIL_EPS or n >= MAX_TERMS:
            break
    return total
