"""Acceptance gate: one test per criterion, each recording a PASS/FAIL line.

The lines are printed as they are produced (visible with ``-s``) and again
in the terminal summary by ``conftest.py``.
"""

import math
import os
import random
import subprocess
import sys
import time

import pytest

from helpers import social_world
from myzone import crypto
from myzone.errors import CapacityExhausted, DuplicateComplaint, NotRegisteredWithServer, UnknownSlot
from myzone.guard import (ISOLATED, RETAINED, ChordRing, Complaint, ComplaintBoard, GuardParams, distribution,
                          empirical_distribution, empirical_mean, expected_runs, guarded_register, make_addresses,
                          simulate_runs)
from myzone.harness import metrics, report
from myzone.harness import scenario as scen
from myzone.harness.world import run
from myzone.netsim import NatProfile, NatType, Reach, can_reach
from myzone.peer import MirrorSet
from myzone.relay import RelayConfig, RelayServer
from myzone.replication import ALL, EntryKind, Profile, ProfileEntry, message_zone
from myzone.sessionlog import Action, SessionLogEntry, Status

RESULTS: dict = {}


def record(key, ok: bool, detail: str) -> None:
    line = f"criterion {key}: {'PASS' if ok else 'FAIL'} ({detail})"
    RESULTS[key] = line
    print(line)


def summary_lines() -> list[str]:
    return [RESULTS[k] for k in sorted(RESULTS, key=lambda k: (int(str(k).split('.')[0]), str(k)))]


# --- 1. guarded registration model vs Monte Carlo --------------------------------------

GUARD_SETS = [(20, 6, 0.8), (10, 2, 0.5), (50, 10, 1.0)]


@pytest.mark.parametrize("i, r, m, p_on", [(i, *s) for i, s in enumerate(GUARD_SETS, 1)])
def test_c1_guard_model_matches_simulation(i, r, m, p_on):
    params = GuardParams(1, m, r, p_on)
    trials = 100_000
    t0 = time.perf_counter()
    counts = simulate_runs(params, trials, seed=2024)
    elapsed = time.perf_counter() - t0
    emp = empirical_distribution(counts, trials, 10)
    model = [p for p in distribution(params, 10)]
    gap = max(abs(a - b) for a, b in zip(emp, model))
    mean, expect = empirical_mean(counts), expected_runs(params)
    rel = abs(mean - expect) / expect
    ok = gap <= 0.02 and rel <= 0.02 and elapsed < 60
    record(f"1.{i}", ok, f"r={r} m={m} p_on={p_on}: max |P_n gap| {gap:.4f} (<=0.02), "
                         f"mean {mean:.4f} vs {expect:.4f} rel {rel:.4f} (<=0.02), {elapsed:.1f}s")
    assert gap <= 0.02
    assert rel <= 0.02
    assert elapsed < 60


# --- 2. NAT traversal matrix ---------------------------------------------------------------

FC, AR, PR, SY, PUB = (NatType.FULL_CONE, NatType.ADDRESS_RESTRICTED, NatType.PORT_RESTRICTED,
                       NatType.SYMMETRIC, NatType.PUBLIC)
D, H, R = Reach.DIRECT, Reach.AFTER_HOLE_PUNCH, Reach.RELAY_REQUIRED
NAT_GOLDEN = {
    (FC, FC): (D, D), (FC, AR): (R, H), (FC, PR): (R, H), (FC, SY): (R, R),
    (AR, FC): (D, D), (AR, AR): (R, H), (AR, PR): (R, H), (AR, SY): (R, R),
    (PR, FC): (D, D), (PR, AR): (R, H), (PR, PR): (R, H), (PR, SY): (R, R),
    (SY, FC): (D, D), (SY, AR): (R, H), (SY, PR): (R, R), (SY, SY): (R, R),
}


def _mapped(nat):
    p = NatProfile(nat, "203.0.113.9")
    p.map_outbound(("10.0.0.2", 7000), ("198.51.0.1", 3478), 0)
    return p


def test_c2_nat_traversal_matrix():
    wrong = []
    for (ini, resp), expect in sorted(NAT_GOLDEN.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value)):
        for prior in (False, True):
            got = can_reach(_mapped(ini), _mapped(resp), prior)
            if got is not expect[int(prior)]:
                wrong.append((ini.value, resp.value, prior, got.value))
    for ini in (PUB, FC, AR, PR, SY):
        for prior in (False, True):
            if can_reach(_mapped(ini), _mapped(SY), prior) is not R:
                wrong.append((ini.value, "Symmetric", prior, "not relay"))
    record(2, not wrong, f"{len(NAT_GOLDEN)} pairs x 2 prior-outbound variants, mismatches {wrong}")
    assert not wrong


# --- 3. exactly-once delta transport -----------------------------------------------------------

def test_c3_exactly_once_delta_transport():
    t0 = time.perf_counter()
    sc = scen.social_scenario(users=20, zones=5, days=7, seed=1)
    res = run(sc)
    elapsed = time.perf_counter() - t0
    friends = sc.friends_of()
    pairs = dupes = missing = violations = 0
    for u in sc.users:
        prof = res.engine_of(u.name).profile
        held = set(prof.ids())
        for f in friends[u.name]:
            received = res.engine_of(f).received
            for e in prof.entries():
                n = received[(u.name, e.id)]
                if prof.visible_to(e, f):
                    pairs += 1
                    dupes += n > 1
                    missing += n == 0
                elif n:
                    violations += 1
            violations += sum(1 for (owner, i) in received if owner == u.name and i not in held)
    bundles = sum(1 for e in res.log if e.action is Action.UPDATE and e.status is Status.UPDATE_OK)
    ok = pairs > 0 and dupes == 0 and missing == 0 and violations == 0 and bundles >= 5000 and elapsed < 120
    record(3, ok, f"{pairs} (entry, friend) pairs, {dupes} duplicated, {missing} missing, {violations} visibility "
                  f"violations over {bundles} bundles, {elapsed:.1f}s")
    assert dupes == 0 and missing == 0 and violations == 0
    assert pairs > 0 and bundles >= 5000
    assert elapsed < 120


# --- 4. delta oracle equivalence ------------------------------------------------------------------

def _random_store(rng, n_entries=1000, n_zones=5, n_friends=20):
    friends = [f"f{i}" for i in range(n_friends)]
    p = Profile("owner", friends=friends[:-2])
    for z in range(n_zones):
        p.set_zone(f"z{z}", rng.sample(friends, rng.randrange(1, n_friends)))
    zones = p.zone_names()
    kinds = [EntryKind.WALL_POST, EntryKind.LINK, EntryKind.PHOTO, EntryKind.STATUS, EntryKind.EVENT]
    now = 0
    for _ in range(n_entries):
        now += rng.randrange(1, 50)
        r = rng.random()
        live = [e for e in p.entries() if not e.is_tombstone and e.id not in p.deleted]
        if r < 0.15 and live:
            p.append_entry(ProfileEntry(p.next_id(now), EntryKind.COMMENT, rng.choice(friends), ALL, b"c",
                                        rng.choice(live).id))
        elif r < 0.2 and live:
            p.delete_entry(rng.choice(live).id, "owner", now)
        elif r < 0.25:
            p.append_entry(ProfileEntry(p.next_id(now), EntryKind.MESSAGE, "owner",
                                        message_zone(rng.choice(friends)), b"m"))
        else:
            p.append_entry(ProfileEntry(p.next_id(now), rng.choice(kinds), "owner", rng.choice(zones),
                                        rng.randbytes(rng.randrange(0, 40))))
    return p, friends


def test_c4_delta_oracle_equivalence():
    rng = random.Random(4)
    p, friends = _random_store(rng)
    mismatches = 0
    for _ in range(100):
        f = rng.choice(friends)
        since = rng.randrange(p.last_id + 1)
        got = [e.to_bytes() for e in p.compute_delta(f, since).entries]
        brute = [e.to_bytes() for e in p.entries()
                 if e.id > since and e.id not in p.deleted and p.visible_to(e, f)]
        mismatches += got != brute
    record(4, mismatches == 0 and len(p) >= 1000,
           f"{len(p)}-entry store, 100 random (friend, since) queries, {mismatches} byte mismatches")
    assert len(p) >= 1000
    assert mismatches == 0


# --- 5. mirror convergence ---------------------------------------------------------------------------

def _mirror_round(cap2):
    d, devs, eng = social_world(["owner", "m1", "m2", "bob", "carol"])
    d.identity("owner").mirrors = MirrorSet([("m1", 1, None), ("m2", 2, cap2)])
    eng["m1"].host("owner")
    eng["m2"].host("owner")
    devs["owner"].register()
    o = eng["owner"]
    for i in range(10):
        d.net.now += 10
        o.create_entry(EntryKind.WALL_POST, ALL, b"own %d" % i + b"." * 40)
    o.sync_with_replicas()
    devs["owner"].go_offline()
    devs["m2"].go_offline()
    for i in range(4):
        d.net.now += 10
        eng["bob"].queue_post("owner", EntryKind.WALL_POST, ALL, b"bob %d" % i)
    absorbed1 = eng["bob"].push_posts()
    devs["m2"].go_online()
    devs["m2"].register()
    devs["m1"].go_offline()
    for i in range(4):
        d.net.now += 10
        eng["carol"].queue_post("owner", EntryKind.WALL_POST, ALL, b"carol %d" % i)
    absorbed2 = eng["carol"].push_posts()
    for name in ("m1", "owner"):
        devs[name].go_online()
        devs[name].register()
    only1 = set(eng["m1"].hosted["owner"].ids()) - set(o.profile.ids())
    only2 = set(eng["m2"].hosted["owner"].ids()) - set(o.profile.ids())
    o.sync_with_replicas()
    return eng, (absorbed1, absorbed2, only1, only2)


def test_c5_mirror_convergence():
    eng, (a1, a2, only1, only2) = _mirror_round(None)
    disjoint = a1 == 4 and a2 == 4 and len(only1) == 4 and len(only2) == 4 and not only1 & only2
    ids = eng["owner"].profile.ids()
    same = ids == eng["m1"].hosted["owner"].ids() == eng["m2"].hosted["owner"].ids() and len(ids) == 18
    cap = int(0.6 * eng["owner"].profile.size_bytes())
    eng, _ = _mirror_round(cap)
    full = eng["owner"].profile
    suffix = [e.id for e in full.newest_suffix(cap)]
    held = eng["m2"].hosted["owner"].ids()
    constrained = (held == suffix and 0 < len(held) < len(full) and eng["m1"].hosted["owner"].ids() == full.ids()
                   and full.ids() == ids)
    record(5, disjoint and same and constrained,
           f"disjoint absorbs {sorted(only1)} / {sorted(only2)}; identical id sets after one round: {same} "
           f"({len(ids)} ids); 60% mirror holds {len(held)} newest of {len(full)}, equals newest suffix: "
           f"{held == suffix}")
    assert disjoint and same and constrained


# --- 6. takedown resilience at desk scale --------------------------------------------------------------

def test_c6_takedown_resilience(tmp_path):
    t0 = time.perf_counter()
    sc = scen.scaled_paper_scenario(seed=1)
    res = run(sc)
    paths = report.write_report(tmp_path, res.log, sc, res.stats.to_dict())
    elapsed = time.perf_counter() - t0
    daily = report.load_daily(paths[report.DAILY])
    summary = report.load_summary(paths[report.SUMMARY])
    before = [d["success_ratio"] for d in daily[:35]]
    after = [d["success_ratio"] for d in daily[35:]]
    during = summary["group_availability"]["during_takedown"]
    replica_groups = ["self_replica", "mirrored", "shared_mirror"]
    shape = min(before) > max(after)
    replicas_alive = all(during[g] is not None and during[g] > 0 for g in replica_groups)
    zero_drops = during["no_replica"] is not None and during["no_replica"] <= 0.05
    others = [during[g] for g in during if g != "shared_mirror" and during[g] is not None]
    hub_best = during["shared_mirror"] > max(others)
    shape_ok = (len(sc.users) == 104 and len(sc.edges) == 5117 and sc.days == 40 and sc.relays["count"] == 20
                and sc.relays["capacity"] == 20)
    ok = shape and replicas_alive and zero_drops and hub_best and shape_ok and elapsed < 600
    record(6, ok, f"days 1-35 min {min(before):.3f} vs days 36-40 max {max(after):.3f}; during takedown "
                  + ", ".join(f"{g} {v:.3f}" for g, v in sorted(during.items()))
                  + f"; {elapsed:.0f}s")
    assert shape_ok
    assert shape
    assert replicas_alive
    assert zero_drops
    assert hub_best
    assert elapsed < 600


# --- 7. chord correctness ---------------------------------------------------------------------------------

def test_c7_chord_correctness():
    details = []
    ok = True
    for size in (8, 32, 128):
        ring = ChordRing.build(make_addresses(size, f"acc{size}"))
        rng = random.Random(size * 7)
        nodes = ring.live_nodes()
        ids = sorted(n.node_id for n in nodes)
        wrong = 0
        hops = []
        for _ in range(1000):
            key = rng.getrandbits(160)
            got, h = ring.route(nodes[rng.randrange(size)], key)
            wrong += got.node_id != next((i for i in ids if i >= key), ids[0])
            hops.append(h)
        mean = sum(hops) / len(hops)
        ok &= wrong == 0 and mean <= 2 * math.log2(size)
        details.append(f"N={size}: {wrong} wrong, mean hops {mean:.2f} <= {2 * math.log2(size):.0f}")
    record(7, ok, "; ".join(details))
    assert ok


# --- 8. complaint protocol ----------------------------------------------------------------------------------

def test_c8_complaint_protocol():
    scheme = crypto.TOY
    keys = {f"p{i}": scheme.keypair(300 + i) for i in range(6)}

    def env():
        ring = ChordRing.build(make_addresses(12, "complaints"))
        server = ring.live_nodes()[4]
        for name in ("p0", "p1", "p2", "p3"):
            server.registrations[name] = object()
        board = ComplaintBoard(ring, lambda u: keys[u].public_key if u in keys else None, r_threshold=3,
                               scheme=scheme)
        return ring, server, board

    def complaint(name, about, at=1000):
        return Complaint(name, about, at).signed(keys[name], scheme)

    ring, server, board = env()
    for name in ("p0", "p1"):
        board.file_complaint(complaint(name, server.address), 1000)
    two = board.ring_judge(server.address)
    dup = unreg = False
    try:
        board.file_complaint(complaint("p0", server.address, 1100), 1100)
    except DuplicateComplaint:
        dup = True
    try:
        board.file_complaint(complaint("p5", server.address), 1000)
    except NotRegisteredWithServer:
        unreg = True
    still = board.ring_judge(server.address)
    board.file_complaint(complaint("p2", server.address), 1000)
    three = board.ring_judge(server.address)

    # before isolation the server is drawn as an entry point; afterwards it never is
    def pools(r, runs):
        seen = set()
        rng = random.Random(9)
        friends = ["fa", "fb"]
        for f in friends:
            r.register_at_successors(f, f"{f}@peer")
        for k in range(runs):
            res = guarded_register(r, f"user{k}", friends, rng, lambda f, n: True, store=False)
            seen.update(t.entry for t in res.trace)
            seen.update(s.address for s in res.registered_with)
        return seen

    fresh, fresh_server, _ = env()
    seen_before = pools(fresh, 200)
    seen_after = pools(ring, 200)
    ok = (two == RETAINED and still == RETAINED and dup and unreg and three == ISOLATED
          and fresh_server.address in seen_before and server.address not in seen_after)
    record(8, ok, f"2 complaints -> {two}, duplicate rejected {dup}, unregistered rejected {unreg}, "
                  f"3 complaints -> {three}; in pools before {fresh_server.address in seen_before}, "
                  f"after {server.address in seen_after}")
    assert ok


# --- 9. relay lifecycle -----------------------------------------------------------------------------------------

def test_c9_relay_lifecycle():
    scheme = crypto.TOY
    from myzone import ca as ca_mod
    authority = ca_mod.CertificateAuthority.from_seed("ca", 77, scheme)
    users = {}

    def serve(relay, name, now=0):
        if name not in users:
            kp = scheme.keypair(1000 + len(users))
            users[name] = (kp, ca_mod.obtain_certificate(authority, kp, name))
        kp, cert = users[name]
        return relay.accept_server_peer(cert, relay.answer_challenge(kp, relay.challenge(cert, now)), now)[0]

    relay = RelayServer("r", "198.51.9.9", scheme.keypair(5), authority.public_key,
                        RelayConfig(max_connections=20, ping_interval_ms=1000), scheme)
    ports = [serve(relay, f"s{i}") for i in range(20)]
    rejected = False
    try:
        serve(relay, "s20")
    except CapacityExhausted:
        rejected = True
    relay.keep_alive(ports[0], 1500)
    kept = relay.slot_alive(ports[0], 1500 + 2000)
    expired = not relay.slot_alive(ports[0], 1500 + 2001)
    try:
        relay.keep_alive(ports[1], 2001)
        late_refused = False
    except UnknownSlot:
        late_refused = True

    # end to end through peers behind symmetric NATs
    d, devs, eng = social_world(["alice", "bob"], nat=NatType.SYMMETRIC)
    secrets = [b"meet at the north gate", b"the password is swordfish"]
    sent, received, dumps = [], [], []
    for r in d.relays.values():
        def spy_forward(conn_id, body, side, now, _orig=r.forward, _r=r):
            _orig(conn_id, body, side, now)
            sent.append(body)
            dumps.append(_r.dump_state())

        def spy_receive(conn_id, side, _orig=r.receive):
            out = _orig(conn_id, side)
            received.extend(out)
            return out
        r.forward, r.receive = spy_forward, spy_receive
    eng["alice"].create_entry(EntryKind.WALL_POST, ALL, secrets[0])
    eng["alice"].send_message("bob", secrets[1])
    eng["alice"].push_posts()
    eng["bob"].pull_updates("alice")
    dumps += [r.dump_state() for r in d.relays.values()]
    got = [e.body for e in eng["bob"].cache["alice"].live() if e.kind is EntryKind.WALL_POST]
    inbox = [e for e in eng["bob"].profile.entries() if e.kind is EntryKind.MESSAGE]
    delivered = got == [secrets[0]] and len(inbox) == 1 and eng["bob"].open_message(inbox[0]) == secrets[1]
    identical = sent == received and len(sent) > 0
    leaked = [sec for sec in secrets for dump in dumps if sec in dump]
    ok = rejected and kept and expired and late_refused and identical and not leaked and delivered
    record(9, ok, f"21st slot rejected {rejected}, alive at 2x ping {kept}, expired after {expired}, "
                  f"late keep-alive refused {late_refused}; {len(sent)} relayed frames byte-identical "
                  f"{identical}; delivered {delivered}; plaintext hits in relay dumps {len(leaked)}")
    assert ok


# --- 10. metric oracles ---------------------------------------------------------------------------------------------

def _e(start, action, client, target, serving, status, prio=0):
    return SessionLogEntry(start, start + 5, action, client, target, serving, 100, status, prio)


def test_c10_metric_oracles():
    U, P = Action.UPDATE, Action.POSTING
    # log A: 9 successes, one failure retried five times
    a = [_e(i, U, "x", "y", "y", Status.UPDATE_OK) for i in range(9)]
    a += [_e(50 + i, U, "x", "z", "", Status.CONN_FAILED) for i in range(6)]
    # log B: 12 entries; retries at 3, 8 and 10 collapse -> 5 of 9, mirror impact 2/5, device 1/5
    b = [_e(1, U, "a", "b", "b", Status.UPDATE_OK), _e(2, U, "a", "b", "", Status.CONN_FAILED),
         _e(3, U, "a", "b", "", Status.CONN_FAILED), _e(4, U, "a", "c", "d", Status.UPDATE_OK),
         _e(5, U, "a", "b", "b", Status.UPDATE_OK, 1), _e(6, U, "a", "b", "b", Status.UPDATE_FAIL),
         _e(7, P, "a", "b", "b", Status.POST_FAIL), _e(8, P, "a", "b", "b", Status.POST_FAIL),
         _e(9, U, "c", "b", "", Status.CONN_FAILED), _e(10, U, "a", "b", "", Status.UPDATE_FAIL),
         _e(11, P, "a", "c", "d", Status.POST_OK), _e(12, P, "a", "b", "b", Status.POST_OK)]
    # log C: owner served 6 times, rank-1 mirror 3, rank-2 mirror 1, one collapsed failure pair
    c = ([_e(i, U, "q", "o", "o", Status.UPDATE_OK) for i in range(6)]
         + [_e(10 + i, U, "q", "o", "m1", Status.UPDATE_OK) for i in range(3)]
         + [_e(20, P, "q", "o", "m2", Status.POST_OK), _e(21, U, "r", "o", "", Status.CONN_FAILED),
            _e(22, U, "r", "o", "", Status.CONN_FAILED)])
    checks = {
        "A success": (metrics.success_ratio(a), 0.9),
        "A impact": (metrics.impact_ratio(a)["all"], 0.0),
        "B success": (metrics.success_ratio(b), 5 / 9),
        "B update": (metrics.success_ratio(b, actions=(U,)), 0.5),
        "B mirror impact": (metrics.impact_ratio(b)["all"], 2 / 5),
        "B device impact": (metrics.impact_ratio(b, metrics.DEVICE)["all"], 1 / 5),
        "C success": (metrics.success_ratio(c), 10 / 11),
        "C mirror impact": (metrics.impact_ratio(c)["all"], 4 / 10),
        "C ranks": (metrics.rank_shares(c, {"o": ["m1", "m2"]}), {1: 0.3, 2: 0.1}),
    }
    wrong = {k: v for k, v in checks.items() if v[0] != v[1]}
    record(10, not wrong, f"{len(checks)} exact comparisons on three crafted logs, mismatches {wrong}")
    assert not wrong


# --- 11. determinism -------------------------------------------------------------------------------------------------

def test_c11_determinism(tmp_path):
    sc = scen.scaled_paper_scenario(users=20, edges=120, days=3, takedown_days=(3, 3), seed=11)
    sc.guard = {"r": 10, "m": 2, "p_on": 0.5, "trials": 500, "friends": 1}
    path = tmp_path / "scenario.json"
    scen.dump(sc, path)
    outs = []
    for i, hashseed in enumerate(("0", "12345", "random")):
        out = tmp_path / f"out{i}"
        env = dict(os.environ, PYTHONHASHSEED=hashseed)
        proc = subprocess.run([sys.executable, "-m", "myzone.harness.cli", "run", str(path), "--out", str(out)],
                              env=env, capture_output=True, text=True)
        assert proc.returncode == 0, proc.stderr
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    same = all((o / n).read_bytes() == (outs[0] / n).read_bytes() for o in outs[1:] for n in names)
    res = run(scen.load(path))
    in_proc = report.sessions_text(res.log).encode() == (outs[0] / report.SESSIONS).read_bytes()
    sessions = len((outs[0] / report.SESSIONS).read_text().splitlines())
    record(11, same and in_proc and sessions > 0,
           f"{len(names)} report files byte-identical across 3 processes with different hash seeds: {same}; "
           f"in-process rerun identical: {in_proc}; {sessions} sessions")
    assert same and in_proc and sessions > 0
