import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import social_world
from myzone.errors import AuthenticityFailure, MalformedRequest, NotFriend, PermissionDenied, SessionFailed, UnknownId
from myzone.netsim import NatType
from myzone.peer import MirrorSet
from myzone.replication import (ALL, EntryKind, Profile, ProfileEntry, StorageImages, clean_engine, layout,
                                message_zone, read_tree, write_tree)
from myzone.replication.storage import parse_page
from myzone.replication.store import DeltaBundle

KINDS = [EntryKind.WALL_POST, EntryKind.LINK, EntryKind.PHOTO, EntryKind.STATUS, EntryKind.EVENT]


def profile(friends=("bob", "carol", "dave"), **kw):
    p = Profile("alice", friends=friends, **kw)
    p.set_zone("family", {"bob"})
    p.set_zone("work", {"carol", "dave"})
    return p


def add(p, kind=EntryKind.WALL_POST, zone=ALL, author="alice", parent=None, body=b"x"):
    e = ProfileEntry(p.next_id(0), kind, author, zone, body, parent)
    p.append_entry(e)
    return e


# --- store ------------------------------------------------------------------------

def test_paging_and_history():
    p = profile()
    for _ in range(250):
        add(p)
    assert [len(pg) for pg in p.pages()] == [100, 100, 50]
    hist = p.history()
    assert [h.count for h in hist] == [100, 100, 50]
    assert all(a.last_id < b.first_id for a, b in zip(hist, hist[1:]))
    flat = [e.id for pg in p.pages() for e in pg]
    assert flat == sorted(flat) and len(set(flat)) == 250


@pytest.mark.parametrize("size", [99, 1001])
def test_page_size_bounds(size):
    with pytest.raises(ValueError):
        Profile("a", entries_per_page=size)


def test_append_requires_increasing_ids():
    p = profile()
    e = add(p)
    with pytest.raises(ValueError):
        p.append_entry(e)


def test_delete_rules():
    p = profile()
    mine = add(p)
    bobs = p.absorb(ProfileEntry(0, EntryKind.WALL_POST, "bob", ALL, b"hi"), "bob", 50)
    with pytest.raises(PermissionDenied):
        p.delete_entry(mine.id, "carol", 60)
    with pytest.raises(UnknownId):
        p.delete_entry(999_999, "alice", 60)
    tomb = p.delete_entry(bobs.id, "bob", 60)  # author may delete
    assert tomb.kind is EntryKind.DELETED and tomb.parent_id == bobs.id
    with pytest.raises(UnknownId):
        p.delete_entry(bobs.id, "alice", 70)
    assert [e.id for e in p.read()] == [mine.id]
    delta = p.compute_delta("carol", 0).entries
    assert tomb in delta and bobs not in delta
    assert bobs.id in p  # kept for page integrity


def test_visibility_rules():
    p = profile()
    fam = add(p, zone="family")
    comment = add(p, EntryKind.COMMENT, zone=ALL, parent=fam.id)
    everyone = add(p, zone=ALL)
    ghost = add(p, zone="nonexistent")
    note = add(p, EntryKind.MESSAGE, zone=message_zone("carol"))
    assert p.visible_to(fam, "bob") and not p.visible_to(fam, "carol")
    assert not p.visible_to(comment, "carol") and p.visible_to(comment, "bob")  # zone inherited from parent
    assert all(p.visible_to(everyone, f) for f in ("bob", "carol", "dave"))
    assert not p.visible_to(everyone, "mallory")
    assert not p.visible_to(ghost, "bob") and p.visible_to(ghost, "alice")
    assert p.visible_to(note, "carol") and not p.visible_to(note, "bob")
    orphan = ProfileEntry(p.next_id(0), EntryKind.LIKE, "bob", ALL, b"", 12345)
    assert not p.visible_to(orphan, "bob")


def test_write_permissions():
    p = profile()
    fam = add(p, zone="family")
    with pytest.raises(PermissionDenied):
        p.absorb(ProfileEntry(0, EntryKind.WALL_POST, "carol", "family"), "carol", 10)
    with pytest.raises(PermissionDenied):
        p.absorb(ProfileEntry(0, EntryKind.COMMENT, "carol", ALL, b"", fam.id), "carol", 10)
    with pytest.raises(PermissionDenied):  # impersonation
        p.absorb(ProfileEntry(0, EntryKind.WALL_POST, "bob", ALL), "carol", 10)
    with pytest.raises(PermissionDenied):
        p.absorb(ProfileEntry(0, EntryKind.WALL_POST, "mallory", ALL), "mallory", 10)
    c = p.absorb(ProfileEntry(0, EntryKind.COMMENT, "bob", ALL, b"", fam.id), "bob", 10)
    assert c.id > fam.id


def test_delta_edges():
    p = profile()
    for i in range(20):
        add(p, zone=["family", "work", ALL][i % 3])
    assert p.compute_delta("bob", p.last_id).entries == ()
    assert list(p.compute_delta("bob", 0).entries) == [e for e in p.entries() if p.visible_to(e, "bob")]


def oracle(p, friend, since):
    return [e for e in p.entries() if e.id > since and e.id not in p.deleted and p.visible_to(e, friend)]


def random_store(rng, n_entries=1000, n_zones=5, n_friends=20):
    friends = [f"f{i}" for i in range(n_friends)]
    p = Profile("owner", friends=friends[:-2])  # two revoked/never-active users
    for z in range(n_zones):
        p.set_zone(f"z{z}", rng.sample(friends, rng.randrange(1, n_friends)))
    zones = p.zone_names() + ["gone"]
    now = 0
    for _ in range(n_entries):
        now += rng.randrange(1, 50)
        r = rng.random()
        live = [e for e in p.entries() if not e.is_tombstone]
        if r < 0.15 and live:
            parent = rng.choice(live)
            p.append_entry(ProfileEntry(p.next_id(now), EntryKind.COMMENT, rng.choice(friends), ALL, b"c",
                                        parent.id))
        elif r < 0.2 and live:
            target = rng.choice(live)
            if target.id not in p.deleted:
                p.delete_entry(target.id, "owner", now)
        elif r < 0.25:
            p.append_entry(ProfileEntry(p.next_id(now), EntryKind.MESSAGE, "owner",
                                        message_zone(rng.choice(friends)), b"m"))
        else:
            p.append_entry(ProfileEntry(p.next_id(now), rng.choice(KINDS), "owner", rng.choice(zones),
                                        rng.randbytes(rng.randrange(0, 40))))
    return p, friends


def test_delta_matches_brute_force_oracle():
    rng = random.Random(42)
    p, friends = random_store(rng)
    for _ in range(100):
        f = rng.choice(friends)
        since = rng.choice([0, rng.randrange(p.last_id + 1), p.last_id])
        got = p.compute_delta(f, since)
        assert [e.to_bytes() for e in got.entries] == [e.to_bytes() for e in oracle(p, f, since)]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), size=st.integers(0, 200))
def test_delta_oracle_property(seed, size):
    rng = random.Random(seed)
    p, friends = random_store(rng, size, 3, 6)
    for f in friends:
        since = rng.randrange(p.last_id + 1)
        bundle = p.compute_delta(f, since)
        assert list(bundle.entries) == oracle(p, f, since)
        assert all(p.visible_to(e, f) and e.id > since for e in bundle.entries)
        assert DeltaBundle.from_bytes(bundle.to_bytes()) == bundle


def test_merge_union_and_tombstone_wins():
    a, b = profile(), profile()
    e1 = ProfileEntry(10, EntryKind.WALL_POST, "alice", ALL, b"one")
    e2 = ProfileEntry(20, EntryKind.WALL_POST, "alice", ALL, b"two")
    t = ProfileEntry(20, EntryKind.DELETED, "alice", ALL, b"", 10)
    a.merge([e1, e2])
    b.merge([e1, t])
    a.merge(b.entries())
    assert a.get(20) == t and a.ids() == [10, 20]
    b.merge([e2])
    assert b.get(20) == t


def test_newest_suffix():
    p = profile()
    for _ in range(10):
        add(p, body=b"0123456789")
    size = p.entries()[0].size
    assert [e.id for e in p.newest_suffix(size * 3 + 1)] == p.ids()[-3:]
    assert p.newest_suffix(None) == p.entries()
    assert p.newest_suffix(0) == []


def test_entry_line_roundtrip():
    e = ProfileEntry(5, EntryKind.COMMENT, "bob", "family", b"\x00\ttab\n", 3)
    assert ProfileEntry.from_line(e.to_line()) == e
    assert ProfileEntry.from_bytes(e.to_bytes()) == e
    with pytest.raises(MalformedRequest):
        ProfileEntry.from_line("garbage")


# --- engine: pulling ------------------------------------------------------------------

@pytest.fixture
def trio():
    return social_world(["alice", "bob", "carol"])


def test_second_pull_applies_nothing(trio):
    d, devs, eng = trio
    for i in range(3):
        d.net.now += 10
        eng["alice"].create_entry(EntryKind.WALL_POST, ALL, b"p%d" % i)
    assert eng["bob"].pull_updates("alice") == 3
    assert eng["bob"].pull_updates("alice") == 0
    assert [x.status.value for x in eng["bob"].log] == ["UpdateOk", "UpdateOk"]
    assert all(v == 1 for v in eng["bob"].received.values())


def test_zone_filtering_over_the_wire(trio):
    d, devs, eng = trio
    eng["alice"].set_zone("close", {"bob"})
    eng["alice"].create_entry(EntryKind.WALL_POST, "close", b"secret")
    d.net.now += 5
    eng["alice"].create_entry(EntryKind.WALL_POST, ALL, b"public")
    assert eng["bob"].pull_updates("alice") == 2
    assert eng["carol"].pull_updates("alice") == 1
    assert [e.body for e in eng["carol"].cache["alice"].live()] == [b"public"]


def test_mirror_serves_same_content():
    d, devs, eng = social_world(["alice", "bob", "carol"])
    d.identity("alice").mirrors = MirrorSet([("carol", 1, None)])
    eng["carol"].host("alice")
    devs["alice"].register()
    for i in range(4):
        d.net.now += 10
        eng["alice"].create_entry(EntryKind.WALL_POST, ALL, b"p%d" % i)
    eng["alice"].sync_with_replicas()
    direct = eng["alice"].profile.compute_delta("bob", 0).entries
    devs["alice"].go_offline()
    assert eng["bob"].pull_updates("alice") == 4
    assert eng["bob"].log[-1].serving == "carol" and eng["bob"].log[-1].serving_priority == 3
    assert sorted(eng["bob"].cache["alice"].entries.values(), key=lambda e: e.id) == list(direct)


def test_mid_transfer_failure_keeps_watermark(trio):
    d, devs, eng = trio
    eng["alice"].create_entry(EntryKind.WALL_POST, ALL, b"one")
    cut = {"armed": True}

    def drop(store, bundle):
        if cut["armed"]:
            cut["armed"] = False
            d.net.partition("alice#0", "bob#0", d.net.now, d.net.now + 1)

    eng["alice"].on_bundle = drop
    with pytest.raises(SessionFailed):
        eng["bob"].pull_updates("alice")
    assert eng["bob"].cache["alice"].watermark == 0 and not eng["bob"].cache["alice"].entries
    assert eng["bob"].log[-1].status.value == "UpdateFail"
    d.net.now += 5
    assert eng["bob"].pull_updates("alice") == 1
    assert eng["bob"].log[-1].retry


def test_pull_from_unreachable_friend_logs_conn_failed(trio):
    d, devs, eng = trio
    devs["alice"].go_offline()
    with pytest.raises(SessionFailed):
        eng["bob"].pull_updates("alice")
    assert eng["bob"].log[-1].status.value == "ConnFailed" and eng["bob"].log[-1].serving == ""


# --- engine: posting ---------------------------------------------------------------------

def test_post_absorbed_by_mirror_reaches_owner_after_sync():
    d, devs, eng = social_world(["alice", "bob", "carol"])
    d.identity("alice").mirrors = MirrorSet([("carol", 1, None)])
    eng["carol"].host("alice")
    devs["alice"].register()
    eng["alice"].sync_with_replicas()
    devs["alice"].go_offline()
    eng["bob"].queue_post("alice", EntryKind.WALL_POST, ALL, b"while you were out")
    assert eng["bob"].push_posts() == 1 and not eng["bob"].pending
    assert eng["bob"].log[-1].serving == "carol"
    devs["alice"].go_online()
    devs["alice"].register()
    d.net.now += 100
    eng["alice"].sync_with_replicas()
    assert [e.body for e in eng["alice"].profile.read()] == [b"while you were out"]


def test_post_to_foreign_zone_denied_and_dropped(trio):
    d, devs, eng = trio
    eng["alice"].set_zone("close", {"carol"})
    eng["bob"].queue_post("alice", EntryKind.WALL_POST, "close", b"let me in")
    assert eng["bob"].push_posts() == 0
    assert not eng["bob"].pending and len(eng["bob"].denied) == 1
    assert eng["bob"].log[-1].status.value == "PostFail"
    assert len(eng["alice"].profile) == 0


def test_failed_posts_stay_queued_and_deliver_once(trio):
    d, devs, eng = trio
    p = eng["bob"].queue_post("alice", EntryKind.WALL_POST, ALL, b"eventually")
    eng["bob"].enqueue("alice", p.entry)  # dedup by entry id
    assert len(eng["bob"].pending) == 1
    devs["alice"].go_offline()
    for _ in range(3):
        d.net.now += 1000
        assert eng["bob"].push_posts() == 0
    assert len(eng["bob"].pending) == 1
    assert [x.retry for x in eng["bob"].log] == [False, True, True]
    devs["alice"].go_online()
    devs["alice"].register()
    assert eng["bob"].push_posts() == 1
    assert eng["bob"].push_posts() == 0
    assert [e.body for e in eng["alice"].profile.read()] == [b"eventually"]


def test_comment_thread_inherits_zone(trio):
    d, devs, eng = trio
    eng["alice"].set_zone("close", {"bob"})
    post = eng["alice"].create_entry(EntryKind.WALL_POST, "close", b"p")
    eng["bob"].queue_post("alice", EntryKind.COMMENT, ALL, b"nice", parent_id=post.id)
    assert eng["bob"].push_posts() == 1
    eng["carol"].queue_post("alice", EntryKind.LIKE, ALL, b"", parent_id=post.id)
    assert eng["carol"].push_posts() == 0  # carol cannot see the post
    assert eng["carol"].pull_updates("alice") == 0
    assert eng["bob"].pull_updates("alice") == 2


# --- engine: sync ---------------------------------------------------------------------------

def mirrored_world(cap2=None):
    d, devs, eng = social_world(["owner", "m1", "m2", "bob", "carol"])
    d.identity("owner").mirrors = MirrorSet([("m1", 1, None), ("m2", 2, cap2)])
    eng["m1"].host("owner")
    eng["m2"].host("owner")
    devs["owner"].register()
    return d, devs, eng


def absorb_disjoint(d, devs, eng):
    o = eng["owner"]
    for i in range(10):
        d.net.now += 10
        o.create_entry(EntryKind.WALL_POST, ALL, b"own %d" % i)
    o.sync_with_replicas()
    devs["owner"].go_offline()
    devs["m2"].go_offline()
    for i in range(3):
        d.net.now += 10
        eng["bob"].queue_post("owner", EntryKind.WALL_POST, ALL, b"bob %d" % i)
    assert eng["bob"].push_posts() == 3  # all land on m1
    devs["m2"].go_online()
    devs["m2"].register()
    devs["m1"].go_offline()
    for i in range(3):
        d.net.now += 10
        eng["carol"].queue_post("owner", EntryKind.WALL_POST, ALL, b"carol %d" % i)
    assert eng["carol"].push_posts() == 3  # all land on m2
    devs["m1"].go_online()
    devs["m1"].register()
    devs["owner"].go_online()
    devs["owner"].register()
    assert set(eng["m1"].hosted["owner"].ids()).isdisjoint(set(eng["m2"].hosted["owner"].ids()) -
                                                            set(o.profile.ids()))


def test_mirrors_converge_after_one_round():
    d, devs, eng = mirrored_world()
    absorb_disjoint(d, devs, eng)
    report = eng["owner"].sync_with_replicas()
    assert report.reached == ["m1", "m2"] and report.fetched == 6
    ids = eng["owner"].profile.ids()
    assert len(ids) == 16
    assert eng["m1"].hosted["owner"].ids() == ids == eng["m2"].hosted["owner"].ids()


def test_constrained_mirror_holds_newest_suffix():
    d, devs, eng = mirrored_world()
    absorb_disjoint(d, devs, eng)
    total = eng["owner"].profile.size_bytes() + 6 * 60
    cap = int(0.6 * total)
    d.identity("owner").mirrors = MirrorSet([("m1", 1, None), ("m2", 2, cap)])
    eng["owner"].sync_with_replicas()
    full = eng["owner"].profile
    assert [e.id for e in full.newest_suffix(cap)] == eng["m2"].hosted["owner"].ids()
    assert eng["m2"].hosted["owner"].ids() == full.ids()[-len(eng["m2"].hosted["owner"]):]
    assert eng["m2"].hosted["owner"].size_bytes() <= cap < full.size_bytes()
    assert not eng["m2"].hosted["owner"].complete


def test_idle_sync_sends_probes_only():
    d, devs, eng = mirrored_world()
    eng["owner"].create_entry(EntryKind.WALL_POST, ALL, b"x" * 500)
    eng["owner"].sync_with_replicas()
    report = eng["owner"].sync_with_replicas()
    assert report.fetched == report.pushed == 0
    assert report.bytes < 2 * 400  # two probes, no payload


def test_sibling_devices_replicate():
    d, devs, eng = social_world(["alice", "bob"])
    second = d.add_device("alice", 1)
    from myzone.replication import ReplicaEngine
    e2 = ReplicaEngine(second)
    second.bootstrap()
    devs["alice"].register()
    eng["alice"].create_entry(EntryKind.WALL_POST, ALL, b"from primary")
    d.net.now += 10
    e2.create_entry(EntryKind.WALL_POST, ALL, b"from phone")
    eng["alice"].sync_with_replicas()
    assert eng["alice"].profile.ids() == e2.profile.ids() and len(e2.profile) == 2
    devs["alice"].go_offline()
    assert eng["bob"].pull_updates("alice") == 2
    assert eng["bob"].log[-1].serving_priority == 1


def test_truncated_mirror_leaves_gap_refetched_from_owner():
    d, devs, eng = mirrored_world()
    o = eng["owner"]
    for i in range(10):
        d.net.now += 10
        o.create_entry(EntryKind.WALL_POST, ALL, b"entry %d" % i)
    size = o.profile.entries()[0].size
    d.identity("owner").mirrors = MirrorSet([("m1", 1, size * 4)])
    devs["owner"].register()
    o.sync_with_replicas()
    devs["owner"].go_offline()
    assert eng["bob"].pull_updates("owner") == 4
    assert eng["bob"].cache["owner"].gaps
    devs["owner"].go_online()
    devs["owner"].register()
    assert eng["bob"].pull_updates("owner") == 6
    assert sorted(eng["bob"].cache["owner"].entries) == o.profile.ids()
    assert not eng["bob"].cache["owner"].gaps
    assert max(eng["bob"].received.values()) == 1


# --- messages ------------------------------------------------------------------------------

def test_private_messages():
    d, devs, eng = mirrored_world()
    msg = eng["owner"].send_message("bob", b"meet at noon")
    assert eng["owner"].push_posts() == 1
    inbox = [e for e in eng["bob"].profile.entries() if e.kind is EntryKind.MESSAGE]
    assert len(inbox) == 1 and eng["bob"].open_message(inbox[0]) == b"meet at noon"
    eng["owner"].sync_with_replicas()
    copy = eng["m1"].hosted["owner"].get(msg.id)
    assert copy is not None and b"meet at noon" not in copy.body
    with pytest.raises(Exception):
        eng["m1"].open_message(copy)
    tampered = ProfileEntry(msg.id, msg.kind, msg.author, msg.shared_with, msg.body[:-1] + bytes([msg.body[-1] ^ 1]))
    with pytest.raises(AuthenticityFailure):
        eng["bob"].open_message(tampered)
    assert eng["bob"].pull_updates("owner") == 1
    assert eng["carol"].pull_updates("owner") == 0


def test_message_to_non_friend():
    d, devs, eng = social_world(["alice", "bob"])
    d.add_device("stranger").obtain_certificate()
    with pytest.raises(NotFriend):
        eng["alice"].send_message("stranger", b"hi")


# --- storage ----------------------------------------------------------------------------------

def test_layout_roundtrip(tmp_path, trio):
    d, devs, eng = trio
    for i in range(150):
        d.net.now += 1
        eng["alice"].create_entry(EntryKind.WALL_POST, ALL, b"e%d" % i)
    eng["bob"].pull_updates("alice")
    eng["bob"].queue_post("carol", EntryKind.WALL_POST, "nope")
    files = layout(eng["bob"])
    write_tree(tmp_path, files)
    assert read_tree(tmp_path) == files
    pages = [parse_page(files[p]) for p in sorted(files) if p.startswith("bob/friends/alice/page-")]
    assert [len(p) for p in pages] == [100, 50]
    assert b"carol\t" in files["bob/pendingChanges.txt"]
    own = layout(eng["alice"])
    assert own["alice/profile/history.txt"].decode().count("\n") == 2


def test_cleaner_deletes_orphans_and_evicts_oldest_friend_pages():
    d, devs, eng = social_world(["alice", "bob", "carol"])
    for i in range(300):
        d.net.now += 1
        eng["alice"].create_entry(EntryKind.WALL_POST, ALL, b"a%d" % i)
        eng["carol"].create_entry(EntryKind.WALL_POST, ALL, b"c%d" % i)
        eng["bob"].create_entry(EntryKind.WALL_POST, ALL, b"b%d" % i)
    eng["bob"].pull_updates("alice")
    eng["bob"].pull_updates("carol")
    files = layout(eng["bob"])
    existing = {p: len(b) for p, b in files.items()}
    existing["bob/friends/old/page-00000.txt"] = 10
    existing["bob/tmp-leftover"] = 3
    cache = sum(v for p, v in existing.items() if "/friends/" in p and "/page-" in p and "old" not in p)
    limit = int(cache * 0.9)
    from myzone.replication.engine import ReplicationSettings
    eng["bob"].settings = ReplicationSettings(cache_limit_bytes=limit)
    own_before = eng["bob"].profile.ids()
    report = clean_engine(eng["bob"], existing)
    assert sorted(report.orphans) == ["bob/friends/old/page-00000.txt", "bob/tmp-leftover"]
    assert report.cache_bytes <= limit
    assert report.evicted and all("/friends/" in e.path for e in report.evicted)
    oldest = min((e.first_id for e in report.evicted))
    assert oldest == d.net.now - 299  # the oldest page went first
    assert eng["bob"].profile.ids() == own_before
    # the evicted page is retransmitted on the next pull from the owner
    ev = report.evicted[0]
    assert not any(ev.first_id <= i <= ev.last_id for i in eng["bob"].cache[ev.friend].entries)
    assert eng["bob"].pull_updates(ev.friend) == 100
    assert any(ev.first_id <= i <= ev.last_id for i in eng["bob"].cache[ev.friend].entries)


def test_storage_images_invariant():
    files = {"u/profile/page-00000.txt": b"1\tWallPost\tu\tAll\t-\t\n",
             "u/friends/f/page-00000.txt": b"1\tWallPost\tf\tAll\t-\t\n2\tWallPost\tf\tAll\t-\t\n",
             "u/friends/f/page-00001.txt": b"3\tWallPost\tf\tAll\t-\t\n"}
    existing = {p: len(b) for p, b in files.items()}
    existing["u/orphan"] = 1
    img = StorageImages.from_files(files, existing, cache_limit_bytes=30)
    report = img.clean()
    assert set(img.existing) <= set(img.correct)
    assert img.cache_bytes() <= 30
    assert [e.path for e in report.evicted] == ["u/friends/f/page-00000.txt"]
    assert "u/profile/page-00000.txt" in img.existing
