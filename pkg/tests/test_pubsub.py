"""Broker semantics: idempotent publish, cursor resume, fan-out, retention, wire framing."""

import random
import threading
import time
from collections import Counter, defaultdict
from queue import Empty

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dalton.pubsub import (
    Broker,
    Disconnected,
    MAX_PAYLOAD_BYTES,
    data_topic,
    topic_matches,
    valid_pattern,
    valid_topic,
)
from dalton.wire import WireClient, WireServer, pack_cursor, unpack_cursor


# ---------------------------------------------------------------- topics

@pytest.mark.parametrize("name,ok", [
    ("dalton/cmd", True),
    ("dalton/data/dev-01", True),
    ("a", True),
    ("", False),
    ("a//b", False),
    ("/a", False),
    ("a/", False),
    ("dalton/#", False),          # wildcard is subscribe-only
    ("dalton/da#ta", False),
])
def test_topic_validity(name, ok):
    assert valid_topic(name) is ok


@pytest.mark.parametrize("pattern,ok", [
    ("dalton/data/#", True),
    ("#", True),
    ("dalton/cmd", True),
    ("dalton/#/x", False),        # only a trailing wildcard level
    ("dalton/d#", False),
    ("", False),
])
def test_pattern_validity(pattern, ok):
    assert valid_pattern(pattern) is ok


@pytest.mark.parametrize("pattern,topic,match", [
    ("dalton/data/#", "dalton/data/dev-01", True),
    ("dalton/data/#", "dalton/data/dev-01/extra", True),
    ("dalton/data/#", "dalton/data", False),
    ("dalton/data/#", "dalton/cmd", False),
    ("dalton/cmd", "dalton/cmd", True),
    ("dalton/cmd", "dalton/cmd/x", False),
    ("#", "anything/at/all", True),
])
def test_topic_matching(pattern, topic, match):
    assert topic_matches(pattern, topic) is match


@given(st.lists(st.text(alphabet="abcz09-", min_size=1, max_size=4), min_size=1, max_size=5))
def test_prefix_wildcard_always_matches_deeper_topics(levels):
    topic = "/".join(levels)
    assert topic_matches("#", topic)
    assert topic_matches(levels[0] + "/#", topic) is (len(levels) > 1)


# ---------------------------------------------------------------- publish

def test_publish_duplicate_returns_same_receipt_one_copy():
    b = Broker()
    r1 = b.publish("dalton/cmd", "ctl", 7, b"x")
    r2 = b.publish("dalton/cmd", "ctl", 7, b"x")
    assert r1 == r2
    assert len(b.retained("dalton/cmd")) == 1


def test_publish_payload_cap():
    b = Broker()
    b.publish("t", "p", 0, b"\0" * MAX_PAYLOAD_BYTES)
    with pytest.raises(ValueError):
        b.publish("t", "p", 1, b"\0" * (MAX_PAYLOAD_BYTES + 1))


def test_publish_malformed_topic_rejected():
    b = Broker()
    for bad in ("", "a//b", "dalton/#"):
        with pytest.raises(ValueError):
            b.publish(bad, "p", 0, b"")


def test_retained_window_examples():
    b = Broker(retention_max_msgs=90)
    for i in range(1, 101):
        b.publish("t", "p", i, b"")
    # capacity 90: receipts 1..10 evicted
    assert b.retained_window("t") == (11, 100)
    b2 = Broker()
    for i in range(1, 101):
        b2.publish("t", "p", i, b"")
    assert b2.retained_window("t") == (1, 100)
    assert b2.retained_window("fresh") == ()


def test_retention_by_age():
    now = [0]
    b = Broker(retention_max_age_ms=1000, clock=lambda: now[0])
    b.publish("t", "p", 1, b"old")
    now[0] = 2000
    b.publish("t", "p", 2, b"new")
    assert [e.pub_seq for e in b.retained("t")] == [2]


# ---------------------------------------------------------------- subscribe

def test_subscribe_latest_yields_nothing_until_next_publish():
    b = Broker()
    b.publish("t", "p", 1, b"before")
    s = b.subscribe("t", "s1", latest=True)
    with pytest.raises(Empty):
        s.get(timeout=0.05)
    b.publish("t", "p", 2, b"after")
    assert s.get(timeout=1).payload == b"after"


def test_subscribe_replays_retained_from_cursor():
    b = Broker()
    for i in range(1, 6):
        b.publish("t", "p", i, str(i).encode())
    s = b.subscribe("t", "s1", cursor={("p", "t"): 2})
    got = [s.get(timeout=1).pub_seq for _ in range(3)]
    assert got == [3, 4, 5]


def test_stale_cursor_restarts_from_earliest_retained():
    b = Broker(retention_max_msgs=3)
    for i in range(1, 11):
        b.publish("t", "p", i, b"")
    s = b.subscribe("t", "s1", cursor={("p", "t"): 1})  # long since evicted
    got = [s.get(timeout=1).pub_seq for _ in range(3)]
    assert got == [8, 9, 10]


def test_two_subscribers_each_get_full_copy():
    b = Broker()
    s1 = b.subscribe("dalton/data/#", "a", latest=True)
    s2 = b.subscribe("dalton/data/#", "b", latest=True)
    for i in range(5):
        b.publish(data_topic("dev-01"), "dev-01", i, b"")
    for s in (s1, s2):
        assert [s.get(timeout=1).pub_seq for _ in range(5)] == list(range(5))


def test_wildcard_subscriber_sees_publish_to_device_topic():
    b = Broker()
    s = b.subscribe("dalton/data/#", "s", latest=True)
    b.publish("dalton/data/dev-01", "dev-01", 0, b"hello")
    env = s.get(timeout=1)
    assert env.topic == "dalton/data/dev-01" and env.payload == b"hello"


def test_interleaved_publishers_fifo_per_publisher():
    b = Broker()
    s = b.subscribe("t", "s", latest=True)
    rng = random.Random(42)
    pubs = {f"p{i}": 0 for i in range(3)}
    order = [p for p in pubs for _ in range(200)]
    rng.shuffle(order)
    published = []
    for p in order:
        b.publish("t", p, pubs[p], b"")
        published.append((p, pubs[p]))
        pubs[p] += 1
    got = [s.get(timeout=1) for _ in range(len(order))]
    per_pub = defaultdict(list)
    for env in got:
        per_pub[env.publisher].append(env.pub_seq)
    # each publisher's subsequence is exactly its own publish order
    oracle = defaultdict(list)
    for p, seq in sorted(published, key=lambda t: (t[0],)):  # stable
        oracle[p].append(seq)
    assert per_pub == oracle
    for seqs in per_pub.values():
        assert seqs == sorted(seqs)


def test_overflow_disconnects_then_cursor_resume_fills_gap():
    b = Broker()
    s = b.subscribe("t", "s", buffer=10)
    for i in range(50):
        b.publish("t", "p", i, b"")
    received = []
    with pytest.raises(Disconnected):
        while True:
            received.append(s.get(timeout=0.2).pub_seq)
    assert s.overflowed
    s2 = b.subscribe("t", "s", cursor=s.cursor(), buffer=100)
    while len(received) < 50:
        received.append(s2.get(timeout=1).pub_seq)
    assert received == list(range(50))


def test_close_stops_iteration():
    b = Broker()
    s = b.subscribe("t", "s", latest=True)
    b.publish("t", "p", 0, b"")
    threading.Timer(0.1, s.close).start()
    drained = list(s)
    assert [e.pub_seq for e in drained] == [0]


def test_snapshot_roundtrip(tmp_path):
    b = Broker()
    for i in range(5):
        b.publish("t", "p", i, bytes([i]))
    path = str(tmp_path / "broker.jsonl")
    b.save(path)
    b2 = Broker()
    assert b2.load(path) == 5
    assert b2.retained_window("t") == b.retained_window("t")
    # receipts restored: duplicate publish still deduped
    r = b2.publish("t", "p", 2, bytes([2]))
    assert r == 3 and len(b2.retained("t")) == 5
    # and the log keeps numbering after the restored tail
    assert b2.publish("t", "p", 5, b"x") == 6


# ------------------------------------------------- loss/duplication property

def test_no_loss_no_duplication_under_reconnect_storm():
    """10 publishers x 10k messages, 50 randomized reconnects, multiset equality."""
    b = Broker()
    n_pubs, n_msgs = 10, 10_000
    rng = random.Random(0xDA17)
    published = Counter()

    def publisher(i: int):
        dev = f"dev-{i:02d}"
        own, shared = data_topic(dev), "dalton/events"
        seqs = {own: 0, shared: 0}
        for k in range(n_msgs):
            topic = shared if k % 10 == 3 else own
            seq = seqs[topic]
            b.publish(topic, dev, seq, b"m")
            if k % 1000 == 500:  # retry path: duplicate must not re-enqueue
                b.publish(topic, dev, seq, b"m")
            seqs[topic] += 1

    t0 = time.monotonic()
    threads = [threading.Thread(target=publisher, args=(i,)) for i in range(n_pubs)]
    for t in threads:
        t.start()

    total = n_pubs * n_msgs
    for i in range(n_pubs):
        dev = f"dev-{i:02d}"
        published.update({(dev, data_topic(dev), s): 1 for s in range(9000)})
        published.update({(dev, "dalton/events", s): 1 for s in range(1000)})

    received = Counter()
    last_seen = {}
    drop_at = sorted(rng.sample(range(1, total), 50), reverse=True)
    stream = b.subscribe("dalton/#", "sink")
    count = 0
    deadline = time.monotonic() + 90
    while count < total:
        assert time.monotonic() < deadline, f"stalled at {count}/{total}"
        try:
            env = stream.get(timeout=0.5)
        except Empty:
            continue
        except Disconnected:  # buffer overflow forced a drop; resume
            stream = b.subscribe("dalton/#", "sink", cursor=stream.cursor())
            continue
        key = (env.publisher, env.topic)
        if key in last_seen:
            assert env.pub_seq > last_seen[key], "per-publisher order regressed"
        last_seen[key] = env.pub_seq
        received[(env.publisher, env.topic, env.pub_seq)] += 1
        count += 1
        if drop_at and count == drop_at[-1]:
            drop_at.pop()
            cursor = stream.cursor()  # what a real client would persist
            stream.close()
            stream = b.subscribe("dalton/#", "sink", cursor=cursor)

    for t in threads:
        t.join()
    elapsed = time.monotonic() - t0
    assert received == published, "delivery multiset != publish multiset"
    assert max(received.values()) == 1
    assert elapsed < 60, f"took {elapsed:.1f}s"


# ---------------------------------------------------------------- wire

@pytest.fixture()
def server():
    broker = Broker()
    srv = WireServer(broker).start()
    yield srv
    srv.stop()


def test_cursor_blob_roundtrip():
    cur = {("dev-01", "dalton/data/dev-01"): 41, ("ctl", "dalton/cmd"): 7}
    assert unpack_cursor(pack_cursor(cur)) == cur


def test_wire_publish_subscribe_roundtrip(server):
    host, port = server.address
    pub = WireClient(host, port, "dev-01")
    sub = WireClient(host, port, "portal")
    sub.subscribe("dalton/data/#")
    for i in range(20):
        r = pub.publish(data_topic("dev-01"), i, f"s{i}".encode())
        assert r == i + 1
    got = [sub.recv(timeout=5) for _ in range(20)]
    assert [e.pub_seq for e in got] == list(range(20))
    assert got[3].payload == b"s3" and got[0].publisher == "dev-01"
    assert pub.ping()
    pub.close(), sub.close()


def test_wire_duplicate_publish_same_receipt(server):
    host, port = server.address
    c = WireClient(host, port, "dev-02")
    r1 = c.publish("dalton/errors", 9, b"e")
    r2 = c.publish("dalton/errors", 9, b"e")
    assert r1 == r2
    c.close()


def test_wire_reconnect_with_cursor_no_gap_no_dup(server):
    host, port = server.address
    pub = WireClient(host, port, "dev-03")
    for i in range(10):
        pub.publish(data_topic("dev-03"), i, b"")
    sub = WireClient(host, port, "portal")
    sub.subscribe("dalton/data/#")
    seen = {}
    for _ in range(4):
        env = sub.recv(timeout=5)
        seen[(env.publisher, env.topic)] = env.pub_seq
    sub.close()  # mid-stream drop
    for i in range(10, 15):
        pub.publish(data_topic("dev-03"), i, b"")
    sub2 = WireClient(host, port, "portal")
    sub2.subscribe("dalton/data/#", cursor=seen)
    rest = [sub2.recv(timeout=5).pub_seq for _ in range(11)]
    assert rest == list(range(4, 15))
    pub.close(), sub2.close()


def test_wire_subscribe_latest_skips_history(server):
    host, port = server.address
    pub = WireClient(host, port, "dev-04")
    pub.publish(data_topic("dev-04"), 0, b"old")
    sub = WireClient(host, port, "portal")
    sub.subscribe("dalton/data/#", latest=True)
    time.sleep(0.1)
    pub.publish(data_topic("dev-04"), 1, b"new")
    env = sub.recv(timeout=5)
    assert env.pub_seq == 1 and env.payload == b"new"
    pub.close(), sub.close()


def test_wire_oversize_publish_drops_connection(server):
    host, port = server.address
    c = WireClient(host, port, "dev-05")
    with pytest.raises((ConnectionError, Empty)):
        c.publish("dalton/errors", 0, b"\0" * (MAX_PAYLOAD_BYTES + 1), timeout=5)
    c.close()
