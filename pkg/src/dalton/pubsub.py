"""Publish/subscribe broker: per-publisher FIFO, cursor resume, bounded fan-out.

The broker can be embedded in-process (this module) or fronted by the TCP
framing in :mod:`dalton.wire`. Delivery is at-least-once on the transport;
each subscriber stream deduplicates against its cursor, so a consumer that
resumes from a persisted cursor sees every matching message exactly once.
"""

from __future__ import annotations

import json
import logging
import os
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from queue import Empty, Full, Queue
from typing import Final, Iterable, Iterator, Mapping, Optional

__all__ = [
    "Envelope",
    "Broker",
    "SubscriberStream",
    "Disconnected",
    "Cursor",
    "MAX_PAYLOAD_BYTES",
    "DEFAULT_BUFFER",
    "RETENTION_MAX_MSGS",
    "RETENTION_MAX_AGE_MS",
    "TOPIC_DATA_PREFIX",
    "TOPIC_CMD",
    "TOPIC_ANNOTATIONS",
    "TOPIC_ERRORS",
    "TOPIC_EVENTS",
    "data_topic",
    "valid_topic",
    "valid_pattern",
    "topic_matches",
]

log = logging.getLogger(__name__)

MAX_PAYLOAD_BYTES: Final = 256 * 1024
DEFAULT_BUFFER: Final = 10_000
RETENTION_MAX_MSGS: Final = 1_000_000
RETENTION_MAX_AGE_MS: Final = 24 * 3600 * 1000

TOPIC_DATA_PREFIX: Final = "dalton/data/"
TOPIC_CMD: Final = "dalton/cmd"
TOPIC_ANNOTATIONS: Final = "dalton/annotations"
TOPIC_ERRORS: Final = "dalton/errors"
TOPIC_EVENTS: Final = "dalton/events"

# cursor maps (publisher, topic) -> last pub_seq the consumer has fully handled
Cursor = dict


def data_topic(device_id: str) -> str:
    return TOPIC_DATA_PREFIX + device_id


def valid_topic(name: str) -> bool:
    """Publishable topic: non-empty printable levels, no wildcards."""
    if not name or not name.isprintable():
        return False
    levels = name.split("/")
    return all(lv and "#" not in lv for lv in levels)


def valid_pattern(pattern: str) -> bool:
    """Subscription pattern: a topic, optionally ending in a `#` level."""
    if not pattern or not pattern.isprintable():
        return False
    levels = pattern.split("/")
    for i, lv in enumerate(levels):
        if not lv:
            return False
        if "#" in lv and not (lv == "#" and i == len(levels) - 1):
            return False
    return True


def topic_matches(pattern: str, topic: str) -> bool:
    """Trailing `#` matches that level and everything below it."""
    if pattern == topic:
        return True
    if pattern.endswith("#"):
        prefix = pattern[:-1]  # keep the slash: "dalton/data/" or "" for bare "#"
        if prefix == "":
            return True
        return topic.startswith(prefix) and len(topic) > len(prefix)
    return False


@dataclass(frozen=True)
class Envelope:
    """One message as retained and delivered by the broker."""

    topic: str
    publisher: str
    pub_seq: int
    payload: bytes
    broker_ts: int = 0

    def key(self) -> tuple[str, str, int]:
        return (self.publisher, self.topic, self.pub_seq)


class Disconnected(Exception):
    """The broker dropped this stream (buffer overflow or explicit close).

    The consumer should re-subscribe with its cursor; retained replay fills
    the gap, so nothing is lost.
    """


class _TopicLog:
    __slots__ = ("entries", "next_seq", "receipts")

    def __init__(self) -> None:
        self.entries: deque[tuple[int, Envelope]] = deque()  # (broker_seq, env)
        self.next_seq = 1
        self.receipts: dict[tuple[str, int], int] = {}  # (publisher, pub_seq) -> broker_seq


@dataclass
class _Sub:
    pattern: str
    stream: "SubscriberStream"


class SubscriberStream:
    """Single-consumer view of a subscription.

    Iterating (or calling :meth:`get`) yields envelopes in broker order,
    deduplicated against the resume cursor; the cursor advances as messages
    are handed out, so :meth:`cursor` is always safe to persist.
    """

    def __init__(
        self,
        broker: "Broker",
        subscriber_id: str,
        pattern: str,
        replay: list[Envelope],
        cursor: Optional[Mapping] = None,
        buffer: int = DEFAULT_BUFFER,
    ) -> None:
        self._broker = broker
        self.subscriber_id = subscriber_id
        self.pattern = pattern
        self._replay = replay
        self._replay_idx = 0
        self._queue: Queue = Queue(maxsize=buffer)
        self._seen: dict[tuple[str, str], int] = dict(cursor or {})
        self._closed = threading.Event()
        self._overflowed = False

    # -- consumer side -------------------------------------------------

    def get(self, timeout: Optional[float] = None) -> Envelope:
        """Next envelope; raises Empty on timeout, Disconnected when dropped."""
        deadline = None if timeout is None else time.monotonic() + timeout
        while True:
            if self._replay_idx < len(self._replay):
                env = self._replay[self._replay_idx]
                self._replay_idx += 1
            else:
                if self._closed.is_set() and self._queue.empty():
                    raise Disconnected(self.subscriber_id)
                remaining = None
                if deadline is not None:
                    remaining = max(0.0, deadline - time.monotonic())
                try:
                    env = self._queue.get(timeout=remaining if timeout is not None else 0.1)
                except Empty:
                    if timeout is not None:
                        raise
                    continue
                if env is None:  # close sentinel
                    raise Disconnected(self.subscriber_id)
            k = (env.publisher, env.topic)
            if env.pub_seq <= self._seen.get(k, -1):
                continue  # duplicate from replay/live overlap
            self._seen[k] = env.pub_seq
            return env

    def __iter__(self) -> Iterator[Envelope]:
        while True:
            try:
                yield self.get()
            except Disconnected:
                return

    def cursor(self) -> dict[tuple[str, str], int]:
        """Snapshot of the highest pub_seq delivered per (publisher, topic)."""
        return dict(self._seen)

    def close(self) -> None:
        self._broker._drop(self)
        self._mark_closed()

    @property
    def overflowed(self) -> bool:
        return self._overflowed

    # -- broker side ---------------------------------------------------

    def _offer(self, env: Envelope) -> bool:
        try:
            self._queue.put_nowait(env)
            return True
        except Full:
            return False

    def _mark_closed(self) -> None:
        if not self._closed.is_set():
            self._closed.set()
            try:
                self._queue.put_nowait(None)
            except Full:
                pass  # consumer will hit the closed flag once it drains


class Broker:
    """Thread-safe topic log with retained replay and live fan-out."""

    def __init__(
        self,
        retention_max_msgs: int = RETENTION_MAX_MSGS,
        retention_max_age_ms: int = RETENTION_MAX_AGE_MS,
        clock=None,
    ) -> None:
        self._lock = threading.RLock()
        self._topics: dict[str, _TopicLog] = {}
        self._subs: list[_Sub] = []
        self._retention_max_msgs = retention_max_msgs
        self._retention_max_age_ms = retention_max_age_ms
        self._clock = clock or (lambda: int(time.time() * 1000))

    # -- publishing ----------------------------------------------------

    def publish(self, topic: str, publisher: str, pub_seq: int, payload: bytes) -> int:
        """Enqueue one message; returns the broker receipt (per-topic seq).

        Re-publishing the same (publisher, topic, pub_seq) is acknowledged
        with the original receipt and the log keeps a single copy.
        """
        if not valid_topic(topic):
            raise ValueError(f"malformed topic: {topic!r}")
        if not isinstance(payload, (bytes, bytearray)):
            raise TypeError("payload must be bytes")
        if len(payload) > MAX_PAYLOAD_BYTES:
            raise ValueError(f"payload {len(payload)} B exceeds {MAX_PAYLOAD_BYTES} B cap")
        if pub_seq < 0:
            raise ValueError("pub_seq must be non-negative")
        now = self._clock()
        with self._lock:
            tlog = self._topics.setdefault(topic, _TopicLog())
            rk = (publisher, int(pub_seq))
            prior = tlog.receipts.get(rk)
            if prior is not None:
                return prior
            broker_seq = tlog.next_seq
            tlog.next_seq += 1
            env = Envelope(topic, publisher, int(pub_seq), bytes(payload), now)
            tlog.entries.append((broker_seq, env))
            tlog.receipts[rk] = broker_seq
            self._evict(tlog, now)
            for sub in list(self._subs):
                if topic_matches(sub.pattern, topic):
                    if not sub.stream._offer(env):
                        # bounded buffer: drop the subscriber, never the message
                        log.warning(
                            "subscriber %s overflowed (buffer %d), disconnecting",
                            sub.stream.subscriber_id, sub.stream._queue.maxsize,
                        )
                        sub.stream._overflowed = True
                        self._subs.remove(sub)
                        sub.stream._mark_closed()
            return broker_seq

    def publish_envelope(self, env: Envelope) -> int:
        return self.publish(env.topic, env.publisher, env.pub_seq, env.payload)

    def _evict(self, tlog: _TopicLog, now: int) -> None:
        horizon = now - self._retention_max_age_ms
        while tlog.entries and (
            len(tlog.entries) > self._retention_max_msgs
            or tlog.entries[0][1].broker_ts < horizon
        ):
            _, old = tlog.entries.popleft()
            tlog.receipts.pop((old.publisher, old.pub_seq), None)

    # -- subscribing ---------------------------------------------------

    def subscribe(
        self,
        pattern: str,
        subscriber_id: str = "",
        cursor: Optional[Mapping] = None,
        latest: bool = False,
        buffer: int = DEFAULT_BUFFER,
    ) -> SubscriberStream:
        """Open a stream over `pattern`.

        With `latest=True` only messages published after this call are
        delivered. Otherwise retained messages beyond `cursor` are replayed
        first; a cursor that points below the retained window simply replays
        from the earliest retained message.
        """
        if not valid_pattern(pattern):
            raise ValueError(f"malformed pattern: {pattern!r}")
        cur = {tuple(k) if not isinstance(k, tuple) else k: v for k, v in (cursor or {}).items()}
        with self._lock:
            replay: list[Envelope] = []
            if not latest:
                merged: list[tuple[int, int, Envelope]] = []
                for topic, tlog in self._topics.items():
                    if topic_matches(pattern, topic):
                        for bseq, env in tlog.entries:
                            if env.pub_seq > cur.get((env.publisher, env.topic), -1):
                                merged.append((env.broker_ts, bseq, env))
                merged.sort(key=lambda t: (t[0], t[1]))
                replay = [env for _, _, env in merged]
            stream = SubscriberStream(self, subscriber_id, pattern, replay, cur, buffer)
            self._subs.append(_Sub(pattern, stream))
            return stream

    def _drop(self, stream: SubscriberStream) -> None:
        with self._lock:
            self._subs = [s for s in self._subs if s.stream is not stream]

    # -- introspection ---------------------------------------------------

    def retained_window(self, topic: str) -> tuple[int, ...]:
        """(earliest_seq, latest_seq) of retained broker receipts, or ()."""
        with self._lock:
            tlog = self._topics.get(topic)
            if tlog is None or not tlog.entries:
                return ()
            return (tlog.entries[0][0], tlog.entries[-1][0])

    def topics(self) -> list[str]:
        with self._lock:
            return sorted(self._topics)

    def retained(self, topic: str) -> list[Envelope]:
        with self._lock:
            tlog = self._topics.get(topic)
            return [env for _, env in tlog.entries] if tlog else []

    # -- persistence -----------------------------------------------------

    def save(self, path: str) -> None:
        """Write retained state as JSONL; atomic via tmp + rename."""
        tmp = path + ".tmp"
        with self._lock:
            with open(tmp, "w", encoding="utf-8") as fh:
                for topic in sorted(self._topics):
                    tlog = self._topics[topic]
                    for bseq, env in tlog.entries:
                        fh.write(json.dumps({
                            "topic": env.topic,
                            "publisher": env.publisher,
                            "pub_seq": env.pub_seq,
                            "payload": env.payload.hex(),
                            "broker_ts": env.broker_ts,
                            "broker_seq": bseq,
                        }) + "\n")
        os.replace(tmp, path)

    def load(self, path: str) -> int:
        """Restore retained state written by :meth:`save`; returns row count."""
        n = 0
        with self._lock:
            with open(path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    row = json.loads(line)
                    tlog = self._topics.setdefault(row["topic"], _TopicLog())
                    bseq = int(row["broker_seq"])
                    env = Envelope(
                        row["topic"], row["publisher"], int(row["pub_seq"]),
                        bytes.fromhex(row["payload"]), int(row["broker_ts"]),
                    )
                    tlog.entries.append((bseq, env))
                    tlog.receipts[(env.publisher, env.pub_seq)] = bseq
                    tlog.next_seq = max(tlog.next_seq, bseq + 1)
                    n += 1
        return n
