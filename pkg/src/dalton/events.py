"""Event extraction and cross-device association.

Per device: change points carve the timeline into candidate segments; a
segment is kept only when at least one channel shifts by >= k MADs against
its preceding baseline (noisy-fluctuation suppression). Across devices:
segments group when their rooms are within one hop on the floor plan and
their intervals overlap strongly; each group raises a single annotation
prompt.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import RANGES, Channel
from .cpd import (
    DEFAULT_MIN_SEP,
    DEFAULT_TAU,
    DEFAULT_WINDOW,
    cpd_score,
    extract_changepoints,
    normalize,
)

__all__ = [
    "DetectorConfig",
    "Segment",
    "EventGroup",
    "AdjacencyGraph",
    "detect_device_events",
    "detect_events",
    "associate",
    "EventGroupStore",
    "AnnotationError",
    "export_groups_csv",
    "EVENT_CSV_HEADER",
]

log = logging.getLogger(__name__)

EVENT_CSV_HEADER = [
    "group_id", "device", "room", "channels",
    "t_start_ms", "t_end_ms", "magnitude", "annotation",
]


@dataclass(frozen=True)
class DetectorConfig:
    window: int = DEFAULT_WINDOW          # samples
    tau: float = DEFAULT_TAU
    min_sep: int = DEFAULT_MIN_SEP        # samples
    k_mad: float = 3.0                    # significance gate
    min_event_s: int = 120
    merge_s: int = 60                     # boundary merge window
    theta: float = 0.5                    # association overlap threshold
    slack_ms: int = 30_000                # clock-skew slack for overlap


@dataclass(frozen=True)
class Segment:
    device: str
    channels: tuple[str, ...]             # sorted channel values, e.g. ("co2","voc")
    t_start: int                          # ms
    t_end: int                            # ms
    magnitude: float

    def __post_init__(self) -> None:
        if not self.t_start < self.t_end:
            raise ValueError("segment must have t_start < t_end")

    @property
    def length_ms(self) -> int:
        return self.t_end - self.t_start


@dataclass(frozen=True)
class EventGroup:
    group_id: int
    members: tuple[Segment, ...]
    created_at: int
    annotation: dict | None = None

    def to_json(self) -> dict:
        return {
            "group_id": self.group_id,
            "created_at": self.created_at,
            "members": [
                {
                    "device": m.device,
                    "channels": list(m.channels),
                    "t_start_ms": m.t_start,
                    "t_end_ms": m.t_end,
                    "magnitude": m.magnitude,
                }
                for m in self.members
            ],
            "annotation": self.annotation,
        }

    @staticmethod
    def from_json(d: dict) -> "EventGroup":
        members = tuple(
            Segment(
                device=m["device"],
                channels=tuple(m["channels"]),
                t_start=m["t_start_ms"],
                t_end=m["t_end_ms"],
                magnitude=m["magnitude"],
            )
            for m in d["members"]
        )
        return EventGroup(d["group_id"], members, d["created_at"], d.get("annotation"))


class AdjacencyGraph:
    """Rooms, adjacency edges, and the device -> room placement map."""

    def __init__(
        self,
        rooms: Iterable[str],
        edges: Iterable[tuple[str, str]],
        device_room: Mapping[str, str],
    ) -> None:
        self.rooms = frozenset(rooms)
        self.edges = frozenset(frozenset(e) for e in edges)
        for e in self.edges:
            if not e <= self.rooms:
                raise ValueError(f"edge {sorted(e)} references unknown room")
        self.device_room = dict(device_room)
        for dev, room in self.device_room.items():
            if room not in self.rooms:
                raise ValueError(f"device {dev} placed in unknown room {room}")

    @staticmethod
    def from_floorplan_dict(plan: Mapping) -> "AdjacencyGraph":
        rooms = [r["name"] for r in plan["rooms"]]
        edges = [(e["room_a"], e["room_b"]) for e in plan.get("edges", [])]
        return AdjacencyGraph(rooms, edges, plan.get("placements", {}))

    def room_of(self, device: str) -> str | None:
        return self.device_room.get(device)

    def within_one_hop(self, room_a: str, room_b: str) -> bool:
        if room_a == room_b:
            return True
        return frozenset((room_a, room_b)) in self.edges


# ---------------------------------------------------------------------------
# per-device event detection
# ---------------------------------------------------------------------------

def detect_device_events(
    device: str,
    ts: Sequence[int] | np.ndarray,
    values: Mapping[Channel, np.ndarray],
    cfg: DetectorConfig = DetectorConfig(),
) -> list[Segment]:
    """Full per-device pipeline: normalize, score, extract change points on
    every channel, then gate candidate segments into events."""
    ts_arr = np.asarray(ts, dtype=np.int64)
    cps_ms: list[int] = []
    for channel, x in values.items():
        arr = np.asarray(x, dtype=np.float64)
        if arr.size != ts_arr.size:
            raise ValueError(f"{channel}: series length mismatch")
        if arr.size < 2 * cfg.window:
            continue
        z = normalize(arr, RANGES[channel].resolution)
        scores = cpd_score(z, cfg.window)
        for cp in extract_changepoints(scores, cfg.tau, cfg.min_sep):
            cps_ms.append(int(ts_arr[cp.index]))
    return detect_events(device, ts_arr, values, cps_ms, cfg)


def _merge_boundaries(cps_ms: Iterable[int], merge_ms: int) -> list[int]:
    """Cluster change-point times closer than merge_ms; each cluster is
    represented by its first (earliest) member."""
    out: list[int] = []
    for t in sorted(set(cps_ms)):
        if out and t - out[-1] < merge_ms:
            continue
        out.append(t)
    return out


def detect_events(
    device: str,
    ts: np.ndarray,
    values: Mapping[Channel, np.ndarray],
    cps_ms: Iterable[int],
    cfg: DetectorConfig = DetectorConfig(),
) -> list[Segment]:
    """Candidate segments between consecutive boundaries (merged change
    points plus the stream ends); keep those where some channel's median
    shifts >= k_mad MADs from the preceding equal-length baseline."""
    ts = np.asarray(ts, dtype=np.int64)
    if ts.size == 0:
        return []
    boundaries = _merge_boundaries(cps_ms, cfg.merge_s * 1000)
    edges = [int(ts[0])] + [t for t in boundaries if ts[0] < t < ts[-1]] + [int(ts[-1]) + 1]

    segments: list[Segment] = []
    for t0, t1 in zip(edges[:-1], edges[1:]):
        if t1 - t0 < cfg.min_event_s * 1000:
            continue  # too short: noise
        i0, i1 = np.searchsorted(ts, t0), np.searchsorted(ts, t1)
        if i1 - i0 < 2:
            continue
        base0 = np.searchsorted(ts, t0 - (t1 - t0))
        hit_channels: list[str] = []
        magnitude = 0.0
        for channel, x in values.items():
            arr = np.asarray(x, dtype=np.float64)
            seg = arr[i0:i1]
            base = arr[base0:i0]
            if base.size < max(30, seg.size // 4):
                continue  # not enough history to judge significance
            base_med = float(np.median(base))
            base_mad = float(np.median(np.abs(base - base_med)))
            base_mad = max(base_mad, RANGES[channel].resolution)
            ratio = abs(float(np.median(seg)) - base_med) / base_mad
            magnitude = max(magnitude, ratio)
            if ratio >= cfg.k_mad:
                hit_channels.append(channel.value)
        if hit_channels:
            segments.append(
                Segment(
                    device=device,
                    channels=tuple(sorted(hit_channels)),
                    t_start=t0,
                    t_end=t1,
                    magnitude=round(magnitude, 6),
                )
            )
    return segments


# ---------------------------------------------------------------------------
# association
# ---------------------------------------------------------------------------

def _overlap_ratio(a: Segment, b: Segment, slack_ms: int) -> float:
    inter = min(a.t_end, b.t_end) - max(a.t_start, b.t_start) + slack_ms
    if inter <= 0:
        return 0.0
    shorter = min(a.length_ms, b.length_ms)
    return min(inter / shorter, 1.0)


class _UnionFind:
    def __init__(self, n: int) -> None:
        self.parent = list(range(n))

    def find(self, i: int) -> int:
        while self.parent[i] != i:
            self.parent[i] = self.parent[self.parent[i]]
            i = self.parent[i]
        return i

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # keep the smaller root so grouping is order-independent
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def associate(
    segments: Sequence[Segment],
    graph: AdjacencyGraph,
    theta: float = 0.5,
    slack_ms: int = 30_000,
    created_at: int | None = None,
) -> list[EventGroup]:
    """Group segments whose rooms are <= 1 hop apart and whose intervals
    overlap by >= theta of the shorter one; transitive closure.

    Segments from devices absent from the floor plan form singleton groups
    (a warning is logged). Output order and group ids are deterministic
    functions of the segment set.
    """
    if not 0.0 < theta <= 1.0:
        raise ValueError("theta must be in (0, 1]")
    ordered = sorted(segments, key=lambda s: (s.t_start, s.device, s.t_end, s.channels))
    uf = _UnionFind(len(ordered))
    for i, a in enumerate(ordered):
        room_a = graph.room_of(a.device)
        if room_a is None:
            log.warning("device %s not on floor plan; segment kept as singleton", a.device)
            continue
        for j in range(i + 1, len(ordered)):
            b = ordered[j]
            room_b = graph.room_of(b.device)
            if room_b is None:
                continue
            if not graph.within_one_hop(room_a, room_b):
                continue
            if _overlap_ratio(a, b, slack_ms) >= theta:
                uf.union(i, j)

    clusters: dict[int, list[Segment]] = {}
    for i, seg in enumerate(ordered):
        clusters.setdefault(uf.find(i), []).append(seg)

    groups: list[EventGroup] = []
    for gid, root in enumerate(sorted(clusters), start=1):
        members = tuple(clusters[root])
        stamp = created_at if created_at is not None else max(m.t_end for m in members)
        groups.append(EventGroup(group_id=gid, members=members, created_at=stamp))
    return groups


# ---------------------------------------------------------------------------
# group store + annotation binding
# ---------------------------------------------------------------------------

class AnnotationError(Exception):
    def __init__(self, message: str, current: dict | None = None) -> None:
        super().__init__(message)
        self.current = current


class EventGroupStore:
    """Owner of all EventGroups and their annotations.

    Thread-safe; optionally persists every state change to a JSONL file so
    a restarted service resumes with the same pending queue.
    """

    def __init__(self, path: Path | None = None) -> None:
        self._lock = threading.Lock()
        self._groups: dict[int, EventGroup] = {}
        self._path = Path(path) if path else None
        if self._path and self._path.exists():
            for line in self._path.read_text().splitlines():
                if line.strip():
                    g = EventGroup.from_json(json.loads(line))
                    self._groups[g.group_id] = g

    def _persist(self) -> None:
        if self._path:
            tmp = self._path.with_suffix(".tmp")
            with tmp.open("w") as fh:
                for gid in sorted(self._groups):
                    fh.write(json.dumps(self._groups[gid].to_json(), sort_keys=True) + "\n")
            tmp.replace(self._path)

    def next_group_id(self) -> int:
        with self._lock:
            return max(self._groups, default=0) + 1

    def add(self, group: EventGroup) -> EventGroup:
        with self._lock:
            if group.group_id in self._groups:
                raise ValueError(f"group id {group.group_id} already present")
            self._groups[group.group_id] = group
            self._persist()
            return group

    def get(self, group_id: int) -> EventGroup | None:
        with self._lock:
            return self._groups.get(group_id)

    def all_groups(self) -> list[EventGroup]:
        with self._lock:
            return [self._groups[g] for g in sorted(self._groups)]

    def pending(self) -> list[EventGroup]:
        with self._lock:
            return [
                self._groups[g] for g in sorted(self._groups)
                if self._groups[g].annotation is None
            ]

    def bind_annotation(self, group_id: int, user: str, text: str, ts: int) -> EventGroup:
        """Attach an annotation; a group accepts exactly one."""
        with self._lock:
            group = self._groups.get(group_id)
            if group is None:
                raise AnnotationError(f"unknown group {group_id}")
            if group.annotation is not None:
                raise AnnotationError(
                    f"group {group_id} already annotated", current=group.annotation
                )
            updated = replace(
                group, annotation={"user": user, "text": text, "ts": ts}
            )
            self._groups[group_id] = updated
            self._persist()
            return updated


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def export_groups_csv(groups: Iterable[EventGroup], graph: AdjacencyGraph | None) -> str:
    """One row per member segment; channels pipe-joined; deterministic."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVENT_CSV_HEADER)
    for group in groups:
        for m in sorted(group.members, key=lambda s: (s.t_start, s.device)):
            room = graph.room_of(m.device) if graph else None
            writer.writerow(
                [
                    group.group_id,
                    m.device,
                    room or "",
                    "|".join(m.channels),
                    m.t_start,
                    m.t_end,
                    f"{m.magnitude:.3f}",
                    group.annotation["text"] if group.annotation else "",
                ]
            )
    return buf.getvalue()
