"""Stream ingestion: demultiplex per device, validate, persist, flag anomalies.

Day files live at `<root>/data/<device_id>/<YYYY-MM-DD>.csv` (UTC split on the
device timestamp). Each row prefixes the canonical sample row with
`arrival_ts_ms,valid`, where valid is OK or semicolon-joined channel:value
range violations. `index.txt` beside the day files lists them with row counts.

Anomaly signals ride `dalton/errors` so the control plane can react without a
direct dependency.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty
from typing import Callable, Optional

from .core import (
    CHANNELS,
    CSV_HEADER,
    Channel,
    SensorSample,
    format_value,
    sample_from_csv_row,
    utc_day,
    validate_sample,
)
from .pubsub import Broker, Disconnected, TOPIC_DATA_PREFIX, TOPIC_ERRORS

__all__ = [
    "AnomalySignal",
    "AnomalyDetector",
    "detect_anomaly",
    "DeviceStore",
    "StoredRecord",
    "IngestPipeline",
    "read_day",
    "read_device",
    "load_device_series",
    "DAY_FILE_HEADER",
    "R_PERSIST",
    "S_STUCK",
    "G_GAP_S",
]

log = logging.getLogger(__name__)

R_PERSIST = 5       # consecutive samples to confirm a range/zero episode
S_STUCK = 600       # consecutive identical samples to call a channel stuck
G_GAP_S = 30        # arrival-clock seconds of silence to call a gap

DAY_FILE_HEADER = "arrival_ts_ms,valid," + CSV_HEADER


@dataclass(frozen=True)
class AnomalySignal:
    device: str
    kind: str                       # RANGE_VIOLATION | STUCK_SENSOR | UNINITIALIZED | GAP
    detected_at: int                # ms, device-time scale
    channel: Optional[Channel] = None
    evidence: dict = field(default_factory=dict)

    def to_json(self) -> str:
        d = {
            "device": self.device,
            "kind": self.kind,
            "detected_at": self.detected_at,
            "channel": self.channel.value if self.channel else None,
            "evidence": self.evidence,
        }
        return json.dumps(d, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "AnomalySignal":
        d = json.loads(text)
        ch = Channel(d["channel"]) if d.get("channel") else None
        return AnomalySignal(d["device"], d["kind"], int(d["detected_at"]),
                             ch, d.get("evidence", {}))


class _Episode:
    """Run-length state for one edge-triggered condition."""

    __slots__ = ("run", "armed", "clear_streak")

    def __init__(self) -> None:
        self.run = 0
        self.armed = True
        self.clear_streak = 0

    def update(self, active: bool, threshold: int, rearm: int) -> bool:
        """Advance one sample; True exactly when the episode first confirms."""
        if active:
            self.run += 1
            self.clear_streak = 0
            if self.run >= threshold and self.armed:
                self.armed = False
                return True
        else:
            self.run = 0
            if not self.armed:
                self.clear_streak += 1
                if self.clear_streak >= rearm:
                    self.armed = True
                    self.clear_streak = 0
        return False


class AnomalyDetector:
    """Per-device incremental detector; feed samples in seq order."""

    def __init__(self, device: str, r: int = R_PERSIST, s: int = S_STUCK,
                 gap_s: int = G_GAP_S) -> None:
        self.device = device
        self.r = r
        self.s = s
        self.gap_s = gap_s
        self._range = {c: _Episode() for c in CHANNELS}
        self._zero = _Episode()
        self._stuck = {c: _Episode() for c in CHANNELS}
        self._last_values: Optional[dict[Channel, float]] = None
        self._stuck_other_varied = {c: False for c in CHANNELS}
        self._gap_armed = True
        self._gap_clear = 0
        self.last_sample_ts: Optional[int] = None
        self.last_arrival: Optional[float] = None

    def feed(self, sample: SensorSample, arrival_s: Optional[float] = None) -> list[AnomalySignal]:
        out: list[AnomalySignal] = []
        if arrival_s is not None:
            if not self._gap_armed:
                self._gap_clear += 1
                if self._gap_clear >= self.r:
                    self._gap_armed = True
                    self._gap_clear = 0
            self.last_arrival = arrival_s
        all_zero = all(v == 0.0 for v in sample.values.values())
        if self._zero.update(all_zero, self.r, self.r):
            out.append(AnomalySignal(
                self.device, "UNINITIALIZED", sample.ts,
                evidence={"run": self._zero.run, "seq": sample.seq}))
        if not all_zero:
            # zero vectors are a sentinel, not individual range faults
            violated = {v.channel for v in validate_sample(sample)}
            for c in CHANNELS:
                if self._range[c].update(c in violated, self.r, self.r):
                    out.append(AnomalySignal(
                        self.device, "RANGE_VIOLATION", sample.ts, c,
                        evidence={"value": sample.values[c], "run": self._range[c].run}))
        # stuck: identical run on one channel while some other channel moves;
        # all-zero rows are the uninitialized sentinel, not stuck evidence
        if not all_zero and self._last_values is not None:
            changed = {c for c in CHANNELS if sample.values[c] != self._last_values[c]}
            for c in CHANNELS:
                if c in changed:
                    self._stuck_other_varied[c] = False
                elif changed:
                    self._stuck_other_varied[c] = True
                same = c not in changed and self._stuck_other_varied[c]
                # s identical samples = s-1 unchanged transitions
                if self._stuck[c].update(same, self.s - 1, self.r):
                    out.append(AnomalySignal(
                        self.device, "STUCK_SENSOR", sample.ts, c,
                        evidence={"value": sample.values[c], "run": self._stuck[c].run}))
        self._last_values = dict(sample.values)
        self.last_sample_ts = sample.ts
        return out

    def check_gap(self, now_arrival_s: float) -> list[AnomalySignal]:
        """Call periodically with the arrival clock; fires once per silence."""
        if self.last_arrival is None:
            return []
        if now_arrival_s - self.last_arrival >= self.gap_s and self._gap_armed:
            self._gap_armed = False
            self._gap_clear = 0
            detected = (self.last_sample_ts or 0) + self.gap_s * 1000
            return [AnomalySignal(
                self.device, "GAP", detected,
                evidence={"silent_s": round(now_arrival_s - self.last_arrival, 3)})]
        return []


def detect_anomaly(device: str, samples: list[SensorSample], *,
                   r: int = R_PERSIST, s: int = S_STUCK) -> list[AnomalySignal]:
    """Batch wrapper over AnomalyDetector for a window of samples."""
    det = AnomalyDetector(device, r=r, s=s)
    out: list[AnomalySignal] = []
    for smp in samples:
        out.extend(det.feed(smp))
    return out


# ---------------------------------------------------------------- storage

@dataclass(frozen=True)
class StoredRecord:
    arrival_ts: int
    valid: str                      # "OK" or semicolon-joined channel:value
    sample: SensorSample

    @property
    def ok(self) -> bool:
        return self.valid == "OK"


def _valid_cell(sample: SensorSample) -> str:
    violations = validate_sample(sample)
    if not violations:
        return "OK"
    return ";".join(f"{v.channel.value}:{format_value(v.value)}" for v in violations)


class DeviceStore:
    """Append-only day files for one device; the only writer for that device."""

    def __init__(self, root: Path, device_id: str) -> None:
        self.dir = Path(root) / "data" / device_id
        self.dir.mkdir(parents=True, exist_ok=True)
        self.device_id = device_id
        self._fh = None
        self._open_day: Optional[str] = None
        self._counts: dict[str, int] = {}
        self.max_seq = -1
        self._load_existing()

    def _load_existing(self) -> None:
        days = sorted(p.name[:-4] for p in self.dir.glob("*.csv"))
        for day in days:
            with open(self.dir / f"{day}.csv", encoding="utf-8") as fh:
                rows = fh.read().splitlines()
            self._counts[day] = max(0, len(rows) - 1)
            if len(rows) > 1:
                last = rows[-1].split(",")
                self.max_seq = max(self.max_seq, int(last[3]))

    def append(self, sample: SensorSample, arrival_ts: int, row_text: str) -> bool:
        """Write one pre-rendered canonical row; False if seq already stored."""
        if sample.seq <= self.max_seq:
            if sample.seq < self.max_seq:
                log.warning("%s: dropping stale seq %d (have %d)",
                            self.device_id, sample.seq, self.max_seq)
            return False
        day = utc_day(sample.ts)
        if day != self._open_day:
            self._roll(day)
        self._fh.write(f"{arrival_ts},{_valid_cell(sample)},{row_text}\n")
        self._counts[day] = self._counts.get(day, 0) + 1
        self.max_seq = sample.seq
        return True

    def _roll(self, day: str) -> None:
        if self._fh is not None:
            self._fh.close()
        path = self.dir / f"{day}.csv"
        fresh = not path.exists()
        self._fh = open(path, "a", encoding="utf-8")
        if fresh:
            self._fh.write(DAY_FILE_HEADER + "\n")
        self._open_day = day

    def flush(self) -> None:
        if self._fh is not None:
            self._fh.flush()
        self._write_index()

    def _write_index(self) -> None:
        tmp = self.dir / "index.txt.tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for day in sorted(self._counts):
                fh.write(f"{day}.csv {self._counts[day]}\n")
        tmp.replace(self.dir / "index.txt")

    def close(self) -> None:
        self.flush()
        if self._fh is not None:
            self._fh.close()
            self._fh = None
            self._open_day = None


def read_day(root: Path, device_id: str, day: str) -> list[StoredRecord]:
    path = Path(root) / "data" / device_id / f"{day}.csv"
    out: list[StoredRecord] = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        if header.strip() != DAY_FILE_HEADER:
            raise ValueError(f"unrecognized day file header in {path}")
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            arrival, valid, rest = line.split(",", 2)
            out.append(StoredRecord(int(arrival), valid,
                                    sample_from_csv_row(rest, device_id)))
    return out


def device_days(root: Path, device_id: str) -> list[str]:
    d = Path(root) / "data" / device_id
    return sorted(p.name[:-4] for p in d.glob("*.csv")) if d.is_dir() else []


def read_device(root: Path, device_id: str) -> list[StoredRecord]:
    out: list[StoredRecord] = []
    for day in device_days(root, device_id):
        out.extend(read_day(root, device_id, day))
    return out


def load_device_series(root: Path, device_id: str, valid_only: bool = True):
    """(ts_ms array, {channel: value array}) across all stored days."""
    import numpy as np

    records = read_device(root, device_id)
    if valid_only:
        records = [r for r in records if r.ok]
    ts = np.array([r.sample.ts for r in records], dtype=np.int64)
    values = {
        c: np.array([r.sample.values[c] for r in records], dtype=float)
        for c in CHANNELS
    }
    return ts, values


# ---------------------------------------------------------------- pipeline

class IngestPipeline:
    """Consumes `dalton/data/#`, persists samples, emits anomaly signals.

    Heartbeat subtopics pass through to `on_heartbeat` without persistence.
    The subscription cursor is flushed to `<root>/state/ingest.cursor.json`
    so a restart resumes exactly where the last run stopped.
    """

    def __init__(
        self,
        broker: Broker,
        root: Path,
        *,
        speed: float = 1.0,
        on_heartbeat: Optional[Callable[[dict], None]] = None,
        wall_clock: Callable[[], float] = time.monotonic,
        arrival_epoch_ms: Callable[[], int] = lambda: int(time.time() * 1000),
    ) -> None:
        self.broker = broker
        self.root = Path(root)
        self.speed = max(speed, 1e-9)
        self.on_heartbeat = on_heartbeat
        self._wall = wall_clock
        self._arrival_ms = arrival_epoch_ms
        self._stores: dict[str, DeviceStore] = {}
        self._detectors: dict[str, AnomalyDetector] = {}
        self._err_seq: Optional[int] = None
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._cursor_path = self.root / "state" / "ingest.cursor.json"
        (self.root / "state").mkdir(parents=True, exist_ok=True)

    # -- cursor persistence -------------------------------------------

    def _load_cursor(self) -> dict:
        if self._cursor_path.exists():
            raw = json.loads(self._cursor_path.read_text())
            return {(p, t): s for p, t, s in raw}
        return {}

    def _save_cursor(self, cursor: dict) -> None:
        tmp = self._cursor_path.with_suffix(".tmp")
        tmp.write_text(json.dumps([[p, t, s] for (p, t), s in sorted(cursor.items())]))
        tmp.replace(self._cursor_path)

    # -- processing ------------------------------------------------------

    def _store(self, device: str) -> DeviceStore:
        if device not in self._stores:
            self._stores[device] = DeviceStore(self.root, device)
        return self._stores[device]

    def _detector(self, device: str) -> AnomalyDetector:
        if device not in self._detectors:
            self._detectors[device] = AnomalyDetector(device)
        return self._detectors[device]

    def _emit(self, signal: AnomalySignal) -> None:
        if self._err_seq is None:
            # resume past our own retained signals or the broker dedupes them
            prior = [e.pub_seq for e in self.broker.retained(TOPIC_ERRORS)
                     if e.publisher == "ingest"]
            self._err_seq = max(prior) + 1 if prior else 0
        self.broker.publish(TOPIC_ERRORS, "ingest", self._err_seq,
                            signal.to_json().encode("utf-8"))
        self._err_seq += 1

    def process_batch(self, envelopes: list) -> int:
        """Demux, sort by pub_seq, dedupe, append, detect. Returns rows written."""
        arrival = self._arrival_ms()
        arrival_s = self._wall() * self.speed
        by_dev: dict[str, list] = {}
        for env in envelopes:
            topic = env.topic
            if topic.endswith("/hb"):
                if self.on_heartbeat is not None:
                    try:
                        self.on_heartbeat(json.loads(env.payload))
                    except (ValueError, KeyError) as exc:
                        log.warning("bad heartbeat payload: %s", exc)
                continue
            if not topic.startswith(TOPIC_DATA_PREFIX):
                continue
            by_dev.setdefault(env.publisher, []).append(env)
        written = 0
        for device, batch in by_dev.items():
            batch.sort(key=lambda e: e.pub_seq)  # replay bursts may interleave
            store = self._store(device)
            det = self._detector(device)
            for env in batch:
                row_text = env.payload.decode("utf-8")
                try:
                    sample = sample_from_csv_row(row_text, device)
                except ValueError as exc:
                    log.warning("%s: undecodable sample dropped: %s", device, exc)
                    continue
                if store.append(sample, arrival, row_text):
                    written += 1
                    for sig in det.feed(sample, arrival_s):
                        self._emit(sig)
        return written

    def check_gaps(self) -> None:
        now_s = self._wall() * self.speed
        for det in self._detectors.values():
            for sig in det.check_gap(now_s):
                self._emit(sig)

    def flush(self) -> None:
        for store in self._stores.values():
            store.flush()

    # -- service loop ------------------------------------------------------

    def start(self) -> "IngestPipeline":
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, daemon=True, name="ingest")
        self._thread.start()
        return self

    def _run(self) -> None:
        stream = self.broker.subscribe("dalton/data/#", "ingest", cursor=self._load_cursor())
        pending_flush = 0
        while not self._stop.is_set():
            batch = []
            dropped = False
            try:
                batch.append(stream.get(timeout=0.1))
                while len(batch) < 2000:
                    batch.append(stream.get(timeout=0))
            except Empty:
                pass
            except Disconnected:
                dropped = True
            if batch:  # persist the partial batch before any resubscribe
                pending_flush += self.process_batch(batch)
            if dropped:
                self._save_cursor(stream.cursor())
                stream = self.broker.subscribe("dalton/data/#", "ingest",
                                               cursor=stream.cursor())
                continue
            self.check_gaps()
            if pending_flush >= 2000 or (pending_flush and not batch):
                self.flush()
                self._save_cursor(stream.cursor())
                pending_flush = 0
        self.process_batch(self._drain(stream))
        self.flush()
        self._save_cursor(stream.cursor())
        stream.close()

    @staticmethod
    def _drain(stream) -> list:
        out = []
        while True:
            try:
                out.append(stream.get(timeout=0))
            except (Empty, Disconnected):
                return out

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10)
        for store in self._stores.values():
            store.close()
