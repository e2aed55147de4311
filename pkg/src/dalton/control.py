"""Command issuance, firmware registry, device liveness, fault recovery.

All state that must survive a restart is file-backed under `<root>/state/`
and `<root>/blobs/`: the command log and error log are append-only JSONL,
firmware blobs are content-addressed files. Commands ride `dalton/cmd` as
JSON envelopes; recovery decisions are driven by anomaly signals consumed
from `dalton/errors`.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path
from queue import Empty
from typing import Optional

from .ingest import AnomalySignal
from .pubsub import Broker, Disconnected, TOPIC_CMD, TOPIC_ERRORS

__all__ = [
    "Command",
    "FirmwareDescriptor",
    "FaultRecord",
    "LivenessEntry",
    "BlobStore",
    "CommandLog",
    "LivenessRegistry",
    "RecoveryPolicy",
    "ControlPlane",
    "COMMAND_VERBS",
    "LIVE_S",
    "STALE_S",
    "ESCALATION_WINDOW_MS",
]

log = logging.getLogger(__name__)

COMMAND_VERBS = ("REBOOT", "RESET", "UPDATE", "FLASH")
LIVE_S = 30
STALE_S = 120
ESCALATION_WINDOW_MS = 15 * 60 * 1000
SIGNAL_FRESH_MS = 60 * 1000

_SEMVER_RE = re.compile(r"^\d+\.\d+\.\d+(?:[-+][0-9A-Za-z.-]+)?$")
_HASH_RE = re.compile(r"^[0-9a-f]{64}$")


@dataclass(frozen=True)
class Command:
    cmd_id: int
    issued_at: int
    target: str
    verb: str
    arg: Optional[dict] = None

    def to_json(self) -> str:
        return json.dumps({
            "cmd_id": self.cmd_id, "issued_at": self.issued_at,
            "target": self.target, "verb": self.verb, "arg": self.arg,
        }, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "Command":
        d = json.loads(text)
        return Command(int(d["cmd_id"]), int(d["issued_at"]), d["target"],
                       d["verb"], d.get("arg"))


@dataclass(frozen=True)
class FirmwareDescriptor:
    content_hash: str
    size_bytes: int
    version: str

    def to_dict(self) -> dict:
        return {"content_hash": self.content_hash,
                "size_bytes": self.size_bytes, "version": self.version}


@dataclass(frozen=True)
class FaultRecord:
    device: str
    kind: str
    detected_at: int
    channel: Optional[str] = None
    action: Optional[str] = None     # REBOOT_ISSUED | RESET_ISSUED | ESCALATED_MANUAL
    resolved_at: Optional[int] = None

    def __post_init__(self) -> None:
        if self.resolved_at is not None and self.resolved_at < self.detected_at:
            raise ValueError("resolved_at precedes detected_at")

    def to_dict(self) -> dict:
        return {"device": self.device, "kind": self.kind,
                "detected_at": self.detected_at, "channel": self.channel,
                "action": self.action, "resolved_at": self.resolved_at}

    @staticmethod
    def from_dict(d: dict) -> "FaultRecord":
        return FaultRecord(d["device"], d["kind"], int(d["detected_at"]),
                           d.get("channel"), d.get("action"), d.get("resolved_at"))


@dataclass
class LivenessEntry:
    device: str
    last_seen: Optional[int] = None   # ms, device heartbeat timestamp
    phase: str = ""
    firmware: str = ""
    room: str = ""
    last_sample_ts: Optional[int] = None

    def status(self, now_ms: int) -> str:
        if self.last_seen is None:
            return "DOWN"
        age = now_ms - self.last_seen
        if age <= LIVE_S * 1000:
            return "LIVE"
        if age <= STALE_S * 1000:
            return "STALE"
        return "DOWN"


# ---------------------------------------------------------------- blobs

class BlobStore:
    """Content-addressed firmware storage at `<root>/blobs/<sha256>`."""

    def __init__(self, root: Path) -> None:
        self.dir = Path(root) / "blobs"
        self.dir.mkdir(parents=True, exist_ok=True)
        self._registry_path = self.dir / "registry.json"
        self._registry: dict[str, dict] = {}
        self._lock = threading.Lock()
        if self._registry_path.exists():
            self._registry = json.loads(self._registry_path.read_text())

    def put(self, blob: bytes, version: str) -> FirmwareDescriptor:
        if not blob:
            raise ValueError("empty firmware blob")
        if not _SEMVER_RE.match(version or ""):
            raise ValueError(f"not a semver version: {version!r}")
        digest = hashlib.sha256(blob).hexdigest()
        with self._lock:
            path = self.dir / digest
            if not path.exists():
                tmp = self.dir / (digest + ".tmp")
                tmp.write_bytes(blob)
                tmp.replace(path)
            self._registry[digest] = {"size_bytes": len(blob), "version": version}
            tmp_reg = self._registry_path.with_suffix(".tmp")
            tmp_reg.write_text(json.dumps(self._registry, sort_keys=True))
            tmp_reg.replace(self._registry_path)
        return FirmwareDescriptor(digest, len(blob), version)

    def get(self, content_hash: str) -> bytes:
        if not _HASH_RE.match(content_hash or ""):
            raise KeyError(f"not a content hash: {content_hash!r}")
        path = self.dir / content_hash
        if not path.exists():
            raise KeyError(f"unknown blob {content_hash}")
        return path.read_bytes()

    def descriptor(self, content_hash: str) -> FirmwareDescriptor:
        meta = self._registry.get(content_hash)
        if meta is None:
            raise KeyError(f"unregistered firmware {content_hash}")
        return FirmwareDescriptor(content_hash, meta["size_bytes"], meta["version"])

    def known(self, content_hash: str) -> bool:
        return content_hash in self._registry


# ---------------------------------------------------------------- commands

class CommandLog:
    """Append-only JSONL command log; the single writer assigns cmd_ids."""

    def __init__(self, root: Path) -> None:
        state = Path(root) / "state"
        state.mkdir(parents=True, exist_ok=True)
        self.path = state / "commands.jsonl"
        self._lock = threading.Lock()
        self._next_id = 1
        self._count = 0
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        self._next_id = Command.from_json(line).cmd_id + 1
                        self._count += 1

    def append(self, issued_at: int, target: str, verb: str,
               arg: Optional[dict] = None) -> Command:
        with self._lock:
            cmd = Command(self._next_id, issued_at, target, verb, arg)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(cmd.to_json() + "\n")
                fh.flush()
            self._next_id += 1
            self._count += 1
            return cmd

    def __len__(self) -> int:
        return self._count

    def all(self) -> list[Command]:
        if not self.path.exists():
            return []
        with open(self.path, encoding="utf-8") as fh:
            return [Command.from_json(ln) for ln in fh if ln.strip()]


# ---------------------------------------------------------------- liveness

class LivenessRegistry:
    def __init__(self) -> None:
        self._entries: dict[str, LivenessEntry] = {}
        self._lock = threading.Lock()

    def on_heartbeat(self, hb: dict) -> None:
        device = hb["id"]
        with self._lock:
            e = self._entries.setdefault(device, LivenessEntry(device))
            ts = int(hb.get("ts") or 0)
            if e.last_seen is None or ts >= e.last_seen:   # monotone
                e.last_seen = ts if e.last_seen is None else max(e.last_seen, ts)
                e.phase = hb.get("phase", e.phase)
                e.firmware = hb.get("firmware", e.firmware)
                e.room = hb.get("room", e.room) or e.room
                e.last_sample_ts = hb.get("last_sample_ts", e.last_sample_ts)

    def ensure(self, device: str) -> None:
        with self._lock:
            self._entries.setdefault(device, LivenessEntry(device))

    def data_now_ms(self) -> int:
        with self._lock:
            seen = [e.last_seen for e in self._entries.values() if e.last_seen]
            return max(seen) if seen else 0

    def table(self, now_ms: Optional[int] = None) -> list[dict]:
        now = now_ms if now_ms is not None else self.data_now_ms()
        with self._lock:
            out = []
            for device in sorted(self._entries):
                e = self._entries[device]
                out.append({
                    "device": e.device, "last_seen": e.last_seen,
                    "phase": e.phase, "firmware": e.firmware, "room": e.room,
                    "last_sample_ts": e.last_sample_ts,
                    "status": e.status(now),
                })
            return out


# ---------------------------------------------------------------- recovery

class RecoveryPolicy:
    """REBOOT, then RESET, then hands-off escalation for recurring faults.

    Each decision is keyed by (device, kind). A recurrence within the
    15-minute window of the previous action climbs the ladder; outside the
    window the episode is considered fresh and starts over at REBOOT. The
    same rung is never repeated within a window, which is what keeps an
    adversarial signal storm from flapping a device.
    """

    def __init__(self, window_ms: int = ESCALATION_WINDOW_MS) -> None:
        self.window_ms = window_ms
        self._state: dict[tuple[str, str], tuple[int, int]] = {}  # key -> (rung, ts)
        self._lock = threading.Lock()

    def decide(self, signal: AnomalySignal, now_ms: int) -> Optional[str]:
        """REBOOT_ISSUED, RESET_ISSUED, ESCALATED_MANUAL, or None (suppressed)."""
        if now_ms - signal.detected_at > SIGNAL_FRESH_MS:
            log.info("stale signal ignored: %s/%s age %dms",
                     signal.device, signal.kind, now_ms - signal.detected_at)
            return None
        key = (signal.device, signal.kind)
        with self._lock:
            rung, last_ts = self._state.get(key, (0, 0))
            if rung and now_ms - last_ts > self.window_ms:
                rung = 0   # episode went quiet; start over
            if rung == 0:
                action = "REBOOT_ISSUED"
            elif rung == 1:
                action = "RESET_ISSUED"
            elif rung == 2:
                action = "ESCALATED_MANUAL"
            else:
                return None  # already escalated to a human inside the window
            self._state[key] = (rung + 1, now_ms)
            return action


_ACTION_VERB = {"REBOOT_ISSUED": "REBOOT", "RESET_ISSUED": "RESET"}


# ---------------------------------------------------------------- facade

class ControlPlane:
    """Single logical writer for commands; consumes `dalton/errors`."""

    def __init__(self, broker: Broker, root: Path) -> None:
        self.broker = broker
        self.root = Path(root)
        self.blobs = BlobStore(self.root)
        self.commands = CommandLog(self.root)
        self.liveness = LivenessRegistry()
        self.policy = RecoveryPolicy()
        self._issue_lock = threading.Lock()
        self._errorlog_path = self.root / "state" / "errorlog.jsonl"
        self._errorlog_path.parent.mkdir(parents=True, exist_ok=True)
        self._errors: list[FaultRecord] = []
        self._errors_lock = threading.Lock()
        self._cursor_path = self.root / "state" / "control.cursor.json"
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        if self._errorlog_path.exists():
            with open(self._errorlog_path, encoding="utf-8") as fh:
                self._errors = [FaultRecord.from_dict(json.loads(ln))
                                for ln in fh if ln.strip()]

    # -- command issuance ------------------------------------------------

    def issue_command(self, target: str, verb: str,
                      arg: Optional[FirmwareDescriptor] = None,
                      issued_at: Optional[int] = None) -> Command:
        if verb not in COMMAND_VERBS:
            raise ValueError(f"unknown verb {verb!r}")
        arg_dict = None
        if verb == "FLASH":
            if arg is None:
                raise ValueError("FLASH requires a firmware descriptor")
            if not self.blobs.known(arg.content_hash):
                raise ValueError(f"unknown firmware descriptor {arg.content_hash[:12]}")
            stored = self.blobs.descriptor(arg.content_hash)
            if stored != arg:
                raise ValueError("descriptor does not match registered firmware")
            arg_dict = arg.to_dict()
        elif arg is not None:
            raise ValueError(f"{verb} carries no argument")
        when = issued_at if issued_at is not None else self.liveness.data_now_ms()
        with self._issue_lock:     # log strictly before publish
            cmd = self.commands.append(when, target, verb, arg_dict)
            self.broker.publish(TOPIC_CMD, "ctl", cmd.cmd_id,
                                cmd.to_json().encode("utf-8"))
        return cmd

    # -- firmware ----------------------------------------------------------

    def register_firmware(self, blob: bytes, version: str) -> FirmwareDescriptor:
        return self.blobs.put(blob, version)

    # -- error log ---------------------------------------------------------

    def record_fault(self, record: FaultRecord) -> None:
        with self._errors_lock:
            self._errors.append(record)
            with open(self._errorlog_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
                fh.flush()

    def errors_for(self, device: str) -> list[FaultRecord]:
        with self._errors_lock:
            return [r for r in self._errors if r.device == device]

    def all_errors(self) -> list[FaultRecord]:
        with self._errors_lock:
            return list(self._errors)

    # -- anomaly consumption ------------------------------------------------

    def handle_error_payload(self, payload: bytes) -> None:
        try:
            d = json.loads(payload)
        except (UnicodeDecodeError, json.JSONDecodeError):
            log.warning("undecodable error record dropped")
            return
        device = d.get("device", "")
        kind = d.get("kind", "")
        detected = int(d.get("detected_at") or 0)
        if not device or not kind:
            return
        self.liveness.ensure(device)
        if "evidence" in d:   # ingest anomaly signal: run the recovery ladder
            signal = AnomalySignal.from_json(payload.decode("utf-8"))
            # window math runs on the signal's own device-time scale, so
            # ladder behavior is identical at any time-compression factor;
            # replayed history is fenced off by the consumer cursor
            now = detected
            action = self.policy.decide(signal, now)
            if action is None:
                return
            self.record_fault(FaultRecord(
                device, kind, detected,
                signal.channel.value if signal.channel else None, action))
            verb = _ACTION_VERB.get(action)
            if verb:
                self.issue_command(device, verb, issued_at=now)
        else:                 # device-reported error: record only
            self.record_fault(FaultRecord(device, kind, detected))

    # -- service loop --------------------------------------------------------

    def start(self) -> "ControlPlane":
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, daemon=True, name="control")
        self._thread.start()
        return self

    def _load_cursor(self) -> dict:
        if self._cursor_path.exists():
            raw = json.loads(self._cursor_path.read_text())
            return {(p, t): s for p, t, s in raw}
        return {}

    def _save_cursor(self, cursor: dict) -> None:
        tmp = self._cursor_path.with_suffix(".tmp")
        tmp.write_text(json.dumps([[p, t, s] for (p, t), s in sorted(cursor.items())]))
        tmp.replace(self._cursor_path)

    def _run(self) -> None:
        stream = self.broker.subscribe(TOPIC_ERRORS, "control", cursor=self._load_cursor())
        dirty = 0
        while not self._stop.is_set():
            try:
                env = stream.get(timeout=0.1)
            except Empty:
                if dirty:
                    self._save_cursor(stream.cursor())
                    dirty = 0
                continue
            except Disconnected:
                stream = self.broker.subscribe(TOPIC_ERRORS, "control",
                                               cursor=stream.cursor())
                continue
            self.handle_error_payload(env.payload)
            dirty += 1
        self._save_cursor(stream.cursor())
        stream.close()

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10)
