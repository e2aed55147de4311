"""Virtual sensing module: 1 Hz sampling, heartbeats, command execution, OTA.

A DeviceNode is single-threaded over its own state; all its activity runs as
events on one SimClock, so many nodes interleave deterministically in one
process. Sampled values ride `dalton/data/<id>` as canonical CSV rows;
heartbeats ride `dalton/data/<id>/hb` as JSON; error records go to
`dalton/errors`.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from queue import Empty
from typing import Callable, Optional, Sequence

import numpy as np

from .core import (
    CHANNELS,
    Channel,
    RANGES,
    SensorSample,
    quantize,
    sample_to_csv_row,
    validate_device_id,
)
from .pubsub import Broker, TOPIC_CMD, TOPIC_ERRORS, data_topic
from .simclock import SimClock

__all__ = [
    "Phase",
    "Fault",
    "DeviceNode",
    "LocalTransport",
    "Fleet",
    "FleetDevice",
    "FaultInjection",
    "load_fleet",
    "fleet_names",
    "run_fleet",
    "heartbeat_topic",
    "BOOT_MS",
    "REBOOT_MS",
    "FLASH_MS",
    "DEFAULT_CONFIG",
]

log = logging.getLogger(__name__)

BOOT_MS = 1000
REBOOT_MS = 3000
FLASH_MS = 4000
POLL_MS = 1000          # command inbox drain cadence
DEFAULT_CONFIG = {"sample_period_ms": 1000, "heartbeat_s": 10}

_CH_INDEX = {c: i for i, c in enumerate(CHANNELS)}


class Phase(str, Enum):
    BOOTING = "BOOTING"
    RUNNING = "RUNNING"
    REBOOTING = "REBOOTING"
    FLASHING = "FLASHING"
    FAULTY = "FAULTY"


_FAULT_MODES = ("NONE", "STUCK", "UNINITIALIZED", "OFFLINE", "RANGE_SPIKE")


@dataclass(frozen=True)
class Fault:
    mode: str = "NONE"
    channel: Optional[Channel] = None

    def __post_init__(self) -> None:
        if self.mode not in _FAULT_MODES:
            raise ValueError(f"unknown fault mode {self.mode!r}")
        if self.mode in ("STUCK", "RANGE_SPIKE") and self.channel is None:
            # per-channel faults need a victim; CO2 is the conventional one
            object.__setattr__(self, "channel", Channel.CO2)


def heartbeat_topic(device_id: str) -> str:
    return data_topic(device_id) + "/hb"


class LocalTransport:
    """In-process broker attachment for one device."""

    def __init__(self, broker: Broker) -> None:
        self.broker = broker
        self._cmd_stream = None

    def open_commands(self, device_id: str) -> None:
        self._cmd_stream = self.broker.subscribe(TOPIC_CMD, device_id, latest=True)

    def poll_commands(self) -> list[dict]:
        out: list[dict] = []
        if self._cmd_stream is None:
            return out
        while True:
            try:
                env = self._cmd_stream.get(timeout=0)
            except Empty:
                return out
            except Exception:  # stream dropped; next poll reopens nothing
                return out
            try:
                out.append(json.loads(env.payload.decode("utf-8")))
            except (UnicodeDecodeError, json.JSONDecodeError):
                log.warning("undecodable command payload dropped")

    def publish(self, device_id: str, topic: str, seq: int, payload: bytes) -> int:
        return self.broker.publish(topic, device_id, seq, payload)

    def close(self) -> None:
        if self._cmd_stream is not None:
            self._cmd_stream.close()


class DeviceNode:
    """One simulated module. Drive it by calling start(clock)."""

    def __init__(
        self,
        device_id: str,
        room: str,
        env: Callable[[int], Sequence[float]],
        transport,
        *,
        seed: int = 0,
        firmware: str = "1.0.0",
        heartbeat_s: int = 10,
        blob_fetch: Optional[Callable[[dict], bytes]] = None,
        config_fetch: Optional[Callable[[str], dict]] = None,
    ) -> None:
        validate_device_id(device_id)
        self.device_id = device_id
        self.room = room
        self.env = env
        self.transport = transport
        self.firmware = firmware
        self.blob_fetch = blob_fetch
        self.config_fetch = config_fetch
        self.phase = Phase.BOOTING
        self.fault = Fault()
        self.seq = 0                      # sample counter, survives reboot
        self.hb_seq = 0
        self.err_seq = 0
        self.config = dict(DEFAULT_CONFIG, heartbeat_s=heartbeat_s)
        self._defaults = dict(self.config)
        self._rng = np.random.default_rng(seed)
        self._noise_sd = np.array([RANGES[c].resolution for c in CHANNELS])
        self._last_values: Optional[dict[Channel, float]] = None
        self.last_sample_ts: Optional[int] = None
        self._clock: Optional[SimClock] = None
        self._t0 = 0

    # ------------------------------------------------------------ lifecycle

    def start(self, clock: SimClock) -> None:
        self._clock = clock
        self._t0 = clock.now_ms()
        self.transport.open_commands(self.device_id)
        clock.call_later(BOOT_MS, self._boot_done)
        clock.call_later(BOOT_MS, self._tick)
        clock.call_later(BOOT_MS, self._heartbeat)
        clock.call_later(BOOT_MS, self._poll)

    def _boot_done(self) -> None:
        if self.phase is Phase.BOOTING:
            self.phase = Phase.RUNNING

    def set_fault(self, mode: str, channel: Optional[Channel] = None) -> None:
        self.fault = Fault(mode, channel)

    # ------------------------------------------------------------ sampling

    def _tick(self) -> None:
        if self.phase is Phase.FAULTY:
            return
        self._clock.call_later(self.config["sample_period_ms"], self._tick)
        if self.phase is not Phase.RUNNING or self.fault.mode == "OFFLINE":
            return
        now = self._clock.now_ms()
        t_s = (now - self._t0) // 1000
        try:
            raw = np.asarray(self.env(int(t_s)), dtype=float)
        except (IndexError, KeyError):
            self.phase = Phase.FAULTY
            self._publish_error("SOURCE_EXHAUSTED", f"no environment data at t={t_s}s")
            return
        noisy = raw + self._rng.standard_normal(len(CHANNELS)) * self._noise_sd
        values = {c: quantize(float(noisy[i]), RANGES[c]) for i, c in enumerate(CHANNELS)}
        # fault transforms act on the quantized output, so spikes and zeros
        # survive clamping and stuck values repeat bit-identically
        if self.fault.mode == "STUCK" and self._last_values is not None:
            values[self.fault.channel] = self._last_values[self.fault.channel]
        elif self.fault.mode == "UNINITIALIZED":
            values = {c: 0.0 for c in CHANNELS}
        elif self.fault.mode == "RANGE_SPIKE":
            values[self.fault.channel] = RANGES[self.fault.channel].hi * 1.2
        sample = SensorSample(self.device_id, now, self.seq, values, self.firmware)
        row = sample_to_csv_row(sample).encode("utf-8")
        self.transport.publish(self.device_id, data_topic(self.device_id), self.seq, row)
        self.seq += 1
        self._last_values = values
        self.last_sample_ts = now

    # ------------------------------------------------------------ heartbeat

    def _heartbeat(self) -> None:
        if self.phase is Phase.FAULTY:
            return
        self._clock.call_later(self.config["heartbeat_s"] * 1000, self._heartbeat)
        self._emit_heartbeat()

    def _emit_heartbeat(self) -> None:
        if self.fault.mode == "OFFLINE" or self.phase in (Phase.BOOTING, Phase.REBOOTING):
            return
        body = {
            "id": self.device_id,
            "firmware": self.firmware,
            "phase": self.phase.value,
            "last_sample_ts": self.last_sample_ts,
            "room": self.room,
            "ts": self._clock.now_ms(),
        }
        self.transport.publish(
            self.device_id, heartbeat_topic(self.device_id), self.hb_seq,
            json.dumps(body, sort_keys=True).encode("utf-8"))
        self.hb_seq += 1

    # ------------------------------------------------------------ commands

    def _poll(self) -> None:
        if self.phase is Phase.FAULTY:
            return
        self._clock.call_later(POLL_MS, self._poll)
        for cmd in self.transport.poll_commands():
            if self.phase is Phase.REBOOTING:
                continue  # device is down; broadcast is lost on it
            self.handle_command(cmd)

    def handle_command(self, cmd: dict) -> None:
        target = cmd.get("target")
        if target not in ("*", self.device_id):
            return  # addressed elsewhere: drop silently
        verb = cmd.get("verb")
        if verb == "REBOOT":
            self._begin_reboot()
        elif verb == "RESET":
            self.config = dict(self._defaults)
            self._begin_reboot()
        elif verb == "UPDATE":
            if self.config_fetch is not None:
                try:
                    fetched = self.config_fetch(self.device_id)
                    self.config = {**self._defaults, **(fetched or {})}
                except Exception as exc:
                    self._publish_error("CONFIG_FETCH_FAILED", str(exc))
        elif verb == "FLASH":
            self._begin_flash(cmd.get("arg") or {})
        else:
            log.warning("%s: unknown verb %r dropped", self.device_id, verb)

    def _begin_reboot(self) -> None:
        self.phase = Phase.REBOOTING
        self._clock.call_later(REBOOT_MS, self._finish_reboot)

    def _finish_reboot(self) -> None:
        if self.fault.mode in ("STUCK", "UNINITIALIZED"):
            self.fault = Fault()
        self.phase = Phase.RUNNING
        self._emit_heartbeat()  # boot announcement

    def _begin_flash(self, desc: dict) -> None:
        self.phase = Phase.FLASHING
        self._clock.call_later(FLASH_MS, lambda: self._finish_flash(desc))

    def _finish_flash(self, desc: dict) -> None:
        want = desc.get("content_hash", "")
        try:
            if self.blob_fetch is None:
                raise RuntimeError("no blob store reachable")
            blob = self.blob_fetch(desc)
        except Exception as exc:
            self.phase = Phase.RUNNING
            self._publish_error("FLASH_FETCH_FAILED", str(exc))
            return
        got = hashlib.sha256(blob).hexdigest()
        if got != want:
            self.phase = Phase.RUNNING
            self._publish_error("FLASH_HASH_MISMATCH", f"expected {want[:12]}, got {got[:12]}")
            return
        self.firmware = desc.get("version", self.firmware)
        self._begin_reboot()

    def _publish_error(self, kind: str, detail: str) -> None:
        body = {
            "device": self.device_id,
            "kind": kind,
            "detected_at": self._clock.now_ms(),
            "detail": detail,
        }
        self.transport.publish(
            self.device_id, TOPIC_ERRORS, self.err_seq,
            json.dumps(body, sort_keys=True).encode("utf-8"))
        self.err_seq += 1


# ---------------------------------------------------------------- fleets

@dataclass(frozen=True)
class FleetDevice:
    id: str
    seed: int = 0
    room: Optional[str] = None


@dataclass(frozen=True)
class FaultInjection:
    t_s: int
    device: str
    fault: str
    channel: Optional[Channel] = None


@dataclass(frozen=True)
class Fleet:
    name: str
    heartbeat_s: int = 10
    devices: tuple[FleetDevice, ...] = ()
    fault_schedule: tuple[FaultInjection, ...] = ()

    @staticmethod
    def from_dict(d: dict) -> "Fleet":
        devices = tuple(
            FleetDevice(e["id"], int(e.get("seed", 0)), e.get("room"))
            for e in d.get("devices", ())
        )
        faults = tuple(
            FaultInjection(
                int(e["t_s"]), e["device"], e["fault"],
                Channel(e["channel"]) if e.get("channel") else None,
            )
            for e in d.get("fault_schedule", ())
        )
        return Fleet(d.get("fleet", "unnamed"), int(d.get("heartbeat_s", 10)),
                     devices, faults)


def load_fleet(source: str | Path) -> Fleet:
    """Load a fleet config from a path, or a packaged preset by bare name."""
    p = Path(source)
    if not p.suffix and not p.exists():
        from importlib import resources
        text = resources.files("dalton.fleets").joinpath(f"{source}.json").read_text()
    else:
        text = p.read_text()
    return Fleet.from_dict(json.loads(text))


def fleet_names() -> list[str]:
    from importlib import resources
    return sorted(
        f.name[:-5] for f in resources.files("dalton.fleets").iterdir()
        if f.name.endswith(".json")
    )


def run_fleet(
    scenario,
    fleet: Fleet,
    transport_factory: Callable[[str], object],
    *,
    speed: float = 0.0,
    duration_s: Optional[int] = None,
    blob_fetch: Optional[Callable[[dict], bytes]] = None,
    config_fetch: Optional[Callable[[str], dict]] = None,
    clock: Optional[SimClock] = None,
    on_ready: Optional[Callable[[SimClock, list[DeviceNode]], None]] = None,
) -> list[DeviceNode]:
    """Simulate the scenario environment and run every fleet device over it.

    Blocks until duration_s (default: the scenario's) simulated seconds have
    elapsed; returns the device nodes in their final state.
    """
    from .boxsim import run_scenario

    trace = run_scenario(scenario)
    room_index = scenario.floorplan.room_index
    clock = clock or SimClock(scenario.start_epoch_ms, speed)
    nodes: list[DeviceNode] = []
    for fd in fleet.devices:
        room = fd.room or scenario.floorplan.placements.get(fd.id)
        if room is None:
            raise ValueError(f"device {fd.id} has no room (fleet or scenario placement)")
        env_rows = trace.conc[:, room_index[room], :]
        node = DeviceNode(
            fd.id, room,
            lambda t_s, rows=env_rows: rows[t_s],
            transport_factory(fd.id),
            seed=fd.seed,
            heartbeat_s=fleet.heartbeat_s,
            blob_fetch=blob_fetch,
            config_fetch=config_fetch,
        )
        node.start(clock)
        nodes.append(node)
    by_id = {n.device_id: n for n in nodes}
    for inj in fleet.fault_schedule:
        node = by_id.get(inj.device)
        if node is None:
            raise ValueError(f"fault schedule references unknown device {inj.device}")
        clock.call_at(
            scenario.start_epoch_ms + inj.t_s * 1000,
            lambda n=node, i=inj: n.set_fault(i.fault, i.channel),
        )
    if on_ready is not None:
        on_ready(clock, nodes)
    horizon = duration_s if duration_s is not None else scenario.duration_s
    clock.run_until(scenario.start_epoch_ms + horizon * 1000)
    for n in nodes:
        if hasattr(n.transport, "close"):
            n.transport.close()
    return nodes
