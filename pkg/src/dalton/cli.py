"""Command-line entry points: the `daltond` backend and the `dalton` client.

`daltond serve` runs the whole backend in one process. `dalton sim` drives
simulated device fleets against a running backend over TCP; `dalton events`
and `dalton analyze` are deterministic batch jobs over the stored day files.

Exit codes: 0 success, 2 configuration error, 3 connectivity error,
4 data error. Logs go to stderr; file outputs go under the data dir.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import signal
import sys
import threading
import time
import urllib.error
import urllib.request
from pathlib import Path
from queue import Empty

import numpy as np

from .boxsim import load_scenario
from .core import CHANNELS, Channel, DEFAULT_THRESHOLDS
from .device import load_fleet, run_fleet
from .events import (
    AdjacencyGraph,
    associate,
    detect_device_events,
    export_groups_csv,
)
from .ingest import load_device_series
from .pubsub import Disconnected, TOPIC_CMD, TOPIC_EVENTS
from .service import DaltonService, DEFAULT_BROKER_PORT, DEFAULT_HTTP_PORT
from .wire import WireClient

log = logging.getLogger("dalton.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_CONNECT = 3
EXIT_DATA = 4


def _setup_logging() -> None:
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def _default_data_dir() -> str:
    return os.environ.get("DALTON_DATA_DIR", "./dalton-data")


def _parse_hostport(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


# ---------------------------------------------------------------- daltond

def daltond_main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(prog="daltond", description="dalton backend")
    sub = parser.add_subparsers(dest="command", required=True)
    serve = sub.add_parser("serve", help="run broker, ingest, control plane and API")
    serve.add_argument("--data-dir", default=_default_data_dir())
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=DEFAULT_BROKER_PORT,
                       help="message plane TCP port")
    serve.add_argument("--http-port", type=int, default=DEFAULT_HTTP_PORT)
    serve.add_argument("--speed", type=float, default=1.0,
                       help="sim-time multiplier for gap detection")
    args = parser.parse_args(argv)

    try:
        service = DaltonService(Path(args.data_dir), args.host,
                                args.port, args.http_port, speed=args.speed)
    except OSError as exc:
        log.error("cannot bind service ports: %s", exc)
        return EXIT_CONFIG

    stop = threading.Event()

    def on_signal(signum, frame):
        log.info("signal %d, shutting down", signum)
        stop.set()

    signal.signal(signal.SIGTERM, on_signal)
    signal.signal(signal.SIGINT, on_signal)
    service.start()
    try:
        while not stop.wait(0.2):
            pass
    finally:
        service.stop()
    return EXIT_OK


# ---------------------------------------------------------------- transport

class TcpTransport:
    """Device-side transport speaking the wire protocol to a daltond broker."""

    def __init__(self, host: str, port: int, device_id: str) -> None:
        self.client = WireClient(host, port, device_id)

    def publish(self, device_id: str, topic: str, seq: int, payload: bytes) -> int:
        return self.client.publish(topic, seq, payload)

    def open_commands(self, device_id: str) -> None:
        self.client.subscribe(TOPIC_CMD, latest=True)

    def poll_commands(self) -> list[dict]:
        commands = []
        while True:
            try:
                env = self.client.recv(timeout=0)
            except Empty:
                break
            except Disconnected:
                log.warning("command stream closed by broker")
                break
            try:
                commands.append(json.loads(env.payload))
            except (UnicodeDecodeError, json.JSONDecodeError):
                log.warning("undecodable command dropped")
        return commands

    def close(self) -> None:
        self.client.close()


def _probe_backend(host: str, port: int, retries: int = 3) -> bool:
    delay = 0.5
    for attempt in range(1, retries + 1):
        try:
            probe = WireClient(host, port, "sim-probe")
            probe.ping()
            probe.close()
            return True
        except OSError as exc:
            log.warning("backend %s:%d unreachable (attempt %d/%d): %s",
                        host, port, attempt, retries, exc)
            if attempt < retries:
                time.sleep(delay)
                delay *= 2
    return False


# ---------------------------------------------------------------- dalton sim

def _cmd_sim(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        fleet = load_fleet(args.fleet)
        host, port = _parse_hostport(args.connect)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        log.error("bad sim configuration: %s", exc)
        return EXIT_CONFIG

    if not _probe_backend(host, port):
        log.error("giving up on backend %s:%d", host, port)
        return EXIT_CONNECT

    duration = args.duration
    if duration > scenario.duration_s:
        log.warning("duration %ds exceeds scenario length; clamping to %ds",
                    duration, scenario.duration_s)
        duration = scenario.duration_s

    http_url = args.http_url.rstrip("/")

    def blob_fetch(desc: dict) -> bytes:
        url = f"{http_url}/blobs/{desc['content_hash']}"
        with urllib.request.urlopen(url, timeout=30) as resp:
            return resp.read()

    log.info("sim: scenario %s, fleet of %d, %ds at speed %s",
             scenario.name, len(fleet.devices), duration,
             args.speed or "max")
    try:
        run_fleet(scenario, fleet,
                  lambda device_id: TcpTransport(host, port, device_id),
                  speed=args.speed, duration_s=duration,
                  blob_fetch=blob_fetch)
    except (ConnectionError, OSError) as exc:
        log.error("backend connection lost: %s", exc)
        return EXIT_CONNECT
    log.info("sim finished: %d simulated seconds", duration)
    return EXIT_OK


# ---------------------------------------------------------------- dalton events

def _build_graph(floorplan: str | None) -> tuple[AdjacencyGraph, bool]:
    """(graph, found). A missing plan degrades to singleton grouping."""
    if floorplan:
        try:
            scenario = load_scenario(floorplan)
        except FileNotFoundError:
            log.warning("floor plan %s not found; events will be singletons",
                        floorplan)
            return AdjacencyGraph((), (), {}), False
        fp = scenario.floorplan
        return AdjacencyGraph(
            [r.name for r in fp.rooms],
            [(e.room_a, e.room_b) for e in fp.edges],
            dict(fp.placements or {})), True
    log.warning("no floor plan given; events will be singletons")
    return AdjacencyGraph((), (), {}), False


def _load_all_series(root: Path, valid_only: bool = True) -> dict:
    data_dir = root / "data"
    if not data_dir.is_dir():
        return {}
    out = {}
    for child in sorted(data_dir.iterdir()):
        if not child.is_dir():
            continue
        ts, values = load_device_series(root, child.name, valid_only=valid_only)
        if ts.size:
            out[child.name] = (ts, values)
    return out


def _detect_all_segments(series: dict) -> list:
    segments = []
    for device in sorted(series):
        ts, values = series[device]
        segments.extend(detect_device_events(device, ts, values))
    return segments


def _cmd_events(args) -> int:
    root = Path(args.data_dir)
    series = _load_all_series(root)
    if not series:
        log.error("no stored device data under %s", root / "data")
        return EXIT_DATA
    graph, _ = _build_graph(args.floorplan)
    segments = _detect_all_segments(series)
    groups = associate(segments, graph)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(export_groups_csv(groups, graph))
    log.info("%d segments in %d groups -> %s", len(segments), len(groups), out)

    if args.connect:
        try:
            host, port = _parse_hostport(args.connect)
            client = WireClient(host, port, f"events-{secrets.token_hex(6)}")
            for i, group in enumerate(groups):
                client.publish(TOPIC_EVENTS, i,
                               json.dumps(group.to_json(), sort_keys=True).encode())
            client.close()
            log.info("published %d groups for annotation", len(groups))
        except (ValueError, OSError) as exc:
            log.error("cannot publish event groups: %s", exc)
            return EXIT_CONNECT
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------- dalton analyze

def _room_mapping(scenario, devices) -> dict[str, str]:
    placements = dict(scenario.floorplan.placements or {})
    mapping = {}
    for device in devices:
        room = placements.get(device)
        if room is None:
            log.warning("device %s not placed on floor plan; using id as room",
                        device)
            room = device
        mapping[device] = room
    return mapping


def _analyze_exposure(series, rooms) -> str:
    from .analytics import exposure_report, exposure_to_csv

    reports = []
    for device in sorted(series, key=lambda d: (rooms[d], d)):
        ts, values = series[device]
        for channel in CHANNELS:
            if channel not in DEFAULT_THRESHOLDS:
                continue
            rep = exposure_report(rooms[device], channel, ts, values[channel],
                                  DEFAULT_THRESHOLDS[channel])
            if rep is not None:
                reports.append(rep)
    return exposure_to_csv(reports)


def _analyze_heatmap(series, rooms, channel: Channel) -> str:
    from .analytics import hourly_heatmap

    lines = ["device,room,epoch_day," + ",".join(f"h{h:02d}" for h in range(24))]
    for device in sorted(series):
        ts, values = series[device]
        day0, matrix = hourly_heatmap(ts, values[channel])
        for d in range(matrix.shape[0]):
            cells = ["" if np.isnan(v) else f"{v:.3f}" for v in matrix[d]]
            lines.append(f"{device},{rooms[device]},{day0 + d}," + ",".join(cells))
    return "\n".join(lines) + "\n"


def _analyze_linger(series, rooms, graph) -> str:
    from .analytics import linger_and_trap, linger_to_csv

    room_series = {
        rooms[device]: {c: (ts, values[c]) for c in CHANNELS}
        for device, (ts, values) in series.items()
    }
    groups = associate(_detect_all_segments(series), graph)
    findings = []
    for group in groups:
        findings.extend(linger_and_trap(room_series, group))
    return linger_to_csv(findings)


def _analyze_spread(series, rooms, channel: Channel, source: str | None) -> str:
    from .analytics import spread_matrix, spread_to_csv

    common = None
    for ts, _ in series.values():
        common = ts if common is None else np.intersect1d(common, ts)
    if common is None or common.size < 2:
        raise ValueError("no shared sample grid across devices")
    by_room = {}
    for device, (ts, values) in series.items():
        keep = np.isin(ts, common)
        by_room[rooms[device]] = np.asarray(values[channel])[keep]
    if source is None:
        # deterministic default: the room with the largest swing
        source = min(by_room, key=lambda r: (-(by_room[r].max() - by_room[r].min()), r))
    return spread_to_csv(spread_matrix(by_room, channel, source))


def _analyze_saturation(series, baseline_dir: Path) -> str:
    from .analytics import saturation_compare

    baseline = _load_all_series(baseline_dir)
    if not baseline:
        raise FileNotFoundError(f"no stored device data under {baseline_dir / 'data'}")

    def pooled(all_series) -> dict:
        return {
            c: np.concatenate([all_series[d][1][c] for d in sorted(all_series)])
            for c in CHANNELS
        }

    ratios = saturation_compare(pooled(series), pooled(baseline))
    lines = ["channel,ratio,ci_lo,ci_hi"]
    for channel in CHANNELS:
        r = ratios.get(channel)
        if r is None:
            lines.append(f"{channel.value},,,")
        else:
            lines.append(f"{channel.value},{r.ratio:.6f},{r.ci_lo:.6f},{r.ci_hi:.6f}")
    return "\n".join(lines) + "\n"


def _cmd_analyze(args) -> int:
    root = Path(args.data_dir)
    try:
        scenario = load_scenario(args.scenario)
    except (FileNotFoundError, ValueError) as exc:
        log.error("bad scenario: %s", exc)
        return EXIT_CONFIG
    if args.metric == "saturation" and not args.baseline_dir:
        log.error("saturation needs --baseline-dir for the comparison condition")
        return EXIT_CONFIG

    try:
        channel = Channel(args.channel) if args.channel else None
    except ValueError:
        log.error("unknown channel %r", args.channel)
        return EXIT_CONFIG

    series = _load_all_series(root)
    if not series:
        log.error("no stored device data under %s", root / "data")
        return EXIT_DATA
    rooms = _room_mapping(scenario, series)

    try:
        if args.metric == "exposure":
            text = _analyze_exposure(series, rooms)
        elif args.metric == "heatmap":
            text = _analyze_heatmap(series, rooms, channel or Channel.CO2)
        elif args.metric == "linger":
            fp = scenario.floorplan
            graph = AdjacencyGraph([r.name for r in fp.rooms],
                                   [(e.room_a, e.room_b) for e in fp.edges],
                                   dict(fp.placements or {}))
            text = _analyze_linger(series, rooms, graph)
        elif args.metric == "spread":
            text = _analyze_spread(series, rooms, channel or Channel.PM, args.source)
        else:
            text = _analyze_saturation(series, Path(args.baseline_dir))
    except (ValueError, FileNotFoundError) as exc:
        log.error("analysis failed: %s", exc)
        return EXIT_DATA

    out = Path(args.out) if args.out else (
        root / "reports" / scenario.name / f"{args.metric}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text)
    log.info("wrote %s", out)
    print(out)
    return EXIT_OK


# ---------------------------------------------------------------- dalton

def dalton_main(argv=None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(prog="dalton", description="dalton client tools")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="run a simulated fleet against a backend")
    sim.add_argument("--scenario", required=True, help="preset name or JSON path")
    sim.add_argument("--fleet", required=True, help="preset name or JSON path")
    sim.add_argument("--duration", type=int, required=True,
                     help="simulated seconds to run")
    sim.add_argument("--connect", required=True, help="broker host:port")
    sim.add_argument("--http-url",
                     default=f"http://127.0.0.1:{DEFAULT_HTTP_PORT}",
                     help="control-plane base URL (firmware blobs)")
    sim.add_argument("--speed", type=float, default=0.0,
                     help="sim seconds per wall second; 0 = as fast as possible")
    sim.set_defaults(func=_cmd_sim)

    events = sub.add_parser("events", help="detect and group pollution events")
    events.add_argument("--data-dir", default=_default_data_dir())
    events.add_argument("--floorplan", default=None,
                        help="scenario preset name or JSON path")
    events.add_argument("--out", required=True, help="output CSV path")
    events.add_argument("--connect", default=None,
                        help="optional broker host:port to queue groups for annotation")
    events.set_defaults(func=_cmd_events)

    analyze = sub.add_parser("analyze", help="batch analytics over stored data")
    analyze.add_argument("--metric", required=True,
                         choices=["exposure", "heatmap", "linger", "spread",
                                  "saturation"])
    analyze.add_argument("--data-dir", default=_default_data_dir())
    analyze.add_argument("--scenario", required=True,
                         help="preset name or JSON path (room placements)")
    analyze.add_argument("--channel", default=None,
                         help="channel for heatmap/spread (default co2/pm)")
    analyze.add_argument("--source", default=None,
                         help="spread source room (default: largest swing)")
    analyze.add_argument("--baseline-dir", default=None,
                         help="comparison data dir for saturation")
    analyze.add_argument("--out", default=None, help="output CSV path override")
    analyze.set_defaults(func=_cmd_analyze)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(dalton_main())
