"""Process assembly for the daltond backend.

One process hosts the message broker (in-process plus TCP), the ingest
pipeline, the control plane, the event-group store, and the HTTP front
end. Stopping the service flushes every cursor and snapshots the broker
so a restart resumes without losing messages.
"""

from __future__ import annotations

import json
import logging
import threading
from pathlib import Path
from queue import Empty
from typing import Optional

from .control import ControlPlane
from .events import EventGroup, EventGroupStore
from .httpd import HttpFrontend
from .ingest import IngestPipeline
from .pubsub import Broker, Disconnected, TOPIC_EVENTS
from .wire import WireServer

__all__ = ["DaltonService", "DEFAULT_BROKER_PORT", "DEFAULT_HTTP_PORT"]

log = logging.getLogger(__name__)

DEFAULT_BROKER_PORT = 7431
DEFAULT_HTTP_PORT = 7430


def _group_signature(group: EventGroup) -> tuple:
    return tuple(sorted(
        (m.device, m.channels, m.t_start, m.t_end) for m in group.members))


class DaltonService:
    """Builds and runs every backend piece over one shared broker."""

    def __init__(self, root: Path, host: str = "127.0.0.1",
                 broker_port: int = DEFAULT_BROKER_PORT,
                 http_port: int = DEFAULT_HTTP_PORT,
                 speed: float = 1.0) -> None:
        self.root = Path(root)
        state = self.root / "state"
        state.mkdir(parents=True, exist_ok=True)
        self._snapshot_path = state / "broker.jsonl"
        self._events_cursor_path = state / "events.cursor.json"

        self.broker = Broker()
        if self._snapshot_path.exists():
            restored = self.broker.load(str(self._snapshot_path))
            log.info("broker snapshot restored: %d messages", restored)

        self.control = ControlPlane(self.broker, self.root)
        self.groups = EventGroupStore(state / "event_groups.jsonl")
        self.ingest = IngestPipeline(
            self.broker, self.root, speed=speed,
            on_heartbeat=self.control.liveness.on_heartbeat)
        # binding happens here, so a busy port fails before any thread starts
        self.wire = WireServer(self.broker, host, broker_port)
        try:
            self.http = HttpFrontend(self.control, self.groups, self.broker,
                                     self.root, host, http_port)
        except OSError:
            self.wire.stop()
            raise
        self._stop = threading.Event()
        self._events_thread: Optional[threading.Thread] = None

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> "DaltonService":
        self.wire.start()
        self.http.start()
        self.ingest.start()
        self.control.start()
        self._stop.clear()
        self._events_thread = threading.Thread(
            target=self._consume_events, daemon=True, name="events")
        self._events_thread.start()
        host, port = self.wire.address
        log.info("daltond up: broker %s:%d, api %s, data dir %s",
                 host, port, self.http.url, self.root)
        return self

    def stop(self) -> None:
        self._stop.set()
        if self._events_thread is not None:
            self._events_thread.join(timeout=10)
        self.ingest.stop()
        self.control.stop()
        self.wire.stop()
        self.http.stop()
        self.broker.save(str(self._snapshot_path))
        log.info("daltond stopped; state flushed to %s", self.root / "state")

    # -- event-group adoption ------------------------------------------------

    def _load_events_cursor(self) -> dict:
        if self._events_cursor_path.exists():
            raw = json.loads(self._events_cursor_path.read_text())
            return {(p, t): s for p, t, s in raw}
        return {}

    def _save_events_cursor(self, cursor: dict) -> None:
        tmp = self._events_cursor_path.with_suffix(".tmp")
        tmp.write_text(json.dumps([[p, t, s] for (p, t), s in sorted(cursor.items())]))
        tmp.replace(self._events_cursor_path)

    def _adopt_group(self, payload: bytes) -> None:
        try:
            incoming = EventGroup.from_json(json.loads(payload))
        except (ValueError, KeyError, TypeError):
            log.warning("undecodable event group dropped")
            return
        signature = _group_signature(incoming)
        if any(_group_signature(g) == signature for g in self.groups.all_groups()):
            return   # same segments already adopted (batch job re-run)
        adopted = EventGroup(self.groups.next_group_id(), incoming.members,
                             incoming.created_at, incoming.annotation)
        self.groups.add(adopted)
        log.info("event group adopted as #%d (%d segments)",
                 adopted.group_id, len(adopted.members))

    def _consume_events(self) -> None:
        stream = self.broker.subscribe(TOPIC_EVENTS, "eventd",
                                       cursor=self._load_events_cursor())
        dirty = False
        while not self._stop.is_set():
            try:
                env = stream.get(timeout=0.1)
            except Empty:
                if dirty:
                    self._save_events_cursor(stream.cursor())
                    dirty = False
                continue
            except Disconnected:
                stream = self.broker.subscribe(TOPIC_EVENTS, "eventd",
                                               cursor=stream.cursor())
                continue
            self._adopt_group(env.payload)
            dirty = True
        self._save_events_cursor(stream.cursor())
        stream.close()
