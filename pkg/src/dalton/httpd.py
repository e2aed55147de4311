"""HTTP front end: operator console API plus the device-facing blob endpoint.

Built on the stdlib threading HTTP server. Handlers are thin: they parse
the request, call into the control plane or stores, and serialize. The one
long-lived route is the SSE live stream, which holds a broker subscription
open per client.
"""

from __future__ import annotations

import json
import logging
import re
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from queue import Empty
from typing import Optional
from urllib.parse import parse_qs, urlparse

from .control import ControlPlane
from .core import CHANNELS, sample_from_csv_row
from .events import AnnotationError, EventGroupStore
from .pubsub import Broker, Disconnected, TOPIC_ANNOTATIONS, data_topic

__all__ = ["HttpFrontend"]

log = logging.getLogger(__name__)

_DAY_RE = re.compile(r"^\d{4}-\d{2}-\d{2}$")
_HASH_RE = re.compile(r"^[0-9a-f]{64}$")
MAX_BODY = 64 * 1024 * 1024


class HttpFrontend:
    """Owns the server socket and the shared handles the handler needs."""

    def __init__(self, control: ControlPlane, groups: EventGroupStore,
                 broker: Broker, data_root: Path,
                 host: str = "127.0.0.1", port: int = 0) -> None:
        self.control = control
        self.groups = groups
        self.broker = broker
        self.data_root = Path(data_root)
        frontend = self

        class Handler(_Handler):
            api = frontend

        self.server = ThreadingHTTPServer((host, port), Handler)
        self.server.daemon_threads = True
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[:2]

    @property
    def url(self) -> str:
        host, port = self.address
        return f"http://{host}:{port}"

    def start(self) -> "HttpFrontend":
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        kwargs={"poll_interval": 0.1},
                                        daemon=True, name="httpd")
        self._thread.start()
        return self

    def stop(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=10)


class _Handler(BaseHTTPRequestHandler):
    api: HttpFrontend
    protocol_version = "HTTP/1.1"

    # ---- plumbing --------------------------------------------------------

    def log_message(self, fmt: str, *args) -> None:
        log.debug("%s %s", self.address_string(), fmt % args)

    def _json(self, status: int, obj) -> None:
        body = json.dumps(obj, sort_keys=True).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _error(self, status: int, message: str, **extra) -> None:
        self._json(status, {"error": message, **extra})

    def _bytes(self, status: int, body: bytes, content_type: str) -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.send_header("Access-Control-Allow-Origin", "*")
        self.end_headers()
        self.wfile.write(body)

    def _read_body(self) -> bytes:
        length = int(self.headers.get("Content-Length") or 0)
        if length < 0 or length > MAX_BODY:
            raise ValueError("bad content length")
        return self.rfile.read(length)

    def _read_json(self) -> dict:
        raw = self._read_body()
        obj = json.loads(raw) if raw else {}
        if not isinstance(obj, dict):
            raise ValueError("expected a JSON object")
        return obj

    # ---- dispatch ----------------------------------------------------------

    def do_GET(self) -> None:  # noqa: N802  (stdlib naming)
        url = urlparse(self.path)
        parts = [p for p in url.path.split("/") if p]
        query = parse_qs(url.query)
        try:
            if parts == ["healthz"]:
                self._json(200, {"ok": True})
            elif parts == ["api", "devices"]:
                now = query.get("now_ms")
                table = self.api.control.liveness.table(
                    int(now[0]) if now else None)
                self._json(200, table)
            elif len(parts) == 4 and parts[:2] == ["api", "devices"] and parts[3] == "log":
                self._get_day_log(parts[2], query)
            elif len(parts) == 4 and parts[:2] == ["api", "devices"] and parts[3] == "errors":
                records = self.api.control.errors_for(parts[2])
                self._json(200, [r.to_dict() for r in records])
            elif parts == ["api", "events", "pending"]:
                self._json(200, [g.to_json() for g in self.api.groups.pending()])
            elif len(parts) == 3 and parts[:2] == ["api", "live"]:
                self._live_stream(parts[2])
            elif len(parts) == 2 and parts[0] == "blobs":
                self._get_blob(parts[1])
            else:
                self._error(404, "no such resource")
        except BrokenPipeError:
            pass
        except Exception:
            log.exception("GET %s failed", self.path)
            try:
                self._error(500, "internal error")
            except Exception:
                pass

    def do_POST(self) -> None:  # noqa: N802
        parts = [p for p in urlparse(self.path).path.split("/") if p]
        try:
            if len(parts) == 4 and parts[:2] == ["api", "devices"] and parts[3] == "cmd":
                self._post_cmd(parts[2])
            elif parts == ["api", "firmware"]:
                self._post_firmware()
            elif len(parts) == 4 and parts[:2] == ["api", "firmware"] and parts[3] == "flash":
                self._post_flash(parts[2])
            elif parts == ["api", "annotations"]:
                self._post_annotation()
            else:
                self._error(404, "no such resource")
        except json.JSONDecodeError:
            self._error(400, "request body is not valid JSON")
        except BrokenPipeError:
            pass
        except Exception:
            log.exception("POST %s failed", self.path)
            try:
                self._error(500, "internal error")
            except Exception:
                pass

    # ---- GET handlers --------------------------------------------------------

    def _get_day_log(self, device: str, query: dict) -> None:
        day = (query.get("day") or [""])[0]
        if not _DAY_RE.match(day):
            self._error(400, "day must be YYYY-MM-DD")
            return
        path = self.api.data_root / "data" / device / f"{day}.csv"
        if not path.exists():
            self._error(404, f"no log for {device} on {day}")
            return
        self._bytes(200, path.read_bytes(), "text/csv")

    def _get_blob(self, content_hash: str) -> None:
        if not _HASH_RE.match(content_hash):
            self._error(400, "malformed content hash")
            return
        try:
            blob = self.api.control.blobs.get(content_hash)
        except KeyError:
            self._error(404, "unknown blob")
            return
        self._bytes(200, blob, "application/octet-stream")

    def _live_stream(self, device: str) -> None:
        stream = self.api.broker.subscribe(
            data_topic(device), f"sse-{id(self)}", latest=True)
        try:
            self.send_response(200)
            self.send_header("Content-Type", "text/event-stream")
            self.send_header("Cache-Control", "no-cache")
            self.send_header("Access-Control-Allow-Origin", "*")
            self.send_header("Connection", "close")
            self.end_headers()
            while True:
                try:
                    env = stream.get(timeout=2.0)
                except Empty:
                    self.wfile.write(b": keep-alive\n\n")
                    self.wfile.flush()
                    continue
                except Disconnected:
                    break
                try:
                    sample = sample_from_csv_row(
                        env.payload.decode("utf-8"), device)
                except ValueError:
                    continue
                payload = {
                    "device": device,
                    "ts_ms": sample.ts,
                    "seq": sample.seq,
                    "firmware": sample.firmware,
                    "values": {c.value: sample.values[c] for c in CHANNELS},
                }
                data = json.dumps(payload, sort_keys=True)
                self.wfile.write(f"event: sample\ndata: {data}\n\n".encode("utf-8"))
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass
        finally:
            stream.close()

    # ---- POST handlers --------------------------------------------------------

    def _post_cmd(self, device: str) -> None:
        body = self._read_json()
        verb = body.get("verb", "")
        if verb not in ("REBOOT", "RESET", "UPDATE"):
            self._error(400, f"verb must be REBOOT, RESET or UPDATE, got {verb!r}")
            return
        cmd = self.api.control.issue_command(device, verb)
        self._json(201, {"cmd_id": cmd.cmd_id, "issued_at": cmd.issued_at,
                         "target": cmd.target, "verb": cmd.verb})

    def _post_firmware(self) -> None:
        version = self.headers.get("X-Version", "")
        blob = self._read_body()
        try:
            desc = self.api.control.register_firmware(blob, version)
        except ValueError as exc:
            self._error(400, str(exc))
            return
        self._json(201, desc.to_dict())

    def _post_flash(self, content_hash: str) -> None:
        body = self._read_json()
        target = body.get("target", "")
        if not target:
            self._error(400, "target required")
            return
        try:
            desc = self.api.control.blobs.descriptor(content_hash)
        except KeyError:
            self._error(404, "unknown firmware")
            return
        cmd = self.api.control.issue_command(target, "FLASH", desc)
        self._json(201, {"cmd_id": cmd.cmd_id, "issued_at": cmd.issued_at,
                         "target": cmd.target, "verb": cmd.verb,
                         "arg": cmd.arg})

    def _post_annotation(self) -> None:
        body = self._read_json()
        try:
            group_id = int(body["group_id"])
            user = str(body["user"])
            text = str(body["text"])
            ts_ms = int(body["ts_ms"])
        except (KeyError, TypeError, ValueError):
            self._error(400, "need group_id, user, text, ts_ms")
            return
        try:
            group = self.api.groups.bind_annotation(group_id, user, text, ts_ms)
        except AnnotationError as exc:
            if exc.current is not None:
                self._error(409, str(exc), current=exc.current)
            else:
                self._error(404, str(exc))
            return
        # one annotation per group, so the group id is a stable pub_seq
        self.api.broker.publish(
            TOPIC_ANNOTATIONS, "console", group.group_id,
            json.dumps(group.to_json(), sort_keys=True).encode("utf-8"))
        self._json(201, group.to_json())
