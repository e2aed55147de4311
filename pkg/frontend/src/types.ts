// Wire types for the control-plane HTTP API, plus narrow runtime guards.
// The console never recomputes anything the server already decided; these
// guards only reject payloads that do not have the advertised shape.

export type Status = "LIVE" | "STALE" | "DOWN";

export interface DeviceRow {
  device: string;
  room: string | null;
  status: Status;
  last_seen: number | null;
  last_sample_ts: number | null;
  firmware: string | null;
  phase: string | null;
}

export interface SegmentView {
  device: string;
  channels: string[];
  t_start_ms: number;
  t_end_ms: number;
  magnitude: number;
}

// submissions carry ts_ms; the stored annotation echoes the instant as "ts"
export interface Annotation {
  user: string;
  text: string;
  ts: number;
}

export interface PendingGroup {
  group_id: number;
  created_at: number;
  members: SegmentView[];
  annotation: Annotation | null;
}

export interface CommandReceipt {
  cmd_id: number;
  issued_at: number;
  target: string;
  verb: string;
}

export interface FirmwareInfo {
  content_hash: string;
  size_bytes: number;
  version: string;
}

export interface FaultRecordView {
  device: string;
  kind: string;
  detected_at: number;
  channel: string | null;
  action: string | null;
  resolved_at: number | null;
}

export interface LiveSample {
  device: string;
  ts_ms: number;
  seq: number;
  firmware: string;
  values: Record<string, number>;
}

export class ShapeError extends Error {}

function obj(x: unknown, what: string): Record<string, unknown> {
  if (typeof x !== "object" || x === null || Array.isArray(x)) {
    throw new ShapeError(`${what}: expected an object`);
  }
  return x as Record<string, unknown>;
}

function str(x: unknown, what: string): string {
  if (typeof x !== "string") throw new ShapeError(`${what}: expected a string`);
  return x;
}

function num(x: unknown, what: string): number {
  if (typeof x !== "number" || !Number.isFinite(x)) {
    throw new ShapeError(`${what}: expected a number`);
  }
  return x;
}

function opt<T>(x: unknown, f: (v: unknown, what: string) => T, what: string): T | null {
  return x === null || x === undefined ? null : f(x, what);
}

export function asDeviceRow(x: unknown): DeviceRow {
  const d = obj(x, "device row");
  const status = str(d.status, "status");
  if (status !== "LIVE" && status !== "STALE" && status !== "DOWN") {
    throw new ShapeError(`unknown liveness status ${status}`);
  }
  return {
    device: str(d.device, "device"),
    room: opt(d.room, str, "room"),
    status,
    last_seen: opt(d.last_seen, num, "last_seen"),
    last_sample_ts: opt(d.last_sample_ts, num, "last_sample_ts"),
    firmware: opt(d.firmware, str, "firmware"),
    phase: opt(d.phase, str, "phase"),
  };
}

export function asDeviceRows(x: unknown): DeviceRow[] {
  if (!Array.isArray(x)) throw new ShapeError("device table: expected an array");
  return x.map(asDeviceRow);
}

export function asPendingGroup(x: unknown): PendingGroup {
  const d = obj(x, "event group");
  const rawMembers = d.members;
  if (!Array.isArray(rawMembers)) throw new ShapeError("members: expected an array");
  const members = rawMembers.map((m) => {
    const s = obj(m, "segment");
    const channels = Array.isArray(s.channels) ? s.channels.map((c) => str(c, "channel")) : [];
    return {
      device: str(s.device, "segment device"),
      channels,
      t_start_ms: num(s.t_start_ms, "t_start_ms"),
      t_end_ms: num(s.t_end_ms, "t_end_ms"),
      magnitude: num(s.magnitude, "magnitude"),
    };
  });
  let annotation: Annotation | null = null;
  if (d.annotation !== null && d.annotation !== undefined) {
    const a = obj(d.annotation, "annotation");
    annotation = {
      user: str(a.user, "annotation user"),
      text: str(a.text, "annotation text"),
      ts: num(a.ts, "annotation ts"),
    };
  }
  return {
    group_id: num(d.group_id, "group_id"),
    created_at: num(d.created_at, "created_at"),
    members,
    annotation,
  };
}

export function asPendingGroups(x: unknown): PendingGroup[] {
  if (!Array.isArray(x)) throw new ShapeError("pending list: expected an array");
  return x.map(asPendingGroup);
}

export function asReceipt(x: unknown): CommandReceipt {
  const d = obj(x, "command receipt");
  return {
    cmd_id: num(d.cmd_id, "cmd_id"),
    issued_at: num(d.issued_at, "issued_at"),
    target: str(d.target, "target"),
    verb: str(d.verb, "verb"),
  };
}

export function asFirmwareInfo(x: unknown): FirmwareInfo {
  const d = obj(x, "firmware descriptor");
  return {
    content_hash: str(d.content_hash, "content_hash"),
    size_bytes: num(d.size_bytes, "size_bytes"),
    version: str(d.version, "version"),
  };
}

export function asFaultRecords(x: unknown): FaultRecordView[] {
  if (!Array.isArray(x)) throw new ShapeError("error log: expected an array");
  return x.map((r) => {
    const d = obj(r, "fault record");
    return {
      device: str(d.device, "device"),
      kind: str(d.kind, "kind"),
      detected_at: num(d.detected_at, "detected_at"),
      channel: opt(d.channel, str, "channel"),
      action: opt(d.action, str, "action"),
      resolved_at: opt(d.resolved_at, num, "resolved_at"),
    };
  });
}

export function asLiveSample(x: unknown): LiveSample {
  const d = obj(x, "live sample");
  const values = obj(d.values, "values");
  const out: Record<string, number> = {};
  for (const [k, v] of Object.entries(values)) out[k] = num(v, `values.${k}`);
  return {
    device: str(d.device, "device"),
    ts_ms: num(d.ts_ms, "ts_ms"),
    seq: num(d.seq, "seq"),
    firmware: str(d.firmware, "firmware"),
    values: out,
  };
}
