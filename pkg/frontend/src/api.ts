import {
  CommandReceipt,
  DeviceRow,
  FaultRecordView,
  FirmwareInfo,
  PendingGroup,
  asDeviceRows,
  asFaultRecords,
  asFirmwareInfo,
  asPendingGroup,
  asPendingGroups,
  asReceipt,
} from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

/** Non-2xx responses land here; `body` is the parsed JSON error payload
 * (the server answers `{"error": ..., ...}`, 409 adds `current`). */
export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
    readonly body: unknown,
  ) {
    super(message);
  }
}

export class ConsoleApi {
  constructor(
    readonly base: string,
    private readonly fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    const resp = await this.fetchImpl(this.base + path, init);
    let body: unknown = null;
    const text = await resp.text();
    if (text) {
      try {
        body = JSON.parse(text);
      } catch {
        body = text;
      }
    }
    if (!resp.ok) {
      const msg =
        typeof body === "object" && body !== null && "error" in body
          ? String((body as { error: unknown }).error)
          : `HTTP ${resp.status}`;
      throw new ApiError(resp.status, msg, body);
    }
    return body;
  }

  devices(): Promise<DeviceRow[]> {
    return this.request("/api/devices").then(asDeviceRows);
  }

  deviceErrors(id: string): Promise<FaultRecordView[]> {
    return this.request(`/api/devices/${encodeURIComponent(id)}/errors`).then(asFaultRecords);
  }

  pending(): Promise<PendingGroup[]> {
    return this.request("/api/events/pending").then(asPendingGroups);
  }

  command(id: string, verb: "REBOOT" | "RESET" | "UPDATE"): Promise<CommandReceipt> {
    return this.request(`/api/devices/${encodeURIComponent(id)}/cmd`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ verb }),
    }).then(asReceipt);
  }

  uploadFirmware(blob: Uint8Array<ArrayBuffer>, version: string): Promise<FirmwareInfo> {
    return this.request("/api/firmware", {
      method: "POST",
      headers: { "Content-Type": "application/octet-stream", "X-Version": version },
      body: blob,
    }).then(asFirmwareInfo);
  }

  flash(contentHash: string, target: string): Promise<CommandReceipt> {
    return this.request(`/api/firmware/${contentHash}/flash`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ target }),
    }).then(asReceipt);
  }

  annotate(groupId: number, user: string, text: string, tsMs: number): Promise<PendingGroup> {
    return this.request("/api/annotations", {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ group_id: groupId, user, text, ts_ms: tsMs }),
    }).then(asPendingGroup);
  }

  liveUrl(id: string): string {
    return `${this.base}/api/live/${encodeURIComponent(id)}`;
  }
}
