import { ApiError, ConsoleApi } from "./api.js";
import { Annotation, CommandReceipt, DeviceRow, PendingGroup } from "./types.js";

type Listener = () => void;

class Emitter {
  private listeners: Listener[] = [];

  subscribe(fn: Listener): () => void {
    this.listeners.push(fn);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== fn);
    };
  }

  protected emit(): void {
    for (const fn of this.listeners) fn();
  }
}

/** Liveness grid state. Status comes verbatim from the server table; the
 * client never reclassifies a device from timestamps it happens to hold. */
export class Dashboard extends Emitter {
  rows: DeviceRow[] = [];
  backendDown = false;
  lastError: string | null = null;
  lastUpdated: number | null = null;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly api: ConsoleApi,
    readonly pollMs = 5_000,
  ) {
    super();
  }

  start(): void {
    if (this.timer) return;
    void this.refresh();
    this.timer = setInterval(() => void this.refresh(), this.pollMs);
  }

  stop(): void {
    if (this.timer) clearInterval(this.timer);
    this.timer = null;
  }

  async refresh(): Promise<void> {
    try {
      this.rows = await this.api.devices();
      this.backendDown = false;
      this.lastError = null;
      this.lastUpdated = Date.now();
    } catch (err) {
      // keep the stale rows for the greyed-out view, raise the banner
      this.backendDown = true;
      this.lastError = err instanceof Error ? err.message : String(err);
    }
    this.emit();
  }

  roomOf(device: string): string | null {
    return this.rows.find((r) => r.device === device)?.room ?? null;
  }
}

/** Command actions. One click maps to exactly one HTTP request: while a
 * request for the same (verb, target) is in flight, further clicks are
 * ignored, and failures are surfaced instead of retried. */
export class Actions extends Emitter {
  readonly receipts: CommandReceipt[] = [];
  lastError: string | null = null;
  private readonly inflight = new Set<string>();

  constructor(private readonly api: ConsoleApi) {
    super();
  }

  command(device: string, verb: "REBOOT" | "RESET" | "UPDATE"): Promise<CommandReceipt | null> {
    return this.guarded(`${verb}:${device}`, () => this.api.command(device, verb));
  }

  async flashAll(blob: Uint8Array<ArrayBuffer>, version: string): Promise<CommandReceipt | null> {
    // upload is content-addressed and idempotent, so it sits outside the
    // single-request guarantee; the flash command itself is guarded
    const info = await this.api.uploadFirmware(blob, version);
    return this.guarded(`FLASH:${info.content_hash}`, () => this.api.flash(info.content_hash, "*"));
  }

  private async guarded(key: string, send: () => Promise<CommandReceipt>): Promise<CommandReceipt | null> {
    if (this.inflight.has(key)) return null;
    this.inflight.add(key);
    try {
      const receipt = await send();
      this.receipts.push(receipt);
      this.lastError = null;
      return receipt;
    } catch (err) {
      this.lastError = err instanceof Error ? err.message : String(err);
      throw err;
    } finally {
      this.inflight.delete(key);
      this.emit();
    }
  }
}

export interface ResolvedPrompt {
  group_id: number;
  annotation: Annotation;
  mine: boolean;
}

/** Annotation inbox. A prompt disappears on successful submit; a 409 means
 * someone else answered first, so the prompt is dropped and the stored
 * annotation is shown instead of ours. */
export class Inbox extends Emitter {
  prompts: PendingGroup[] = [];
  resolved: ResolvedPrompt[] = [];
  backendDown = false;
  lastError: string | null = null;
  private timer: ReturnType<typeof setInterval> | null = null;
  private readonly inflight = new Set<number>();

  constructor(
    private readonly api: ConsoleApi,
    readonly user: string,
    readonly pollMs = 10_000,
  ) {
    super();
  }

  start(): void {
    if (this.timer) return;
    void this.refresh();
    this.timer = setInterval(() => void this.refresh(), this.pollMs);
  }

  stop(): void {
    if (this.timer) clearInterval(this.timer);
    this.timer = null;
  }

  async refresh(): Promise<void> {
    try {
      this.prompts = await this.api.pending();
      this.backendDown = false;
    } catch (err) {
      this.backendDown = true;
      this.lastError = err instanceof Error ? err.message : String(err);
    }
    this.emit();
  }

  async submit(groupId: number, text: string): Promise<boolean> {
    if (this.inflight.has(groupId)) return false;
    this.inflight.add(groupId);
    try {
      const group = await this.api.annotate(groupId, this.user, text, Date.now());
      this.drop(groupId);
      if (group.annotation) {
        this.resolved.push({ group_id: groupId, annotation: group.annotation, mine: true });
      }
      this.lastError = null;
      return true;
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        const current = (err.body as { current?: unknown } | null)?.current;
        this.drop(groupId);
        if (current && typeof current === "object") {
          this.resolved.push({
            group_id: groupId,
            annotation: current as Annotation,
            mine: false,
          });
        }
        await this.refresh();
        return false;
      }
      this.lastError = err instanceof Error ? err.message : String(err);
      throw err;
    } finally {
      this.inflight.delete(groupId);
      this.emit();
    }
  }

  private drop(groupId: number): void {
    this.prompts = this.prompts.filter((p) => p.group_id !== groupId);
  }
}
