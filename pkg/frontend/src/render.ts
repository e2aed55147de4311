import { ConsoleApi } from "./api.js";
import { SparkBuffer, scalePath } from "./sparkline.js";
import { LiveFeed } from "./sse.js";
import { Actions, Dashboard, Inbox } from "./store.js";
import { DeviceRow, PendingGroup } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  cls?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (cls) node.className = cls;
  if (text !== undefined) node.textContent = text;
  return node;
}

function fmtTime(ms: number | null): string {
  if (ms === null) return "never";
  return new Date(ms).toISOString().replace("T", " ").slice(0, 19);
}

interface Expanded {
  feed: LiveFeed;
  panel: HTMLElement;
}

export class ConsoleView {
  private readonly expanded = new Map<string, Expanded>();

  constructor(
    private readonly root: HTMLElement,
    private readonly api: ConsoleApi,
    private readonly dashboard: Dashboard,
    private readonly actions: Actions,
    private readonly inbox: Inbox,
  ) {
    dashboard.subscribe(() => this.renderDevices());
    actions.subscribe(() => this.renderToasts());
    inbox.subscribe(() => this.renderInbox());
    this.renderShell();
  }

  private renderShell(): void {
    this.root.innerHTML = "";
    const banner = el("div", "banner hidden");
    banner.id = "banner";
    this.root.appendChild(banner);

    const header = el("header");
    header.appendChild(el("h1", undefined, "dalton console"));
    header.appendChild(this.flashForm());
    this.root.appendChild(header);

    const toasts = el("div", "toasts");
    toasts.id = "toasts";
    this.root.appendChild(toasts);

    const grid = el("div", "grid");
    grid.id = "devices";
    this.root.appendChild(grid);

    const inbox = el("section", "inbox");
    inbox.id = "inbox";
    this.root.appendChild(inbox);
  }

  private flashForm(): HTMLElement {
    const wrap = el("div", "flash");
    const file = el("input");
    file.type = "file";
    const version = el("input");
    version.placeholder = "version e.g. 2.0.0";
    const btn = el("button", undefined, "Flash fleet");
    btn.onclick = async () => {
      const chosen = file.files?.[0];
      if (!chosen || !version.value) return;
      if (!confirm(`Flash ${version.value} to every device?`)) return;
      const bytes = new Uint8Array(await chosen.arrayBuffer());
      try {
        await this.actions.flashAll(bytes, version.value);
      } catch {
        // failure already recorded on the store; toast area shows it
      }
    };
    wrap.append(file, version, btn);
    return wrap;
  }

  private renderDevices(): void {
    const banner = document.getElementById("banner")!;
    banner.classList.toggle("hidden", !this.dashboard.backendDown);
    banner.textContent = this.dashboard.backendDown
      ? `backend unreachable (${this.dashboard.lastError ?? "?"}), retrying`
      : "";

    const grid = document.getElementById("devices")!;
    grid.classList.toggle("stale", this.dashboard.backendDown);
    grid.innerHTML = "";
    for (const row of this.dashboard.rows) {
      grid.appendChild(this.deviceCard(row));
    }
  }

  private deviceCard(row: DeviceRow): HTMLElement {
    const card = el("div", `card ${row.status.toLowerCase()}`);
    const head = el("div", "card-head");
    head.appendChild(el("strong", undefined, row.device));
    head.appendChild(el("span", "status", row.status));
    card.appendChild(head);
    card.appendChild(el("div", "meta", `${row.room ?? "unplaced"} · fw ${row.firmware ?? "?"}`));
    card.appendChild(el("div", "meta", `last seen ${fmtTime(row.last_seen)}`));

    const controls = el("div", "controls");
    for (const verb of ["REBOOT", "RESET", "UPDATE"] as const) {
      const b = el("button", undefined, verb.toLowerCase());
      b.onclick = (ev) => {
        ev.stopPropagation();
        if (verb !== "UPDATE" && !confirm(`${verb} ${row.device}?`)) return;
        void this.actions.command(row.device, verb).catch(() => {});
      };
      controls.appendChild(b);
    }
    card.appendChild(controls);

    const open = this.expanded.get(row.device);
    if (open) card.appendChild(open.panel);
    head.onclick = () => this.toggle(row.device);
    return card;
  }

  private toggle(device: string): void {
    const open = this.expanded.get(device);
    if (open) {
      open.feed.stop();
      this.expanded.delete(device);
    } else {
      const panel = el("div", "livepanel");
      const buffer = new SparkBuffer();
      const feed = new LiveFeed(
        this.api.liveUrl(device),
        buffer,
        undefined,
        () => this.drawPlots(device, buffer, panel),
      );
      feed.start();
      this.expanded.set(device, { feed, panel });
      void this.api
        .deviceErrors(device)
        .then((records) => {
          const log = el("div", "errlog");
          for (const r of records.slice(-5)) {
            log.appendChild(
              el("div", undefined, `${fmtTime(r.detected_at)} ${r.kind} ${r.channel ?? ""} ${r.action ?? ""}`),
            );
          }
          panel.appendChild(log);
        })
        .catch(() => {});
    }
    this.renderDevices();
  }

  private drawPlots(device: string, buffer: SparkBuffer, panel: HTMLElement): void {
    let plots = panel.querySelector<HTMLElement>(".plots");
    if (!plots) {
      plots = el("div", "plots");
      panel.prepend(plots);
    }
    for (const channel of buffer.channels()) {
      let canvas = plots.querySelector<HTMLCanvasElement>(`canvas[data-ch="${channel}"]`);
      if (!canvas) {
        const box = el("div", "plot");
        box.appendChild(el("span", "plot-label", channel));
        canvas = document.createElement("canvas");
        canvas.dataset.ch = channel;
        canvas.width = 220;
        canvas.height = 40;
        box.appendChild(canvas);
        plots.appendChild(box);
      }
      const ctx = canvas.getContext("2d");
      if (!ctx) continue;
      ctx.clearRect(0, 0, canvas.width, canvas.height);
      ctx.beginPath();
      const path = scalePath(buffer.series(channel), canvas.width, canvas.height);
      path.forEach(([x, y], i) => (i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y)));
      ctx.stroke();
    }
  }

  private renderToasts(): void {
    const box = document.getElementById("toasts")!;
    box.innerHTML = "";
    if (this.actions.lastError) {
      box.appendChild(el("div", "toast error", this.actions.lastError));
    }
    for (const r of this.actions.receipts.slice(-4)) {
      box.appendChild(el("div", "toast", `cmd ${r.cmd_id}: ${r.verb} ${r.target}`));
    }
  }

  private renderInbox(): void {
    const box = document.getElementById("inbox")!;
    box.innerHTML = "";
    box.appendChild(el("h2", undefined, `annotation inbox (${this.inbox.prompts.length})`));
    for (const group of this.inbox.prompts) {
      box.appendChild(this.promptCard(group));
    }
    for (const r of this.inbox.resolved.slice(-3)) {
      box.appendChild(
        el(
          "div",
          "resolved",
          `group ${r.group_id} annotated${r.mine ? "" : " elsewhere"}: "${r.annotation.text}"`,
        ),
      );
    }
  }

  private promptCard(group: PendingGroup): HTMLElement {
    const card = el("div", "prompt");
    const rooms = [...new Set(group.members.map((m) => this.dashboard.roomOf(m.device) ?? m.device))];
    const channels = [...new Set(group.members.flatMap((m) => m.channels))];
    const t0 = Math.min(...group.members.map((m) => m.t_start_ms));
    const t1 = Math.max(...group.members.map((m) => m.t_end_ms));
    const magnitude = Math.max(...group.members.map((m) => m.magnitude));
    card.appendChild(el("strong", undefined, `group ${group.group_id}`));
    card.appendChild(el("div", "meta", `${rooms.join(", ")} · ${channels.join(", ")}`));
    card.appendChild(
      el("div", "meta", `${fmtTime(t0)} to ${fmtTime(t1)} · magnitude ${magnitude.toFixed(2)}`),
    );
    const input = el("textarea");
    input.placeholder = "what happened here?";
    const submit = el("button", undefined, "annotate");
    submit.onclick = () => {
      if (!input.value.trim()) return;
      void this.inbox.submit(group.group_id, input.value.trim()).catch(() => {});
    };
    card.append(input, submit);
    return card;
  }
}
