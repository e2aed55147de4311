// End-to-end console checks against a live daemon and simulated fleet.
// One daemon serves the whole file; tests run in declaration order:
// liveness lag, reboot click, annotation flow, concurrent annotation.
import { ChildProcess, spawn } from "node:child_process";
import { closeSync, mkdtempSync, openSync, writeFileSync } from "node:fs";
import { createServer } from "node:net";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";
import { ApiError, ConsoleApi } from "../src/api.js";
import { Actions, Dashboard, Inbox } from "../src/store.js";
import { DeviceRow, PendingGroup, Status } from "../src/types.js";

const VICTIM = "h1-living"; // contributes no event segments, safe to take down

function freePort(): Promise<number> {
  return new Promise((resolve, reject) => {
    const srv = createServer();
    srv.listen(0, "127.0.0.1", () => {
      const addr = srv.address();
      if (addr && typeof addr === "object") {
        const port = addr.port;
        srv.close(() => resolve(port));
      } else {
        srv.close(() => reject(new Error("no port")));
      }
    });
  });
}

function sleep(ms: number): Promise<void> {
  return new Promise((r) => setTimeout(r, ms));
}

async function waitFor<T>(
  probe: () => Promise<T | null>,
  timeoutMs: number,
  what: string,
  stepMs = 250,
): Promise<T> {
  const deadline = Date.now() + timeoutMs;
  for (;;) {
    const got = await probe().catch(() => null);
    if (got !== null) return got;
    if (Date.now() > deadline) throw new Error(`timed out waiting for ${what}`);
    await sleep(stepMs);
  }
}

let workDir: string;
let daemon: ChildProcess;
let daemonLogFd: number;
let sim: ChildProcess;
let simExited: Promise<number | null>;
let httpBase: string;
let brokerAddr: string;
let api: ConsoleApi;
const dashboard = { current: null as Dashboard | null };

async function rawRows(): Promise<DeviceRow[]> {
  const resp = await fetch(`${httpBase}/api/devices`);
  return (await resp.json()) as DeviceRow[];
}

async function rawPending(): Promise<PendingGroup[]> {
  const resp = await fetch(`${httpBase}/api/events/pending`);
  return (await resp.json()) as PendingGroup[];
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "console-e2e-"));
  const fleetPath = join(workDir, "fleet.json");
  writeFileSync(
    fleetPath,
    JSON.stringify({
      fleet: "console-e2e",
      heartbeat_s: 10,
      devices: [
        { id: "h1-kitchen", seed: 101 },
        { id: "h1-bedroom", seed: 102 },
        { id: "h1-dining", seed: 103 },
        { id: "h1-living", seed: 104 },
        { id: "h1-bedroom2", seed: 105 },
      ],
      // late enough that the fleet is provably all-up when the first test
      // starts timing, early enough that DOWN lands seconds later
      fault_schedule: [{ t_s: 300, device: VICTIM, fault: "OFFLINE" }],
    }),
  );

  const brokerPort = await freePort();
  const httpPort = await freePort();
  brokerAddr = `127.0.0.1:${brokerPort}`;
  httpBase = `http://127.0.0.1:${httpPort}`;
  api = new ConsoleApi(httpBase);

  daemonLogFd = openSync(join(workDir, "daltond.log"), "a");
  daemon = spawn(
    "daltond",
    [
      "serve",
      "--data-dir", join(workDir, "data"),
      "--host", "127.0.0.1",
      "--port", String(brokerPort),
      "--http-port", String(httpPort),
      "--speed", "60",
    ],
    { stdio: ["ignore", daemonLogFd, daemonLogFd] },
  );
  await waitFor(
    async () => ((await fetch(`${httpBase}/healthz`)).ok ? true : null),
    15_000,
    "daemon /healthz",
  );

  sim = spawn(
    "dalton",
    [
      "sim",
      "--scenario", "h1",
      "--fleet", fleetPath,
      "--duration", "4800",
      "--speed", "60",
      "--connect", brokerAddr,
    ],
    { stdio: ["ignore", daemonLogFd, daemonLogFd] },
  );
  simExited = new Promise((resolve) => sim.on("close", (code) => resolve(code)));

  // fleet visible before any test starts timing
  await waitFor(
    async () => ((await rawRows()).length === 5 ? true : null),
    30_000,
    "all five devices in the table",
  );
}, 120_000);

afterAll(async () => {
  dashboard.current?.stop();
  sim?.kill("SIGKILL");
  daemon?.kill("SIGTERM");
  await sleep(300);
  daemon?.kill("SIGKILL");
  if (daemonLogFd) closeSync(daemonLogFd);
});

describe("console against a live fleet", () => {
  it("shows a dead device as DOWN within two poll cycles of the server", async () => {
    const dash = new Dashboard(api); // production 5 s poll cadence
    dashboard.current = dash;
    let consoleSawDownAt = 0;
    dash.subscribe(() => {
      const row = dash.rows.find((r) => r.device === VICTIM);
      if (row?.status === "DOWN" && consoleSawDownAt === 0) consoleSawDownAt = Date.now();
    });
    dash.start();

    const before = (await rawRows()).find((r) => r.device === VICTIM);
    expect(before?.status).not.toBe("DOWN"); // victim still heartbeating at start

    // server truth first: the table itself has to flip before the console can
    const serverSawDownAt = await waitFor(
      async () => {
        const row = (await rawRows()).find((r) => r.device === VICTIM);
        return row?.status === "DOWN" ? Date.now() : null;
      },
      60_000,
      "server table to mark the victim DOWN",
    );

    await waitFor(async () => (consoleSawDownAt ? true : null), 15_000, "console DOWN state");
    const lagMs = consoleSawDownAt - serverSawDownAt;
    expect(lagMs).toBeLessThanOrEqual(2 * dash.pollMs);
    expect(lagMs).toBeLessThanOrEqual(10_000);

    const statuses = new Set<Status>(dash.rows.map((r) => r.status));
    expect(dash.rows).toHaveLength(5);
    expect(statuses.has("LIVE")).toBe(true); // the rest of the fleet is alive
  }, 120_000);

  it("reboot click sends exactly one POST and yields a visible cmd_id", async () => {
    let cmdPosts = 0;
    const counting = new ConsoleApi(httpBase, (url, init) => {
      if (String(url).endsWith("/cmd") && init?.method === "POST") cmdPosts += 1;
      return fetch(url, init);
    });
    const actions = new Actions(counting);

    // a click lands twice in quick succession more often than anyone admits
    const [first, second] = await Promise.all([
      actions.command("h1-kitchen", "REBOOT"),
      actions.command("h1-kitchen", "REBOOT"),
    ]);

    expect(cmdPosts).toBe(1);
    const receipt = first ?? second;
    expect(receipt).not.toBeNull();
    expect([first, second].filter((r) => r === null)).toHaveLength(1);
    expect(Number.isInteger(receipt!.cmd_id)).toBe(true);
    expect(receipt!.target).toBe("h1-kitchen");
    expect(receipt!.verb).toBe("REBOOT");
    expect(actions.receipts).toHaveLength(1); // what the toast renders from
  });

  it("annotation submit removes the prompt and shrinks the pending queue by one", async () => {
    const simCode = await simExited;
    expect(simCode).toBe(0);

    // group detection runs out of band and queues prompts on the daemon
    const events = spawn(
      "dalton",
      [
        "events",
        "--data-dir", join(workDir, "data"),
        "--floorplan", "h1",
        "--out", join(workDir, "groups.csv"),
        "--connect", brokerAddr,
      ],
      { stdio: ["ignore", daemonLogFd, daemonLogFd] },
    );
    const eventsCode = await new Promise<number | null>((resolve) =>
      events.on("close", (code) => resolve(code)),
    );
    expect(eventsCode).toBe(0);

    const pendingBefore = await waitFor(
      async () => {
        const groups = await rawPending();
        return groups.length >= 2 ? groups : null; // this test and the next each need one
      },
      30_000,
      "pending annotation prompts",
    );

    const inbox = new Inbox(api, "console-e2e");
    await inbox.refresh();
    expect(inbox.prompts.length).toBe(pendingBefore.length);

    const target = inbox.prompts[0].group_id;
    const ok = await inbox.submit(target, "stir fry, window shut");
    expect(ok).toBe(true);
    expect(inbox.prompts.some((p) => p.group_id === target)).toBe(false);
    expect(inbox.prompts.length).toBe(pendingBefore.length - 1);

    const pendingAfter = await rawPending();
    expect(pendingAfter.length).toBe(pendingBefore.length - 1);
    expect(pendingAfter.some((g) => g.group_id === target)).toBe(false);
  }, 180_000);

  it("concurrent double-submit stores exactly one annotation", async () => {
    const pending = await rawPending();
    expect(pending.length).toBeGreaterThanOrEqual(1);
    const target = pending[0].group_id;

    const alice = new ConsoleApi(httpBase);
    const bob = new ConsoleApi(httpBase);
    const [a, b] = await Promise.allSettled([
      alice.annotate(target, "alice", "opened the window", Date.now()),
      bob.annotate(target, "bob", "turned on the fan", Date.now()),
    ]);

    const winners = [a, b].filter((r) => r.status === "fulfilled");
    const losers = [a, b].filter((r) => r.status === "rejected");
    expect(winners).toHaveLength(1);
    expect(losers).toHaveLength(1);

    const stored = (winners[0] as PromiseFulfilledResult<PendingGroup>).value.annotation;
    expect(stored).not.toBeNull();
    const err = (losers[0] as PromiseRejectedResult).reason as ApiError;
    expect(err).toBeInstanceOf(ApiError);
    expect(err.status).toBe(409);
    const current = (err.body as { current: { user: string; text: string } }).current;
    expect(current.user).toBe(stored!.user);
    expect(current.text).toBe(stored!.text);

    const after = await rawPending();
    expect(after.some((g) => g.group_id === target)).toBe(false);
  });
});
