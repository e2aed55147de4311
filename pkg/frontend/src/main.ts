import { ConsoleApi } from "./api.js";
import { ConsoleView } from "./render.js";
import { Actions, Dashboard, Inbox } from "./store.js";

function apiBase(): string {
  const override = new URLSearchParams(location.search).get("api");
  if (override) return override;
  if (location.protocol.startsWith("http")) {
    return `${location.protocol}//${location.hostname}:7430`;
  }
  return "http://127.0.0.1:7430";
}

const api = new ConsoleApi(apiBase());
const dashboard = new Dashboard(api);
const actions = new Actions(api);
const inbox = new Inbox(api, "console");

new ConsoleView(document.getElementById("app")!, api, dashboard, actions, inbox);
dashboard.start();
inbox.start();
