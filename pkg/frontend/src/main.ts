// Bootstrap: read the endpoint + board setup from the page, start a session,
// wire the view, and keep a 1s polling loop as the push fallback.

import { SessionApi } from "./api";
import { SessionController } from "./controller";
import { SessionStore } from "./state";
import { BoardView } from "./view";
import { ImagePayload } from "./types";

interface BoardSetup {
  endpoint: string;
  checkpoint_id: string;
  images: ImagePayload[];
  target_indices: number[];
  gold_labels?: Record<number, string>;
}

function readSetup(): BoardSetup {
  const el = document.getElementById("board-setup");
  if (!el || !el.textContent) {
    throw new Error("missing #board-setup JSON script tag");
  }
  return JSON.parse(el.textContent) as BoardSetup;
}

export async function start(): Promise<SessionController> {
  const setup = readSetup();
  const api = new SessionApi(setup.endpoint);
  const store = new SessionStore();
  const controller = new SessionController(api, store);
  const root = document.getElementById("app");
  if (!root) {
    throw new Error("missing #app element");
  }
  new BoardView(root, controller);
  await controller.createSession(
    setup.images,
    setup.target_indices,
    setup.checkpoint_id,
    setup.gold_labels,
  );
  controller.startPolling();
  return controller;
}

if (typeof window !== "undefined" && "document" in globalThis) {
  window.addEventListener("DOMContentLoaded", () => {
    void start().catch((err) => {
      const root = document.getElementById("app");
      if (root) {
        root.textContent = `failed to start session: ${err}`;
      }
    });
  });
}
