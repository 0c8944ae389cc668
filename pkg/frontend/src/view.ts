// DOM rendering. Pure render-from-state: every frame reflects the store,
// which in turn only ever reflects server responses.

import { SessionController } from "./controller";
import { StoreState } from "./state";
import { MarkValue } from "./types";

const LABELS = ["undecided", "common", "different"] as const;
const GAUGE_COLORS = ["#9aa0a6", "#34a853", "#ea4335"];

export function formatPercent(p: number): string {
  return `${Math.round(p * 100)}%`;
}

export function gaugeBar(probs: [number, number, number]): HTMLElement {
  const bar = document.createElement("div");
  bar.className = "gauge";
  probs.forEach((p, i) => {
    const seg = document.createElement("span");
    seg.className = `gauge-seg gauge-${LABELS[i]}`;
    seg.style.display = "inline-block";
    seg.style.width = `${Math.max(p * 100, 0)}%`;
    seg.style.background = GAUGE_COLORS[i];
    seg.title = `${LABELS[i]}: ${formatPercent(p)}`;
    bar.appendChild(seg);
  });
  return bar;
}

export class BoardView {
  constructor(
    private root: HTMLElement,
    private controller: SessionController,
  ) {
    controller.store.subscribe(() => this.render(controller.store.state));
  }

  render(state: StoreState): void {
    this.root.innerHTML = "";
    if (state.lastError) {
      const banner = document.createElement("div");
      banner.className = "error-banner";
      banner.textContent = state.lastError;
      this.root.appendChild(banner);
    }
    this.root.appendChild(this.renderBoard(state));
    this.root.appendChild(this.renderChat(state));
    this.root.appendChild(this.renderControls(state));
    if (state.report) {
      this.root.appendChild(this.renderReport(state));
    }
  }

  private renderBoard(state: StoreState): HTMLElement {
    const board = document.createElement("div");
    board.className = "board";
    state.images.forEach((img, index) => {
      const cell = document.createElement("div");
      const isTarget = state.targetIndices.includes(index);
      cell.className = isTarget ? "cell target" : "cell";
      cell.dataset.index = String(index);
      const pic = document.createElement("img");
      pic.src = img.uri;
      pic.alt = img.id;
      cell.appendChild(pic);
      if (isTarget) {
        const probs = state.beliefs.get(index) ?? [1 / 3, 1 / 3, 1 / 3];
        cell.appendChild(gaugeBar(probs));
        const mark = state.marks.get(index);
        if (mark) {
          const tag = document.createElement("div");
          tag.className = "mark-tag";
          tag.textContent = mark;
          cell.appendChild(tag);
        }
      }
      board.appendChild(cell);
    });
    return board;
  }

  private renderChat(state: StoreState): HTMLElement {
    const pane = document.createElement("div");
    pane.className = "chat";
    const log = document.createElement("div");
    log.className = "chat-log";
    for (const line of state.chat) {
      const item = document.createElement("div");
      item.className = line.pending ? "chat-line pending" : "chat-line";
      item.textContent = `${line.speaker}: ${line.text}`;
      log.appendChild(item);
    }
    pane.appendChild(log);

    const input = document.createElement("input");
    input.className = "chat-input";
    input.placeholder = "describe an image or answer your partner";
    input.disabled = state.status !== "open";
    const send = document.createElement("button");
    send.className = "chat-send";
    send.textContent = "send";
    send.disabled = state.status !== "open";
    const submit = () => {
      const text = input.value;
      if (!this.controller.store.canSubmitUtterance(text)) {
        return; // empty submit blocked client-side
      }
      input.value = "";
      void this.controller.submitUtterance("human", text);
    };
    send.addEventListener("click", submit);
    input.addEventListener("keydown", (ev) => {
      if ((ev as KeyboardEvent).key === "Enter") {
        submit();
      }
    });
    pane.appendChild(input);
    pane.appendChild(send);
    return pane;
  }

  private renderControls(state: StoreState): HTMLElement {
    const panel = document.createElement("div");
    panel.className = "controls";
    for (const j of state.targetIndices) {
      const row = document.createElement("div");
      row.className = "mark-row";
      row.dataset.target = String(j);
      const label = document.createElement("span");
      label.textContent = `target ${j}`;
      row.appendChild(label);
      (["common", "different"] as MarkValue[]).forEach((value) => {
        const btn = document.createElement("button");
        btn.className = `mark-btn mark-${value}`;
        btn.textContent = value;
        btn.disabled = !this.controller.store.canMark(j);
        btn.addEventListener("click", () => {
          void this.controller.submitMark(j, value);
        });
        row.appendChild(btn);
      });
      panel.appendChild(row);
    }
    const close = document.createElement("button");
    close.className = "close-btn";
    close.textContent = "finish round";
    close.disabled =
      state.status !== "open" || !this.controller.store.allMarked();
    close.addEventListener("click", () => {
      void this.controller.closeSession();
    });
    panel.appendChild(close);
    return panel;
  }

  private renderReport(state: StoreState): HTMLElement {
    const report = state.report!;
    const box = document.createElement("div");
    box.className = "report";
    const title = document.createElement("h3");
    title.textContent = "round report";
    box.appendChild(title);
    for (const target of report.targets) {
      const row = document.createElement("div");
      row.className = "report-row";
      let text =
        `target ${target.target_index}: you marked ${target.human_mark}, ` +
        `model says ${target.model_prediction}`;
      if (target.gold !== undefined) {
        text += ` (truth: ${target.gold})`;
      }
      row.textContent = text;
      box.appendChild(row);
    }
    return box;
  }
}
