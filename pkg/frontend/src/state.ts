// Client-side session store. Every mutation is fed by a server response --
// the client never computes or invents belief values; the server is the
// single source of truth and the store just mirrors it.

import {
  BeliefEntry,
  CloseReport,
  CreateSessionResponse,
  ImagePayload,
  MarkValue,
  PollResponse,
  UtteranceResponse,
} from "./types";

export interface ChatLine {
  speaker: string;
  text: string;
  pending: boolean; // optimistic echo, cleared on server ack
}

export interface StoreState {
  sessionId: string | null;
  status: "idle" | "open" | "closed" | "error";
  seq: number;
  images: ImagePayload[];
  targetIndices: number[];
  beliefs: Map<number, [number, number, number]>;
  chat: ChatLine[];
  marks: Map<number, MarkValue>;
  report: CloseReport | null;
  lastError: string | null;
}

export function initialState(): StoreState {
  return {
    sessionId: null,
    status: "idle",
    seq: -1,
    images: [],
    targetIndices: [],
    beliefs: new Map(),
    chat: [],
    marks: new Map(),
    report: null,
    lastError: null,
  };
}

function beliefMap(entries: BeliefEntry[]): Map<number, [number, number, number]> {
  const map = new Map<number, [number, number, number]>();
  for (const entry of entries) {
    map.set(entry.target_index, entry.probs);
  }
  return map;
}

export class SessionStore {
  state: StoreState = initialState();
  private listeners: Array<(s: StoreState) => void> = [];

  subscribe(listener: (s: StoreState) => void): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  applyCreate(images: ImagePayload[], targets: number[],
              resp: CreateSessionResponse): void {
    this.state = {
      ...initialState(),
      sessionId: resp.session_id,
      status: "open",
      seq: resp.seq,
      images,
      targetIndices: targets,
      beliefs: beliefMap(resp.beliefs),
    };
    this.emit();
  }

  // optimistic echo; reconciled by applyUtterance or rolledBack on error
  addPendingLine(speaker: string, text: string): void {
    this.state = {
      ...this.state,
      chat: [...this.state.chat, { speaker, text, pending: true }],
    };
    this.emit();
  }

  rollbackPending(): void {
    this.state = {
      ...this.state,
      chat: this.state.chat.filter((l) => !l.pending),
    };
    this.emit();
  }

  applyUtterance(resp: UtteranceResponse): void {
    this.state = {
      ...this.state,
      seq: resp.seq,
      beliefs: beliefMap(resp.beliefs),
      chat: this.state.chat.map((l) => ({ ...l, pending: false })),
    };
    this.emit();
  }

  applyPoll(resp: PollResponse): void {
    if (!resp.changed || resp.seq <= this.state.seq) {
      return; // stale or unchanged; never regress
    }
    this.state = {
      ...this.state,
      seq: resp.seq,
      status: resp.status === "closed" ? "closed" : this.state.status,
      beliefs: beliefMap(resp.beliefs),
    };
    this.emit();
  }

  applyMark(targetIndex: number, mark: MarkValue): void {
    const marks = new Map(this.state.marks);
    marks.set(targetIndex, mark);
    this.state = { ...this.state, marks };
    this.emit();
  }

  applyClose(report: CloseReport): void {
    this.state = { ...this.state, status: "closed", report };
    this.emit();
  }

  setError(message: string | null): void {
    this.state = { ...this.state, lastError: message };
    this.emit();
  }

  canSubmitUtterance(text: string): boolean {
    return this.state.status === "open" && text.trim().length > 0;
  }

  canMark(targetIndex: number): boolean {
    return (
      this.state.status === "open" &&
      this.state.targetIndices.includes(targetIndex) &&
      !this.state.marks.has(targetIndex)
    );
  }

  allMarked(): boolean {
    return this.state.targetIndices.every((j) => this.state.marks.has(j));
  }
}
