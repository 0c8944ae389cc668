// Orchestrates API calls against the store: optimistic chat echo reconciled
// with server acks, marking flow, close, and a polling fallback (one cycle
// per second) for belief updates when no ack is in flight.

import { SessionApi, ApiError } from "./api";
import { SessionStore } from "./state";
import { ImagePayload, MarkValue, Speaker } from "./types";

export const POLL_INTERVAL_MS = 1000;

export class SessionController {
  private pollTimer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private api: SessionApi,
    public store: SessionStore,
  ) {}

  async createSession(
    images: ImagePayload[],
    targetIndices: number[],
    checkpointId: string,
    goldLabels?: Record<number, string>,
  ): Promise<void> {
    const resp = await this.api.createSession({
      images,
      target_indices: targetIndices,
      checkpoint_id: checkpointId,
      gold_labels: goldLabels,
    });
    this.store.applyCreate(images, targetIndices, resp);
  }

  async submitUtterance(speaker: Speaker, text: string): Promise<boolean> {
    if (!this.store.canSubmitUtterance(text)) {
      return false; // blocked client-side: empty text or closed session
    }
    const sid = this.requireSession();
    this.store.addPendingLine(speaker, text);
    try {
      const resp = await this.api.postUtterance(sid, speaker, text.trim());
      this.store.applyUtterance(resp);
      this.store.setError(null);
      return true;
    } catch (err) {
      this.store.rollbackPending();
      this.surface(err);
      return false;
    }
  }

  async submitMark(targetIndex: number, mark: MarkValue): Promise<boolean> {
    if (!this.store.canMark(targetIndex)) {
      return false;
    }
    const sid = this.requireSession();
    try {
      await this.api.postMark(sid, targetIndex, mark);
      this.store.applyMark(targetIndex, mark);
      this.store.setError(null);
      return true;
    } catch (err) {
      this.surface(err);
      return false;
    }
  }

  async closeSession(): Promise<boolean> {
    if (!this.store.allMarked()) {
      return false;
    }
    const sid = this.requireSession();
    try {
      const report = await this.api.closeSession(sid);
      this.store.applyClose(report);
      this.store.setError(null);
      return true;
    } catch (err) {
      this.surface(err);
      return false;
    }
  }

  async pollOnce(): Promise<void> {
    const sid = this.store.state.sessionId;
    if (!sid || this.store.state.status !== "open") {
      return;
    }
    try {
      const resp = await this.api.pollBeliefs(sid, this.store.state.seq);
      this.store.applyPoll(resp);
      this.store.setError(null);
    } catch (err) {
      this.surface(err, "service unreachable, retrying");
    }
  }

  startPolling(): void {
    if (this.pollTimer !== null) {
      return;
    }
    this.pollTimer = setInterval(() => void this.pollOnce(), POLL_INTERVAL_MS);
  }

  stopPolling(): void {
    if (this.pollTimer !== null) {
      clearInterval(this.pollTimer);
      this.pollTimer = null;
    }
  }

  private requireSession(): string {
    const sid = this.store.state.sessionId;
    if (!sid) {
      throw new Error("no session");
    }
    return sid;
  }

  private surface(err: unknown, fallback?: string): void {
    if (err instanceof ApiError) {
      this.store.setError(err.detail);
    } else {
      this.store.setError(fallback ?? String(err));
    }
  }
}
