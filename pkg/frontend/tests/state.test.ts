import { describe, expect, it } from "vitest";

import { SessionStore } from "../src/state";
import { BeliefEntry } from "../src/types";

const IMAGES = Array.from({ length: 6 }, (_, i) => ({
  id: `img${i}`,
  uri: `hash://dog0${i}`,
}));

function beliefs(values: Record<number, [number, number, number]>): BeliefEntry[] {
  return Object.entries(values).map(([j, probs]) => ({
    target_index: Number(j),
    probs,
  }));
}

function openStore(): SessionStore {
  const store = new SessionStore();
  store.applyCreate(IMAGES, [0, 2, 4], {
    session_id: "s1",
    status: "open",
    seq: 0,
    beliefs: beliefs({ 0: [1 / 3, 1 / 3, 1 / 3], 2: [1 / 3, 1 / 3, 1 / 3],
                       4: [1 / 3, 1 / 3, 1 / 3] }),
  });
  return store;
}

describe("SessionStore", () => {
  it("holds uniform beliefs after create", () => {
    const store = openStore();
    expect(store.state.status).toBe("open");
    expect(store.state.beliefs.get(0)).toEqual([1 / 3, 1 / 3, 1 / 3]);
    expect(store.state.targetIndices).toEqual([0, 2, 4]);
  });

  it("only ever shows beliefs a server response contained", () => {
    const store = openStore();
    const served: [number, number, number] = [0.1, 0.8, 0.1];
    store.applyUtterance({
      seq: 1,
      beliefs: beliefs({ 0: served, 2: [0.2, 0.3, 0.5], 4: [1, 0, 0] }),
      token_count: 5,
    });
    expect(store.state.beliefs.get(0)).toEqual(served);
    // nothing client-side recomputes or renormalizes the vector
    expect(store.state.beliefs.get(2)).toEqual([0.2, 0.3, 0.5]);
  });

  it("reconciles optimistic chat lines on ack and rollback on error", () => {
    const store = openStore();
    store.addPendingLine("human", "hello there");
    expect(store.state.chat[0].pending).toBe(true);
    store.applyUtterance({ seq: 1, beliefs: [], token_count: 3 });
    expect(store.state.chat[0].pending).toBe(false);

    store.addPendingLine("human", "dropped line");
    store.rollbackPending();
    expect(store.state.chat).toHaveLength(1);
  });

  it("ignores stale or unchanged polls", () => {
    const store = openStore();
    store.applyUtterance({
      seq: 2,
      beliefs: beliefs({ 0: [0, 1, 0], 2: [0, 1, 0], 4: [0, 1, 0] }),
      token_count: 4,
    });
    store.applyPoll({
      seq: 1,
      status: "open",
      changed: true,
      beliefs: beliefs({ 0: [1, 0, 0], 2: [1, 0, 0], 4: [1, 0, 0] }),
    });
    expect(store.state.beliefs.get(0)).toEqual([0, 1, 0]);
    expect(store.state.seq).toBe(2);
  });

  it("blocks empty utterances and double marks client-side", () => {
    const store = openStore();
    expect(store.canSubmitUtterance("   ")).toBe(false);
    expect(store.canSubmitUtterance("real text")).toBe(true);
    expect(store.canMark(0)).toBe(true);
    store.applyMark(0, "common");
    expect(store.canMark(0)).toBe(false);
    expect(store.canMark(1)).toBe(false); // not a target at all
    expect(store.allMarked()).toBe(false);
    store.applyMark(2, "different");
    store.applyMark(4, "different");
    expect(store.allMarked()).toBe(true);
  });

  it("freezes interaction once closed", () => {
    const store = openStore();
    store.applyClose({
      session_id: "s1",
      targets: [],
      utterance_count: 0,
    });
    expect(store.state.status).toBe("closed");
    expect(store.canSubmitUtterance("anything")).toBe(false);
    expect(store.canMark(0)).toBe(false);
  });
});
