// Scripted fake of the session service, implementing the HTTP contract over
// a fetch-compatible function. Belief trajectories are fixed by the script,
// mirroring how the real service derives them from the listener model.

import { BeliefEntry, CloseReport } from "../src/types";

type Json = Record<string, unknown>;

export interface ScriptedBeliefs {
  // beliefs returned for the k-th posted utterance (0-based)
  perUtterance: BeliefEntry[][];
}

function uniformBeliefs(targets: number[]): BeliefEntry[] {
  return targets.map((j) => ({
    target_index: j,
    probs: [1 / 3, 1 / 3, 1 / 3] as [number, number, number],
  }));
}

export class FakeService {
  sessions = new Map<string, FakeSession>();
  requests: string[] = [];
  private counter = 0;

  constructor(private script: ScriptedBeliefs) {}

  fetch = async (url: string, init?: RequestInit): Promise<Response> => {
    const method = init?.method ?? "GET";
    const path = url.replace(/^https?:\/\/[^/]+/, "");
    this.requests.push(`${method} ${path}`);
    const body = init?.body ? JSON.parse(init.body as string) : {};
    try {
      return this.route(method, path, body);
    } catch (err) {
      return jsonResponse(500, { detail: String(err) });
    }
  };

  private route(method: string, path: string, body: Json): Response {
    if (method === "POST" && path === "/sessions") {
      const targets = body.target_indices as number[];
      if ((body.images as unknown[]).length !== 6) {
        return jsonResponse(400, { detail: "expected 6 images" });
      }
      const id = `fake-${this.counter++}`;
      const session = new FakeSession(id, targets, this.script,
                                      body.gold_labels as
                                      Record<string, string> | undefined);
      this.sessions.set(id, session);
      return jsonResponse(201, {
        session_id: id,
        status: "open",
        seq: 0,
        beliefs: uniformBeliefs(targets),
      });
    }
    const match = path.match(/^\/sessions\/([^/?]+)(\/[a-z]+)?(\?.*)?$/);
    if (!match) {
      return jsonResponse(404, { detail: "no route" });
    }
    const session = this.sessions.get(match[1]);
    if (!session) {
      return jsonResponse(404, { detail: "unknown session" });
    }
    const action = match[2] ?? "";
    if (method === "GET" && action === "") {
      return jsonResponse(200, session.state());
    }
    if (method === "GET" && action === "/beliefs") {
      const since = Number((match[3] ?? "?since=-1").split("=")[1]);
      return jsonResponse(200, session.poll(since));
    }
    if (method === "POST" && action === "/utterances") {
      return session.postUtterance(body);
    }
    if (method === "POST" && action === "/marks") {
      return session.postMark(body);
    }
    if (method === "POST" && action === "/close") {
      return session.close();
    }
    return jsonResponse(404, { detail: "no route" });
  }
}

class FakeSession {
  status = "open";
  seq = 0;
  utterances: { speaker: string; text: string }[] = [];
  marks = new Map<number, { mark: string; position: number }>();
  beliefs: BeliefEntry[];
  report: CloseReport | null = null;

  constructor(
    public id: string,
    public targets: number[],
    private script: ScriptedBeliefs,
    private gold?: Record<string, string>,
  ) {
    this.beliefs = uniformBeliefs(targets);
  }

  postUtterance(body: Json): Response {
    if (this.status !== "open") {
      return jsonResponse(409, { detail: "session is closed" });
    }
    const text = (body.text as string) ?? "";
    if (!text.trim()) {
      return jsonResponse(400, { detail: "empty utterance text" });
    }
    const k = this.utterances.length;
    this.utterances.push({ speaker: body.speaker as string, text });
    const scripted = this.script.perUtterance[
      Math.min(k, this.script.perUtterance.length - 1)
    ];
    this.beliefs = scripted.filter((e) => this.targets.includes(e.target_index));
    this.seq += 1;
    return jsonResponse(200, {
      seq: this.seq,
      beliefs: this.beliefs,
      token_count: (k + 1) * 5,
    });
  }

  postMark(body: Json): Response {
    if (this.status !== "open") {
      return jsonResponse(409, { detail: "session is closed" });
    }
    const j = body.target_index as number;
    if (!this.targets.includes(j)) {
      return jsonResponse(400, { detail: `${j} is not a target` });
    }
    if (this.marks.has(j)) {
      return jsonResponse(409, { detail: `target ${j} already marked` });
    }
    this.marks.set(j, {
      mark: body.mark as string,
      position: this.utterances.length,
    });
    this.seq += 1;
    const marks: Record<string, string> = {};
    for (const [key, value] of this.marks) {
      marks[String(key)] = value.mark;
    }
    return jsonResponse(200, { ok: true, marks });
  }

  close(): Response {
    if (this.status !== "open") {
      return jsonResponse(409, { detail: "session already closed" });
    }
    const missing = this.targets.filter((j) => !this.marks.has(j));
    if (missing.length) {
      return jsonResponse(409, { detail: `targets not yet marked: ${missing}` });
    }
    const targets = this.targets.map((j) => {
      const mark = this.marks.get(j)!;
      const probs = this.beliefs.find((e) => e.target_index === j)!.probs;
      const labels = ["undecided", "common", "different"];
      const prediction = labels[probs.indexOf(Math.max(...probs))];
      const entry: Record<string, unknown> = {
        target_index: j,
        human_mark: mark.mark,
        mark_position: mark.position,
        belief_at_mark: probs,
        belief_at_close: probs,
        model_prediction: prediction,
      };
      if (this.gold) {
        entry.gold = this.gold[String(j)];
        entry.model_correct = prediction === entry.gold;
        entry.human_correct = mark.mark === entry.gold;
      }
      return entry;
    });
    this.report = {
      session_id: this.id,
      targets: targets as unknown as CloseReport["targets"],
      utterance_count: this.utterances.length,
    };
    this.status = "closed";
    this.seq += 1;
    return jsonResponse(200, this.report as unknown as Json);
  }

  poll(since: number): Json {
    return {
      seq: this.seq,
      status: this.status,
      changed: this.seq > since,
      beliefs: this.beliefs,
    };
  }

  state(): Json {
    const marks: Record<string, unknown> = {};
    for (const [key, value] of this.marks) {
      marks[String(key)] = value;
    }
    return {
      session_id: this.id,
      status: this.status,
      seq: this.seq,
      images: [],
      target_indices: this.targets,
      dialogue: this.utterances,
      marks,
      beliefs: this.beliefs,
      report: this.report,
    };
  }
}

function jsonResponse(status: number, body: Json): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}
