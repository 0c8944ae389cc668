// Payload types mirroring the session service API.

export interface ImagePayload {
  id: string;
  uri: string;
}

export interface BeliefEntry {
  target_index: number;
  probs: [number, number, number]; // undecided, common, different
}

export interface CreateSessionRequest {
  images: ImagePayload[];
  target_indices: number[];
  checkpoint_id: string;
  theme?: string[];
  gold_labels?: Record<number, string>;
}

export interface CreateSessionResponse {
  session_id: string;
  status: string;
  seq: number;
  beliefs: BeliefEntry[];
}

export interface UtteranceResponse {
  seq: number;
  beliefs: BeliefEntry[];
  token_count: number;
}

export interface MarkResponse {
  ok: boolean;
  marks: Record<string, string>;
}

export interface TargetReport {
  target_index: number;
  human_mark: string;
  mark_position: number;
  belief_at_mark: number[];
  belief_at_close: number[];
  model_prediction: string;
  gold?: string;
  model_correct?: boolean;
  human_correct?: boolean;
}

export interface CloseReport {
  session_id: string;
  targets: TargetReport[];
  utterance_count: number;
  model_all_correct?: boolean;
  human_all_correct?: boolean;
}

export interface SessionState {
  session_id: string;
  status: string;
  seq: number;
  images: ImagePayload[];
  target_indices: number[];
  dialogue: { speaker: string; text: string }[];
  marks: Record<string, { mark: string; position: number }>;
  beliefs: BeliefEntry[];
  report: CloseReport | null;
}

export interface PollResponse {
  seq: number;
  status: string;
  changed: boolean;
  beliefs: BeliefEntry[];
}

export type Speaker = "human" | "partner";
export type MarkValue = "common" | "different";
