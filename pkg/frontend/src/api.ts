// Thin typed client for the session service. One base URL, fetch only.

import {
  CloseReport,
  CreateSessionRequest,
  CreateSessionResponse,
  MarkResponse,
  MarkValue,
  PollResponse,
  SessionState,
  Speaker,
  UtteranceResponse,
} from "./types";

export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
  }
}

export class SessionApi {
  constructor(
    private baseUrl: string,
    private fetchImpl: typeof fetch = fetch,
  ) {}

  private async request<T>(
    method: string,
    path: string,
    body?: unknown,
  ): Promise<T> {
    const resp = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method,
      headers: body !== undefined ? { "Content-Type": "application/json" } : {},
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const text = await resp.text();
    const data = text ? JSON.parse(text) : {};
    if (!resp.ok) {
      throw new ApiError(resp.status, data.detail ?? text);
    }
    return data as T;
  }

  createSession(req: CreateSessionRequest): Promise<CreateSessionResponse> {
    return this.request("POST", "/sessions", req);
  }

  getSession(sessionId: string): Promise<SessionState> {
    return this.request("GET", `/sessions/${sessionId}`);
  }

  pollBeliefs(sessionId: string, since: number): Promise<PollResponse> {
    return this.request(
      "GET",
      `/sessions/${sessionId}/beliefs?since=${since}`,
    );
  }

  postUtterance(
    sessionId: string,
    speaker: Speaker,
    text: string,
  ): Promise<UtteranceResponse> {
    return this.request("POST", `/sessions/${sessionId}/utterances`, {
      speaker,
      text,
    });
  }

  postMark(
    sessionId: string,
    targetIndex: number,
    mark: MarkValue,
  ): Promise<MarkResponse> {
    return this.request("POST", `/sessions/${sessionId}/marks`, {
      target_index: targetIndex,
      mark,
    });
  }

  closeSession(sessionId: string): Promise<CloseReport> {
    return this.request("POST", `/sessions/${sessionId}/close`);
  }
}
