// Typed client for the study service HTTP+JSON API. Rater-facing payloads
// never contain the hidden truth label, and this client never asks for it.

export type Choice = "real" | "simulated";

export interface NextItem {
  done: boolean;
  item_id?: string;
  image_url?: string;
  answered: number;
  total: number;
}

export interface RaterStats {
  rater_id: string;
  n_answered: number;
  n_correct: number;
  accuracy: number;
  accuracy_pct: number;
  p_value: number;
}

export interface ConsensusStats {
  n_correct: number;
  accuracy: number;
  accuracy_pct: number;
  p_value: number;
}

export interface StudyStats {
  session_id: string;
  n_items: number;
  complete: boolean;
  finalized: boolean;
  raters: RaterStats[];
  consensus: ConsensusStats | null;
  consensus_notice: string | null;
}

export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

export interface StudyApi {
  nextItem(sessionId: string, raterId: string): Promise<NextItem>;
  submitResponse(sessionId: string, raterId: string, itemId: string, choice: Choice): Promise<void>;
  stats(sessionId: string, adminToken: string): Promise<StudyStats>;
}

async function parseError(resp: Response): Promise<ApiError> {
  let code = "error";
  let message = `HTTP ${resp.status}`;
  try {
    const body = await resp.json();
    if (body && typeof body === "object") {
      code = body.code ?? code;
      message = body.message ?? message;
    }
  } catch {
    // non-JSON error body; keep the generic message
  }
  return new ApiError(resp.status, code, message);
}

export class HttpStudyApi implements StudyApi {
  constructor(
    private baseUrl: string = "",
    private fetchFn: typeof fetch = fetch,
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    const resp = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (!resp.ok) {
      throw await parseError(resp);
    }
    return resp;
  }

  async nextItem(sessionId: string, raterId: string): Promise<NextItem> {
    const resp = await this.request(
      `/studies/${encodeURIComponent(sessionId)}/next?rater=${encodeURIComponent(raterId)}`,
    );
    return (await resp.json()) as NextItem;
  }

  async submitResponse(
    sessionId: string,
    raterId: string,
    itemId: string,
    choice: Choice,
  ): Promise<void> {
    await this.request(`/studies/${encodeURIComponent(sessionId)}/responses`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ rater_id: raterId, item_id: itemId, choice }),
    });
  }

  async stats(sessionId: string, adminToken: string): Promise<StudyStats> {
    const resp = await this.request(`/studies/${encodeURIComponent(sessionId)}/stats`, {
      headers: { "X-Admin-Token": adminToken },
    });
    return (await resp.json()) as StudyStats;
  }
}
