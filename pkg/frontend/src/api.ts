/** Thin typed client for the review HTTP API; the only backend coupling. */

import type { DialogueDetail, PendingSummary, Verdict, VerdictResponse } from "./types.js";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    public readonly code: string,
    message: string,
  ) {
    super(message);
    this.name = "ApiError";
  }
}

async function asApiError(response: Response): Promise<ApiError> {
  let code = "http_error";
  let message = `HTTP ${response.status}`;
  try {
    const body = (await response.json()) as { code?: string; message?: string };
    if (body.code) code = body.code;
    if (body.message) message = body.message;
  } catch {
    // non-JSON error body; keep the generic message
  }
  return new ApiError(response.status, code, message);
}

export class ReviewApi {
  constructor(private readonly baseUrl: string = "") {}

  private async getJson<T>(path: string): Promise<T> {
    const response = await fetch(`${this.baseUrl}${path}`);
    if (!response.ok) throw await asApiError(response);
    return (await response.json()) as T;
  }

  fetchPending(): Promise<PendingSummary[]> {
    return this.getJson<PendingSummary[]>("/api/review/pending");
  }

  fetchDialogue(id: string): Promise<DialogueDetail> {
    return this.getJson<DialogueDetail>(`/api/dialogue/${encodeURIComponent(id)}`);
  }

  audioUrl(id: string): string {
    return `${this.baseUrl}/api/audio/${encodeURIComponent(id)}`;
  }

  async submitVerdict(
    id: string,
    verdict: Verdict,
    reviewer: string,
    reason?: string,
  ): Promise<VerdictResponse> {
    const response = await fetch(
      `${this.baseUrl}/api/review/${encodeURIComponent(id)}/verdict`,
      {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify({ verdict, reviewer, ...(reason ? { reason } : {}) }),
      },
    );
    if (!response.ok) throw await asApiError(response);
    return (await response.json()) as VerdictResponse;
  }
}
