/**
 * Thin typed client over the verification service HTTP API.
 *
 * Endpoints (all JSON except the context image):
 *   GET  /api/queues                      -> QueueStats[]
 *   GET  /api/queues/{id}/next?reviewer=  -> NextResponse
 *   POST /api/decisions                   -> DecisionAck
 *   GET  /api/queues/{id}/stats           -> QueueStats
 *   GET  /api/patches/context.png?...     -> 2016x2016 PNG
 */

export interface QueueStats {
  queue_id: string;
  pending: number;
  accepted: number;
  rejected: number;
  acceptance_rate: number | null;
  decisions_logged: number;
  reviewers: Record<string, number>;
}

export interface Candidate {
  queue_id: string;
  slide_id: string;
  x: number;
  y: number;
  size: number;
  level: string;
  score: number;
  status: string;
  context_url: string;
}

export interface NextResponse {
  queue_id: string;
  drained: boolean;
  candidate: Candidate | null;
  lease_ttl?: number;
}

export type Verdict = 'accept' | 'reject';

export interface DecisionBody {
  slide_id: string;
  x: number;
  y: number;
  size: number;
  level: string;
  class_label: string;
  verdict: Verdict;
  reviewer: string;
}

export interface DecisionAck {
  seq: number;
  verdict: string;
}

/** Non-2xx response; `status` distinguishes it from network failures. */
export class ApiError extends Error {
  constructor(public status: number, public detail: string) {
    super(`HTTP ${status}: ${detail}`);
    this.name = 'ApiError';
  }
}

export class ApiClient {
  constructor(
    private baseUrl: string = '',
    private fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private async request<T>(path: string, init?: RequestInit): Promise<T> {
    const res = await this.fetchFn(this.baseUrl + path, init);
    if (!res.ok) {
      let detail = res.statusText;
      try {
        const body = await res.json();
        if (typeof body.detail === 'string') detail = body.detail;
        else if (body.detail !== undefined) detail = JSON.stringify(body.detail);
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  listQueues(): Promise<QueueStats[]> {
    return this.request<QueueStats[]>('/api/queues');
  }

  nextCandidate(queueId: string, reviewer: string): Promise<NextResponse> {
    const path = `/api/queues/${encodeURIComponent(queueId)}/next` +
      `?reviewer=${encodeURIComponent(reviewer)}`;
    return this.request<NextResponse>(path);
  }

  postDecision(body: DecisionBody): Promise<DecisionAck> {
    return this.request<DecisionAck>('/api/decisions', {
      method: 'POST',
      headers: { 'Content-Type': 'application/json' },
      body: JSON.stringify(body),
    });
  }

  queueStats(queueId: string): Promise<QueueStats> {
    return this.request<QueueStats>(
      `/api/queues/${encodeURIComponent(queueId)}/stats`,
    );
  }

  /** Absolute URL for a candidate's pre-rendered context image. */
  contextUrl(candidate: Candidate): string {
    return this.baseUrl + candidate.context_url;
  }
}

export function decisionBody(
  candidate: Candidate,
  verdict: Verdict,
  reviewer: string,
): DecisionBody {
  return {
    slide_id: candidate.slide_id,
    x: candidate.x,
    y: candidate.y,
    size: candidate.size,
    level: candidate.level,
    class_label: candidate.queue_id,
    verdict,
    reviewer,
  };
}
