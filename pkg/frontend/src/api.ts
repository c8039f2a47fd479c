// Typed client for the elicitation service's /v1 JSON API. Every shape here
// mirrors a server response verbatim; nothing is recomputed client-side.

export type Marginal = {
  u: number;
  v: number;
  p: [number, number, number, number];
};

export type HistoryEntry = {
  step: number;
  u: number;
  v: number;
  feature: number;
};

export type SessionStatus = "awaiting_answer" | "idle" | "exhausted";

export type SessionSnapshot = {
  session_id: string;
  checkpoint_id: string;
  dataset_id: string;
  status: SessionStatus;
  n: number;
  pi: number;
  strategy: string;
  sample_count: number;
  pending: [number, number] | null;
  marginals: Marginal[];
  history: HistoryEntry[];
  expected_bic: number;
  expected_shd: number | null;
  ess: number;
  ess_warning: boolean;
  created_at: string;
  updated_at: string;
};

export type WhatifResult = {
  session_id: string;
  relation: [number, number];
  feature: number;
  marginals: Marginal[];
  expected_bic: number;
  expected_shd: number | null;
  ess: number;
};

export type TraceStep = {
  step: number;
  query: [number, number] | null;
  answer: number | null;
  expected_bic: number;
  expected_shd: number | null;
  ess: number;
};

export type Trace = {
  session_id: string;
  status: SessionStatus;
  steps: TraceStep[];
};

export type JobStatus =
  | { status: "queued" }
  | { status: "running"; epoch: number; mean_loss: number | null }
  | { status: "done"; checkpoint_id: string }
  | { status: "failed"; reason: string };

export type CheckpointInfo = {
  checkpoint_id: string;
  dataset_id: string;
  reward_spec: { mu: number; sigma: number; temperature: number };
  epochs_run: number;
  stopped_early: boolean;
};

export type DatasetInfo = {
  dataset_id: string;
  columns: string[];
  rows: number;
};

export type OpenSessionRequest = {
  checkpoint_id: string;
  sample_count?: number;
  sample_seed?: number;
  pi?: number;
  strategy?: string;
  seed?: number;
  truth?: number[][] | null;
};

export class ApiError extends Error {
  status: number;
  code: string;
  detail: unknown;

  constructor(status: number, code: string, message: string, detail?: unknown) {
    super(message);
    this.status = status;
    this.code = code;
    this.detail = detail;
  }
}

async function request<T>(url: string, init?: RequestInit): Promise<T> {
  const res = await fetch(url, init);
  if (!res.ok) {
    let code = "http_error";
    let message = `request failed with status ${res.status}`;
    let detail: unknown;
    try {
      const body = await res.json();
      if (body && typeof body.code === "string") {
        code = body.code;
        message = body.message ?? message;
        detail = body.detail;
      }
    } catch {
      // non-JSON error body; keep the generic message
    }
    throw new ApiError(res.status, code, message, detail);
  }
  return (await res.json()) as T;
}

function post<T>(url: string, payload: unknown): Promise<T> {
  return request<T>(url, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify(payload),
  });
}

export class Client {
  base: string;

  constructor(base: string) {
    // normalized so callers can pass either http://host:port or .../v1
    this.base = base.replace(/\/+$/, "");
    if (!this.base.endsWith("/v1")) this.base += "/v1";
  }

  health(): Promise<{ status: string }> {
    return request(`${this.base}/health`);
  }

  uploadDataset(csv: string): Promise<DatasetInfo> {
    return request(`${this.base}/datasets`, {
      method: "POST",
      headers: { "Content-Type": "text/csv" },
      body: csv,
    });
  }

  startTraining(datasetId: string, config: object = {}): Promise<{ job_id: string }> {
    return post(`${this.base}/train`, { dataset_id: datasetId, config });
  }

  jobStatus(jobId: string): Promise<JobStatus> {
    return request(`${this.base}/jobs/${jobId}`);
  }

  checkpoints(): Promise<{ checkpoints: CheckpointInfo[] }> {
    return request(`${this.base}/checkpoints`);
  }

  openSession(req: OpenSessionRequest): Promise<SessionSnapshot> {
    return post(`${this.base}/sessions`, req);
  }

  getSession(sessionId: string): Promise<SessionSnapshot> {
    return request(`${this.base}/sessions/${sessionId}`);
  }

  answer(sessionId: string, feature: number): Promise<SessionSnapshot> {
    return post(`${this.base}/sessions/${sessionId}/answer`, { feature });
  }

  whatif(
    sessionId: string,
    relation: [number, number],
    feature: number,
  ): Promise<WhatifResult> {
    return post(`${this.base}/sessions/${sessionId}/whatif`, { relation, feature });
  }

  trace(sessionId: string): Promise<Trace> {
    return request(`${this.base}/sessions/${sessionId}/trace`);
  }
}
