/**
 * REST client for the annotation service: creating runs and sessions,
 * submitting marks, committing, and driving the background retrain job.
 * `fetch` is injected so tests can run without a network.
 */

import {
  PROTOCOL_V,
  type CommitResult,
  type EpisodeRequest,
  type RunCreated,
  type SessionCreated,
  type SessionStatus,
  type TrainJobStatus,
} from "./protocol.js";

export interface ResponseLike {
  status: number;
  json(): Promise<unknown>;
}

export type FetchLike = (
  url: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<ResponseLike>;

export class ServiceError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = "ServiceError";
  }
}

export type TrainTriggerResult =
  | { ok: true; jobId: string }
  | { ok: false; busy: true }
  | { ok: false; busy: false; message: string };

async function errorDetail(res: ResponseLike): Promise<string> {
  try {
    const body = (await res.json()) as { detail?: unknown };
    if (typeof body?.detail === "string") return body.detail;
  } catch {
    // fall through to the generic message
  }
  return `service returned HTTP ${res.status}`;
}

export class ServiceClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike,
  ) {}

  /** ws:// or wss:// URL for a session's frame stream. */
  streamUrl(sessionId: string): string {
    const ws = this.baseUrl.replace(/^http/, "ws");
    return `${ws}/v1/session/${sessionId}/stream`;
  }

  async createRun(
    episode: EpisodeRequest,
    policy: "net" | "online" = "net",
    stride?: number,
  ): Promise<RunCreated> {
    return (await this.post("/v1/runs", {
      v: PROTOCOL_V,
      episode,
      policy,
      ...(stride !== undefined ? { stride } : {}),
    })) as RunCreated;
  }

  async createSession(
    runId: string,
    episodeId: string,
    speed: number,
  ): Promise<SessionCreated> {
    return (await this.post("/v1/session", {
      v: PROTOCOL_V,
      run_id: runId,
      episode_id: episodeId,
      speed,
    })) as SessionCreated;
  }

  async getSession(sessionId: string): Promise<SessionStatus> {
    return (await this.get(`/v1/session/${sessionId}`)) as SessionStatus;
  }

  async submitMarks(
    sessionId: string,
    marks: Array<[number, number]>,
  ): Promise<Array<[number, number]>> {
    const body = (await this.post(`/v1/session/${sessionId}/marks`, {
      v: PROTOCOL_V,
      marks,
    })) as { marks: Array<[number, number]> };
    return body.marks;
  }

  async commit(sessionId: string): Promise<CommitResult> {
    return (await this.post(`/v1/session/${sessionId}/commit`, {
      v: PROTOCOL_V,
    })) as CommitResult;
  }

  /**
   * Start a retrain job. A 409 means one is already running — reported as
   * `busy` rather than an exception so the UI can show a notice and move on.
   */
  async triggerTrain(): Promise<TrainTriggerResult> {
    const res = await this.fetchImpl(`${this.baseUrl}/v1/train`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ v: PROTOCOL_V }),
    });
    if (res.status === 409) return { ok: false, busy: true };
    if (res.status >= 400) {
      return { ok: false, busy: false, message: await errorDetail(res) };
    }
    const body = (await res.json()) as { job_id: string };
    return { ok: true, jobId: body.job_id };
  }

  async trainStatus(jobId: string): Promise<TrainJobStatus> {
    return (await this.get(`/v1/train/${jobId}`)) as TrainJobStatus;
  }

  /**
   * Poll a job until it reaches `done` or `failed`, invoking `onUpdate` for
   * every status seen (including the terminal one). Resolves with the final
   * status. The scheduler is injectable for tests.
   */
  async pollTrain(
    jobId: string,
    onUpdate: (status: TrainJobStatus) => void,
    intervalMs = 500,
    schedule: (fn: () => void, ms: number) => unknown = (fn, ms) =>
      setTimeout(fn, ms),
  ): Promise<TrainJobStatus> {
    for (;;) {
      const status = await this.trainStatus(jobId);
      onUpdate(status);
      if (status.status === "done" || status.status === "failed") {
        return status;
      }
      await new Promise<void>((resolve) => schedule(resolve, intervalMs));
    }
  }

  private async get(path: string): Promise<unknown> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`);
    if (res.status >= 400) {
      throw new ServiceError(res.status, await errorDetail(res));
    }
    return res.json();
  }

  private async post(path: string, body: unknown): Promise<unknown> {
    const res = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (res.status >= 400) {
      throw new ServiceError(res.status, await errorDetail(res));
    }
    return res.json();
  }
}
