/**
 * Thin HTTP client for the studio service.
 *
 * Every method maps onto one documented endpoint and exchanges JSON
 * with base64-encoded png8 payloads wherever images travel. The fetch
 * implementation is injectable so tests can run against a stubbed
 * service and an app can pass a bound window.fetch.
 */

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export type JobState = 'queued' | 'running' | 'done' | 'failed';

/** Job envelope returned by job-creating posts and the jobs endpoint. */
export interface Job {
  id: string;
  kind: string;
  project: string;
  state: JobState;
  progress: number;
  seed: number | null;
  result: Record<string, unknown> | null;
  error?: string | null;
}

/** Structured error body the service attaches to non-2xx responses. */
export interface ServiceErrorBody {
  code: string;
  message: string;
  missing_prerequisite?: string;
}

/** Per-image artifact kinds the service can serve as png bytes. */
export type ArtifactKind = 'texture' | 'scores' | 'mask' | 'labels';

/** HTTP-level failure carrying the service's structured error body. */
export class ServiceError extends Error {
  readonly status: number;
  readonly code: string;
  readonly missingPrerequisite: string | null;

  constructor(status: number, body: ServiceErrorBody) {
    super(body.message);
    this.name = 'ServiceError';
    this.status = status;
    this.code = body.code;
    this.missingPrerequisite = body.missing_prerequisite ?? null;
  }

  /** True when the service refused because another job holds the stage lock. */
  get stageBusy(): boolean {
    return this.status === 409;
  }
}

/** One localized edit request: full label layer plus the region to redo. */
export interface EditSubmission {
  /** Image id whose stored trajectory the edit replays. */
  image: string;
  /** Indexed png8 of the complete brushed label layer. */
  labelsPng: Uint8Array;
  /** png8 mask; nonzero pixels are regenerated. */
  maskPng: Uint8Array;
  steps?: number;
  seed?: number;
}

export class StudioClient {
  private readonly baseUrl: string;
  private readonly fetchImpl: FetchLike;

  constructor(baseUrl: string, fetchImpl?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, '');
    this.fetchImpl = fetchImpl ?? ((url, init) => fetch(url, init));
  }

  /** POST an edit job; resolves to the queued job envelope. */
  async submitEdit(projectId: string, submission: EditSubmission): Promise<Job> {
    const body: Record<string, unknown> = {
      image: submission.image,
      labels_png_b64: bytesToBase64(submission.labelsPng),
      mask_png_b64: bytesToBase64(submission.maskPng),
    };
    if (submission.steps !== undefined) {
      body.steps = submission.steps;
    }
    if (submission.seed !== undefined) {
      body.seed = submission.seed;
    }
    return (await this.postJson(`/projects/${encodeURIComponent(projectId)}/edit`, body)) as Job;
  }

  /** GET the current state of one job. */
  async getJob(jobId: string): Promise<Job> {
    const response = await this.fetchImpl(`${this.baseUrl}/jobs/${encodeURIComponent(jobId)}`);
    if (!response.ok) {
      throw await errorFrom(response);
    }
    return (await response.json()) as Job;
  }

  /** GET one image artifact as raw png bytes. */
  async fetchArtifact(projectId: string, imageId: string, artifact: ArtifactKind): Promise<Uint8Array> {
    const path = `/projects/${encodeURIComponent(projectId)}/images/${encodeURIComponent(imageId)}/${artifact}`;
    const response = await this.fetchImpl(`${this.baseUrl}${path}`);
    if (!response.ok) {
      throw await errorFrom(response);
    }
    return new Uint8Array(await response.arrayBuffer());
  }

  private async postJson(path: string, body: Record<string, unknown>): Promise<unknown> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, {
      method: 'POST',
      headers: { 'content-type': 'application/json' },
      body: JSON.stringify(body),
    });
    if (!response.ok) {
      throw await errorFrom(response);
    }
    return response.json();
  }
}

async function errorFrom(response: Response): Promise<ServiceError> {
  let body: ServiceErrorBody;
  try {
    body = (await response.json()) as ServiceErrorBody;
  } catch {
    body = { code: 'unknown', message: `http ${response.status}` };
  }
  if (typeof body.code !== 'string' || typeof body.message !== 'string') {
    body = { code: 'unknown', message: `http ${response.status}` };
  }
  return new ServiceError(response.status, body);
}

/** Encode bytes as standard base64 without Node-only helpers. */
export function bytesToBase64(bytes: Uint8Array): string {
  let binary = '';
  const step = 8192;
  for (let i = 0; i < bytes.length; i += step) {
    binary += String.fromCharCode(...bytes.subarray(i, i + step));
  }
  return btoa(binary);
}

/** Decode standard base64 into bytes. */
export function base64ToBytes(text: string): Uint8Array {
  const binary = atob(text);
  const bytes = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i += 1) {
    bytes[i] = binary.charCodeAt(i);
  }
  return bytes;
}
