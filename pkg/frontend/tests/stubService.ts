/**
 * In-memory stand-in for the studio service's edit loop.
 *
 * Implements just the routes the painting client touches: POST
 * /projects/{id}/edit, GET /jobs/{id}, and artifact GETs. Jobs advance
 * one step per poll so tests control how long an edit stays in flight,
 * and every edit post that arrives while an earlier job is unsettled
 * is counted as an overlap before being refused the way the real
 * service would.
 */

import { FetchLike, Job } from '../src/client';

interface StubJob {
  envelope: Job;
  polls: number;
  resultImage: string;
}

export interface StubServiceOptions {
  /** getJob calls before a job settles (default 2). */
  pollsUntilDone?: number;
  /** This many leading edit posts are refused with 409 stage_busy. */
  busyResponses?: number;
  /** Terminal state jobs reach (default 'done'). */
  outcome?: 'done' | 'failed';
}

export class StubService {
  /** Parsed bodies of every accepted edit post, in arrival order. */
  readonly editBodies: Array<Record<string, unknown>> = [];
  /** Artifact GETs received, in arrival order. */
  readonly artifactRequests: Array<{ image: string; artifact: string }> = [];
  /** Edit posts that arrived while an earlier job was still unsettled. */
  overlappingEdits = 0;
  /** Total edit posts received, including refused ones. */
  editPosts = 0;
  /** png bytes served for texture artifact GETs. */
  texturePayload: Uint8Array | null = null;
  /** png bytes served for labels artifact GETs. */
  labelsPayload: Uint8Array | null = null;

  private readonly pollsUntilDone: number;
  private readonly outcome: 'done' | 'failed';
  private busyRemaining: number;
  private readonly jobs = new Map<string, StubJob>();
  private openJob: StubJob | null = null;
  private jobCount = 0;

  constructor(options: StubServiceOptions = {}) {
    this.pollsUntilDone = options.pollsUntilDone ?? 2;
    this.busyRemaining = options.busyResponses ?? 0;
    this.outcome = options.outcome ?? 'done';
  }

  readonly fetch: FetchLike = async (url, init) => {
    const { pathname } = new URL(url);
    const method = init?.method ?? 'GET';
    let match: RegExpExecArray | null;
    if (method === 'POST' && (match = /^\/projects\/([^/]+)\/edit$/.exec(pathname)) !== null) {
      const body = typeof init?.body === 'string' ? (JSON.parse(init.body) as Record<string, unknown>) : {};
      return this.handleEdit(match[1], body);
    }
    if (method === 'GET' && (match = /^\/jobs\/([^/]+)$/.exec(pathname)) !== null) {
      return this.handleJob(match[1]);
    }
    if (method === 'GET' && (match = /^\/projects\/[^/]+\/images\/([^/]+)\/([^/]+)$/.exec(pathname)) !== null) {
      return this.handleArtifact(match[1], match[2]);
    }
    return jsonResponse(404, { code: 'unknown_route', message: `no route ${method} ${pathname}` });
  };

  private handleEdit(project: string, body: Record<string, unknown>): Response {
    this.editPosts += 1;
    if (this.openJob !== null && !isTerminal(this.openJob.envelope.state)) {
      this.overlappingEdits += 1;
      return jsonResponse(409, { code: 'stage_busy', message: 'stage edit is busy' });
    }
    if (this.busyRemaining > 0) {
      this.busyRemaining -= 1;
      return jsonResponse(409, { code: 'stage_busy', message: 'stage synth is busy' });
    }
    this.editBodies.push(body);
    const serial = String(this.jobCount).padStart(4, '0');
    this.jobCount += 1;
    const job: StubJob = {
      envelope: {
        id: `job_${serial}`,
        kind: 'edit',
        project,
        state: 'queued',
        progress: 0,
        seed: 7,
        result: null,
      },
      polls: 0,
      resultImage: `edit_${serial}`,
    };
    this.jobs.set(job.envelope.id, job);
    this.openJob = job;
    return jsonResponse(200, job.envelope);
  }

  private handleJob(jobId: string): Response {
    const job = this.jobs.get(jobId);
    if (job === undefined) {
      return jsonResponse(404, { code: 'unknown_job', message: `no job '${jobId}'` });
    }
    job.polls += 1;
    if (job.polls >= this.pollsUntilDone) {
      if (this.outcome === 'failed') {
        job.envelope.state = 'failed';
        job.envelope.error = 'denoiser rejected the masked region';
      } else {
        job.envelope.state = 'done';
        job.envelope.progress = 1;
        job.envelope.result = { image: job.resultImage, source: 'tex_0' };
      }
    } else {
      job.envelope.state = 'running';
      job.envelope.progress = job.polls / this.pollsUntilDone;
    }
    return jsonResponse(200, job.envelope);
  }

  private handleArtifact(image: string, artifact: string): Response {
    this.artifactRequests.push({ image, artifact });
    if (artifact === 'labels' && this.labelsPayload !== null) {
      return pngResponse(this.labelsPayload);
    }
    if (artifact === 'texture' && this.texturePayload !== null) {
      return pngResponse(this.texturePayload);
    }
    return jsonResponse(404, { code: 'unknown_image', message: `no image '${image}'` });
  }
}

function isTerminal(state: Job['state']): boolean {
  return state === 'done' || state === 'failed';
}

function jsonResponse(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { 'content-type': 'application/json' },
  });
}

function pngResponse(bytes: Uint8Array): Response {
  return new Response(bytes.slice(), {
    status: 200,
    headers: { 'content-type': 'image/png' },
  });
}
