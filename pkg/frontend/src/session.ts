/**
 * Painting session for one image: label layer, round-brush strokes,
 * undo/redo, and the edit loop against the studio service.
 *
 * The session owns a full copy of the image's label layer plus the
 * baseline the service last accepted. Strokes mutate the layer and
 * push compact deltas for undo; submitting an edit uploads the layer
 * as an indexed png8 together with a mask of the pixels that differ
 * from the baseline. At most one edit is ever in flight: submissions
 * that arrive while a job is pending collapse into a single follow-up
 * carrying the latest canvas state.
 */

import { Job, ServiceError, StudioClient } from './client';
import { classPalette } from './palette';
import { decodePng8, encodePng8, PngFormatError } from './png8';

/** Round brush: radius in pixels and the class id it paints. */
export interface Brush {
  radius: number;
  classId: number;
}

/** One vertex of a stroke path, in pixel coordinates. */
export interface StrokePoint {
  x: number;
  y: number;
}

/** Compact record of one stroke: touched pixels with old and new ids. */
export interface StrokeDelta {
  /** Flat row-major pixel indices, sorted ascending. */
  indices: Uint32Array;
  before: Uint8Array;
  after: Uint8Array;
}

export type PreviewStatus = 'idle' | 'pending' | 'busy' | 'error';

/** Live view of the edit loop: current job, last result, last error. */
export interface PreviewState {
  status: PreviewStatus;
  jobId: string | null;
  /** Image id the last completed edit registered. */
  image: string | null;
  /** Raw png payload fetched for the last completed edit. */
  payload: Uint8Array | null;
  /** Decoded preview pixels (gray levels), row-major. */
  pixels: Uint8Array | null;
  width: number;
  height: number;
  /** Service error message when status is 'busy' or 'error'. */
  error: string | null;
}

export interface CanvasSessionOptions {
  projectId: string;
  /** Image whose stored trajectory edits replay. */
  imageId: string;
  width: number;
  height: number;
  /** Number of painted classes K; valid brush class ids are 0..K. */
  numClasses: number;
  client: StudioClient;
  /** Initial label layer, row-major; defaults to all zeros. */
  labels?: Uint8Array;
  brush?: Brush;
  /** Sampler steps to request per edit; omitted replays the stored length. */
  editSteps?: number;
  /** Seed forwarded with every edit; omitted lets the service pick. */
  editSeed?: number;
  /** First poll delay in milliseconds. */
  pollInitialMs?: number;
  /** Upper bound the poll delay grows toward. */
  pollMaxMs?: number;
  /** Multiplier applied to the delay after each poll. */
  pollGrowth?: number;
  /** Sleep hook, injectable for tests. */
  sleep?: (ms: number) => Promise<void>;
}

const EMPTY_DELTA: StrokeDelta = {
  indices: new Uint32Array(0),
  before: new Uint8Array(0),
  after: new Uint8Array(0),
};

export class CanvasSession {
  readonly projectId: string;
  readonly imageId: string;
  readonly width: number;
  readonly height: number;
  readonly numClasses: number;

  private readonly client: StudioClient;
  private readonly labels: Uint8Array;
  private baseline: Uint8Array;
  private brushState: Brush;
  private readonly undoStack: StrokeDelta[] = [];
  private readonly redoStack: StrokeDelta[] = [];
  private readonly previewState: PreviewState = {
    status: 'idle',
    jobId: null,
    image: null,
    payload: null,
    pixels: null,
    width: 0,
    height: 0,
    error: null,
  };

  private readonly editSteps?: number;
  private readonly editSeed?: number;
  private readonly pollInitialMs: number;
  private readonly pollMaxMs: number;
  private readonly pollGrowth: number;
  private readonly sleep: (ms: number) => Promise<void>;

  private inFlight = false;
  private followUpWanted = false;
  /** Layer bytes uploaded with the in-flight edit; becomes the baseline on success. */
  private pendingSnapshot: Uint8Array | null = null;
  private pollLoop: Promise<PreviewState> | null = null;

  constructor(options: CanvasSessionOptions) {
    const { width, height, numClasses } = options;
    if (!Number.isInteger(width) || !Number.isInteger(height) || width <= 0 || height <= 0) {
      throw new RangeError(`canvas size must be positive integers, got ${width}x${height}`);
    }
    if (!Number.isInteger(numClasses) || numClasses < 0 || numClasses > 255) {
      throw new RangeError(`class count must be an integer in [0, 255], got ${numClasses}`);
    }
    if (options.labels !== undefined && options.labels.length !== width * height) {
      throw new RangeError(`expected ${width * height} label bytes, got ${options.labels.length}`);
    }
    this.projectId = options.projectId;
    this.imageId = options.imageId;
    this.width = width;
    this.height = height;
    this.numClasses = numClasses;
    this.client = options.client;
    this.labels = options.labels !== undefined ? options.labels.slice() : new Uint8Array(width * height);
    this.baseline = this.labels.slice();
    this.brushState = options.brush ?? { radius: 1, classId: Math.min(1, numClasses) };
    validateBrush(this.brushState, numClasses);
    this.editSteps = options.editSteps;
    this.editSeed = options.editSeed;
    this.pollInitialMs = options.pollInitialMs ?? 50;
    this.pollMaxMs = options.pollMaxMs ?? 2000;
    this.pollGrowth = options.pollGrowth ?? 2;
    this.sleep = options.sleep ?? ((ms) => new Promise((resolve) => setTimeout(resolve, ms)));
  }

  get brush(): Brush {
    return { ...this.brushState };
  }

  setBrush(brush: Brush): void {
    validateBrush(brush, this.numClasses);
    this.brushState = { ...brush };
  }

  /** Copy of the current label layer, row-major. */
  snapshotLabels(): Uint8Array {
    return this.labels.slice();
  }

  labelAt(x: number, y: number): number {
    return this.labels[y * this.width + x];
  }

  /** Live view of the edit loop state. */
  get preview(): Readonly<PreviewState> {
    return this.previewState;
  }

  get canUndo(): boolean {
    return this.undoStack.length > 0;
  }

  get canRedo(): boolean {
    return this.redoStack.length > 0;
  }

  /** Number of pixels that differ from the layer the service last accepted. */
  dirtyPixelCount(): number {
    let count = 0;
    for (let i = 0; i < this.labels.length; i += 1) {
      if (this.labels[i] !== this.baseline[i]) {
        count += 1;
      }
    }
    return count;
  }

  /**
   * Rasterize a round-brush stroke along a path into the label layer.
   *
   * Paints every pixel whose center lies within the brush radius of
   * the polyline. Pixels already holding the brush class are left out
   * of the delta. An empty path, or a stroke that changes nothing,
   * yields an empty delta and no undo entry.
   */
  paintStroke(path: StrokePoint[], brush?: Brush): StrokeDelta {
    const effective = brush ?? this.brushState;
    validateBrush(effective, this.numClasses);
    if (path.length === 0) {
      return EMPTY_DELTA;
    }

    const radius = effective.radius;
    const radiusSquared = radius * radius;
    const touched = new Map<number, number>();
    const segments = Math.max(path.length - 1, 1);
    for (let s = 0; s < segments; s += 1) {
      const a = path[s];
      const b = path[Math.min(s + 1, path.length - 1)];
      const x0 = Math.max(0, Math.floor(Math.min(a.x, b.x) - radius));
      const x1 = Math.min(this.width - 1, Math.ceil(Math.max(a.x, b.x) + radius));
      const y0 = Math.max(0, Math.floor(Math.min(a.y, b.y) - radius));
      const y1 = Math.min(this.height - 1, Math.ceil(Math.max(a.y, b.y) + radius));
      for (let y = y0; y <= y1; y += 1) {
        for (let x = x0; x <= x1; x += 1) {
          if (distanceSquaredToSegment(x, y, a.x, a.y, b.x, b.y) > radiusSquared) {
            continue;
          }
          const index = y * this.width + x;
          if (this.labels[index] !== effective.classId) {
            if (!touched.has(index)) {
              touched.set(index, this.labels[index]);
            }
            this.labels[index] = effective.classId;
          }
        }
      }
    }

    if (touched.size === 0) {
      return EMPTY_DELTA;
    }
    const indices = Uint32Array.from([...touched.keys()].sort((m, n) => m - n));
    const before = new Uint8Array(indices.length);
    const after = new Uint8Array(indices.length);
    after.fill(effective.classId);
    for (let i = 0; i < indices.length; i += 1) {
      before[i] = touched.get(indices[i])!;
    }
    const delta: StrokeDelta = { indices, before, after };
    this.undoStack.push(delta);
    this.redoStack.length = 0;
    return delta;
  }

  /** Revert the most recent stroke; returns false when nothing is left. */
  undo(): boolean {
    const delta = this.undoStack.pop();
    if (delta === undefined) {
      return false;
    }
    for (let i = 0; i < delta.indices.length; i += 1) {
      this.labels[delta.indices[i]] = delta.before[i];
    }
    this.redoStack.push(delta);
    return true;
  }

  /** Reapply the most recently undone stroke. */
  redo(): boolean {
    const delta = this.redoStack.pop();
    if (delta === undefined) {
      return false;
    }
    for (let i = 0; i < delta.indices.length; i += 1) {
      this.labels[delta.indices[i]] = delta.after[i];
    }
    this.undoStack.push(delta);
    return true;
  }

  /**
   * Submit the brushed layer for a localized regeneration.
   *
   * Uploads the full label layer as an indexed png8 plus a grayscale
   * mask marking pixels that differ from the last accepted layer. When
   * an edit is already in flight the call registers a follow-up
   * instead and resolves to null; pollPreview fires the follow-up with
   * the then-current layer once the running job settles. A 409 from
   * the service surfaces as a 'busy' preview status and leaves the
   * session untouched.
   */
  async submitEdit(): Promise<Job | null> {
    if (this.inFlight) {
      this.followUpWanted = true;
      return null;
    }
    const mask = this.dirtyMask();
    if (mask === null) {
      throw new Error('nothing to submit: no pixels differ from the last accepted layer');
    }

    this.inFlight = true;
    const snapshot = this.labels.slice();
    this.previewState.status = 'pending';
    this.previewState.jobId = null;
    this.previewState.error = null;
    try {
      const labelsPng = await encodePng8({
        width: this.width,
        height: this.height,
        pixels: snapshot,
        palette: classPalette(this.numClasses),
        numClasses: this.numClasses,
      });
      const maskPng = await encodePng8({ width: this.width, height: this.height, pixels: mask });
      const job = await this.client.submitEdit(this.projectId, {
        image: this.imageId,
        labelsPng,
        maskPng,
        ...(this.editSteps !== undefined ? { steps: this.editSteps } : {}),
        ...(this.editSeed !== undefined ? { seed: this.editSeed } : {}),
      });
      this.previewState.jobId = job.id;
      this.pendingSnapshot = snapshot;
      return job;
    } catch (error) {
      this.inFlight = false;
      if (error instanceof ServiceError) {
        this.previewState.status = error.stageBusy ? 'busy' : 'error';
        this.previewState.error = error.message;
        return null;
      }
      this.previewState.status = 'error';
      this.previewState.error = error instanceof Error ? error.message : String(error);
      throw error;
    }
  }

  /**
   * Drive the in-flight edit to completion and return the preview.
   *
   * Polls the job with growing delays, fetches the result texture when
   * the job lands, then fires at most one coalesced follow-up covering
   * every stroke that arrived in the meantime. Resolves once no edit
   * remains in flight; concurrent callers share one loop.
   */
  pollPreview(): Promise<PreviewState> {
    if (this.pollLoop === null) {
      this.pollLoop = this.drainJobs().finally(() => {
        this.pollLoop = null;
      });
    }
    return this.pollLoop;
  }

  private async drainJobs(): Promise<PreviewState> {
    while (this.inFlight && this.previewState.jobId !== null) {
      await this.pollCurrentJob();
      this.inFlight = false;
      if (this.followUpWanted) {
        this.followUpWanted = false;
        if (this.hasDirtyPixels()) {
          await this.submitEdit();
        }
      }
    }
    return this.previewState;
  }

  private async pollCurrentJob(): Promise<void> {
    const jobId = this.previewState.jobId!;
    let delay = this.pollInitialMs;
    for (;;) {
      const job = await this.client.getJob(jobId);
      if (job.state === 'done') {
        await this.acceptResult(job);
        return;
      }
      if (job.state === 'failed') {
        this.previewState.status = 'error';
        this.previewState.error = job.error ?? 'edit job failed';
        this.pendingSnapshot = null;
        return;
      }
      await this.sleep(delay);
      delay = Math.min(delay * this.pollGrowth, this.pollMaxMs);
    }
  }

  private async acceptResult(job: Job): Promise<void> {
    const image = job.result !== null && typeof job.result.image === 'string' ? job.result.image : null;
    if (image === null) {
      this.previewState.status = 'error';
      this.previewState.error = 'edit job finished without a result image';
      this.pendingSnapshot = null;
      return;
    }
    const payload = await this.client.fetchArtifact(this.projectId, image, 'texture');
    const decoded = await decodePng8(payload);
    this.previewState.status = 'idle';
    this.previewState.image = image;
    this.previewState.payload = payload;
    this.previewState.pixels = decoded.pixels;
    this.previewState.width = decoded.width;
    this.previewState.height = decoded.height;
    this.previewState.error = null;
    if (this.pendingSnapshot !== null) {
      this.baseline = this.pendingSnapshot;
      this.pendingSnapshot = null;
    }
  }

  private hasDirtyPixels(): boolean {
    for (let i = 0; i < this.labels.length; i += 1) {
      if (this.labels[i] !== this.baseline[i]) {
        return true;
      }
    }
    return false;
  }

  /** 0/255 mask of pixels differing from the baseline; null when clean. */
  private dirtyMask(): Uint8Array | null {
    const mask = new Uint8Array(this.labels.length);
    let any = false;
    for (let i = 0; i < this.labels.length; i += 1) {
      if (this.labels[i] !== this.baseline[i]) {
        mask[i] = 255;
        any = true;
      }
    }
    return any ? mask : null;
  }
}

/**
 * Build a session from the image's stored label artifact.
 *
 * Fetches the indexed label png, decodes it, and sizes the session
 * from the decoded layer. The class count comes from the png's
 * num_classes text chunk, topped up by the largest label present.
 */
export async function loadCanvasSession(
  options: Omit<CanvasSessionOptions, 'width' | 'height' | 'numClasses' | 'labels'>,
): Promise<CanvasSession> {
  const payload = await options.client.fetchArtifact(options.projectId, options.imageId, 'labels');
  const decoded = await decodePng8(payload);
  if (decoded.palette === undefined) {
    throw new PngFormatError('labels artifact must be an indexed png');
  }
  let numClasses = decoded.numClasses ?? 0;
  for (const value of decoded.pixels) {
    if (value > numClasses) {
      numClasses = value;
    }
  }
  return new CanvasSession({
    ...options,
    width: decoded.width,
    height: decoded.height,
    numClasses,
    labels: decoded.pixels,
  });
}

function validateBrush(brush: Brush, numClasses: number): void {
  if (!Number.isInteger(brush.classId) || brush.classId < 0 || brush.classId > numClasses) {
    throw new RangeError(`brush class id must be an integer in [0, ${numClasses}], got ${brush.classId}`);
  }
  if (!Number.isFinite(brush.radius) || brush.radius < 0) {
    throw new RangeError(`brush radius must be a non-negative number, got ${brush.radius}`);
  }
}

function distanceSquaredToSegment(
  px: number,
  py: number,
  ax: number,
  ay: number,
  bx: number,
  by: number,
): number {
  const dx = bx - ax;
  const dy = by - ay;
  const lengthSquared = dx * dx + dy * dy;
  let t = 0;
  if (lengthSquared > 0) {
    t = ((px - ax) * dx + (py - ay) * dy) / lengthSquared;
    t = Math.max(0, Math.min(1, t));
  }
  const cx = ax + t * dx;
  const cy = ay + t * dy;
  return (px - cx) * (px - cx) + (py - cy) * (py - cy);
}
