/** Canvas label painting client for the texture studio service. */

export { classColor, classPalette } from './palette';
export { decodePng8, encodePng8, PngFormatError } from './png8';
export type { Png8Image } from './png8';
export { base64ToBytes, bytesToBase64, ServiceError, StudioClient } from './client';
export type {
  ArtifactKind,
  EditSubmission,
  FetchLike,
  Job,
  JobState,
  ServiceErrorBody,
} from './client';
export { CanvasSession, loadCanvasSession } from './session';
export type {
  Brush,
  CanvasSessionOptions,
  PreviewState,
  PreviewStatus,
  StrokeDelta,
  StrokePoint,
} from './session';
