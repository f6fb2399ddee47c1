/**
 * Byte-for-byte payloads captured from the studio service, used to
 * check that the codec and session agree with what the service writes.
 */

/** Indexed 6x5 label png with five classes and a num_classes text chunk. */
export const SERVICE_LABELS_PNG_B64 =
  'iVBORw0KGgoAAAANSUhEUgAAAAYAAAAFCAMAAABRhm3UAAAADXRFWHRudW1fY2xhc3NlcwA1U1e+WQAAAwBQTFRFAAAA9UVFRXj1q/VF9UXfRfXXAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAAUkxwAAAAACJJREFUeJwNxIENADAMwrCEwf8vr5Jl9nqY6Bgp5TZSl7wPBgUAUJ/ruUMAAAAASUVORK5CYII=';

/** Row-major pixel classes stored in SERVICE_LABELS_PNG_B64. */
export const SERVICE_LABELS_PIXELS = [
  5, 3, 4, 5, 3, 4, 5, 1, 0, 1, 1, 5, 5, 0, 2, 4, 0, 4, 0, 2, 4, 1, 2, 1, 4, 1, 5, 2, 2, 3,
];

export const SERVICE_LABELS_WIDTH = 6;
export const SERVICE_LABELS_HEIGHT = 5;
export const SERVICE_LABELS_NUM_CLASSES = 5;

/** Grayscale 7x4 texture png as the service encodes float grids. */
export const SERVICE_GRAY_PNG_B64 =
  'iVBORw0KGgoAAAANSUhEUgAAAAcAAAAECAAAAABnrXqhAAAAK0lEQVR4nAEgAN//AZX49XzQ/OkAn1f8dzfXKQQ8/SHuZjIbAIP3d87q0qAiTxFvajXrlgAAAABJRU5ErkJggg==';

/** Row-major gray levels stored in SERVICE_GRAY_PNG_B64. */
export const SERVICE_GRAY_PIXELS = [
  149, 141, 130, 254, 206, 202, 179, 159, 87, 252, 119, 55, 215, 41, 219, 156, 29, 11, 113, 9,
  36, 131, 247, 119, 206, 234, 210, 160,
];

export const SERVICE_GRAY_WIDTH = 7;
export const SERVICE_GRAY_HEIGHT = 4;
