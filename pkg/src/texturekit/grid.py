"""Core containers, deterministic RNG, Lanczos filtering, resampling, and I/O.

Everything downstream works on ``Grid`` (float samples, H x W x C, row-major,
channel-interleaved) and ``LabelMap`` (small integer class ids, H x W, where
0 means "no feature class").  Both are immutable after construction so stage
outputs can be cached and shared without defensive copies.

Raster I/O speaks two formats:

* ``png8``: 8-bit PNG for 1/3/4-channel grids; values are clamped to [0, 1]
  and quantized to 255 levels.  Label maps use indexed (palette) png8.
* ``tensor_raw``: "TXF1" container -- magic ``TXF1``, three little-endian
  uint32 dims (H, W, C), then H*W*C little-endian float32 samples.  Lossless
  for float32 data; float64 grids must be cast explicitly before writing.

The low-pass filter is a separable Lanczos-windowed sinc with an explicit
cutoff in cycles/sample (Nyquist = 0.5).  Boundary handling is mirror
reflection by default, with circular ("wrap") available because seamless
synthesis filters periodic noise fields.
"""

from __future__ import annotations

import hashlib
import io
import struct

import numpy as np
from PIL import Image
from PIL.PngImagePlugin import PngInfo
from scipy import ndimage

from .errors import GridFormatError

TXF1_MAGIC = b"TXF1"
# Guard against hostile headers: 2^28 float32 elements is a 1 GiB tensor.
_MAX_ELEMENTS = 1 << 28

_FLOAT_DTYPES = (np.float32, np.float64)


class Rng:
    """Deterministic random stream; equal seeds yield equal streams.

    ``derive(label)`` returns an independent child stream whose seed is a
    cryptographic hash of (seed, label), so substream layout is stable across
    processes and platforms (unlike Python's salted ``hash``).
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def derive(self, label: str) -> "Rng":
        digest = hashlib.blake2b(
            f"{self.seed}:{label}".encode(), digest_size=8
        ).digest()
        return Rng(int.from_bytes(digest, "little"))

    def normal(self, size=None, loc=0.0, scale=1.0) -> np.ndarray:
        return self._gen.normal(loc=loc, scale=scale, size=size)

    def uniform(self, low=0.0, high=1.0, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=size)

    def integers(self, low, high, size=None) -> np.ndarray:
        """Uniform ints in [low, high) following numpy's convention."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def shuffled(self, items) -> list:
        items = list(items)
        order = self._gen.permutation(len(items))
        return [items[i] for i in order]


class Grid:
    """Immutable H x W x C float tensor (row-major, channel-interleaved).

    Accepts 2-D input as single-channel.  Samples must be finite; float32 and
    float64 are kept as-is, other dtypes are cast to float32.
    """

    __slots__ = ("_data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise GridFormatError(f"grid needs 2 or 3 dims, got {arr.ndim}")
        if min(arr.shape) < 1:
            raise GridFormatError(f"grid dims must be >= 1, got {arr.shape}")
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not np.all(np.isfinite(arr)):
            raise GridFormatError("grid samples must be finite")
        arr = arr.copy(order="C")
        arr.setflags(write=False)
        self._data = arr

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def h(self) -> int:
        return self._data.shape[0]

    @property
    def w(self) -> int:
        return self._data.shape[1]

    @property
    def c(self) -> int:
        return self._data.shape[2]

    @property
    def shape(self):
        return self._data.shape

    @property
    def dtype(self):
        return self._data.dtype

    def astype(self, dtype) -> "Grid":
        return Grid(self._data.astype(dtype))

    @classmethod
    def zeros(cls, h: int, w: int, c: int = 1, dtype=np.float32) -> "Grid":
        return cls(np.zeros((h, w, c), dtype=dtype))

    @classmethod
    def full(cls, h: int, w: int, value: float, c: int = 1, dtype=np.float32) -> "Grid":
        return cls(np.full((h, w, c), value, dtype=dtype))

    def __repr__(self):
        return f"Grid({self.h}x{self.w}x{self.c}, {self._data.dtype})"


class LabelMap:
    """Immutable H x W map of class ids; 0 = background, 1..K = feature classes."""

    __slots__ = ("_labels", "num_classes")

    def __init__(self, labels, num_classes: int | None = None):
        arr = np.asarray(labels)
        if arr.ndim != 2:
            raise GridFormatError(f"label map needs 2 dims, got {arr.ndim}")
        if not np.issubdtype(arr.dtype, np.integer):
            raise GridFormatError("label map needs an integer dtype")
        if arr.size and arr.min() < 0:
            raise GridFormatError("labels must be >= 0")
        top = int(arr.max()) if arr.size else 0
        if num_classes is None:
            num_classes = top
        if top > num_classes:
            raise GridFormatError(
                f"label {top} exceeds declared class count {num_classes}"
            )
        if num_classes > 255:
            raise GridFormatError("at most 255 feature classes (uint8 indexed png)")
        arr = arr.astype(np.uint8).copy(order="C")
        arr.setflags(write=False)
        self._labels = arr
        self.num_classes = int(num_classes)

    @property
    def labels(self) -> np.ndarray:
        return self._labels

    @property
    def h(self) -> int:
        return self._labels.shape[0]

    @property
    def w(self) -> int:
        return self._labels.shape[1]

    @classmethod
    def zeros(cls, h: int, w: int, num_classes: int = 0) -> "LabelMap":
        return cls(np.zeros((h, w), dtype=np.uint8), num_classes)

    def __repr__(self):
        return f"LabelMap({self.h}x{self.w}, K={self.num_classes})"


# ---------------------------------------------------------------------------
# Lanczos low-pass


def lanczos_taps(cutoff: float, lobes: int = 3) -> np.ndarray:
    """1-D Lanczos-windowed sinc taps for a given cutoff (cycles/sample).

    The ideal response passes below ``cutoff`` and rejects above; the window
    limits support to ``lobes`` sinc lobes per side.  Taps are normalized to
    sum exactly to 1 so DC is preserved.
    """
    if not 0.0 < cutoff <= 0.5:
        raise ValueError(f"cutoff must be in (0, 0.5], got {cutoff}")
    radius = lobes / (2.0 * cutoff)
    n = np.arange(-int(np.floor(radius)), int(np.floor(radius)) + 1, dtype=np.float64)
    x = 2.0 * cutoff * n
    taps = 2.0 * cutoff * np.sinc(x) * np.sinc(x / lobes)
    return taps / taps.sum()


_BOUNDARY_MODES = {"mirror": "mirror", "reflect": "mirror", "wrap": "wrap"}


def lanczos_lowpass(
    grid: Grid, cutoff: float, boundary: str = "mirror", lobes: int = 3
) -> Grid:
    """Separable low-pass; linear, DC-preserving, deterministic."""
    if boundary not in _BOUNDARY_MODES:
        raise ValueError(f"boundary must be one of {sorted(_BOUNDARY_MODES)}")
    mode = _BOUNDARY_MODES[boundary]
    taps = lanczos_taps(cutoff, lobes)
    out = ndimage.convolve1d(grid.data, taps, axis=0, mode=mode)
    out = ndimage.convolve1d(out, taps, axis=1, mode=mode)
    return Grid(out.astype(grid.dtype, copy=False))


# ---------------------------------------------------------------------------
# Resampling


def _nearest_index(n_out: int, n_in: int) -> np.ndarray:
    # Pixel-center mapping; exact replication for integer upscale factors.
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.int64)
    return np.clip(idx, 0, n_in - 1)


def resample(grid: Grid, h: int, w: int, mode: str = "nearest") -> Grid:
    """Resize a grid. Modes: ``nearest``, ``box`` (integer-factor mean

    downscale), ``lanczos`` (general antialiased resize).
    """
    if h < 1 or w < 1:
        raise GridFormatError("target dims must be >= 1")
    if mode == "nearest":
        rows = _nearest_index(h, grid.h)
        cols = _nearest_index(w, grid.w)
        return Grid(grid.data[rows][:, cols])
    if mode == "box":
        if grid.h % h or grid.w % w:
            raise GridFormatError(
                f"box mode needs integer downscale factors, got "
                f"{grid.h}x{grid.w} -> {h}x{w}"
            )
        fy, fx = grid.h // h, grid.w // w
        blocks = grid.data.reshape(h, fy, w, fx, grid.c)
        return Grid(blocks.mean(axis=(1, 3)).astype(grid.dtype, copy=False))
    if mode == "lanczos":
        chans = []
        for ci in range(grid.c):
            img = Image.fromarray(grid.data[:, :, ci].astype(np.float32), mode="F")
            chans.append(np.asarray(img.resize((w, h), Image.LANCZOS)))
        out = np.stack(chans, axis=-1)
        return Grid(out.astype(grid.dtype, copy=False))
    raise ValueError(f"unknown resample mode {mode!r}")


def resample_labels(lm: LabelMap, h: int, w: int, mode: str = "nearest") -> LabelMap:
    """Resize a label map. Only nearest is lawful for class ids."""
    if mode != "nearest":
        raise GridFormatError("label maps resample with nearest only")
    rows = _nearest_index(h, lm.h)
    cols = _nearest_index(w, lm.w)
    return LabelMap(lm.labels[rows][:, cols], lm.num_classes)


# ---------------------------------------------------------------------------
# tensor_raw (TXF1)


def grid_to_txf1_bytes(grid: Grid) -> bytes:
    if grid.dtype != np.float32:
        raise GridFormatError("tensor_raw stores float32; cast the grid first")
    header = TXF1_MAGIC + struct.pack("<III", grid.h, grid.w, grid.c)
    return header + grid.data.astype("<f4", copy=False).tobytes()


def txf1_bytes_to_grid(blob: bytes) -> Grid:
    if len(blob) < 16:
        raise GridFormatError("malformed container: truncated header")
    if blob[:4] != TXF1_MAGIC:
        raise GridFormatError("malformed container: bad magic")
    h, w, c = struct.unpack("<III", blob[4:16])
    if min(h, w, c) < 1:
        raise GridFormatError("malformed container: zero dimension")
    count = h * w * c
    if count > _MAX_ELEMENTS:
        raise GridFormatError("malformed container: dims exceed size budget")
    expected = 16 + 4 * count
    if len(blob) != expected:
        raise GridFormatError(
            f"malformed container: expected {expected} bytes, got {len(blob)}"
        )
    data = np.frombuffer(blob, dtype="<f4", offset=16, count=count)
    return Grid(data.reshape(h, w, c))


# ---------------------------------------------------------------------------
# png8


def grid_to_png_bytes(grid: Grid) -> bytes:
    if grid.c not in (1, 3, 4):
        raise GridFormatError(f"png8 supports 1, 3, or 4 channels, got {grid.c}")
    q = np.round(np.clip(grid.data, 0.0, 1.0) * 255.0).astype(np.uint8)
    if grid.c == 1:
        img = Image.fromarray(q[:, :, 0], mode="L")
    elif grid.c == 3:
        img = Image.fromarray(q, mode="RGB")
    else:
        img = Image.fromarray(q, mode="RGBA")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def png_bytes_to_grid(blob: bytes) -> Grid:
    try:
        img = Image.open(io.BytesIO(blob))
        img.load()
    except Exception as exc:
        raise GridFormatError(f"malformed container: {exc}") from exc
    if img.mode == "P":
        raise GridFormatError("indexed png holds labels; use png_bytes_to_labels")
    if img.mode not in ("L", "RGB", "RGBA"):
        raise GridFormatError(f"unsupported png mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.float32) / 255.0
    return Grid(arr)


def class_palette(num_classes: int) -> np.ndarray:
    """Deterministic distinct colors: index 0 black, classes around the hue wheel."""
    pal = np.zeros((256, 3), dtype=np.uint8)
    for k in range(1, max(num_classes, 1) + 1):
        hue = ((k - 1) * 0.61803398875) % 1.0  # golden-ratio spacing
        pal[k] = _hsv_to_rgb(hue, 0.72, 0.96)
    return pal


def _hsv_to_rgb(h: float, s: float, v: float):
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    rgb = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i]
    return tuple(int(round(255 * x)) for x in rgb)


def labels_to_png_bytes(lm: LabelMap) -> bytes:
    img = Image.fromarray(lm.labels, mode="P")
    img.putpalette(class_palette(lm.num_classes).reshape(-1).tolist())
    meta = PngInfo()
    meta.add_text("num_classes", str(lm.num_classes))
    buf = io.BytesIO()
    img.save(buf, format="PNG", pnginfo=meta)
    return buf.getvalue()


def png_bytes_to_labels(blob: bytes) -> LabelMap:
    try:
        img = Image.open(io.BytesIO(blob))
        img.load()
    except Exception as exc:
        raise GridFormatError(f"malformed container: {exc}") from exc
    if img.mode != "P":
        raise GridFormatError(f"label png must be indexed, got mode {img.mode!r}")
    arr = np.asarray(img, dtype=np.uint8)
    declared = img.text.get("num_classes") if hasattr(img, "text") else None
    k = int(declared) if declared is not None else (int(arr.max()) if arr.size else 0)
    return LabelMap(arr, max(k, int(arr.max()) if arr.size else 0))


# ---------------------------------------------------------------------------
# File helpers


def write_grid(path, grid: Grid) -> None:
    path = str(path)
    if path.endswith(".txf1"):
        blob = grid_to_txf1_bytes(grid)
    elif path.endswith(".png"):
        blob = grid_to_png_bytes(grid)
    else:
        raise GridFormatError(f"unknown grid extension for {path!r}")
    with open(path, "wb") as fh:
        fh.write(blob)


def read_grid(path) -> Grid:
    path = str(path)
    with open(path, "rb") as fh:
        blob = fh.read()
    if path.endswith(".txf1"):
        return txf1_bytes_to_grid(blob)
    if path.endswith(".png"):
        return png_bytes_to_grid(blob)
    raise GridFormatError(f"unknown grid extension for {path!r}")


def write_labels(path, lm: LabelMap) -> None:
    with open(str(path), "wb") as fh:
        fh.write(labels_to_png_bytes(lm))


def read_labels(path) -> LabelMap:
    with open(str(path), "rb") as fh:
        return png_bytes_to_labels(fh.read())
