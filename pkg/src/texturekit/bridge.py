"""Remote denoiser bridge: length-prefixed binary frames over a stream socket.

Frame layout: 4-byte magic "TXDN", one type byte (0 request, 1 response,
2 error), an 8-byte little-endian payload length, then the payload. A
request payload is the state tensor as a tensor_raw block, a condition
block (one presence byte, then dims and row-major uint8 labels when
present), and the noise level as a little-endian 64-bit float. A response
payload is a single tensor_raw block; an error payload is UTF-8 text.

Connections are serial: one request in flight each. The client keeps a
pool of idle connections so independent threads can evaluate concurrently,
each on its own socket.
"""

from __future__ import annotations

import socket
import socketserver
import struct
import threading

import numpy as np

from .errors import (
    BridgeConnectionError,
    BridgeProtocolError,
    BridgeRemoteError,
    BridgeShapeError,
    BridgeTimeoutError,
    BridgeTransportError,
)
from .grid import Grid, LabelMap, grid_to_txf1_bytes, txf1_bytes_to_grid

FRAME_MAGIC = b"TXDN"
MSG_REQUEST = 0
MSG_RESPONSE = 1
MSG_ERROR = 2

_HEADER = struct.Struct("<4sBQ")
_SIGMA = struct.Struct("<d")
_COND_DIMS = struct.Struct("<II")
_MAX_PAYLOAD = 1 << 31


def pack_frame(msg_type: int, payload: bytes) -> bytes:
    return _HEADER.pack(FRAME_MAGIC, msg_type, len(payload)) + payload


def _field3(z) -> np.ndarray:
    data = z.data if isinstance(z, Grid) else np.asarray(z)
    if data.ndim == 2:
        data = data[:, :, None]
    if data.ndim != 3:
        raise BridgeProtocolError(f"state must be (H, W, C), got shape {data.shape}")
    return data


def encode_request(z, cond, sigma: float) -> bytes:
    field = _field3(z)
    blob = grid_to_txf1_bytes(Grid(field.astype(np.float32, copy=False)))
    if cond is None:
        cond_block = b"\x00"
    else:
        labels = cond.labels if isinstance(cond, LabelMap) else np.asarray(cond)
        if labels.ndim != 2:
            raise BridgeProtocolError(
                f"condition must be a 2-D label grid, got shape {labels.shape}"
            )
        if labels.min() < 0 or labels.max() > 255:
            raise BridgeProtocolError("condition labels must fit in one byte")
        cond_block = (
            b"\x01"
            + _COND_DIMS.pack(labels.shape[0], labels.shape[1])
            + labels.astype(np.uint8).tobytes()
        )
    return blob + cond_block + _SIGMA.pack(float(sigma))


def _split_txf1(payload: bytes, offset: int) -> tuple[Grid, int]:
    if len(payload) < offset + 16:
        raise BridgeProtocolError("payload truncated inside tensor header")
    h, w, c = struct.unpack_from("<III", payload, offset + 4)
    end = offset + 16 + 4 * h * w * c
    if len(payload) < end:
        raise BridgeProtocolError("payload truncated inside tensor samples")
    try:
        grid = txf1_bytes_to_grid(payload[offset:end])
    except Exception as exc:
        raise BridgeProtocolError(f"bad tensor block: {exc}") from exc
    return grid, end


def decode_request(payload: bytes) -> tuple[Grid, np.ndarray | None, float]:
    grid, offset = _split_txf1(payload, 0)
    if len(payload) < offset + 1:
        raise BridgeProtocolError("payload truncated before condition block")
    flag = payload[offset]
    offset += 1
    cond = None
    if flag == 1:
        if len(payload) < offset + _COND_DIMS.size:
            raise BridgeProtocolError("payload truncated inside condition dims")
        ch, cw = _COND_DIMS.unpack_from(payload, offset)
        offset += _COND_DIMS.size
        if len(payload) < offset + ch * cw:
            raise BridgeProtocolError("payload truncated inside condition labels")
        cond = (
            np.frombuffer(payload, dtype=np.uint8, count=ch * cw, offset=offset)
            .reshape(ch, cw)
            .astype(np.int64)
        )
        offset += ch * cw
    elif flag != 0:
        raise BridgeProtocolError(f"bad condition presence byte {flag}")
    if len(payload) != offset + _SIGMA.size:
        raise BridgeProtocolError("payload length disagrees with sigma trailer")
    (sigma,) = _SIGMA.unpack_from(payload, offset)
    return grid, cond, sigma


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    chunks = []
    remaining = n
    while remaining:
        try:
            chunk = sock.recv(remaining)
        except socket.timeout as exc:
            raise BridgeTimeoutError("endpoint did not answer in time") from exc
        except OSError as exc:
            raise BridgeConnectionError(f"connection failed mid-read: {exc}") from exc
        if not chunk:
            raise BridgeConnectionError("endpoint closed the connection")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> tuple[int, bytes]:
    header = _recv_exact(sock, _HEADER.size)
    magic, msg_type, length = _HEADER.unpack(header)
    if magic != FRAME_MAGIC:
        raise BridgeProtocolError(f"bad frame magic {magic!r}")
    if msg_type not in (MSG_REQUEST, MSG_RESPONSE, MSG_ERROR):
        raise BridgeProtocolError(f"unknown message type {msg_type}")
    if length > _MAX_PAYLOAD:
        raise BridgeProtocolError(f"payload length {length} exceeds budget")
    return msg_type, _recv_exact(sock, length)


class BridgeRemoteDenoiser:
    """Denoiser proxy that ships each evaluation to a remote endpoint.

    One round trip per evaluation. A connection is returned to the idle
    pool only after a complete well-formed exchange; anything suspect is
    closed instead so a later call starts from a fresh dial.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, timeout: float = 10.0):
        self.host = host
        self.port = int(port)
        self.timeout = float(timeout)
        self._idle: list[socket.socket] = []
        self._lock = threading.Lock()

    def _dial(self) -> socket.socket:
        try:
            sock = socket.create_connection(
                (self.host, self.port), timeout=self.timeout
            )
        except OSError as exc:
            raise BridgeConnectionError(
                f"cannot reach denoiser endpoint {self.host}:{self.port}: {exc}"
            ) from exc
        sock.settimeout(self.timeout)
        return sock

    def _borrow(self) -> socket.socket:
        with self._lock:
            if self._idle:
                return self._idle.pop()
        return self._dial()

    def _release(self, sock: socket.socket) -> None:
        with self._lock:
            self._idle.append(sock)

    def close(self) -> None:
        with self._lock:
            socks, self._idle = self._idle, []
        for sock in socks:
            sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    def eval(self, z, cond, sigma: float) -> np.ndarray:
        sent_shape = _field3(z).shape
        frame = pack_frame(MSG_REQUEST, encode_request(z, cond, sigma))
        sock = self._borrow()
        healthy = False
        try:
            try:
                sock.sendall(frame)
            except socket.timeout as exc:
                raise BridgeTimeoutError("endpoint did not accept the request") from exc
            except OSError as exc:
                raise BridgeConnectionError(f"send failed: {exc}") from exc
            msg_type, payload = read_frame(sock)
            if msg_type == MSG_ERROR:
                healthy = True
                raise BridgeRemoteError(payload.decode("utf-8", "replace"))
            if msg_type != MSG_RESPONSE:
                raise BridgeProtocolError("endpoint answered with a request frame")
            grid, end = _split_txf1(payload, 0)
            if end != len(payload):
                raise BridgeProtocolError("trailing bytes after response tensor")
            if grid.data.shape != sent_shape:
                raise BridgeShapeError(sent_shape, grid.data.shape)
            healthy = True
            return grid.data.astype(np.float64)
        finally:
            if healthy:
                self._release(sock)
            else:
                sock.close()


class BridgeServer:
    """Serves a denoiser over the frame protocol on a local TCP port.

    Each accepted connection is handled serially on its own thread:
    read one request, answer it, repeat until the peer hangs up. Denoiser
    failures travel back as error frames; the connection stays usable.
    """

    def __init__(self, denoiser, host: str = "127.0.0.1", port: int = 0):
        outer_denoiser = denoiser

        class Handler(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                sock = self.request
                while True:
                    try:
                        msg_type, payload = read_frame(sock)
                    except BridgeConnectionError:
                        return
                    except BridgeTransportError as exc:
                        _try_send(sock, pack_frame(MSG_ERROR, str(exc).encode()))
                        return
                    if msg_type != MSG_REQUEST:
                        _try_send(
                            sock,
                            pack_frame(MSG_ERROR, b"expected a request frame"),
                        )
                        return
                    try:
                        z, cond, sigma = decode_request(payload)
                        eps = np.asarray(outer_denoiser.eval(z, cond, sigma))
                        if eps.ndim == 2:
                            eps = eps[:, :, None]
                        reply = pack_frame(
                            MSG_RESPONSE,
                            grid_to_txf1_bytes(Grid(eps.astype(np.float32))),
                        )
                    except Exception as exc:
                        message = f"{type(exc).__name__}: {exc}".encode()
                        if not _try_send(sock, pack_frame(MSG_ERROR, message)):
                            return
                        continue
                    if not _try_send(sock, reply):
                        return

        class Server(socketserver.ThreadingTCPServer):
            daemon_threads = True
            allow_reuse_address = True

        self._server = Server((host, port), Handler)
        self.host, self.port = self._server.server_address[:2]
        self._thread: threading.Thread | None = None

    def start(self) -> "BridgeServer":
        self._thread = threading.Thread(
            target=self._server.serve_forever, name="bridge-server", daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5.0)
            self._thread = None

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc_info):
        self.stop()


def _try_send(sock: socket.socket, frame: bytes) -> bool:
    try:
        sock.sendall(frame)
        return True
    except OSError:
        return False
