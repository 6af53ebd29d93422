"""Guidance backends and the binary wire protocol.

Frame layout (all integers little-endian):

    magic  b"TGDP" | u32 version | u32 msg_type | u64 payload_len | payload

Message types: 1 = gradient request, 2 = gradient response, 3 = error,
4 = hello. Request payload:

    u64 request_id | u32 prompt_len | prompt utf8
    | u32 B | u32 H | u32 W | u32 t_min | u32 t_max
    | u64 seed | f32 guidance_scale | f32 image_data[B*H*W*3]
    | extension blocks: (u32 ext_type | u64 ext_len | bytes)*

Extension type 1 carries per-image cameras (13 f32 each: row-major rotation,
translation, vertical fov in degrees); diffusion backends may ignore it, the
template mock requires it. Gradient payload:

    u64 request_id | u32 status | u32 B | u32 H | u32 W | f32 data[B*H*W*3]

Error payload: u64 request_id | u32 code | u32 message_len | message utf8.
"""

from __future__ import annotations

import logging
import os
import socket
import struct
import subprocess
import threading
from dataclasses import dataclass, field as dc_field

import numpy as np

log = logging.getLogger(__name__)

MAGIC = b"TGDP"
PROTOCOL_VERSION = 1
MSG_REQUEST = 1
MSG_GRADIENT = 2
MSG_ERROR = 3
MSG_HELLO = 4

EXT_CAMERAS = 1

STATUS_OK = 0

ENDPOINT_ENV_VAR = "TACSHAPE_GUIDANCE_ENDPOINT"

_HEADER = struct.Struct("<4sIIQ")


class ProtocolError(RuntimeError):
    """Malformed or version-incompatible wire traffic."""


class GuidanceConnectionError(RuntimeError):
    """Endpoint unreachable or timed out."""


@dataclass
class CameraExtension:
    rotations: np.ndarray     # (B, 3, 3)
    translations: np.ndarray  # (B, 3)
    fovs_deg: np.ndarray      # (B,)

    def encode(self) -> bytes:
        b = len(self.fovs_deg)
        out = np.empty((b, 13), dtype="<f4")
        out[:, :9] = self.rotations.reshape(b, 9)
        out[:, 9:12] = self.translations.reshape(b, 3)
        out[:, 12] = self.fovs_deg
        return out.tobytes()

    @classmethod
    def decode(cls, data: bytes) -> "CameraExtension":
        if len(data) % 52 != 0:
            raise ProtocolError("camera extension length not a multiple of 52")
        arr = np.frombuffer(data, dtype="<f4").reshape(-1, 13).astype(np.float64)
        return cls(rotations=arr[:, :9].reshape(-1, 3, 3),
                   translations=arr[:, 9:12].copy(), fovs_deg=arr[:, 12].copy())


@dataclass
class GuidanceRequest:
    request_id: int
    prompt: str
    images: np.ndarray  # (B, H, W, 3) float32, components in [-1, 1]
    t_min: int = 20
    t_max: int = 980
    seed: int = 0
    guidance_scale: float = 100.0
    extensions: list[tuple[int, bytes]] = dc_field(default_factory=list)

    def validate(self) -> None:
        img = self.images
        if img.ndim != 4 or img.shape[3] != 3 or img.shape[0] < 1:
            raise ProtocolError(f"request images must be (B,H,W,3), got {img.shape}")
        if not np.isfinite(img).all():
            raise ProtocolError("request images contain non-finite values")
        if self.t_min < 1 or self.t_max < self.t_min:
            raise ProtocolError("invalid timestep range")

    def camera_extension(self) -> CameraExtension | None:
        for ext_type, data in self.extensions:
            if ext_type == EXT_CAMERAS:
                return CameraExtension.decode(data)
        return None


@dataclass
class GuidanceGradient:
    request_id: int
    gradients: np.ndarray  # (B, H, W, 3) float32
    status: int = STATUS_OK


@dataclass
class ErrorMessage:
    request_id: int
    code: int
    message: str


@dataclass
class Hello:
    version: int = PROTOCOL_VERSION
    flags: int = 0


# ---------------------------------------------------------------------------
# Encoding / decoding
# ---------------------------------------------------------------------------


def _frame(msg_type: int, payload: bytes) -> bytes:
    return _HEADER.pack(MAGIC, PROTOCOL_VERSION, msg_type, len(payload)) + payload


def encode_message(msg) -> bytes:
    if isinstance(msg, GuidanceRequest):
        msg.validate()
        prompt = msg.prompt.encode("utf-8")
        b, h, w, _ = msg.images.shape
        head = struct.pack("<QI", msg.request_id, len(prompt)) + prompt
        head += struct.pack("<IIIII", b, h, w, msg.t_min, msg.t_max)
        head += struct.pack("<Qf", msg.seed, msg.guidance_scale)
        body = np.ascontiguousarray(msg.images, dtype="<f4").tobytes()
        ext = b""
        for ext_type, data in msg.extensions:
            ext += struct.pack("<IQ", ext_type, len(data)) + data
        return _frame(MSG_REQUEST, head + body + ext)
    if isinstance(msg, GuidanceGradient):
        b, h, w, _ = msg.gradients.shape
        head = struct.pack("<QIIII", msg.request_id, msg.status, b, h, w)
        body = np.ascontiguousarray(msg.gradients, dtype="<f4").tobytes()
        return _frame(MSG_GRADIENT, head + body)
    if isinstance(msg, ErrorMessage):
        text = msg.message.encode("utf-8")
        return _frame(MSG_ERROR, struct.pack("<QII", msg.request_id, msg.code, len(text)) + text)
    if isinstance(msg, Hello):
        return _frame(MSG_HELLO, struct.pack("<II", msg.version, msg.flags))
    raise TypeError(f"cannot encode {type(msg)!r}")


def _decode_payload(msg_type: int, payload: bytes):
    if msg_type == MSG_HELLO:
        if len(payload) != 8:
            raise ProtocolError("bad hello payload size")
        version, flags = struct.unpack("<II", payload)
        return Hello(version=version, flags=flags)
    if msg_type == MSG_ERROR:
        rid, code, n = struct.unpack_from("<QII", payload, 0)
        text = payload[16:16 + n].decode("utf-8", errors="replace")
        return ErrorMessage(request_id=rid, code=code, message=text)
    if msg_type == MSG_GRADIENT:
        rid, status, b, h, w = struct.unpack_from("<QIIII", payload, 0)
        need = 24 + b * h * w * 3 * 4
        if len(payload) != need:
            raise ProtocolError(f"gradient payload size mismatch ({len(payload)} != {need})")
        data = np.frombuffer(payload, dtype="<f4", count=b * h * w * 3, offset=24)
        return GuidanceGradient(request_id=rid, status=status,
                                gradients=data.reshape(b, h, w, 3).copy())
    if msg_type == MSG_REQUEST:
        off = 0
        rid, plen = struct.unpack_from("<QI", payload, off)
        off += 12
        prompt = payload[off:off + plen].decode("utf-8")
        off += plen
        b, h, w, t_min, t_max = struct.unpack_from("<IIIII", payload, off)
        off += 20
        seed, scale = struct.unpack_from("<Qf", payload, off)
        off += 12
        count = b * h * w * 3
        if len(payload) < off + count * 4:
            raise ProtocolError("request payload truncated")
        images = np.frombuffer(payload, dtype="<f4", count=count, offset=off)
        images = images.reshape(b, h, w, 3).copy()
        off += count * 4
        extensions = []
        while off < len(payload):
            if off + 12 > len(payload):
                raise ProtocolError("truncated extension header")
            ext_type, ext_len = struct.unpack_from("<IQ", payload, off)
            off += 12
            if off + ext_len > len(payload):
                raise ProtocolError("truncated extension body")
            extensions.append((ext_type, payload[off:off + ext_len]))
            off += ext_len
        return GuidanceRequest(request_id=rid, prompt=prompt, images=images,
                               t_min=t_min, t_max=t_max, seed=seed,
                               guidance_scale=scale, extensions=extensions)
    raise ProtocolError(f"unknown message type {msg_type}")


class StreamDecoder:
    """Incremental frame decoder; tolerates arbitrary fragmentation."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while True:
            if len(self._buf) < _HEADER.size:
                break
            magic, version, msg_type, length = _HEADER.unpack_from(self._buf, 0)
            if magic != MAGIC:
                raise ProtocolError(f"bad magic {bytes(magic)!r}")
            if version != PROTOCOL_VERSION:
                raise ProtocolError(
                    f"protocol version mismatch: peer speaks {version}, "
                    f"this build speaks {PROTOCOL_VERSION}")
            total = _HEADER.size + length
            if len(self._buf) < total:
                break
            payload = bytes(self._buf[_HEADER.size:total])
            del self._buf[:total]
            out.append(_decode_payload(msg_type, payload))
        return out


def decode_message(data: bytes):
    """Decode exactly one framed message."""
    msgs = StreamDecoder().feed(data)
    if len(msgs) != 1:
        raise ProtocolError(f"expected exactly one message, got {len(msgs)}")
    return msgs[0]


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------


class GuidanceBackend:
    """Answers gradient requests; see request_gradient."""

    def request_gradient(self, req: GuidanceRequest) -> GuidanceGradient:
        raise NotImplementedError

    def close(self) -> None:
        pass


class ZeroBackend(GuidanceBackend):
    """Returns all-zero gradients: guidance disabled but cadence observable."""

    def __init__(self):
        self.request_count = 0

    def request_gradient(self, req: GuidanceRequest) -> GuidanceGradient:
        req.validate()
        self.request_count += 1
        return GuidanceGradient(request_id=req.request_id,
                                gradients=np.zeros_like(req.images, dtype=np.float32))


class TemplateMockBackend(GuidanceBackend):
    """Quadratic pull toward renders of a fixed target mesh.

    For every request image I the backend renders the target mesh's normal
    image T at the request's camera (carried in the camera extension) and
    returns lam * (I - T). Gradient-descent on the images alone therefore
    converges to the target renders.
    """

    def __init__(self, target_mesh, lam: float = 1.0):
        from .bvh import RayCaster  # local import: keep module load light
        from .render import render_mesh_normals  # noqa: F401  (documented dependency)
        self.target_mesh = target_mesh
        self.lam = float(lam)
        self.request_count = 0
        self._caster = RayCaster(target_mesh)
        self._cache: dict[bytes, np.ndarray] = {}

    def _target_image(self, R: np.ndarray, t: np.ndarray, fov: float,
                      width: int, height: int) -> np.ndarray:
        from .geometry import Pose
        from .render import ViewCamera, raycast_mesh, BACKGROUND_NORMAL
        key = R.astype("<f8").tobytes() + t.astype("<f8").tobytes() + \
            struct.pack("<dII", fov, width, height)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        # wire rotations are float32; snap back to the nearest rotation
        U, _, Vt = np.linalg.svd(R)
        R_ortho = U @ Vt
        if np.linalg.det(R_ortho) < 0:
            U[:, -1] = -U[:, -1]
            R_ortho = U @ Vt
        cam = ViewCamera(pose=Pose(R_ortho, t), fov_deg=fov, width=width, height=height)
        origins, dirs = cam.rays()
        res = raycast_mesh(self._caster, origins, dirs)
        M = cam.view_matrix()
        img = np.tile(BACKGROUND_NORMAL, (height * width, 1))
        img[res.hit] = res.normal[res.hit] @ M.T
        img = img.reshape(height, width, 3)
        if len(self._cache) < 4096:
            self._cache[key] = img
        return img

    def request_gradient(self, req: GuidanceRequest) -> GuidanceGradient:
        req.validate()
        self.request_count += 1
        cams = req.camera_extension()
        if cams is None:
            raise ProtocolError("template mock requires the camera extension")
        b, h, w, _ = req.images.shape
        if len(cams.fovs_deg) != b:
            raise ProtocolError("camera extension count != image batch")
        grads = np.empty((b, h, w, 3), dtype=np.float32)
        for i in range(b):
            target = self._target_image(cams.rotations[i], cams.translations[i],
                                        float(cams.fovs_deg[i]), w, h)
            # subtract in float32: identical geometry yields exact zeros
            diff = req.images[i] - target.astype(np.float32)
            grads[i] = np.float32(self.lam) * diff
        return GuidanceGradient(request_id=req.request_id, gradients=grads)


# ---------------------------------------------------------------------------
# Wire client
# ---------------------------------------------------------------------------


class _SocketTransport:
    def __init__(self, host: str, port: int, timeout: float):
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as exc:
            raise GuidanceConnectionError(f"cannot connect to {host}:{port}: {exc}") from exc
        self._sock.settimeout(timeout)

    def send(self, data: bytes) -> None:
        self._sock.sendall(data)

    def recv(self) -> bytes:
        try:
            return self._sock.recv(65536)
        except socket.timeout as exc:
            raise GuidanceConnectionError("timed out waiting for backend reply") from exc

    def close(self) -> None:
        try:
            self._sock.close()
        except OSError:
            pass


class _StdioTransport:
    """Speaks the protocol over a child process's stdin/stdout."""

    def __init__(self, command: str, timeout: float):
        import shlex
        self._proc = subprocess.Popen(shlex.split(command), stdin=subprocess.PIPE,
                                      stdout=subprocess.PIPE)
        self.timeout = timeout

    def send(self, data: bytes) -> None:
        self._proc.stdin.write(data)
        self._proc.stdin.flush()

    def recv(self) -> bytes:
        chunk = self._proc.stdout.read1(65536)
        if not chunk:
            raise GuidanceConnectionError("stdio backend closed the pipe")
        return chunk

    def close(self) -> None:
        try:
            self._proc.stdin.close()
            self._proc.terminate()
        except OSError:
            pass


class RemoteBackend(GuidanceBackend):
    """Blocking protocol client; one in-flight request per connection."""

    def __init__(self, transport, request_timeout: float = 120.0):
        self._transport = transport
        self._decoder = StreamDecoder()
        self._lock = threading.Lock()
        self.request_timeout = request_timeout
        self._handshake()

    def _read_message(self):
        while True:
            msgs = self._decoder.feed(self._transport.recv())
            if msgs:
                if len(msgs) > 1:
                    raise ProtocolError("backend pipelined an unexpected extra message")
                return msgs[0]

    def _handshake(self) -> None:
        self._transport.send(encode_message(Hello()))
        reply = self._read_message()
        if not isinstance(reply, Hello):
            raise ProtocolError(f"expected hello, got {type(reply).__name__}")
        if reply.version != PROTOCOL_VERSION:
            raise ProtocolError(
                f"protocol version mismatch: server {reply.version}, client {PROTOCOL_VERSION}")

    def request_gradient(self, req: GuidanceRequest) -> GuidanceGradient:
        with self._lock:
            self._transport.send(encode_message(req))
            reply = self._read_message()
        if isinstance(reply, ErrorMessage):
            raise ProtocolError(f"backend error {reply.code}: {reply.message}")
        if not isinstance(reply, GuidanceGradient):
            raise ProtocolError(f"expected gradient, got {type(reply).__name__}")
        if reply.request_id != req.request_id:
            raise ProtocolError(
                f"response id {reply.request_id} does not match request {req.request_id}")
        if reply.gradients.shape != req.images.shape:
            raise ProtocolError(
                f"gradient shape {reply.gradients.shape} != request {req.images.shape}")
        if not np.isfinite(reply.gradients).all():
            raise ProtocolError("backend returned non-finite gradients")
        return reply

    def close(self) -> None:
        self._transport.close()


def connect(endpoint: str, connect_timeout: float = 5.0,
            request_timeout: float = 120.0) -> RemoteBackend:
    """Open a backend connection.

    Endpoints: "host:port" for TCP, "stdio:<command>" to spawn a child process
    speaking the protocol on its pipes.
    """
    if endpoint.startswith("stdio:"):
        transport = _StdioTransport(endpoint[len("stdio:"):], timeout=request_timeout)
    else:
        host, _, port = endpoint.rpartition(":")
        if not host:
            raise ValueError(f"endpoint must be host:port or stdio:<cmd>, got {endpoint!r}")
        transport = _SocketTransport(host, int(port), timeout=connect_timeout)
    backend = RemoteBackend(transport, request_timeout=request_timeout)
    return backend


def resolve_endpoint(cli_value: str | None) -> str | None:
    """CLI flag wins over the environment variable."""
    if cli_value:
        return cli_value
    return os.environ.get(ENDPOINT_ENV_VAR) or None


# ---------------------------------------------------------------------------
# Server loop (used by `serve-mock` and the protocol tests)
# ---------------------------------------------------------------------------


def _serve_connection(conn, backend: GuidanceBackend) -> None:
    decoder = StreamDecoder()
    try:
        while True:
            data = conn.recv(65536)
            if not data:
                return
            try:
                messages = decoder.feed(data)
            except ProtocolError as exc:
                conn.sendall(encode_message(ErrorMessage(0, 1, str(exc))))
                return
            for msg in messages:
                if isinstance(msg, Hello):
                    conn.sendall(encode_message(Hello()))
                elif isinstance(msg, GuidanceRequest):
                    try:
                        reply = backend.request_gradient(msg)
                        conn.sendall(encode_message(reply))
                    except Exception as exc:  # per-request failure keeps the connection
                        conn.sendall(encode_message(
                            ErrorMessage(msg.request_id, 2, str(exc))))
                else:
                    conn.sendall(encode_message(
                        ErrorMessage(0, 3, f"unexpected {type(msg).__name__}")))
    except OSError:
        pass
    finally:
        conn.close()


class MockServer:
    """TCP server wrapping an in-process backend."""

    def __init__(self, backend: GuidanceBackend, host: str = "127.0.0.1", port: int = 0):
        self.backend = backend
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.host, self.port = self._sock.getsockname()
        self._threads: list[threading.Thread] = []
        self._stop = threading.Event()
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)

    def start(self) -> "MockServer":
        self._accept_thread.start()
        return self

    def _accept_loop(self) -> None:
        self._sock.settimeout(0.2)
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(target=_serve_connection, args=(conn, self.backend),
                                 daemon=True)
            t.start()
            self._threads.append(t)

    def stop(self) -> None:
        self._stop.set()
        try:
            self._sock.close()
        except OSError:
            pass

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve_stdio(backend: GuidanceBackend, stdin=None, stdout=None) -> None:
    """Answer protocol messages on stdio until EOF."""
    import sys
    stdin = stdin or sys.stdin.buffer
    stdout = stdout or sys.stdout.buffer
    decoder = StreamDecoder()
    while True:
        data = stdin.read1(65536) if hasattr(stdin, "read1") else stdin.read(65536)
        if not data:
            return
        try:
            messages = decoder.feed(data)
        except ProtocolError as exc:
            stdout.write(encode_message(ErrorMessage(0, 1, str(exc))))
            stdout.flush()
            return
        for msg in messages:
            if isinstance(msg, Hello):
                stdout.write(encode_message(Hello()))
            elif isinstance(msg, GuidanceRequest):
                try:
                    stdout.write(encode_message(backend.request_gradient(msg)))
                except Exception as exc:
                    stdout.write(encode_message(ErrorMessage(msg.request_id, 2, str(exc))))
            stdout.flush()
