"""Local session service: per-connection insertion sessions with live edits.

Native protocol (port 7878): big-endian u32 length-prefixed JSON messages over
TCP.  The same port also accepts HTTP: WebSocket upgrades speak the identical
JSON schema (one message per text frame), and plain GETs serve the viewer's
static files.  Messages:

  {"type": "transform", "position": [x,y,z], "rotation": [w,x,y,z], "scale": s}
  {"type": "material", "roughness": r, "metallic": m, "albedo": [r,g,b]}
  {"type": "camera", "position": [..], "look_at": [..], "fov": deg}
  {"type": "request_frame", "buffers": ["kappa", ...]}
  -> {"type": "frame", "id": n, "png": b64, "timings": {...}, "stats": {...},
      "buffers": {name: {"shape": [...], "data": b64-f32-le}}}

Edits between frames are coalesced last-writer-wins per field; frame ids
strictly increase per session; sessions never share mutable state.
"""

from __future__ import annotations

import base64
import copy
import hashlib
import json
import socket
import struct
import threading
from pathlib import Path

import numpy as np

from .assets import build_session, quat_to_matrix
from .camera import Camera
from .fh import default_fh

_WS_MAGIC = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"

_MIME = {
    ".html": "text/html", ".js": "text/javascript", ".css": "text/css",
    ".map": "application/json", ".png": "image/png", ".svg": "image/svg+xml",
}


class SessionError(ValueError):
    pass


def _validate_message(msg):
    if not isinstance(msg, dict) or "type" not in msg:
        raise SessionError("message must be an object with a 'type'")
    t = msg["type"]
    if t == "transform":
        if "scale" in msg and not float(msg["scale"]) > 0:
            raise SessionError("scale must be positive")
        if "rotation" in msg:
            q = np.asarray(msg["rotation"], dtype=np.float64)
            if q.shape != (4,) or abs(np.linalg.norm(q) - 1.0) > 1e-3:
                raise SessionError("rotation must be a normalized quaternion [w,x,y,z]")
    elif t == "material":
        for k, lo, hi in (("roughness", 0.0, 1.0), ("metallic", 0.0, 1.0)):
            if k in msg and not lo <= float(msg[k]) <= hi:
                raise SessionError(f"{k} must be in [{lo},{hi}]")
    elif t == "camera":
        pass
    elif t == "request_frame":
        if "buffers" in msg and not isinstance(msg["buffers"], list):
            raise SessionError("buffers must be a list of names")
    else:
        raise SessionError(f"unknown message type {t!r}")
    return msg


class SessionState:
    """One connection's pending edits + renderer.

    Heavy assets (field, mesh/BVH, SSDF, env, f_h) come preloaded from the
    server and are immutable; each session owns its object transform/material,
    camera and warm-start state.
    """

    def __init__(self, prototype):
        from .insert import InsertionSession, VirtualObject

        proto = prototype
        obj = None
        if proto.object is not None:
            obj = VirtualObject(
                proto.object.mesh,
                proto.object.brdf,
                proto.object.rotation.copy(),
                proto.object.translation.copy(),
                proto.object.scale,
            )
        self.session = InsertionSession(
            proto.field, obj, proto.env, proto.ssdf, proto.fh,
            copy.deepcopy(proto.camera), seed=proto.seed, config=proto.config,
        )
        self.pending = {}

    def apply_edit(self, msg):
        if msg["type"] in ("transform", "material") and self.session.object is None:
            raise SessionError("session has no object; transform/material edits refused")
        # last-writer-wins per field
        self.pending.setdefault(msg["type"], {}).update(
            {k: v for k, v in msg.items() if k != "type"}
        )

    def _flush(self):
        sess = self.session
        tr = self.pending.pop("transform", None)
        if tr and sess.object is not None:
            sess.object.set_transform(
                rotation=quat_to_matrix(tr["rotation"]) if "rotation" in tr else None,
                translation=np.asarray(tr["position"], dtype=np.float64)
                if "position" in tr else None,
                scale=float(tr["scale"]) if "scale" in tr else None,
            )
        mat = self.pending.pop("material", None)
        if mat and sess.object is not None:
            from .sg import BRDFParams

            b = sess.object.brdf
            sess.object.brdf = BRDFParams(
                roughness=float(mat.get("roughness", b.roughness)),
                metallic=float(mat.get("metallic", b.metallic)),
                albedo=np.asarray(mat.get("albedo", b.albedo), dtype=np.float64),
            )
        cam = self.pending.pop("camera", None)
        if cam:
            c = sess.camera
            sess.camera = Camera(
                np.asarray(cam.get("position", c.position), dtype=np.float64),
                np.asarray(cam.get("look_at", c.look_at), dtype=np.float64),
                np.asarray(cam.get("up", c.up), dtype=np.float64),
                float(cam.get("fov", c.fov_y_deg)),
                int(cam.get("width", c.width)),
                int(cam.get("height", c.height)),
            )

    def render(self, buffers):
        self._flush()
        packet = self.session.render_frame(buffers=tuple(buffers))
        reply = {
            "type": "frame",
            "id": packet.frame_id,
            "width": packet.width,
            "height": packet.height,
            "png": base64.b64encode(packet.png_preview()).decode(),
            "timings": {k: round(float(v), 3) for k, v in packet.timings.items()},
            "stats": {
                "sg_iterations": len(self.session.last_fit.loss_trace) - 1
                if self.session.last_fit else 0,
                "sg_loss": float(self.session.last_fit.final_loss)
                if self.session.last_fit else 0.0,
                "specular_sharpness": 2.0 / max(self.session.object.brdf.roughness, 1e-3) ** 4
                if self.session.object else 0.0,
            },
            "buffers": {},
        }
        for name, buf in packet.aux.items():
            arr = np.ascontiguousarray(buf, dtype="<f4")
            reply["buffers"][name] = {
                "shape": list(arr.shape),
                "data": base64.b64encode(arr.tobytes()).decode(),
            }
        return reply


def handle_session(transport, prototype):
    """Message loop for one connection (any transport with recv/send/close)."""
    state = SessionState(prototype)
    while True:
        raw = transport.recv_message()
        if raw is None:
            return
        try:
            msg = _validate_message(json.loads(raw))
        except (json.JSONDecodeError, SessionError, TypeError, KeyError) as e:
            transport.send_message(json.dumps({"type": "error", "message": str(e)}))
            continue
        if msg["type"] == "request_frame":
            reply = state.render(msg.get("buffers", []))
            transport.send_message(json.dumps(reply))
        else:
            try:
                state.apply_edit(msg)
            except SessionError as e:
                transport.send_message(json.dumps({"type": "error", "message": str(e)}))


# ---------------------------------------------------------------------------
# Transports


class LengthPrefixedTransport:
    def __init__(self, sock):
        self.sock = sock

    def _recv_exact(self, n):
        buf = b""
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def recv_message(self, first_bytes=b""):
        header = first_bytes + (self._recv_exact(4 - len(first_bytes)) or b"")
        if len(header) < 4:
            return None
        (length,) = struct.unpack(">I", header)
        if length > 64 * 1024 * 1024:
            return None
        return self._recv_exact(length)

    def send_message(self, text):
        data = text.encode() if isinstance(text, str) else text
        self.sock.sendall(struct.pack(">I", len(data)) + data)


class WebSocketTransport:
    def __init__(self, sock):
        self.sock = sock

    def _recv_exact(self, n):
        buf = b""
        while len(buf) < n:
            chunk = self.sock.recv(n - len(buf))
            if not chunk:
                return None
            buf += chunk
        return buf

    def recv_message(self):
        while True:
            head = self._recv_exact(2)
            if head is None:
                return None
            fin_op, len7 = head
            opcode = fin_op & 0x0F
            masked = len7 & 0x80
            length = len7 & 0x7F
            if length == 126:
                (length,) = struct.unpack(">H", self._recv_exact(2))
            elif length == 127:
                (length,) = struct.unpack(">Q", self._recv_exact(8))
            mask = self._recv_exact(4) if masked else b"\x00" * 4
            payload = self._recv_exact(length) if length else b""
            if payload is None:
                return None
            if masked:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            if opcode == 0x8:  # close
                return None
            if opcode == 0x9:  # ping -> pong
                self._send_frame(0xA, payload)
                continue
            if opcode in (0x1, 0x2):
                return payload

    def _send_frame(self, opcode, payload):
        head = bytes([0x80 | opcode])
        n = len(payload)
        if n < 126:
            head += bytes([n])
        elif n < 65536:
            head += bytes([126]) + struct.pack(">H", n)
        else:
            head += bytes([127]) + struct.pack(">Q", n)
        self.sock.sendall(head + payload)

    def send_message(self, text):
        self._send_frame(0x1, text.encode() if isinstance(text, str) else text)


def _http_handshake(sock, request):
    """Upgrade to WebSocket or serve a static file; returns transport or None."""
    head, _, _body = request.partition(b"\r\n\r\n")
    lines = head.decode("latin1").split("\r\n")
    path = lines[0].split(" ")[1] if len(lines[0].split(" ")) > 1 else "/"
    headers = {}
    for ln in lines[1:]:
        if ":" in ln:
            k, v = ln.split(":", 1)
            headers[k.strip().lower()] = v.strip()
    if headers.get("upgrade", "").lower() == "websocket":
        key = headers.get("sec-websocket-key", "")
        accept = base64.b64encode(
            hashlib.sha1((key + _WS_MAGIC).encode()).digest()
        ).decode()
        sock.sendall(
            (
                "HTTP/1.1 101 Switching Protocols\r\n"
                "Upgrade: websocket\r\nConnection: Upgrade\r\n"
                f"Sec-WebSocket-Accept: {accept}\r\n\r\n"
            ).encode()
        )
        return WebSocketTransport(sock), path
    return None, path


def _serve_static(sock, path, static_dir):
    status, body, mime = "404 Not Found", b"not found", "text/plain"
    if static_dir:
        rel = "index.html" if path in ("/", "") else path.lstrip("/")
        full = (Path(static_dir) / rel).resolve()
        if str(full).startswith(str(Path(static_dir).resolve())) and full.is_file():
            body = full.read_bytes()
            mime = _MIME.get(full.suffix, "application/octet-stream")
            status = "200 OK"
    sock.sendall(
        (
            f"HTTP/1.1 {status}\r\nContent-Type: {mime}\r\n"
            f"Content-Length: {len(body)}\r\nConnection: close\r\n\r\n"
        ).encode()
        + body
    )


class SessionServer:
    def __init__(self, manifest, host="127.0.0.1", port=7878, static_dir=None):
        self.manifest = manifest
        self.host = host
        self.port = port
        self.static_dir = static_dir
        self.prototype = None
        self._sock = None
        self._threads = []
        self.running = False

    def start(self):
        self.prototype = build_session(self.manifest)
        if self.prototype.ssdf is not None and self.prototype.fh is None:
            self.prototype.fh = default_fh()
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((self.host, self.port))
        self.port = self._sock.getsockname()[1]
        self._sock.listen(8)
        self.running = True
        t = threading.Thread(target=self._accept_loop, daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self):
        while self.running:
            try:
                conn, _addr = self._sock.accept()
            except OSError:
                return
            t = threading.Thread(target=self._handle_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _handle_conn(self, conn):
        try:
            first = conn.recv(4, socket.MSG_PEEK)
            if first[:4] in (b"GET ", b"POST", b"HEAD"):
                request = conn.recv(65536)
                transport, path = _http_handshake(conn, request)
                if transport is None:
                    _serve_static(conn, path, self.static_dir)
                    return
            else:
                transport = LengthPrefixedTransport(conn)
            handle_session(transport, self.prototype)
        except (ConnectionError, OSError, struct.error):
            pass
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def stop(self):
        self.running = False
        if self._sock:
            try:
                self._sock.close()
            except OSError:
                pass


def serve(manifest, host="127.0.0.1", port=7878, static_dir=None):
    server = SessionServer(manifest, host, port, static_dir).start()
    print(f"session server on {host}:{server.port} (ctrl-c to stop)")
    try:
        while True:
            threading.Event().wait(3600)
    except KeyboardInterrupt:
        server.stop()
