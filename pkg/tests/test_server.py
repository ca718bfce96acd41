import base64
import hashlib
import json
import os
import socket
import struct

import numpy as np
import pytest

from sginsert.assets import RunManifest, build_session
from sginsert.server import SessionServer


def send_msg(sock, obj):
    data = json.dumps(obj).encode()
    sock.sendall(struct.pack(">I", len(data)) + data)


def recv_msg(sock):
    header = b""
    while len(header) < 4:
        chunk = sock.recv(4 - len(header))
        assert chunk, "connection closed"
        header += chunk
    (length,) = struct.unpack(">I", header)
    buf = b""
    while len(buf) < length:
        buf += sock.recv(length - len(buf))
    return json.loads(buf)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    d = tmp_path_factory.mktemp("srv")
    from sginsert.sg import SGLobe, SGMixture

    env = SGMixture([SGLobe(np.array([0.25, 0.2, 0.95]) / np.linalg.norm([0.25, 0.2, 0.95]),
                            25.0, np.array([6.0, 5.5, 5.0]))])
    env.save(d / "env.sgmix")
    m = RunManifest()
    m.scene = "floor_plane@24"
    m.object = "sphere@2"
    m.env = str(d / "env.sgmix")
    m.res = (40, 24)
    m.seed = 5
    m.incident_res = 16
    m.rays_per_texel = 2
    m.transform = {"position": [0.0, 0.0, -0.3], "rotation": [1, 0, 0, 0], "scale": 0.25}
    return m


@pytest.fixture(scope="module")
def server(manifest):
    srv = SessionServer(manifest, port=0).start()
    yield srv
    srv.stop()


def connect(server):
    s = socket.create_connection(("127.0.0.1", server.port), timeout=30)
    s.settimeout(120)
    return s


class TestNativeProtocol:
    def test_frame_roundtrip_and_cli_equality(self, server, manifest):
        with connect(server) as s:
            send_msg(s, {"type": "request_frame", "buffers": []})
            reply = recv_msg(s)
        assert reply["type"] == "frame"
        assert reply["id"] == 0
        png = base64.b64decode(reply["png"])
        # byte-identical to the CLI render path for the same manifest+seed
        session = build_session(manifest)
        packet = session.render_frame()
        assert png == packet.png_preview()
        assert set(reply["timings"]) == {"incident_ms", "sg_ms", "object_ms",
                                         "composite_ms", "shadow_ms"}

    def test_frame_ids_strictly_increase(self, server):
        with connect(server) as s:
            ids = []
            for _ in range(3):
                send_msg(s, {"type": "request_frame"})
                ids.append(recv_msg(s)["id"])
        assert ids == [0, 1, 2]

    def test_edit_coalescing_last_writer_wins(self, server, manifest):
        with connect(server) as s:
            send_msg(s, {"type": "transform", "position": [0.4, 0.0, -0.2]})
            send_msg(s, {"type": "transform", "position": [-0.3, 0.1, -0.35]})
            send_msg(s, {"type": "request_frame", "buffers": ["mask"]})
            reply = recv_msg(s)
        # reference render with only the second transform applied
        m2 = RunManifest.from_json(manifest.to_json())
        m2.transform = dict(m2.transform, position=[-0.3, 0.1, -0.35])
        ref = build_session(m2).render_frame(buffers=("mask",))
        got = np.frombuffer(base64.b64decode(reply["buffers"]["mask"]["data"]),
                            dtype="<f4").reshape(reply["buffers"]["mask"]["shape"])
        assert np.array_equal(got, ref.aux["mask"].astype(np.float32))

    def test_material_edit_sharpens_specular(self, server):
        with connect(server) as s:
            send_msg(s, {"type": "material", "roughness": 1.0})
            send_msg(s, {"type": "request_frame"})
            rough = recv_msg(s)["stats"]["specular_sharpness"]
            send_msg(s, {"type": "material", "roughness": 0.1})
            send_msg(s, {"type": "request_frame"})
            sharp = recv_msg(s)["stats"]["specular_sharpness"]
        assert sharp > rough * 100

    def test_malformed_message_keeps_session(self, server):
        with connect(server) as s:
            send_msg(s, {"type": "mystery"})
            err = recv_msg(s)
            assert err["type"] == "error"
            send_msg(s, {"no_type": 1})
            err2 = recv_msg(s)
            assert err2["type"] == "error"
            send_msg(s, {"type": "request_frame"})
            assert recv_msg(s)["type"] == "frame"

    def test_no_object_edits_refused(self, manifest):
        m2 = RunManifest.from_json(manifest.to_json())
        m2.object = None
        srv = SessionServer(m2, port=0).start()
        try:
            with connect(srv) as s:
                send_msg(s, {"type": "transform", "position": [0, 0, 0]})
                err = recv_msg(s)
                assert err["type"] == "error"
                assert "no object" in err["message"]
                send_msg(s, {"type": "request_frame"})
                assert recv_msg(s)["type"] == "frame"
        finally:
            srv.stop()

    def test_invalid_edit_values_rejected(self, server):
        with connect(server) as s:
            send_msg(s, {"type": "material", "roughness": 3.0})
            assert recv_msg(s)["type"] == "error"
            send_msg(s, {"type": "transform", "scale": -1.0})
            assert recv_msg(s)["type"] == "error"

    def test_session_isolation(self, server):
        with connect(server) as a, connect(server) as b:
            send_msg(a, {"type": "transform", "position": [0.5, 0.5, -0.2]})
            send_msg(b, {"type": "request_frame", "buffers": ["mask"]})
            rb = recv_msg(b)
            send_msg(a, {"type": "request_frame", "buffers": ["mask"]})
            ra = recv_msg(a)
        ma = np.frombuffer(base64.b64decode(ra["buffers"]["mask"]["data"]), dtype="<f4")
        mb = np.frombuffer(base64.b64decode(rb["buffers"]["mask"]["data"]), dtype="<f4")
        assert not np.array_equal(ma, mb)  # a's edit moved its object only
        assert rb["id"] == 0 and ra["id"] == 0  # independent counters


class TestWebSocket:
    @staticmethod
    def _ws_handshake(sock):
        key = base64.b64encode(os.urandom(16)).decode()
        req = (
            "GET / HTTP/1.1\r\nHost: localhost\r\nUpgrade: websocket\r\n"
            "Connection: Upgrade\r\nSec-WebSocket-Key: " + key +
            "\r\nSec-WebSocket-Version: 13\r\n\r\n"
        )
        sock.sendall(req.encode())
        resp = b""
        while b"\r\n\r\n" not in resp:
            resp += sock.recv(4096)
        assert b"101" in resp.split(b"\r\n")[0]
        accept = base64.b64encode(
            hashlib.sha1((key + "258EAFA5-E914-47DA-95CA-C5AB0DC85B11").encode()).digest()
        ).decode()
        assert accept.encode() in resp

    @staticmethod
    def _ws_send(sock, text):
        payload = text.encode()
        mask = os.urandom(4)
        masked = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
        head = b"\x81"
        n = len(payload)
        if n < 126:
            head += bytes([0x80 | n])
        else:
            head += bytes([0x80 | 126]) + struct.pack(">H", n)
        sock.sendall(head + mask + masked)

    @staticmethod
    def _ws_recv(sock):
        def rx(k):
            buf = b""
            while len(buf) < k:
                chunk = sock.recv(k - len(buf))
                assert chunk
                buf += chunk
            return buf

        fin_op, len7 = rx(2)
        length = len7 & 0x7F
        if length == 126:
            (length,) = struct.unpack(">H", rx(2))
        elif length == 127:
            (length,) = struct.unpack(">Q", rx(8))
        return json.loads(rx(length))

    def test_ws_frame_roundtrip(self, server):
        with connect(server) as s:
            self._ws_handshake(s)
            self._ws_send(s, json.dumps({"type": "request_frame"}))
            reply = self._ws_recv(s)
        assert reply["type"] == "frame"
        assert base64.b64decode(reply["png"])[:4] == b"\x89PNG"


class TestStaticServing:
    def test_static_file(self, manifest, tmp_path):
        (tmp_path / "index.html").write_text("<html>viewer</html>")
        srv = SessionServer(manifest, port=0, static_dir=str(tmp_path)).start()
        try:
            with socket.create_connection(("127.0.0.1", srv.port), timeout=10) as s:
                s.sendall(b"GET / HTTP/1.1\r\nHost: x\r\n\r\n")
                resp = b""
                while True:
                    chunk = s.recv(4096)
                    if not chunk:
                        break
                    resp += chunk
            assert b"200 OK" in resp
            assert b"viewer" in resp
        finally:
            srv.stop()

    def test_missing_file_404(self, manifest, tmp_path):
        srv = SessionServer(manifest, port=0, static_dir=str(tmp_path)).start()
        try:
            with socket.create_connection(("127.0.0.1", srv.port), timeout=10) as s:
                s.sendall(b"GET /nope.js HTTP/1.1\r\nHost: x\r\n\r\n")
                resp = s.recv(65536)
            assert b"404" in resp
        finally:
            srv.stop()
