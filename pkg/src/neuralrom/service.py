"""Interactive session server: one reduced-dynamics loop, streamed to clients.

Transport. The canonical protocol runs over a persistent TCP socket carrying
length-prefixed units: a little-endian u32 byte length, one tag byte (``J``
for UTF-8 JSON, ``B`` for raw binary), then the payload. Control messages are
JSON; a ``surface_frame`` JSON header is followed immediately by one binary
unit holding 3N little-endian f32 vertex positions. The same messages are
also exposed over a built-in WebSocket listener (JSON as text frames, the
position block as a binary frame) so browsers can connect directly.

Session semantics. A single worker steps the simulation at the target rate;
queued client messages are applied between steps, never mid-step, and every
message is acknowledged or errored. Frame numbers increase strictly. A
divergence pauses the loop and broadcasts an error; the session stays
inspectable. With a scripted message log and a fixed seed, replays are
bit-identical (see :meth:`Session.run_frames`).
"""

from __future__ import annotations

import base64
import hashlib
import json
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, NeuralRomError
from .reduced_sim import (
    RemeshEvent,
    ReducedState,
    SurfaceDecoder,
    apply_remesh,
    reduced_step,
    sample_cubature,
)

PROTOCOL_VERSION = 1
TAG_JSON = b"J"
TAG_BINARY = b"B"
TUG_RADIUS_FRACTION = 0.05  # of the mesh bounding-box diagonal

_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"


# ---------------------------------------------------------------------------
# Length-prefixed framing
# ---------------------------------------------------------------------------


def pack_unit(tag: bytes, payload: bytes) -> bytes:
    return struct.pack("<I", len(payload)) + tag + payload


def pack_json(obj: dict) -> bytes:
    return pack_unit(TAG_JSON, json.dumps(obj, separators=(",", ":")).encode("utf-8"))


def read_unit(sock: socket.socket) -> tuple[bytes, bytes] | None:
    header = _read_exact(sock, 5)
    if header is None:
        return None
    (length,) = struct.unpack("<I", header[:4])
    payload = _read_exact(sock, length)
    if payload is None:
        return None
    return header[4:5], payload


def _read_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------


@dataclass
class Tug:
    weights: np.ndarray  # per cubature point, sums to 1 over touched points
    force: np.ndarray


class Session:
    """Owns the reduced state, the cubature scheme, and the message queue."""

    def __init__(self, basis, scenario, seed: int = 0, rate_hz: float = 30.0):
        self.basis = basis
        self.scenario = scenario
        self.seed = seed
        self.rate_hz = float(rate_hz)
        self.mesh_id = scenario.mesh_order[0]
        self.scheme = sample_cubature(
            scenario.meshes[self.mesh_id], scenario.cubature_samples, seed, basis
        )
        self.decoder = SurfaceDecoder(basis, self.scheme.mesh)
        self.state = ReducedState.rest(basis.r, h=scenario.integrator.h)
        self.tug: Tug | None = None
        self.paused = False
        self.frame_no = 0
        self.queue: deque = deque()
        self.queue_lock = threading.Lock()
        self.queue_limit = 256
        self.broadcast = lambda header, blob=None: None  # installed by the transport

    # -- message handling (worker thread only) ------------------------------

    def enqueue(self, msg: dict, reply=None) -> bool:
        """Queue a message; ``reply`` (callable taking a dict) receives the ack."""
        with self.queue_lock:
            if len(self.queue) >= self.queue_limit:
                return False
            self.queue.append((msg, reply))
            return True

    def drain_queue(self) -> list[tuple[dict, object]]:
        with self.queue_lock:
            msgs = list(self.queue)
            self.queue.clear()
        return msgs

    def apply_message(self, msg: dict) -> dict:
        """Apply one control message; returns the ack or error reply."""
        seq = msg.get("seq")
        kind = msg.get("type")
        try:
            if kind == "tug":
                return self._handle_tug(np.asarray(msg["point"], float),
                                        np.asarray(msg["force"], float), seq)
            if kind == "release":
                self.tug = None
                return {"type": "event_ack", "seq": seq, "event": "release"}
            if kind in ("swap_mesh", "load_mesh"):
                return self._handle_swap(msg["id"], seq)
            if kind == "pause":
                self.paused = True
                return {"type": "event_ack", "seq": seq, "event": "pause"}
            if kind == "resume":
                self.paused = False
                return {"type": "event_ack", "seq": seq, "event": "resume"}
            if kind == "set_rate":
                hz = float(msg["hz"])
                if not 0.1 <= hz <= 240.0:
                    return {"type": "error", "seq": seq, "text": f"rate {hz} out of range"}
                self.rate_hz = hz
                return {"type": "event_ack", "seq": seq, "event": "set_rate"}
            return {"type": "error", "seq": seq, "text": f"unknown message type {kind!r}"}
        except (KeyError, TypeError, ValueError) as exc:
            return {"type": "error", "seq": seq, "text": f"malformed {kind} message: {exc}"}
        except NeuralRomError as exc:
            return {"type": "error", "seq": seq, "text": str(exc)}

    def _handle_tug(self, point: np.ndarray, force: np.ndarray, seq) -> dict:
        lo, hi = self.scheme.mesh.bounding_box()
        radius = TUG_RADIUS_FRACTION * float(np.linalg.norm(hi - lo))
        x = self.scheme.points + self.scheme.displacements(self.state.q)
        d = np.linalg.norm(x - point, axis=1)
        w = np.maximum(0.0, 1.0 - d / radius)
        total = w.sum()
        if total <= 0.0:
            self.tug = None
            return {
                "type": "event_ack",
                "seq": seq,
                "event": "tug",
                "warning": "tug point is farther than the tug radius from every cubature point",
            }
        self.tug = Tug(weights=w / total, force=force)
        return {"type": "event_ack", "seq": seq, "event": "tug"}

    def _handle_swap(self, mesh_id: str, seq) -> dict:
        meshes = self.scenario.meshes
        if mesh_id not in meshes:
            return {"type": "error", "seq": seq, "text": f"unknown mesh id {mesh_id!r}"}
        event = RemeshEvent(new_mesh=meshes[mesh_id], time=self.state.t)
        self.scheme = apply_remesh(self.scheme, event, self.basis, self.seed)
        self.decoder = SurfaceDecoder(self.basis, self.scheme.mesh)
        self.mesh_id = mesh_id
        self.tug = None  # weights were tied to the old point set
        self.broadcast(self.topology_message())
        return {"type": "event_ack", "seq": seq, "event": "swap_mesh", "mesh_id": mesh_id}

    # -- stepping ------------------------------------------------------------

    def topology_message(self) -> dict:
        return {
            "type": "mesh_topology",
            "mesh_id": self.mesh_id,
            "vertex_count": len(self.decoder.surface_vertices),
            "faces": self.decoder.compact_faces.tolist(),
        }

    def step_once(self) -> tuple[dict, bytes]:
        """One reduced step plus the broadcast payload for the new frame."""
        extra = None
        if self.tug is not None:
            extra = self.tug.weights[:, None] * self.tug.force
        try:
            self.state = reduced_step(
                self.scheme,
                self.state,
                self.scenario.load,
                self.scenario.material,
                self.scenario.solver,
                extra_forces=extra,
            )
        except DivergenceError as exc:
            self.paused = True
            self.broadcast({"type": "error", "text": f"divergence: {exc}; session paused"})
            raise
        self.frame_no += 1
        positions = self.decoder.positions(self.state.q).astype("<f4")
        header = {
            "type": "surface_frame",
            "frame": self.frame_no,
            "sim_time": self.state.t,
            "count": len(positions),
            "mesh_id": self.mesh_id,
        }
        return header, positions.tobytes()

    def process_pending(self) -> None:
        for msg, reply in self.drain_queue():
            response = self.apply_message(msg)
            if reply is not None:
                reply(response)
            else:
                self.broadcast(response)

    def run_frames(self, n: int, scripted: dict[int, list[dict]] | None = None) -> list[dict]:
        """Deterministic un-paced replay: step n frames, applying scripted
        messages before the step of each listed frame index (0-based).

        Returns the emitted frame headers with their position blocks attached
        under ``"positions"``; used by tests and determinism checks.
        """
        out = []
        scripted = scripted or {}
        for k in range(n):
            for msg in scripted.get(k, []):
                self.apply_message(msg)
            if self.paused:
                continue
            header, blob = self.step_once()
            header["positions"] = blob
            out.append(header)
        return out

    def loop(self, stop: threading.Event) -> None:
        """Paced live loop: apply queued messages between steps, broadcast."""
        next_tick = time.monotonic()
        while not stop.is_set():
            self.process_pending()
            if self.paused:
                time.sleep(0.01)
                next_tick = time.monotonic()
                continue
            try:
                header, blob = self.step_once()
            except DivergenceError:
                continue  # paused; loop stays alive for inspection
            self.broadcast(header, blob)
            next_tick += 1.0 / self.rate_hz
            delay = next_tick - time.monotonic()
            if delay > 0:
                time.sleep(delay)
            else:
                next_tick = time.monotonic()


# ---------------------------------------------------------------------------
# TCP + WebSocket transports
# ---------------------------------------------------------------------------


class _Client:
    def __init__(self, sock: socket.socket, kind: str):
        self.sock = sock
        self.kind = kind  # "tcp" | "ws"
        self.lock = threading.Lock()
        self.alive = True

    def send_json(self, obj: dict) -> None:
        try:
            with self.lock:
                if self.kind == "tcp":
                    self.sock.sendall(pack_json(obj))
                else:
                    self.sock.sendall(_ws_frame(0x1, json.dumps(obj).encode("utf-8")))
        except OSError:
            self.alive = False

    def send_binary(self, blob: bytes) -> None:
        try:
            with self.lock:
                if self.kind == "tcp":
                    self.sock.sendall(pack_unit(TAG_BINARY, blob))
                else:
                    self.sock.sendall(_ws_frame(0x2, blob))
        except OSError:
            self.alive = False


def _ws_frame(opcode: int, payload: bytes) -> bytes:
    head = bytes([0x80 | opcode])
    n = len(payload)
    if n < 126:
        head += bytes([n])
    elif n < 1 << 16:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


def _ws_read_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    head = _read_exact(sock, 2)
    if head is None:
        return None
    opcode = head[0] & 0x0F
    masked = head[1] & 0x80
    n = head[1] & 0x7F
    if n == 126:
        ext = _read_exact(sock, 2)
        if ext is None:
            return None
        (n,) = struct.unpack(">H", ext)
    elif n == 127:
        ext = _read_exact(sock, 8)
        if ext is None:
            return None
        (n,) = struct.unpack(">Q", ext)
    mask = b"\x00" * 4
    if masked:
        mask = _read_exact(sock, 4)
        if mask is None:
            return None
    payload = _read_exact(sock, n) if n else b""
    if payload is None:
        return None
    if masked:
        payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
    return opcode, payload


def _ws_handshake(sock: socket.socket) -> bool:
    data = b""
    while b"\r\n\r\n" not in data:
        chunk = sock.recv(4096)
        if not chunk:
            return False
        data += chunk
        if len(data) > 65536:
            return False
    headers = {}
    for line in data.split(b"\r\n")[1:]:
        if b":" in line:
            k, v = line.split(b":", 1)
            headers[k.strip().lower()] = v.strip()
    key = headers.get(b"sec-websocket-key")
    if key is None:
        sock.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
        return False
    accept = base64.b64encode(hashlib.sha1(key + _WS_GUID.encode()).digest())
    sock.sendall(
        b"HTTP/1.1 101 Switching Protocols\r\n"
        b"Upgrade: websocket\r\nConnection: Upgrade\r\n"
        b"Sec-WebSocket-Accept: " + accept + b"\r\n\r\n"
    )
    return True


class SimService:
    """Listeners plus the single simulation worker for one session."""

    def __init__(self, basis, scenario, port=0, ws_port=0, seed=0, rate_hz=30.0):
        self.session = Session(basis, scenario, seed=seed, rate_hz=rate_hz)
        self.session.broadcast = self._broadcast
        self.clients: list[_Client] = []
        self.clients_lock = threading.Lock()
        self.stop_event = threading.Event()

        self.tcp_server = socket.create_server(("127.0.0.1", port))
        self.ws_server = socket.create_server(("127.0.0.1", ws_port)) if ws_port is not None else None
        self.threads = [
            threading.Thread(target=self._accept_loop, args=(self.tcp_server, "tcp"), daemon=True),
            threading.Thread(target=self.session.loop, args=(self.stop_event,), daemon=True),
        ]
        if self.ws_server is not None:
            self.threads.append(
                threading.Thread(target=self._accept_loop, args=(self.ws_server, "ws"), daemon=True)
            )
        for t in self.threads:
            t.start()

    @property
    def address(self) -> str:
        host, port = self.tcp_server.getsockname()
        return f"{host}:{port}"

    @property
    def ws_address(self) -> str | None:
        if self.ws_server is None:
            return None
        host, port = self.ws_server.getsockname()
        return f"ws://{host}:{port}"

    def _broadcast(self, header: dict, blob: bytes | None = None) -> None:
        with self.clients_lock:
            clients = list(self.clients)
        for c in clients:
            c.send_json(header)
            if blob is not None:
                c.send_binary(blob)
        self._evict_dead()

    def _evict_dead(self) -> None:
        with self.clients_lock:
            self.clients = [c for c in self.clients if c.alive]

    def _accept_loop(self, server: socket.socket, kind: str) -> None:
        while not self.stop_event.is_set():
            try:
                sock, _ = server.accept()
            except OSError:
                return
            threading.Thread(
                target=self._serve_client, args=(sock, kind), daemon=True
            ).start()

    def _serve_client(self, sock: socket.socket, kind: str) -> None:
        try:
            if kind == "ws" and not _ws_handshake(sock):
                sock.close()
                return
            client = _Client(sock, kind)
            # handshake: expect hello, answer hello + current topology
            first = self._read_json(sock, kind)
            if not first or first.get("type") != "hello":
                client.send_json({"type": "error", "text": "expected hello"})
                sock.close()
                return
            if first.get("version") != PROTOCOL_VERSION:
                client.send_json(
                    {
                        "type": "error",
                        "text": f"protocol version mismatch: server speaks {PROTOCOL_VERSION}",
                    }
                )
                sock.close()
                return
            client.send_json(
                {
                    "type": "hello",
                    "version": PROTOCOL_VERSION,
                    "latent_dim": self.session.basis.r,
                    "mesh_ids": list(self.session.scenario.mesh_order),
                    "rate_hz": self.session.rate_hz,
                }
            )
            client.send_json(self.session.topology_message())
            with self.clients_lock:
                self.clients.append(client)
            while not self.stop_event.is_set():
                msg = self._read_json(sock, kind)
                if msg is None:
                    break
                if not self.session.enqueue(msg, reply=client.send_json):
                    client.send_json(
                        {"type": "error", "seq": msg.get("seq"), "text": "message queue full"}
                    )
        except OSError:
            pass
        finally:
            sock.close()
            self._evict_dead()

    def _read_json(self, sock: socket.socket, kind: str) -> dict | None:
        while True:
            if kind == "tcp":
                unit = read_unit(sock)
                if unit is None:
                    return None
                tag, payload = unit
                if tag != TAG_JSON:
                    continue  # clients only send JSON; ignore stray binary
                return json.loads(payload.decode("utf-8"))
            frame = _ws_read_frame(sock)
            if frame is None:
                return None
            opcode, payload = frame
            if opcode == 0x8:  # close
                return None
            if opcode == 0x9:  # ping -> pong
                sock.sendall(_ws_frame(0xA, payload))
                continue
            if opcode == 0x1:
                return json.loads(payload.decode("utf-8"))

    def run_forever(self) -> None:
        while not self.stop_event.is_set():
            time.sleep(0.2)

    def shutdown(self) -> None:
        self.stop_event.set()
        self.tcp_server.close()
        if self.ws_server is not None:
            self.ws_server.close()
        with self.clients_lock:
            for c in self.clients:
                try:
                    c.sock.close()
                except OSError:
                    pass
            self.clients.clear()
