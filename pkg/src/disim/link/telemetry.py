"""Command/telemetry endpoint: newline-delimited JSON over a stream socket.

Clients may speak either raw TCP (one JSON object per line) or WebSocket:
the server sniffs the first bytes of a connection and upgrades when it sees
an HTTP GET, so browser consoles and headless tools share one port and one
message vocabulary. Outbound messages are broadcast states; inbound lines
are commands handed to the simulation loop. Malformed input gets an error
reply on the offending connection only.
"""

from __future__ import annotations

import base64
import hashlib
import json
import queue
import socket
import struct
import threading

DEFAULT_PORT = 7421
_WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
_OUTBOX_LIMIT = 256


def _ws_accept_token(key: str) -> str:
    digest = hashlib.sha1((key + _WS_GUID).encode()).digest()
    return base64.b64encode(digest).decode()


def _ws_encode_text(payload: bytes) -> bytes:
    n = len(payload)
    head = bytes([0x81])  # FIN + text
    if n < 126:
        head += bytes([n])
    elif n < 1 << 16:
        head += bytes([126]) + struct.pack(">H", n)
    else:
        head += bytes([127]) + struct.pack(">Q", n)
    return head + payload


class _WsConnectionClosed(Exception):
    pass


class _Client:
    """One connection; reader thread resolves raw-vs-websocket then feeds
    commands; writer thread drains the outbox."""

    def __init__(self, server: "TelemetryServer", conn: socket.socket, cid: int):
        self.server = server
        self.conn = conn
        self.cid = cid
        self.mode: str | None = None   # "raw" | "ws"
        self.outbox: queue.Queue = queue.Queue()
        self.alive = True
        self._ready = threading.Event()
        self._buf = b""
        threading.Thread(target=self._read_loop, daemon=True).start()
        threading.Thread(target=self._write_loop, daemon=True).start()

    # -- outbound ----------------------------------------------------------

    def send(self, text: str):
        if not self.alive:
            return
        if self.outbox.qsize() > _OUTBOX_LIMIT:  # shed stale telemetry
            try:
                self.outbox.get_nowait()
            except queue.Empty:
                pass
        self.outbox.put(text)

    def _write_loop(self):
        self._ready.wait(timeout=10.0)
        while self.alive:
            try:
                text = self.outbox.get(timeout=0.5)
            except queue.Empty:
                continue
            try:
                if self.mode == "ws":
                    self.conn.sendall(_ws_encode_text(text.encode()))
                else:
                    self.conn.sendall(text.encode() + b"\n")
            except OSError:
                self.close()

    # -- inbound -----------------------------------------------------------

    def _recv_more(self) -> bool:
        try:
            chunk = self.conn.recv(4096)
        except OSError:
            return False
        if not chunk:
            return False
        self._buf += chunk
        return True

    def _read_loop(self):
        try:
            while self.alive and len(self._buf) < 4:
                if not self._recv_more():
                    self.close()
                    return
            if self._buf.startswith(b"GET "):
                self.mode = "ws"
                self._handshake_ws()
            else:
                self.mode = "raw"
            self._ready.set()
            if self.mode == "ws":
                self._ws_read_loop()
            else:
                self._raw_read_loop()
        except (OSError, _WsConnectionClosed):
            pass
        finally:
            self.close()

    def _handshake_ws(self):
        while b"\r\n\r\n" not in self._buf:
            if len(self._buf) > 65536 or not self._recv_more():
                raise _WsConnectionClosed
        raw, self._buf = self._buf.split(b"\r\n\r\n", 1)
        key = None
        for line in raw.decode("latin-1").split("\r\n")[1:]:
            if ":" in line:
                name, value = line.split(":", 1)
                if name.strip().lower() == "sec-websocket-key":
                    key = value.strip()
        if key is None:
            self.conn.sendall(b"HTTP/1.1 400 Bad Request\r\n\r\n")
            raise _WsConnectionClosed
        response = (
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {_ws_accept_token(key)}\r\n\r\n")
        self.conn.sendall(response.encode())

    def _raw_read_loop(self):
        while self.alive:
            while b"\n" not in self._buf:
                if not self._recv_more():
                    return
            line, self._buf = self._buf.split(b"\n", 1)
            if line.strip():
                self._handle_line(line.decode("utf-8", "replace"))

    def _ws_need(self, n: int):
        while len(self._buf) < n:
            if not self._recv_more():
                raise _WsConnectionClosed

    def _ws_read_loop(self):
        while self.alive:
            self._ws_need(2)
            b0, b1 = self._buf[0], self._buf[1]
            opcode = b0 & 0x0F
            masked = bool(b1 & 0x80)
            length = b1 & 0x7F
            offset = 2
            if length == 126:
                self._ws_need(4)
                length = struct.unpack(">H", self._buf[2:4])[0]
                offset = 4
            elif length == 127:
                self._ws_need(10)
                length = struct.unpack(">Q", self._buf[2:10])[0]
                offset = 10
            mask = b""
            if masked:
                self._ws_need(offset + 4)
                mask = self._buf[offset:offset + 4]
                offset += 4
            self._ws_need(offset + length)
            payload = self._buf[offset:offset + length]
            self._buf = self._buf[offset + length:]
            if masked:
                payload = bytes(b ^ mask[i % 4] for i, b in enumerate(payload))
            if opcode == 0x8:  # close
                try:
                    self.conn.sendall(bytes([0x88, 0]))
                except OSError:
                    pass
                raise _WsConnectionClosed
            if opcode == 0x9:  # ping -> pong
                self.conn.sendall(bytes([0x8A, len(payload)]) + payload)
                continue
            if opcode == 0x1:
                for line in payload.decode("utf-8", "replace").splitlines():
                    if line.strip():
                        self._handle_line(line)

    def _handle_line(self, line: str):
        try:
            msg = json.loads(line)
        except json.JSONDecodeError:
            self.send(json.dumps({"type": "error", "reason": "malformed json"},
                                 sort_keys=True))
            return
        if not isinstance(msg, dict) or "type" not in msg:
            self.send(json.dumps(
                {"type": "error", "reason": "command must be an object with a 'type'"},
                sort_keys=True))
            return
        self.server.commands.put((self, msg))

    def close(self):
        if not self.alive:
            return
        self.alive = False
        try:
            self.conn.close()
        except OSError:
            pass
        self.server._forget(self)


class TelemetryServer:
    """Accepts clients and shuttles JSON lines both ways; thread-safe."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT):
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._sock.bind((host, port))
        self._sock.listen(8)
        self.host, self.port = self._sock.getsockname()[:2]
        self.commands: queue.Queue = queue.Queue()
        self._clients: set = set()
        self._lock = threading.Lock()
        self._closing = False
        self._next_cid = 0
        threading.Thread(target=self._accept_loop, daemon=True).start()

    def _accept_loop(self):
        while not self._closing:
            try:
                conn, _ = self._sock.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            with self._lock:
                self._next_cid += 1
                self._clients.add(_Client(self, conn, self._next_cid))

    def _forget(self, client: _Client):
        with self._lock:
            self._clients.discard(client)

    @property
    def client_count(self) -> int:
        with self._lock:
            return len(self._clients)

    def publish(self, message: dict):
        text = json.dumps(message, sort_keys=True)
        with self._lock:
            clients = list(self._clients)
        for c in clients:
            c.send(text)

    def poll_commands(self) -> list:
        out = []
        while True:
            try:
                out.append(self.commands.get_nowait())
            except queue.Empty:
                return out

    def reply(self, client: _Client, message: dict):
        client.send(json.dumps(message, sort_keys=True))

    def close(self):
        self._closing = True
        try:
            self._sock.close()
        except OSError:
            pass
        with self._lock:
            clients = list(self._clients)
        for c in clients:
            c.close()
