"""Framed wire protocol between the feature party and the clean room.

Frame layout (little-endian)::

    magic "CVR1" | version u8 | type u8 | payload length u32 | payload

The clean room only ever sends back batch aggregates: ``HelloAck``,
``AggGrad`` and ``Error``.
"""
from __future__ import annotations

import dataclasses
import logging
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

import numpy as np

from cleanroom import compression, privacy
from cleanroom.compression import Codec, CompressedGrads

log = logging.getLogger(__name__)

MAGIC = b"CVR1"
VERSION = 1
HEADER = struct.Struct("<4sBBI")
HEADER_SIZE = HEADER.size  # 10
MAX_PAYLOAD = 1 << 31

T_HELLO = 1
T_HELLO_ACK = 2
T_FORWARD_BATCH = 3
T_AGG_GRAD = 4
T_END_SESSION = 5
T_ERROR = 6

E_BAD_FRAME = 1
E_CONFIG = 2
E_UNKNOWN_SAMPLE = 3
E_UNEXPECTED = 4
E_INTERNAL = 5

_CFG = struct.Struct("<BIIBBBdBBBQ32s")
_FWD = struct.Struct("<QIIBBB")  # batch_id, b, param_count, codec id, codec bits, logit width
FORWARD_FIXED = _FWD.size
_AGG = struct.Struct("<QBI")  # batch_id, value width, count


class ProtocolError(Exception):
    def __init__(self, message: str, code: int = E_BAD_FRAME):
        super().__init__(message)
        self.code = code


class RemoteError(ProtocolError):
    """The peer answered with an ``Error`` message."""


class SessionRejected(ProtocolError):
    pass


# -- messages -------------------------------------------------------------------


@dataclass(frozen=True)
class SessionConfig:
    batch_size: int
    param_count: int
    codec: Codec = Codec()
    dp: privacy.PrivacyBudget = privacy.PrivacyBudget()
    debias: bool = True
    reduction: str = "sum"
    report_loss: bool = False
    seed: int = 0
    model_signature: bytes = bytes(32)
    version: int = VERSION

    def __post_init__(self):
        if self.batch_size < 1 or self.param_count < 1:
            raise ProtocolError("batch_size and param_count must be >= 1", E_CONFIG)
        if len(self.model_signature) != 32:
            raise ProtocolError("model signature must be 32 bytes", E_CONFIG)
        if self.reduction not in ("sum", "mean"):
            raise ProtocolError(f"unknown reduction {self.reduction!r}", E_CONFIG)

    @property
    def loss_mode(self) -> privacy.LossMode:
        q = self.dp.keep_prob
        return privacy.LossMode(q if self.debias and q < 1.0 else None, self.reduction)

    @property
    def wide(self) -> bool:
        """float64 logits and aggregates (debug wire)."""
        return self.codec.kind == "raw64"

    def mismatch(self, other: "SessionConfig") -> str | None:
        for name in self.__dataclass_fields__:
            if getattr(self, name) != getattr(other, name):
                return f"{name} mismatch: {getattr(other, name)!r} != expected {getattr(self, name)!r}"
        return None

    def pack(self) -> bytes:
        return _CFG.pack(
            self.version, self.batch_size, self.param_count, self.codec.codec_id, self.codec.bits,
            int(self.dp.mode == "label_dp"), float(self.dp.epsilon or 0.0), int(self.debias),
            int(self.reduction == "mean"), int(self.report_loss), self.seed, self.model_signature,
        )

    @classmethod
    def unpack(cls, payload: bytes) -> "SessionConfig":
        if len(payload) != _CFG.size:
            raise ProtocolError("truncated payload: session config")
        ver, b, f, cid, bits, dp, eps, debias, mean, rl, seed, sig = _CFG.unpack(payload)
        try:
            codec = Codec.from_id(cid, bits)
            budget = privacy.PrivacyBudget("label_dp", eps) if dp else privacy.PrivacyBudget()
        except ValueError as e:
            raise ProtocolError(f"bad session config: {e}") from None
        return cls(b, f, codec, budget, bool(debias), "mean" if mean else "sum", bool(rl), seed, sig, ver)


@dataclass(frozen=True)
class Hello:
    config: SessionConfig


@dataclass(frozen=True)
class HelloAck:
    accept: bool
    reason: str = ""


@dataclass(frozen=True, eq=False)
class ForwardBatch:
    batch_id: int
    sample_ids: np.ndarray  # uint64
    logits: np.ndarray
    grads: CompressedGrads
    wide: bool = False

    def __eq__(self, other):
        return (
            isinstance(other, ForwardBatch)
            and self.batch_id == other.batch_id
            and self.wide == other.wide
            and np.array_equal(self.sample_ids, other.sample_ids)
            and np.array_equal(self.logits, other.logits)
            and self.grads == other.grads
        )


@dataclass(frozen=True, eq=False)
class AggGrad:
    batch_id: int
    gradient: np.ndarray
    loss_sum: float | None = None
    wide: bool = False

    def __eq__(self, other):
        return (
            isinstance(other, AggGrad)
            and self.batch_id == other.batch_id
            and self.wide == other.wide
            and np.array_equal(self.gradient, other.gradient)
            and (self.loss_sum == other.loss_sum)
        )


@dataclass(frozen=True)
class EndSession:
    pass


@dataclass(frozen=True)
class Error:
    code: int
    text: str


# Messages each side may emit; the clean room's set carries no per-sample field.
FEATURE_PARTY_MESSAGES = (Hello, ForwardBatch, EndSession, Error)
CLEAN_ROOM_MESSAGES = (HelloAck, AggGrad, Error)


def _str(text: str) -> bytes:
    raw = text.encode("utf-8")[:65535]
    return struct.pack("<H", len(raw)) + raw


def _read_str(payload: bytes, pos: int) -> tuple[str, int]:
    if pos + 2 > len(payload):
        raise ProtocolError("truncated payload: string length")
    (n,) = struct.unpack_from("<H", payload, pos)
    if pos + 2 + n > len(payload):
        raise ProtocolError("truncated payload: string")
    return payload[pos + 2:pos + 2 + n].decode("utf-8", errors="replace"), pos + 2 + n


def _frame(mtype: int, payload: bytes) -> bytes:
    if len(payload) >= MAX_PAYLOAD:
        raise ProtocolError("length overflow")
    return HEADER.pack(MAGIC, VERSION, mtype, len(payload)) + payload


def encode_message(m) -> bytes:
    if isinstance(m, Hello):
        return _frame(T_HELLO, m.config.pack())
    if isinstance(m, HelloAck):
        return _frame(T_HELLO_ACK, struct.pack("<B", int(m.accept)) + _str(m.reason))
    if isinstance(m, ForwardBatch):
        b = len(m.sample_ids)
        if len(m.logits) != b or m.grads.batch_size != b:
            raise ProtocolError("forward batch fields disagree on batch size")
        ldt = "<f8" if m.wide else "<f4"
        g = m.grads
        head = _FWD.pack(m.batch_id, b, g.param_count, g.codec_id, g.bits, 8 if m.wide else 4)
        body = np.asarray(m.sample_ids, dtype="<u8").tobytes() + np.asarray(m.logits).astype(ldt).tobytes()
        return _frame(T_FORWARD_BATCH, head + body + g.payload)
    if isinstance(m, AggGrad):
        vdt = "<f8" if m.wide else "<f4"
        vec = np.asarray(m.gradient).astype(vdt)
        tail = struct.pack("<B", 0) if m.loss_sum is None else struct.pack("<Bd", 1, m.loss_sum)
        return _frame(T_AGG_GRAD, _AGG.pack(m.batch_id, 8 if m.wide else 4, vec.size) + vec.tobytes() + tail)
    if isinstance(m, EndSession):
        return _frame(T_END_SESSION, b"")
    if isinstance(m, Error):
        return _frame(T_ERROR, struct.pack("<H", m.code) + _str(m.text))
    raise ProtocolError(f"cannot encode {type(m).__name__}")


def parse_header(header: bytes) -> tuple[int, int]:
    if len(header) < HEADER_SIZE:
        raise ProtocolError("truncated payload: frame header")
    magic, version, mtype, length = HEADER.unpack(header[:HEADER_SIZE])
    if magic != MAGIC:
        raise ProtocolError("bad magic")
    if version != VERSION:
        raise ProtocolError(f"version mismatch: got {version}, expected {VERSION}")
    if length >= MAX_PAYLOAD:
        raise ProtocolError("length overflow")
    return mtype, length


def decode_message(frame: bytes):
    mtype, length = parse_header(frame)
    payload = frame[HEADER_SIZE:]
    if len(payload) < length:
        raise ProtocolError("truncated payload")
    if len(payload) > length:
        raise ProtocolError("length overflow: trailing bytes after payload")
    try:
        return _decode_payload(mtype, payload)
    except struct.error as e:
        raise ProtocolError(f"truncated payload: {e}") from None


def _decode_payload(mtype: int, payload: bytes):
    if mtype == T_HELLO:
        return Hello(SessionConfig.unpack(payload))
    if mtype == T_HELLO_ACK:
        (accept,) = struct.unpack_from("<B", payload, 0)
        reason, pos = _read_str(payload, 1)
        _expect_end(payload, pos)
        return HelloAck(bool(accept), reason)
    if mtype == T_FORWARD_BATCH:
        batch_id, b, f, cid, bits, width = _FWD.unpack_from(payload, 0)
        if width not in (4, 8):
            raise ProtocolError(f"bad logit width {width}")
        pos = FORWARD_FIXED
        need = pos + 8 * b + width * b
        if len(payload) < need:
            raise ProtocolError("truncated payload: forward batch")
        ids = np.frombuffer(payload, "<u8", b, pos).astype(np.uint64)
        logits = np.frombuffer(payload, "<f8" if width == 8 else "<f4", b, pos + 8 * b).astype(np.float64)
        try:
            codec = Codec.from_id(cid, bits)
        except ValueError as e:
            raise ProtocolError(str(e)) from None
        body = payload[need:]
        expect = compression.wire_bytes(b, f, codec)
        if len(body) != expect:
            raise ProtocolError(f"truncated payload: gradient block has {len(body)} bytes, expected {expect}")
        return ForwardBatch(batch_id, ids, logits, CompressedGrads(cid, bits, b, f, bytes(body)), width == 8)
    if mtype == T_AGG_GRAD:
        batch_id, width, count = _AGG.unpack_from(payload, 0)
        if width not in (4, 8):
            raise ProtocolError(f"bad value width {width}")
        pos = _AGG.size + width * count
        if len(payload) < pos + 1:
            raise ProtocolError("truncated payload: aggregate gradient")
        vec = np.frombuffer(payload, "<f8" if width == 8 else "<f4", count, _AGG.size).astype(np.float64)
        (has_loss,) = struct.unpack_from("<B", payload, pos)
        loss_sum = None
        if has_loss:
            (loss_sum,) = struct.unpack_from("<d", payload, pos + 1)
            pos += 8
        _expect_end(payload, pos + 1)
        return AggGrad(batch_id, vec, loss_sum, width == 8)
    if mtype == T_END_SESSION:
        _expect_end(payload, 0)
        return EndSession()
    if mtype == T_ERROR:
        (code,) = struct.unpack_from("<H", payload, 0)
        text, pos = _read_str(payload, 2)
        _expect_end(payload, pos)
        return Error(code, text)
    raise ProtocolError(f"unknown message type {mtype}")


def _expect_end(payload: bytes, pos: int) -> None:
    if pos != len(payload):
        raise ProtocolError("length overflow: trailing bytes in payload")


# -- transports -------------------------------------------------------------------


class Transport:
    """Moves whole frames. ``recv`` returns one complete frame as bytes."""

    def send(self, frame: bytes) -> None:
        raise NotImplementedError

    def recv(self) -> bytes:
        raise NotImplementedError

    def close(self) -> None:
        pass


class LoopbackTransport(Transport):
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue, timeout: float | None = 60.0):
        self.inbox, self.outbox, self.timeout = inbox, outbox, timeout

    def send(self, frame: bytes) -> None:
        self.outbox.put(bytes(frame))

    def recv(self) -> bytes:
        try:
            frame = self.inbox.get(timeout=self.timeout)
        except queue.Empty:
            raise ProtocolError("loopback receive timed out", E_INTERNAL) from None
        if frame is None:
            raise ConnectionError("peer closed")
        return frame

    def close(self) -> None:
        self.outbox.put(None)


def loopback_pair(timeout: float | None = 60.0) -> tuple[LoopbackTransport, LoopbackTransport]:
    a, b = queue.Queue(), queue.Queue()
    return LoopbackTransport(a, b, timeout), LoopbackTransport(b, a, timeout)


class TcpTransport(Transport):
    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    @classmethod
    def connect(cls, host: str, port: int, timeout: float = 30.0) -> "TcpTransport":
        sock = socket.create_connection((host, port), timeout=timeout)
        sock.settimeout(None)
        return cls(sock)

    def send(self, frame: bytes) -> None:
        self.sock.sendall(frame)

    def _read(self, n: int) -> bytes:
        buf = bytearray()
        while len(buf) < n:
            chunk = self.sock.recv(min(n - len(buf), 1 << 20))
            if not chunk:
                raise ConnectionError("peer closed")
            buf += chunk
        return bytes(buf)

    def recv(self) -> bytes:
        header = self._read(HEADER_SIZE)
        _, length = parse_header(header)
        return header + self._read(length)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def parse_address(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {text!r}")
    return host, int(port)


# -- clean room ---------------------------------------------------------------------


@dataclass
class SessionSummary:
    batches: int = 0
    errors: int = 0
    accepted: bool = False
    reason: str = ""


class CleanRoom:
    """Label-side session handler.

    Holds the label store (flipped once at load when label DP is on) and,
    per batch, does only a join, an element-wise loss gradient and one
    matrix-vector product.
    """

    def __init__(
        self,
        label_store: dict[int, int],
        config: SessionConfig,
        flip_seed: int | None = None,
        adopt_model: bool = False,
    ):
        self.config = config
        # when set, param_count and model_signature come from each Hello; the
        # privacy, codec and batching terms stay pinned by the clean room
        self.adopt_model = adopt_model
        self.flip_mask: dict[int, int] | None = None
        if config.dp.mode == "label_dp":
            ids = sorted(label_store)
            y = np.array([label_store[i] for i in ids], dtype=np.int8)
            seed = config.seed if flip_seed is None else flip_seed
            flipped = privacy.flip_labels(y, config.dp.keep_prob, seed)
            self.labels = dict(zip(ids, flipped.labels.tolist()))
        else:
            self.labels = dict(label_store)

    def session_config(self, offered: SessionConfig) -> SessionConfig:
        if not self.adopt_model:
            return self.config
        return dataclasses.replace(self.config, param_count=offered.param_count,
                                   model_signature=offered.model_signature)

    def handle_hello(self, msg) -> HelloAck:
        if not isinstance(msg, Hello):
            return HelloAck(False, f"expected Hello, got {type(msg).__name__}")
        why = self.session_config(msg.config).mismatch(msg.config)
        return HelloAck(why is None, why or "")

    def aggregate(self, msg: ForwardBatch, config: SessionConfig | None = None) -> AggGrad:
        cfg = config or self.config
        ids = msg.sample_ids.tolist()
        if len(set(ids)) != len(ids):
            raise ProtocolError("duplicate sample ids in batch", E_UNEXPECTED)
        if len(ids) != cfg.batch_size or msg.grads.param_count != cfg.param_count:
            raise ProtocolError("batch shape does not match session config", E_CONFIG)
        try:
            y = np.array([self.labels[i] for i in ids], dtype=np.int8)
        except KeyError as e:
            raise ProtocolError(f"unknown sample_id {e.args[0]}", E_UNKNOWN_SAMPLE) from None
        try:
            G = compression.decode(msg.grads, expect=cfg.codec).G
        except ValueError as e:
            raise ProtocolError(str(e), E_CONFIG) from None
        mode = cfg.loss_mode
        dl_dz = privacy.loss_grad_wrt_logit(msg.logits, y, mode)
        loss_sum = privacy.loss(msg.logits, y, mode) if cfg.report_loss else None
        return AggGrad(msg.batch_id, G.T @ dl_dz, loss_sum, cfg.wide)

    def serve(self, transport: Transport) -> SessionSummary:
        summary = SessionSummary()
        try:
            hello = decode_message(transport.recv())
            ack = self.handle_hello(hello)
        except ProtocolError as e:
            transport.send(encode_message(Error(e.code, str(e))))
            summary.reason = str(e)
            return summary
        transport.send(encode_message(ack))
        summary.accepted, summary.reason = ack.accept, ack.reason
        if not ack.accept:
            log.info("rejected session: %s", ack.reason)
            return summary
        cfg = self.session_config(hello.config)
        while True:
            try:
                frame = transport.recv()
            except (ConnectionError, OSError):
                log.warning("feature party disconnected without EndSession")
                return summary
            try:
                msg = decode_message(frame)
                if isinstance(msg, EndSession):
                    return summary
                if not isinstance(msg, ForwardBatch):
                    raise ProtocolError(f"unexpected {type(msg).__name__}", E_UNEXPECTED)
                reply = self.aggregate(msg, cfg)
                summary.batches += 1
            except ProtocolError as e:
                summary.errors += 1
                reply = Error(e.code, str(e))
            transport.send(encode_message(reply))


def cleanroom_serve(label_store: dict[int, int], cfg: SessionConfig, transport: Transport) -> SessionSummary:
    return CleanRoom(label_store, cfg).serve(transport)


class TcpCleanRoomServer:
    """Accepts connections and serves one session per connection, each in its own thread."""

    def __init__(self, room: CleanRoom, host: str = "127.0.0.1", port: int = 0):
        self.room = room
        self.sock = socket.create_server((host, port))
        self.address = self.sock.getsockname()[:2]
        self.summaries: list[SessionSummary] = []
        self._threads: list[threading.Thread] = []

    def serve(self, sessions: int | None = 1) -> list[SessionSummary]:
        served = 0
        try:
            while sessions is None or served < sessions:
                conn, _ = self.sock.accept()
                t = threading.Thread(target=self._run, args=(TcpTransport(conn),), daemon=True)
                t.start()
                self._threads.append(t)
                served += 1
            for t in self._threads:
                t.join()
        finally:
            self.sock.close()
        return self.summaries

    def _run(self, transport: TcpTransport) -> None:
        try:
            self.summaries.append(self.room.serve(transport))
        finally:
            transport.close()

    def start(self, sessions: int | None = 1) -> threading.Thread:
        t = threading.Thread(target=self.serve, args=(sessions,), daemon=True)
        t.start()
        return t


def start_loopback_cleanroom(label_store, cfg: SessionConfig, flip_seed: int | None = None):
    """Run a clean room on a background thread; returns the client transport and the thread."""
    client, server = loopback_pair()
    room = CleanRoom(label_store, cfg, flip_seed)
    result: list[SessionSummary] = []
    t = threading.Thread(target=lambda: result.append(room.serve(server)), daemon=True)
    t.start()
    t.result = result  # type: ignore[attr-defined]
    return client, t


# -- feature party -------------------------------------------------------------------


@dataclass
class BatchTraffic:
    batch_id: int
    bytes_up: int
    bytes_down: int
    grad_payload: int


@dataclass
class CommReport:
    bytes_up: int = 0
    bytes_down: int = 0
    per_batch: list[BatchTraffic] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "bytes_up": self.bytes_up,
            "bytes_down": self.bytes_down,
            "per_batch": [vars(t) for t in self.per_batch],
        }


class FeaturePartyClient:
    def __init__(self, transport: Transport, config: SessionConfig):
        self.transport = transport
        self.config = config
        self.report = CommReport()
        self.open = False

    def _send(self, msg) -> int:
        frame = encode_message(msg)
        self.transport.send(frame)
        self.report.bytes_up += len(frame)
        return len(frame)

    def _recv(self):
        frame = self.transport.recv()
        self.report.bytes_down += len(frame)
        return decode_message(frame), len(frame)

    def hello(self) -> None:
        self._send(Hello(self.config))
        msg, _ = self._recv()
        if isinstance(msg, Error):
            raise RemoteError(msg.text, msg.code)
        if not isinstance(msg, HelloAck):
            raise ProtocolError(f"expected HelloAck, got {type(msg).__name__}", E_UNEXPECTED)
        if not msg.accept:
            raise SessionRejected(msg.reason, E_CONFIG)
        self.open = True

    def exchange(self, batch_id: int, sample_ids, logits, grads: CompressedGrads) -> AggGrad:
        if not self.open:
            raise ProtocolError("session not established", E_UNEXPECTED)
        up = self._send(ForwardBatch(batch_id, np.asarray(sample_ids, dtype=np.uint64), np.asarray(logits),
                                     grads, self.config.wide))
        msg, down = self._recv()
        if isinstance(msg, Error):
            raise RemoteError(msg.text, msg.code)
        if not isinstance(msg, AggGrad):
            raise ProtocolError(f"expected AggGrad, got {type(msg).__name__}", E_UNEXPECTED)
        if msg.batch_id != batch_id:
            raise ProtocolError(f"batch_id mismatch: sent {batch_id}, got {msg.batch_id}", E_UNEXPECTED)
        self.report.per_batch.append(BatchTraffic(batch_id, up, down, len(grads.payload)))
        return msg

    def end(self) -> None:
        if self.open:
            self._send(EndSession())
            self.open = False
        self.transport.close()


def batch_rng(session_seed: int, batch_id: int) -> np.random.Generator:
    return np.random.default_rng([session_seed, batch_id])


def featureparty_step(client: FeaturePartyClient, model, adapter_id: str, batch, batch_id: int) -> AggGrad:
    """Forward + per-sample grads, ship them, and return the clean room's aggregate."""
    logits = model.forward(batch.X, adapter_id)
    G = model.per_sample_grads(batch.X, adapter_id)
    enc = compression.encode(G, client.config.codec, batch_rng(client.config.seed, batch_id))
    return client.exchange(batch_id, batch.sample_ids, logits, enc)


def comm_report(client: FeaturePartyClient) -> CommReport:
    return client.report
