"""Edge/cloud split runtime: framed compressed windows over a byte stream.

Wire frame (header integers big-endian, payload floats little-endian)::

    offset  size  field
    0       4     magic b"RSCW"
    4       1     version
    5       4     session_id
    9       4     sample_id
    13      2     window_index
    15      2     payload_len (bytes, = 4*M for data frames)
    17      n     payload
    17+n    4     CRC-32 of bytes [0, 17+n), big-endian

A frame whose ``window_index`` is ``HELLO_INDEX`` is a session hello carrying
the 4-byte model-config digest; the cloud rejects sessions whose digest does
not match its own model. Hello frames are control traffic and are tallied
apart from data frames in the overhead accounting.
"""
import json
import logging
import socket
import struct
import threading
import time
import zlib
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .model import classifier_forward, decoder_forward, encoder_forward

log = logging.getLogger(__name__)

MAGIC = b"RSCW"
VERSION = 1
HEADER = struct.Struct(">4sBIIHH")
HEADER_SIZE = HEADER.size          # 17
CRC_SIZE = 4
HELLO_INDEX = 0xFFFF
MAX_PAYLOAD = 0xFFFF


class FrameError(ValueError):
    """Base class for undecodable frames."""


class BadMagicError(FrameError):
    pass


class BadVersionError(FrameError):
    pass


class CrcError(FrameError):
    pass


class TruncatedFrameError(FrameError):
    pass


class SessionRejected(RuntimeError):
    pass


class TransportError(OSError):
    pass


@dataclass(frozen=True)
class WireFrame:
    session_id: int
    sample_id: int
    window_index: int
    payload: bytes

    @property
    def is_hello(self):
        return self.window_index == HELLO_INDEX

    @property
    def values(self):
        """Payload as float32 values."""
        return np.frombuffer(self.payload, dtype="<f4").astype(np.float32)

    @property
    def digest(self):
        return struct.unpack(">I", self.payload)[0]


def frame_size(m):
    return HEADER_SIZE + 4 * m + CRC_SIZE


def _pack(session_id, sample_id, window_index, payload):
    if len(payload) > MAX_PAYLOAD:
        raise ValueError(f"payload of {len(payload)} bytes overflows the u16 length field")
    head = HEADER.pack(MAGIC, VERSION, session_id, sample_id, window_index, len(payload))
    body = head + payload
    return body + struct.pack(">I", zlib.crc32(body))


def encode_frame(compressed, session_id, sample_id, window_index):
    """Frame one compressed window (``M`` values)."""
    values = compressed.data if isinstance(compressed, nx.Tensor) else np.asarray(compressed)
    values = np.ascontiguousarray(values, dtype="<f4").reshape(-1)
    if window_index >= HELLO_INDEX:
        raise ValueError(f"window_index {window_index} is reserved or out of range")
    return _pack(session_id, sample_id, window_index, values.tobytes())


def encode_hello(session_id, digest):
    return _pack(session_id, 0, HELLO_INDEX, struct.pack(">I", digest))


def _check_header(buf):
    magic, version, session, sample, window, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}")
    if version != VERSION:
        raise BadVersionError(f"unsupported frame version {version}")
    return session, sample, window, length


def decode_frame(data):
    """Parse exactly one complete frame."""
    data = bytes(data)
    if len(data) < HEADER_SIZE:
        raise TruncatedFrameError(f"{len(data)} bytes is shorter than the {HEADER_SIZE}-byte header")
    session, sample, window, length = _check_header(data)
    total = HEADER_SIZE + length + CRC_SIZE
    if len(data) < total:
        raise TruncatedFrameError(f"frame needs {total} bytes, got {len(data)}")
    if len(data) > total:
        raise FrameError(f"{len(data) - total} bytes beyond the frame end")
    (crc,) = struct.unpack_from(">I", data, total - CRC_SIZE)
    if zlib.crc32(data[:total - CRC_SIZE]) != crc:
        raise CrcError("CRC mismatch")
    if window != HELLO_INDEX and length % 4:
        raise FrameError(f"payload length {length} is not a whole number of floats")
    return WireFrame(session, sample, window, data[HEADER_SIZE:total - CRC_SIZE])


class FrameDecoder:
    """Incremental decoder: feed arbitrary byte chunks, collect whole frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk):
        self._buf += chunk
        frames = []
        while len(self._buf) >= HEADER_SIZE:
            _, _, _, length = _check_header(self._buf)
            total = HEADER_SIZE + length + CRC_SIZE
            if len(self._buf) < total:
                break
            frames.append(decode_frame(self._buf[:total]))
            del self._buf[:total]
        return frames

    @property
    def pending(self):
        return len(self._buf)

    def close(self):
        """Signal end of stream; leftover bytes mean a truncated frame."""
        if self._buf:
            raise TruncatedFrameError(f"stream ended inside a frame ({len(self._buf)} bytes pending)")


def decode_stream(data):
    dec = FrameDecoder()
    frames = dec.feed(data)
    dec.close()
    return frames


# -- transports ---------------------------------------------------------------

class LoopbackTransport:
    """In-memory reliable byte pipe. ``send`` is all-or-nothing."""

    def __init__(self):
        self._chunks = deque()
        self._closed = False
        self._cond = threading.Condition()

    def send(self, data):
        with self._cond:
            if self._closed:
                raise TransportError("loopback transport is closed")
            self._chunks.append(bytes(data))
            self._cond.notify_all()

    def recv(self, max_bytes=65536):
        """Next chunk, or ``b""`` once closed and drained."""
        with self._cond:
            while not self._chunks and not self._closed:
                self._cond.wait()
            return self._chunks.popleft() if self._chunks else b""

    def close(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def getvalue(self):
        return b"".join(self._chunks)


class SocketTransport:
    def __init__(self, sock):
        self.sock = sock

    @classmethod
    def connect(cls, host, port, timeout=10.0):
        return cls(socket.create_connection((host, port), timeout=timeout))

    def send(self, data):
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise TransportError(f"socket send failed: {exc}") from exc

    def recv(self, max_bytes=65536):
        return self.sock.recv(max_bytes)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self.sock.close()


def parse_address(text):
    host, _, port = text.rpartition(":")
    if not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {text!r}")
    return host or "127.0.0.1", int(port)


# -- accounting ---------------------------------------------------------------

@dataclass
class ByteCounters:
    frames: int = 0
    sent_bytes: int = 0
    raw_bytes: int = 0          # float32 size of the CSI the data frames stand for
    control_frames: int = 0
    control_bytes: int = 0

    def add_data(self, frame_bytes, raw_bytes):
        self.frames += 1
        self.sent_bytes += frame_bytes
        self.raw_bytes += raw_bytes

    def add_control(self, frame_bytes):
        self.control_frames += 1
        self.control_bytes += frame_bytes


def overhead_report(session):
    """Data-frame bytes against the raw float32 bytes they replace.

    ``ratio`` includes header and CRC bytes, so it sits slightly above the
    compression ratio. Session hello traffic is listed separately.
    """
    c = session.counters if hasattr(session, "counters") else session
    return {
        "raw_bytes": c.raw_bytes,
        "sent_bytes": c.sent_bytes,
        "ratio": c.sent_bytes / c.raw_bytes if c.raw_bytes else float("nan"),
        "frames": c.frames,
        "mean_frame_bytes": c.sent_bytes / c.frames if c.frames else 0.0,
        "control_frames": c.control_frames,
        "control_bytes": c.control_bytes,
    }


# -- edge ---------------------------------------------------------------------

def sample_source(amplitudes, first_sample_id=0):
    """Yield ``(sample_id, frame)`` with ``frame`` of shape ``(N_a, N_s)``, in time order."""
    for k, sample in enumerate(np.asarray(amplitudes, dtype=np.float32)):
        for t in range(sample.shape[-1]):
            yield first_sample_id + k, sample[..., t]


@dataclass
class EdgeStats:
    session_id: int
    counters: ByteCounters = field(default_factory=ByteCounters)
    latencies: list = field(default_factory=list)   # seconds per window (encode + send)
    dropped_partial: int = 0


def _send_with_retry(transport, frame, retries, backoff):
    for attempt in range(retries + 1):
        try:
            transport.send(frame)
            return
        except OSError as exc:
            if attempt == retries:
                raise TransportError(f"giving up after {retries + 1} attempts: {exc}") from exc
            time.sleep(backoff * (attempt + 1))


def edge_run(source, model, transport, session_id=0, hello=True, retries=0, backoff=0.05):
    """Window incoming CSI frames, encode each full window and transmit it.

    A sample id change with a partly filled window discards that partial
    window (its frames never reach the encoder). The source running dry ends
    the run cleanly. Returns :class:`EdgeStats`.
    """
    cfg = model.config
    n_f, per_window = cfg.window_frames, cfg.n_antennas * cfg.n_subcarriers * cfg.window_frames
    stats = EdgeStats(session_id)
    if hello:
        frame = encode_hello(session_id, cfg.digest())
        _send_with_retry(transport, frame, retries, backoff)
        stats.counters.add_control(len(frame))
    buf, current, window_index = [], None, 0
    for sample_id, csi in source:
        if sample_id != current:
            if buf:
                stats.dropped_partial += 1
                log.warning("edge: sample %s ended mid-window; %d frames dropped", current, len(buf))
            buf, current, window_index = [], sample_id, 0
        buf.append(np.asarray(csi, dtype=np.float32))
        if len(buf) < n_f:
            continue
        t0 = time.perf_counter()
        window = nx.Tensor(np.stack(buf, axis=-1), dtype=model.dtype)
        z = encoder_forward(window, model, training=False)
        frame = encode_frame(z, session_id, sample_id, window_index)
        _send_with_retry(transport, frame, retries, backoff)
        stats.latencies.append(time.perf_counter() - t0)
        stats.counters.add_data(len(frame), per_window * 4)
        buf, window_index = [], window_index + 1
    if buf:
        stats.dropped_partial += 1
    return stats


# -- cloud --------------------------------------------------------------------

@dataclass
class _PendingSample:
    windows: dict = field(default_factory=dict)     # window_index -> values
    next_index: int = 0
    hidden: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    state: tuple | None = None                      # LSTM (h, c) within this sample
    last_seen: float = 0.0


@dataclass
class SessionState:
    session_id: int
    config_hash: int | None = None
    state: tuple | None = None                      # LSTM (h, c) after the last finished sample
    pending: dict = field(default_factory=dict)     # sample_id -> _PendingSample
    counters: ByteCounters = field(default_factory=ByteCounters)
    completed: int = 0
    dropped: int = 0


class ReconstructionLog:
    """Append reconstructed samples as float32 LE records (the dataset data-file
    layout) plus a sidecar of ``(session_id, sample_id)`` u32 pairs."""

    def __init__(self, prefix):
        self.data = open(f"{prefix}.f32", "ab")
        self.ids = open(f"{prefix}.ids", "ab")

    def write(self, session_id, sample_id, recon):
        np.ascontiguousarray(recon, dtype="<f4").tofile(self.data)
        self.ids.write(struct.pack("<II", session_id, sample_id))

    def close(self):
        self.data.close()
        self.ids.close()


class CloudRuntime:
    """Per-session LSTM threading, reconstruction and classification.

    ``sink`` receives one dict per classified sample. With ``continuous`` the
    LSTM state carries across samples of a session instead of resetting.
    Samples incomplete after ``window_timeout`` seconds of silence are dropped.
    """

    def __init__(self, model, sink, recon_log=None, continuous=False, require_hello=False,
                 window_timeout=30.0, clock=time.monotonic):
        self.model = model
        self.sink = sink
        self.recon_log = recon_log
        self.continuous = continuous
        self.require_hello = require_hello
        self.window_timeout = window_timeout
        self.clock = clock
        self.sessions = {}
        self.reconstructions = {}
        self._lock = threading.Lock()
        cfg = model.config
        self._digest = cfg.digest()
        self._m = cfg.compressed_dim
        self._raw_window = 4 * cfg.n_antennas * cfg.n_subcarriers * cfg.window_frames

    def session(self, session_id):
        s = self.sessions.get(session_id)
        if s is None:
            s = self.sessions[session_id] = SessionState(session_id)
        return s

    def handle(self, frame):
        """Process one decoded frame; returns the prediction records it completed."""
        s = self.session(frame.session_id)
        if frame.is_hello:
            s.counters.add_control(HEADER_SIZE + len(frame.payload) + CRC_SIZE)
            if frame.digest != self._digest:
                raise SessionRejected(
                    f"session {frame.session_id}: config digest {frame.digest:#010x} "
                    f"!= cloud model {self._digest:#010x}")
            s.config_hash = frame.digest
            return []
        if self.require_hello and s.config_hash is None:
            raise SessionRejected(f"session {frame.session_id}: data before hello")
        S = self.model.config.n_windows
        if frame.window_index >= S:
            raise FrameError(f"window_index {frame.window_index} >= {S} windows per sample")
        if len(frame.payload) != 4 * self._m:
            raise SessionRejected(
                f"session {frame.session_id}: payload {len(frame.payload)} bytes, model wants {4 * self._m}")
        s.counters.add_data(frame_size(self._m), self._raw_window)
        now = self.clock()
        self._expire(s, now, keep=frame.sample_id)
        p = s.pending.setdefault(frame.sample_id, _PendingSample())
        p.last_seen = now
        p.windows[frame.window_index] = frame.values
        out = []
        while p.next_index in p.windows:
            self._step(s, p, p.windows.pop(p.next_index))
            p.next_index += 1
            if p.next_index == S:
                del s.pending[frame.sample_id]
                out.append(self._finish(s, frame.sample_id, p))
        return out

    def _expire(self, s, now, keep):
        for sid in list(s.pending):
            if sid != keep and now - s.pending[sid].last_seen > self.window_timeout:
                log.warning("cloud: session %d sample %d timed out with %d/%d windows; dropped",
                            s.session_id, sid, s.pending[sid].next_index, self.model.config.n_windows)
                del s.pending[sid]
                s.dropped += 1

    def _step(self, s, p, values):
        model = self.model
        z = nx.Tensor(values.reshape(1, -1), dtype=model.dtype)
        if p.next_index == 0:
            if self.continuous and s.state is not None:
                p.state = s.state
            else:
                n_h = model.config.hidden_dim
                p.state = (nx.Tensor(np.zeros((1, n_h)), dtype=model.dtype),
                           nx.Tensor(np.zeros((1, n_h)), dtype=model.dtype))
        h, c = nx.lstm_cell(z, *p.state, model.lstm)
        p.state = (h, c)
        p.hidden.append(h)
        p.recon.append(decoder_forward(h, model, training=False).data[0])

    def _finish(self, s, sample_id, p):
        logits = classifier_forward(nx.concat(p.hidden, axis=1), self.model).data[0]
        recon = np.concatenate(p.recon, axis=-1)
        s.state = p.state
        s.completed += 1
        self.reconstructions[(s.session_id, sample_id)] = recon
        record = {"session_id": s.session_id, "sample_id": sample_id,
                  "class": int(np.argmax(logits)), "logits": [float(v) for v in logits]}
        with self._lock:
            if self.recon_log is not None:
                self.recon_log.write(s.session_id, sample_id, recon)
            self.sink(record)
        return record


def ndjson_sink(fh):
    """Sink writing one JSON object per line to a text file handle."""
    def write(record):
        fh.write(json.dumps(record) + "\n")
        fh.flush()
    return write


def cloud_run(transport, runtime):
    """Drain ``transport`` through ``runtime`` until EOF; returns the records emitted."""
    dec = FrameDecoder()
    records = []
    while True:
        chunk = transport.recv(65536)
        if not chunk:
            break
        for frame in dec.feed(chunk):
            records += runtime.handle(frame)
    dec.close()
    return records


def serve_tcp(host, port, runtime, max_connections=None, ready=None):
    """Accept edge connections, one handler thread each, until ``max_connections``
    have been served (forever when ``None``). ``ready`` is set once listening."""
    with socket.create_server((host, port)) as server:
        if ready is not None:
            ready.port = server.getsockname()[1]
            ready.set()
        threads, served = [], 0
        try:
            while max_connections is None or served < max_connections:
                conn, _ = server.accept()
                t = threading.Thread(target=_serve_conn, args=(conn, runtime), daemon=True)
                t.start()
                threads.append(t)
                served += 1
        finally:
            for t in threads:
                t.join()


def _serve_conn(conn, runtime):
    with conn:
        try:
            cloud_run(SocketTransport(conn), runtime)
        except (FrameError, SessionRejected) as exc:
            log.error("cloud: closing connection: %s", exc)
