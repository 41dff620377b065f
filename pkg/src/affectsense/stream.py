"""NDJSON stream protocol, clock-offset model, dejitter and stream alignment.

Wire format, one JSON object per line::

    {"hdr":{"s":"uwb","k":"range","c":4,"r":10}}          stream header
    {"clk":{"s":"eeg","t0":..,"t1":..,"t2":..,"t3":..}}   clock exchange
    {"s":"uwb","t":1.5,"v":[2.0,3.0,1.0,4.0]}             packet
"""
from __future__ import annotations

import asyncio
import json
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_TOLERANCE = 0.25
QUEUE_CAPACITY = 1024


class StreamError(ValueError):
    """Malformed or inconsistent stream data."""


class Kind(str, Enum):
    RANGE = "range"
    EEG = "eeg"
    POSITION = "position"
    EMOTION = "emotion"


@dataclass(frozen=True)
class StreamHeader:
    stream_id: str
    kind: Kind
    channel_count: int
    nominal_rate: float = 0.0

    def __post_init__(self):
        if self.channel_count < 1:
            raise StreamError(f"stream {self.stream_id}: channel_count must be >= 1")
        if self.nominal_rate < 0:
            raise StreamError(f"stream {self.stream_id}: nominal_rate must be >= 0")


@dataclass(frozen=True)
class Packet:
    stream_id: str
    timestamp: float
    values: tuple[float, ...]


@dataclass(frozen=True)
class ClockModel:
    offset: float
    round_trip: float
    measured_at: float

    def to_host(self, t: float) -> float:
        """Map a remote-clock timestamp onto the host clock."""
        return t - self.offset


@dataclass(frozen=True)
class ClockExchange:
    stream_id: str
    t0: float
    t1: float
    t2: float
    t3: float

    def model(self) -> ClockModel:
        return estimate_clock_offset(self.t0, self.t1, self.t2, self.t3)


class HeaderRegistry:
    """Active stream headers for one session, keyed by stream id."""

    def __init__(self, headers: Iterable[StreamHeader] = ()):
        self._headers: dict[str, StreamHeader] = {}
        for h in headers:
            self.register(h)

    def register(self, header: StreamHeader) -> None:
        old = self._headers.get(header.stream_id)
        if old is not None and old != header:
            raise StreamError(f"stream id {header.stream_id!r} already registered with a different header")
        self._headers[header.stream_id] = header

    def get(self, stream_id: str) -> StreamHeader:
        try:
            return self._headers[stream_id]
        except KeyError:
            raise StreamError(f"unknown stream_id {stream_id!r}") from None

    def __contains__(self, stream_id: str) -> bool:
        return stream_id in self._headers

    def __iter__(self):
        return iter(self._headers.values())


def _dumps(obj) -> bytes:
    return (json.dumps(obj, separators=(",", ":"), allow_nan=False) + "\n").encode("utf-8")


def encode_packet(p: Packet) -> bytes:
    return _dumps({"s": p.stream_id, "t": float(p.timestamp), "v": [float(v) for v in p.values]})


def encode_header(h: StreamHeader) -> bytes:
    return _dumps({"hdr": {"s": h.stream_id, "k": h.kind.value, "c": h.channel_count, "r": h.nominal_rate}})


def encode_clock(c: ClockExchange) -> bytes:
    return _dumps({"clk": {"s": c.stream_id, "t0": c.t0, "t1": c.t1, "t2": c.t2, "t3": c.t3}})


def _load(line: bytes | str) -> dict:
    try:
        obj = json.loads(line)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise StreamError(f"malformed JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise StreamError("malformed JSON: expected an object")
    return obj


def _number(obj: dict, key: str, what: str) -> float:
    if key not in obj:
        raise StreamError(f"missing field {key}")
    v = obj[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        raise StreamError(f"{what}: field {key} must be a finite number")
    return float(v)


def _packet_from(obj: dict, registry: HeaderRegistry | None) -> Packet:
    if "s" not in obj:
        raise StreamError("missing field s")
    sid = obj["s"]
    if not isinstance(sid, str):
        raise StreamError("field s must be a string")
    t = _number(obj, "t", "packet")
    if "v" not in obj:
        raise StreamError("missing field v")
    raw = obj["v"]
    if not isinstance(raw, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw
    ):
        raise StreamError("field v must be a list of numbers")
    values = tuple(float(v) for v in raw)
    if registry is not None:
        header = registry.get(sid)
        if len(values) != header.channel_count:
            raise StreamError(
                f"arity mismatch: stream {sid!r} expects {header.channel_count} values, got {len(values)}"
            )
    return Packet(sid, t, values)


def decode_packet(line: bytes | str, registry: HeaderRegistry | None = None) -> Packet:
    return _packet_from(_load(line), registry)


def decode_line(
    line: bytes | str, registry: HeaderRegistry | None = None
) -> StreamHeader | ClockExchange | Packet:
    """Decode any protocol line; headers are added to ``registry`` when given."""
    obj = _load(line)
    if "hdr" in obj:
        h = obj["hdr"]
        if not isinstance(h, dict):
            raise StreamError("hdr must be an object")
        for key in ("s", "k", "c"):
            if key not in h:
                raise StreamError(f"missing field hdr.{key}")
        try:
            header = StreamHeader(str(h["s"]), Kind(h["k"]), int(h["c"]), float(h.get("r", 0.0)))
        except ValueError as exc:
            raise StreamError(f"bad header: {exc}") from exc
        if registry is not None:
            registry.register(header)
        return header
    if "clk" in obj:
        c = obj["clk"]
        if not isinstance(c, dict) or "s" not in c:
            raise StreamError("missing field clk.s")
        ex = ClockExchange(str(c["s"]), *(_number(c, k, "clock") for k in ("t0", "t1", "t2", "t3")))
        if registry is not None:
            registry.get(ex.stream_id)
        return ex
    return _packet_from(obj, registry)


def estimate_clock_offset(t0: float, t1: float, t2: float, t3: float) -> ClockModel:
    """Four-timestamp exchange: host sends at t0, remote receives at t1 and
    replies at t2 (remote clock), host receives at t3.

    ``offset`` is remote minus host time. With one-way delays d_up and
    d_down the estimate is off by (d_up - d_down)/2, never more than
    ``round_trip / 2``.
    """
    if t3 < t0:
        raise StreamError("t3 precedes t0")
    if t2 < t1:
        raise StreamError("t2 precedes t1")
    round_trip = (t3 - t0) - (t2 - t1)
    # allow rounding noise from zero-delay exchanges
    slack = 64 * np.finfo(float).eps * max(1.0, abs(t0), abs(t1), abs(t2), abs(t3))
    if round_trip < -slack:
        raise StreamError(f"negative round trip {round_trip}: clock misuse")
    round_trip = max(round_trip, 0.0)
    offset = ((t1 - t0) + (t2 - t3)) / 2.0
    return ClockModel(offset, round_trip, t3)


def dejitter_timestamps(timestamps: Sequence[float], nominal_rate: float) -> np.ndarray:
    """Replace timestamps by their least-squares affine fit over sample index."""
    t = np.asarray(timestamps, dtype=float)
    if t.size < 2:
        raise StreamError("need at least 2 timestamps to dejitter")
    if not nominal_rate > 0:
        raise StreamError("nominal_rate must be > 0")
    i = np.arange(t.size, dtype=float)
    # centre both axes to keep the normal equations well conditioned
    ic = i - i.mean()
    tm = t.mean()
    slope = float(ic @ (t - tm)) / float(ic @ ic)
    return tm + slope * ic


@dataclass(frozen=True)
class AlignedSample:
    timestamp: float
    position: np.ndarray
    emotion: "EmotionSample"  # noqa: F821
    dt: float = 0.0


def _check_sorted(ts: Sequence[float], name: str) -> None:
    for i in range(1, len(ts)):
        if ts[i] < ts[i - 1]:
            raise StreamError(f"{name} not sorted by timestamp at index {i}")


def align_streams(positions, emotions, tolerance: float = DEFAULT_TOLERANCE):
    """Pair every emotion sample with its nearest-in-time position.

    Ties go to the earlier position. Pairs further apart than ``tolerance``
    are dropped. Returns ``(aligned, dropped_count)``.
    """
    if not tolerance > 0:
        raise StreamError("tolerance must be > 0")
    pt = [p.timestamp for p in positions]
    et = [e.timestamp for e in emotions]
    _check_sorted(pt, "positions")
    _check_sorted(et, "emotions")
    out: list[AlignedSample] = []
    dropped = 0
    n = len(pt)
    j = -1  # last position index with timestamp <= t
    run_start = 0  # first index of the run of equal timestamps ending at j
    for emo, t in zip(emotions, et):
        while j + 1 < n and pt[j + 1] <= t:
            j += 1
            if j == 0 or pt[j] != pt[j - 1]:
                run_start = j
        best, gap = -1, math.inf
        if j >= 0:
            best, gap = run_start, t - pt[j]
        if j + 1 < n and pt[j + 1] - t < gap:
            best, gap = j + 1, pt[j + 1] - t
        if best < 0 or gap > tolerance:
            dropped += 1
            continue
        out.append(AlignedSample(t, np.asarray(positions[best].position, dtype=float), emo, pt[best] - t))
    return out, dropped


# --- session-level reading --------------------------------------------------


@dataclass
class SessionStreams:
    """All packets of a session grouped per stream, timestamps on the host clock."""

    headers: dict[str, StreamHeader]
    packets: dict[str, list[Packet]]
    clocks: dict[str, ClockModel]

    def of_kind(self, kind: Kind) -> list[str]:
        return [sid for sid, h in self.headers.items() if h.kind is kind]


class SessionCollector:
    """Single-owner merger state: applies clock corrections and buckets packets."""

    def __init__(self):
        self.registry = HeaderRegistry()
        self.clocks: dict[str, ClockModel] = {}
        self.packets: dict[str, list[Packet]] = {}

    def feed(self, item: StreamHeader | ClockExchange | Packet) -> None:
        if isinstance(item, StreamHeader):
            self.packets.setdefault(item.stream_id, [])
        elif isinstance(item, ClockExchange):
            self.clocks[item.stream_id] = item.model()
        else:
            clock = self.clocks.get(item.stream_id)
            if clock is not None:
                item = Packet(item.stream_id, clock.to_host(item.timestamp), item.values)
            self.packets.setdefault(item.stream_id, []).append(item)

    def feed_line(self, line: bytes | str) -> None:
        if line.strip():
            self.feed(decode_line(line, self.registry))

    def result(self) -> SessionStreams:
        headers = {h.stream_id: h for h in self.registry}
        return SessionStreams(headers, self.packets, dict(self.clocks))


def read_lines(lines: Iterable[bytes | str]) -> SessionStreams:
    collector = SessionCollector()
    for lineno, line in enumerate(lines, start=1):
        try:
            collector.feed_line(line)
        except StreamError as exc:
            raise StreamError(f"line {lineno}: {exc}") from exc
    return collector.result()


def read_replay(path: str | Path) -> SessionStreams:
    with open(path, "rb") as fh:
        return read_lines(fh)


def iter_file_lines(path: str | Path) -> Iterator[bytes]:
    with open(path, "rb") as fh:
        yield from fh


# --- TCP transport ------------------------------------------------------------


async def _reader(reader: asyncio.StreamReader, writer: asyncio.StreamWriter, queue: asyncio.Queue) -> None:
    peer = writer.get_extra_info("peername")
    log.info("connection from %s", peer)
    try:
        while True:
            line = await reader.readline()
            if not line:
                break
            await queue.put(line)
    finally:
        writer.close()
        await queue.put(None)
        log.info("connection from %s closed", peer)


async def serve_session(
    host: str,
    port: int,
    expected_connections: int,
    on_listening: Callable[[int], None] | None = None,
    timeout: float | None = None,
) -> SessionStreams:
    """Accept ``expected_connections`` TCP clients and merge their lines.

    One reader task per connection feeds a bounded queue; a single merger
    (this coroutine) owns all decoding state. Returns once every expected
    connection has closed.
    """
    queue: asyncio.Queue = asyncio.Queue(maxsize=QUEUE_CAPACITY)
    collector = SessionCollector()
    tasks: list[asyncio.Task] = []

    def handle(reader, writer):
        tasks.append(asyncio.ensure_future(_reader(reader, writer, queue)))

    server = await asyncio.start_server(handle, host, port)
    bound = server.sockets[0].getsockname()[1]
    log.info("listening on %s:%d", host, bound)
    if on_listening is not None:
        on_listening(bound)
    closed = 0
    try:
        while closed < expected_connections:
            line = await asyncio.wait_for(queue.get(), timeout)
            if line is None:
                closed += 1
                continue
            collector.feed_line(line)
    finally:
        server.close()
        await server.wait_closed()
        for t in tasks:
            t.cancel()
    return collector.result()


def send_lines(host: str, port: int, lines: Iterable[bytes]) -> None:
    import socket

    with socket.create_connection((host, port)) as sock:
        for line in lines:
            sock.sendall(line)
