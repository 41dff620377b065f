"""Seeded ground-truth generators: walker trajectories, UWB ranging and EEG.

Randomness for a session comes from one session seed. Each component draws
from its own generator seeded with ``sub_seed(session_seed, name)``: the
first 8 bytes (big endian) of SHA-256 over ``"<session_seed>:<name>"``.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .eeg.classifier import CLASSES
from .eeg.signals import EegWindow
from .locate import RangeMeasurement
from .scene import AnchorSet, Box, FloorPlan
from .stream import ClockExchange, Kind, Packet, StreamHeader, encode_clock, encode_header, encode_packet

CARRIERS = {"theta": 6.0, "alpha": 10.0, "beta": 20.0, "gamma": 40.0}
AMPLITUDES = {
    "negative": {"theta": 2.0, "alpha": 1.0, "beta": 0.5, "gamma": 0.5},
    "neutral": {"theta": 1.0, "alpha": 1.0, "beta": 1.0, "gamma": 1.0},
    "positive": {"theta": 0.5, "alpha": 1.0, "beta": 2.0, "gamma": 1.5},
}
EEG_NOISE = 0.2


def sub_seed(session_seed: int, name: str) -> int:
    digest = hashlib.sha256(f"{session_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass(frozen=True)
class EmotionSchedule:
    segments: tuple[tuple[float, float, str], ...]

    def __post_init__(self):
        segs = tuple((float(a), float(b), str(s)) for a, b, s in self.segments)
        if not segs:
            raise ValueError("schedule needs at least one segment")
        for i, (a, b, s) in enumerate(segs):
            if not a < b:
                raise ValueError(f"segment {i}: start must be < end")
            if s not in CLASSES:
                raise ValueError(f"segment {i}: unknown state {s!r}")
            if i and a != segs[i - 1][1]:
                kind = "gap" if a > segs[i - 1][1] else "overlap"
                raise ValueError(f"schedule {kind} between segments {i - 1} and {i}")
        object.__setattr__(self, "segments", segs)

    @property
    def start(self) -> float:
        return self.segments[0][0]

    @property
    def end(self) -> float:
        return self.segments[-1][1]

    def state_at(self, t: float) -> str:
        for a, b, s in self.segments:
            if a <= t < b:
                return s
        return self.segments[-1][2] if t >= self.end else self.segments[0][2]


@dataclass(frozen=True)
class Trajectory:
    times: np.ndarray
    positions: np.ndarray  # n x 3

    def __len__(self) -> int:
        return len(self.times)


def segment_hits_box(p0, p1, box: Box) -> bool:
    """Slab test: does the closed segment p0-p1 touch the box?"""
    p0 = np.asarray(p0, dtype=float)
    d = np.asarray(p1, dtype=float) - p0
    t_lo, t_hi = 0.0, 1.0
    for ax in range(3):
        lo, hi = box.min[ax], box.max[ax]
        if abs(d[ax]) < 1e-15:
            if p0[ax] < lo or p0[ax] > hi:
                return False
            continue
        a, b = (lo - p0[ax]) / d[ax], (hi - p0[ax]) / d[ax]
        if a > b:
            a, b = b, a
        t_lo, t_hi = max(t_lo, a), min(t_hi, b)
        if t_lo > t_hi:
            return False
    return True


def simulate_trajectory(plan: FloorPlan, waypoints: Sequence, speed: float, dt: float) -> Trajectory:
    """Constant-speed piecewise-linear walk through ``waypoints``, sampled every ``dt``."""
    if not speed > 0 or not dt > 0:
        raise ValueError("speed and dt must be > 0")
    wp = np.asarray(waypoints, dtype=float)
    if wp.ndim != 2 or wp.shape[1] != 3 or len(wp) < 1:
        raise ValueError("waypoints must be a list of 3-vectors")
    for i, p in enumerate(wp):
        if not plan.contains(p):
            raise ValueError(f"waypoint {i} {tuple(p)} is outside the floor bounds")
    for i in range(len(wp) - 1):
        for k, ob in enumerate(plan.obstacles):
            if segment_hits_box(wp[i], wp[i + 1], ob):
                raise ValueError(f"segment {i} ({tuple(wp[i])} -> {tuple(wp[i + 1])}) intersects obstacle {k}")

    seg_len = np.linalg.norm(np.diff(wp, axis=0), axis=1) if len(wp) > 1 else np.zeros(0)
    arrive = np.concatenate([[0.0], np.cumsum(seg_len) / speed])
    total = arrive[-1]
    n = int(math.floor(total / dt + 1e-9)) + 1
    if (n - 1) * dt < total - 1e-9:
        n += 1  # one more sample holding the final waypoint
    times = np.arange(n) * dt
    pos = np.empty((n, 3))
    for ax in range(3):
        pos[:, ax] = np.interp(np.minimum(times, total), arrive, wp[:, ax])
    return Trajectory(times, pos)


def waypoint_arrival_times(waypoints: Sequence, speed: float) -> np.ndarray:
    wp = np.asarray(waypoints, dtype=float)
    return np.concatenate([[0.0], np.cumsum(np.linalg.norm(np.diff(wp, axis=0), axis=1)) / speed])


def simulate_ranging(
    traj: Trajectory,
    anchors: AnchorSet,
    sigma: float,
    p_nlos: float = 0.0,
    nlos_mean: float = 0.3,
    seed: int = 0,
    tag_id: str = "T0",
) -> list[RangeMeasurement]:
    """One range per trajectory sample per anchor, Gaussian noise plus an
    exponential positive bias on non-line-of-sight draws."""
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    if not 0.0 <= p_nlos <= 1.0:
        raise ValueError("p_nlos must be in [0, 1]")
    rng = np.random.default_rng(seed)
    a = anchors.positions
    if a.shape[1] == 2:
        a = np.column_stack([a, np.zeros(len(a))])
    true = np.linalg.norm(traj.positions[:, None, :] - a[None, :, :], axis=2)
    shape = true.shape
    noise = rng.normal(0.0, sigma, size=shape)
    nlos = rng.random(shape) < p_nlos
    bias = rng.exponential(nlos_mean, size=shape) if nlos_mean > 0 else np.zeros(shape)
    dist = np.maximum(true + noise + np.where(nlos, bias, 0.0), 0.0)
    out = []
    for i, t in enumerate(traj.times):
        for j, aid in enumerate(anchors.ids):
            out.append(RangeMeasurement(tag_id, aid, float(t), float(dist[i, j]), float(sigma)))
    return out


def simulate_eeg(schedule: EmotionSchedule, fs: float = 200.0, channels: int = 8, seed: int = 0) -> EegWindow:
    """Sum of state-dependent band carriers with random per-channel phases plus noise."""
    if fs < 100:
        raise ValueError("fs must be >= 100 Hz")
    if channels < 1:
        raise ValueError("channels must be >= 1")
    rng = np.random.default_rng(seed)
    n = int(round((schedule.end - schedule.start) * fs))
    t = schedule.start + np.arange(n) / fs
    phases = rng.uniform(0.0, 2.0 * np.pi, size=(channels, len(CARRIERS)))
    noise = rng.normal(0.0, EEG_NOISE, size=(channels, n))

    amp = np.zeros((len(CARRIERS), n))
    for a, b, state in schedule.segments:
        mask = (t >= a) & (t < b)
        for k, band in enumerate(CARRIERS):
            amp[k, mask] = AMPLITUDES[state][band]

    data = noise
    for k, f in enumerate(CARRIERS.values()):
        data = data + amp[k] * np.sin(2.0 * np.pi * f * t[None, :] + phases[:, k : k + 1])
    return EegWindow(schedule.start, fs, data)


@dataclass
class SessionPlan:
    """Everything needed to synthesise one session's wire traffic."""

    waypoints: list
    schedule: EmotionSchedule
    speed: float = 0.5
    dt: float = 0.1
    sigma: float = 0.05
    p_nlos: float = 0.0
    nlos_mean: float = 0.3
    eeg_channels: int = 8
    eeg_rate: float = 200.0
    eeg_clock_offset: float = 0.8
    eeg_jitter: float = 0.001
    link_delay: float = 0.004
    tag_id: str = "T0"
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, doc: dict) -> "SessionPlan":
        doc = dict(doc)
        schedule = EmotionSchedule(tuple(tuple(s) for s in doc.pop("schedule")))
        known = {k: doc.pop(k) for k in list(doc) if k in cls.__dataclass_fields__}
        return cls(schedule=schedule, **known, extra=doc)


RANGE_STREAM = "uwb"
EEG_STREAM = "eeg"


def session_lines(plan: FloorPlan, anchors: AnchorSet, session: SessionPlan, seed: int) -> list[bytes]:
    """NDJSON lines for a simulated session, interleaved by true time.

    UWB timestamps are on the host clock; EEG timestamps are on a device
    clock ``eeg_clock_offset`` ahead of it with uniform jitter, and a clock
    exchange line lets the receiver undo the offset.
    """
    traj = simulate_trajectory(plan, session.waypoints, session.speed, session.dt)
    ranges = simulate_ranging(
        traj, anchors, session.sigma, session.p_nlos, session.nlos_mean, sub_seed(seed, "ranging"), session.tag_id
    )
    eeg = simulate_eeg(session.schedule, session.eeg_rate, session.eeg_channels, sub_seed(seed, "eeg"))
    jitter_rng = np.random.default_rng(sub_seed(seed, "eeg-clock"))

    m = len(anchors)
    headers = [
        StreamHeader(RANGE_STREAM, Kind.RANGE, m, 1.0 / session.dt),
        StreamHeader(EEG_STREAM, Kind.EEG, session.eeg_channels, session.eeg_rate),
    ]
    off, delay = session.eeg_clock_offset, session.link_delay
    t0 = min(traj.times[0], eeg.start_time) - 0.05
    t1 = t0 + delay + off
    t2 = t1 + 0.0005
    clock = ClockExchange(EEG_STREAM, t0, t1, t2, t2 - off + delay)

    events: list[tuple[float, int, int, bytes]] = []
    for i, t in enumerate(traj.times):
        vals = tuple(r.distance for r in ranges[i * m : (i + 1) * m])
        events.append((float(t), 0, i, encode_packet(Packet(RANGE_STREAM, float(t), vals))))
    true_t = eeg.start_time + np.arange(eeg.n_samples) / eeg.sample_rate
    device_t = true_t + off + jitter_rng.uniform(-session.eeg_jitter, session.eeg_jitter, size=true_t.size)
    for i in range(eeg.n_samples):
        events.append(
            (float(true_t[i]), 1, i, encode_packet(Packet(EEG_STREAM, float(device_t[i]), tuple(eeg.data[:, i]))))
        )
    events.sort(key=lambda e: e[:3])
    return [*(encode_header(h) for h in headers), encode_clock(clock), *(e[3] for e in events)]


def split_by_stream(lines: Sequence[bytes]) -> dict[str, list[bytes]]:
    """Regroup session lines into one header-first line list per stream (for TCP)."""
    import json

    out: dict[str, list[bytes]] = {}
    for line in lines:
        obj = json.loads(line)
        sid = obj["hdr"]["s"] if "hdr" in obj else obj["clk"]["s"] if "clk" in obj else obj["s"]
        out.setdefault(sid, []).append(line)
    return out


def labelled_windows(state: str, count: int, seed: int, channels: int = 8, fs: float = 200.0) -> list[EegWindow]:
    """``count`` independent 1 s windows of a single state (training data)."""
    sched = EmotionSchedule(((0.0, float(count), state),))
    stream = simulate_eeg(sched, fs, channels, seed)
    size = int(round(fs))
    return [EegWindow(float(k), fs, stream.data[:, k * size : (k + 1) * size]) for k in range(count)]
