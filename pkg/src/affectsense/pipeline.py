"""End-to-end session pipeline and the file formats shared by CLI stages."""
from __future__ import annotations

import asyncio
import csv
import io
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import affectmap, locate, report, sim, stream
from .eeg import band_features, detect_change_points, is_artifact, train_classifier
from .eeg.changepoint import auto_penalty
from .eeg.classifier import EmotionSample, LinearModel, classify_window
from .eeg.signals import EegWindow, HOP_SECONDS, WINDOW_SECONDS
from .scene import AnchorSet, Scene, load_scene

log = logging.getLogger(__name__)

INPUT_MODES = ("simulate", "replay", "live")


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    pass


@dataclass
class PipelineConfig:
    scene: Path
    mode: str
    input_file: Path | None = None
    port: int | None = None
    host: str = "127.0.0.1"
    live_connections: int = 2
    method: str = "gauss_newton"
    range_sigma: float = 0.05
    dimension: int = 2
    tag_height: float = locate.TAG_HEIGHT
    cell_size: float | None = None
    tolerance: float = stream.DEFAULT_TOLERANCE
    model_path: Path | None = None
    train_windows_per_class: int = 100
    out_dir: Path = Path("out")
    heatmap: str = "heatmap.ppm"
    grid_csv: str = "grid.csv"
    summary: str = "summary.json"
    report_text: str = "report.txt"
    stream_copy: str = "session.ndjson"
    heatmap_slice: int | str = "flatten"
    heatmap_channel: str = "valence"
    heatmap_scale: int = 10
    change_penalty: float | str = "auto"
    change_penalty_floor: float = 2.0
    min_visits: int = report.DEFAULT_MIN_VISITS
    report: dict = field(default_factory=dict)
    seed: int = 0
    simulation: dict | None = None


def _resolve(base: Path, value) -> Path | None:
    if value is None:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def load_config(path: str | Path | None, overrides: dict | None = None, doc: dict | None = None) -> PipelineConfig:
    """Read a JSON config and apply flag overrides (flags win)."""
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    base = Path(".")
    if doc is None:
        if path is None:
            raise ConfigError("no config file given")
        base = Path(path).resolve().parent
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path}: parse error: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")

    inputs = dict(doc.get("input") or {})
    flag_inputs = {k: overrides.pop(k) for k in INPUT_MODES if k in overrides}
    if flag_inputs:
        inputs = flag_inputs
    given = [k for k in INPUT_MODES if inputs.get(k) not in (None, False)]
    unknown = set(inputs) - set(INPUT_MODES)
    if unknown:
        raise ConfigError(f"unknown input mode(s): {', '.join(sorted(unknown))}")
    if len(given) != 1:
        if not given:
            raise ConfigError("exactly one input mode required (simulate, replay or live); none given")
        raise ConfigError(f"exactly one input mode required; conflicting modes: {', '.join(given)}")
    mode = given[0]

    if "scene" not in doc and "scene" not in overrides:
        raise ConfigError("config: missing scene")
    pos = doc.get("positioning", {})
    grid = doc.get("grid", {})
    eeg = doc.get("eeg", {})
    outs = doc.get("outputs", {})
    hm = outs.get("heatmap_options", {})

    cfg = PipelineConfig(scene=_resolve(base, overrides.get("scene", doc.get("scene"))), mode=mode)
    if mode == "replay":
        cfg.input_file = _resolve(base, inputs["replay"])
    elif mode == "live":
        live = inputs["live"]
        live = live if isinstance(live, dict) else {"port": live}
        cfg.port = int(live.get("port", 0))
        cfg.host = str(live.get("host", cfg.host))
        cfg.live_connections = int(live.get("connections", cfg.live_connections))
    cfg.method = str(overrides.get("method", pos.get("method", cfg.method)))
    cfg.range_sigma = float(pos.get("sigma", cfg.range_sigma))
    cfg.dimension = int(pos.get("dimension", cfg.dimension))
    cfg.tag_height = float(pos.get("tag_height", cfg.tag_height))
    cfg.cell_size = overrides.get("cell_size", grid.get("cell_size"))
    cfg.tolerance = float(doc.get("alignment_tolerance", cfg.tolerance))
    cfg.model_path = _resolve(base, overrides.get("model", eeg.get("model")))
    cfg.train_windows_per_class = int(eeg.get("train_windows_per_class", cfg.train_windows_per_class))
    out_dir = overrides.get("out_dir")
    cfg.out_dir = Path(out_dir) if out_dir is not None else _resolve(base, outs.get("dir", "out"))
    for attr, key in (("heatmap", "heatmap"), ("grid_csv", "csv"), ("summary", "summary"), ("report_text", "report"), ("stream_copy", "stream")):
        setattr(cfg, attr, str(outs.get(key, getattr(cfg, attr))))
    cfg.heatmap_slice = hm.get("slice", cfg.heatmap_slice)
    cfg.heatmap_channel = hm.get("channel", cfg.heatmap_channel)
    cfg.heatmap_scale = int(hm.get("scale_px", cfg.heatmap_scale))
    cfg.change_penalty = eeg.get("change_penalty", cfg.change_penalty)
    cfg.change_penalty_floor = float(eeg.get("change_penalty_floor", cfg.change_penalty_floor))
    cfg.report = dict(doc.get("report", {}))
    cfg.min_visits = int(cfg.report.get("min_visits", cfg.min_visits))
    cfg.seed = int(overrides.get("seed", doc.get("seed", 0)))
    cfg.simulation = doc.get("simulation")

    try:
        locate.Method(cfg.method)
    except ValueError:
        raise ConfigError(f"unknown positioning method {cfg.method!r}") from None
    if cfg.method == "closed_form":
        raise ConfigError("closed_form cannot track a session; use gauss_newton, tdoa or particle_filter")
    if cfg.dimension not in (2, 3):
        raise ConfigError("positioning.dimension must be 2 or 3")
    if mode == "simulate" and not cfg.simulation:
        raise ConfigError("simulate mode needs a 'simulation' section")
    if cfg.heatmap_channel not in ("valence", "occupancy"):
        raise ConfigError(f"unknown heatmap channel {cfg.heatmap_channel!r}")
    return cfg


# --- stage helpers --------------------------------------------------------------


def range_measurements(streams: stream.SessionStreams, anchors: AnchorSet, sigma: float) -> list[locate.RangeMeasurement]:
    out = []
    for sid in streams.of_kind(stream.Kind.RANGE):
        if streams.headers[sid].channel_count != len(anchors):
            raise PipelineError(f"range stream {sid!r} has {streams.headers[sid].channel_count} channels, scene has {len(anchors)} anchors")
        for p in streams.packets[sid]:
            for aid, d in zip(anchors.ids, p.values):
                out.append(locate.RangeMeasurement(sid, aid, p.timestamp, max(d, 0.0), sigma))
    out.sort(key=lambda m: m.timestamp)
    return out


def eeg_recording(streams: stream.SessionStreams) -> tuple[EegWindow, np.ndarray] | None:
    """The first EEG stream as one block plus its dejittered host timestamps."""
    ids = streams.of_kind(stream.Kind.EEG)
    if not ids:
        return None
    header = streams.headers[ids[0]]
    packets = streams.packets[ids[0]]
    if len(packets) < 2:
        return None
    fs = header.nominal_rate or 200.0
    times = stream.dejitter_timestamps([p.timestamp for p in packets], fs)
    data = np.array([p.values for p in packets]).T
    return EegWindow(float(times[0]), fs, data), times


def classify_recording(model: LinearModel, recording: EegWindow, times: np.ndarray) -> tuple[list[EmotionSample], int]:
    """Emotion per 1 s window (0.5 s hop); windows over the artifact limit are rejected."""
    fs = recording.sample_rate
    size = int(round(WINDOW_SECONDS * fs))
    hop = int(round(HOP_SECONDS * fs))
    emotions, rejected = [], 0
    for start in range(0, recording.n_samples - size + 1, hop):
        w = EegWindow(float(times[start]), fs, recording.data[:, start : start + size])
        if is_artifact(w):
            rejected += 1
            continue
        emotions.append(classify_window(model, w))
    return emotions, rejected


def synthetic_model(channels: int, seed: int, per_class: int = 100, fs: float = 200.0) -> LinearModel:
    """Classifier trained on simulated calibration windows."""
    feats, labels = [], []
    for label, state in zip((-1, 0, 1), ("negative", "neutral", "positive")):
        for w in sim.labelled_windows(state, per_class, sim.sub_seed(seed, f"calib-{state}"), channels, fs):
            feats.append(band_features(w))
            labels.append(label)
    return train_classifier(feats, labels)


def write_positions_csv(estimates: Sequence[locate.PositionEstimate]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "x", "y", "z", "residual", "method"])
    for e in estimates:
        w.writerow([repr(float(e.timestamp)), *(repr(float(v)) for v in e.position), repr(float(e.residual_norm)), e.method.value])
    return buf.getvalue().encode()


def read_positions_csv(path: str | Path) -> list[locate.PositionEstimate]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            locate.PositionEstimate(
                float(r["t"]),
                np.array([float(r["x"]), float(r["y"]), float(r["z"])]),
                float(r["residual"]),
                0,
                locate.Method(r["method"]),
            )
            for r in csv.DictReader(fh)
        ]


def write_emotions_csv(emotions: Sequence[EmotionSample]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "p_negative", "p_neutral", "p_positive", "valence"])
    for e in emotions:
        w.writerow([repr(float(e.timestamp)), *(repr(p) for p in e.probs), repr(e.valence)])
    return buf.getvalue().encode()


def read_emotions_csv(path: str | Path) -> list[EmotionSample]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [
            EmotionSample(
                float(r["t"]),
                (float(r["p_negative"]), float(r["p_neutral"]), float(r["p_positive"])),
                float(r["valence"]),
            )
            for r in csv.DictReader(fh)
        ]


# --- whole session -------------------------------------------------------------------


@dataclass
class SessionResult:
    positions: list
    emotions: list
    aligned: list
    grid: affectmap.AffectGrid
    summary: report.SessionSummary
    report_text: str
    heatmap: affectmap.HeatmapImage
    counters: dict


def simulated_lines(cfg: PipelineConfig, scene: Scene) -> list[bytes]:
    plan = sim.SessionPlan.from_dict(cfg.simulation)
    return sim.session_lines(scene.floorplan, scene.anchors, plan, cfg.seed)


def collect_live(cfg: PipelineConfig, on_listening: Callable[[int], None] | None = None) -> stream.SessionStreams:
    return asyncio.run(stream.serve_session(cfg.host, cfg.port or 0, cfg.live_connections, on_listening))


def load_model(cfg: PipelineConfig, channels: int) -> LinearModel:
    if cfg.model_path is not None:
        return LinearModel.load(cfg.model_path)
    log.info("no EEG model configured; training on simulated calibration data (seed %d)", cfg.seed)
    return synthetic_model(channels, cfg.seed, cfg.train_windows_per_class)


def process_session(cfg: PipelineConfig, scene: Scene, streams: stream.SessionStreams) -> SessionResult:
    if scene.anchors is None:
        raise PipelineError("scene has no anchors")
    counters = {"alignment": 0, "out_of_bounds": 0, "rejected_windows": 0}

    ranges = range_measurements(streams, scene.anchors, cfg.range_sigma)
    positions = locate.track(
        ranges, scene.anchors, cfg.method, dimension=cfg.dimension, tag_height=cfg.tag_height,
        seed=sim.sub_seed(cfg.seed, "particle-filter"),
    )
    log.info("solved %d positions with %s", len(positions), cfg.method)

    rec = eeg_recording(streams)
    emotions: list[EmotionSample] = []
    if rec is not None:
        recording, times = rec
        model = load_model(cfg, recording.channels)
        emotions, counters["rejected_windows"] = classify_recording(model, recording, times)
    log.info("classified %d EEG windows (%d rejected)", len(emotions), counters["rejected_windows"])

    aligned, counters["alignment"] = stream.align_streams(positions, emotions, cfg.tolerance)
    grid = affectmap.AffectGrid.empty(scene.grid(cfg.cell_size))
    grid, counters["out_of_bounds"] = affectmap.accumulate(grid, aligned)

    cps = None
    valence = [e.valence for e in emotions]
    if len(valence) >= 2:
        cps = detect_change_points(valence, session_penalty(cfg, valence))
    summary = report.build_summary(grid, emotions, cps, counters, min_visits=cfg.min_visits)
    text = make_report(cfg, summary)
    heat = affectmap.render_heatmap(grid, cfg.heatmap_slice, cfg.heatmap_channel, cfg.heatmap_scale)
    return SessionResult(positions, emotions, aligned, grid, summary, text, heat, counters)


def session_penalty(cfg: PipelineConfig, valence: Sequence[float]) -> float:
    """Change-point penalty for a valence series.

    Classifier valence is nearly piecewise constant, so the noise-scaled
    automatic penalty collapses toward zero; the floor keeps short blips
    from becoming episodes.
    """
    beta = auto_penalty(np.asarray(valence, dtype=float)) if cfg.change_penalty == "auto" else float(cfg.change_penalty)
    return max(beta, cfg.change_penalty_floor)


def make_report(cfg: PipelineConfig, summary: report.SessionSummary) -> str:
    endpoint = cfg.report.get("endpoint")
    if not endpoint:
        return report.template_report(summary)
    req = report.ReportRequest.from_env(
        endpoint,
        model_name=cfg.report.get("model", "gpt-4o-mini"),
        timeout=float(cfg.report.get("timeout", 30.0)),
        max_retries=int(cfg.report.get("max_retries", 3)),
        backoff_base=float(cfg.report.get("backoff_base", 1.0)),
    )
    return report.llm_report(summary, req, fallback=bool(cfg.report.get("fallback", True)))


def write_outputs(cfg: PipelineConfig, result: SessionResult) -> dict[str, Path]:
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "heatmap": cfg.out_dir / cfg.heatmap,
        "csv": cfg.out_dir / cfg.grid_csv,
        "summary": cfg.out_dir / cfg.summary,
        "report": cfg.out_dir / cfg.report_text,
    }
    paths["heatmap"].write_bytes(result.heatmap.to_ppm())
    paths["csv"].write_bytes(affectmap.export_csv(result.grid))
    paths["summary"].write_text(result.summary.to_json() + "\n", encoding="utf-8")
    paths["report"].write_text(result.report_text, encoding="utf-8")
    return paths


def run_pipeline(cfg: PipelineConfig, on_listening: Callable[[int], None] | None = None) -> SessionResult:
    scene = load_scene(cfg.scene)
    if cfg.mode == "simulate":
        lines = simulated_lines(cfg, scene)
        cfg.out_dir.mkdir(parents=True, exist_ok=True)
        (cfg.out_dir / cfg.stream_copy).write_bytes(b"".join(lines))
        streams = stream.read_lines(lines)
    elif cfg.mode == "replay":
        streams = stream.read_replay(cfg.input_file)
    else:
        streams = collect_live(cfg, on_listening)
    result = process_session(cfg, scene, streams)
    write_outputs(cfg, result)
    return result


def send_session_tcp(lines: Iterable[bytes], host: str, port: int) -> None:
    """One connection per stream, sent concurrently."""
    groups = sim.split_by_stream(list(lines))
    threads = [threading.Thread(target=stream.send_lines, args=(host, port, g)) for g in groups.values()]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
