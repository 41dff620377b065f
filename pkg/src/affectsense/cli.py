"""Command-line entry point: ``affectsense <subcommand>``.

Exit codes: 0 success, 2 configuration/validation error, 3 I/O error,
4 pipeline error. Failures print one JSON line to stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import affectmap, locate, pipeline, report, sim, stream
from .eeg import band_features, evaluate_classifier, train_classifier
from .eeg.classifier import LinearModel, read_training_csv, write_training_csv
from .pipeline import ConfigError, PipelineError
from .scene import DegenerateGeometryError, SceneError, load_scene

log = logging.getLogger("affectsense")

EXIT_CONFIG, EXIT_IO, EXIT_PIPELINE = 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


def cmd_sim(args) -> int:
    cfg = pipeline.load_config(args.config, {"seed": args.seed, "simulate": True})
    scene = load_scene(cfg.scene)
    lines = pipeline.simulated_lines(cfg, scene)
    if args.tcp:
        host, port = _host_port(args.tcp)
        pipeline.send_session_tcp(lines, host, port)
        log.info("sent %d lines to %s:%d", len(lines), host, port)
    else:
        Path(args.out).write_bytes(b"".join(lines))
        log.info("wrote %d lines to %s", len(lines), args.out)
    return 0


def cmd_locate(args) -> int:
    scene = load_scene(args.scene)
    if scene.anchors is None:
        raise ConfigError("scene has no anchors")
    streams = stream.read_replay(args.input)
    ranges = pipeline.range_measurements(streams, scene.anchors, args.sigma)
    est = locate.track(ranges, scene.anchors, args.method, dimension=args.dimension, seed=args.seed)
    Path(args.out).write_bytes(pipeline.write_positions_csv(est))
    log.info("wrote %d positions to %s", len(est), args.out)
    return 0


def cmd_train(args) -> int:
    if bool(args.data) == bool(args.synthetic):
        raise ConfigError("give exactly one of --data or --synthetic")
    if args.data:
        x, y = read_training_csv(args.data)
        layout = args.layout or ""
    else:
        feats, labels = [], []
        for label, state in zip((-1, 0, 1), ("negative", "neutral", "positive")):
            for w in sim.labelled_windows(state, args.synthetic, sim.sub_seed(args.seed, f"calib-{state}"), args.channels):
                feats.append(band_features(w))
                labels.append(label)
        if args.export_data:
            write_training_csv(args.export_data, feats, labels)
        x, y = np.array([f.values for f in feats]), np.array(labels)
        layout = feats[0].layout
    model = train_classifier(x, y, args.l2, feature_layout=layout)
    model.save(args.out)
    ev = evaluate_classifier(model, x, y)
    log.info("training accuracy %.4f; model written to %s", ev.accuracy, args.out)
    return 0


def cmd_classify(args) -> int:
    model = LinearModel.load(args.model)
    rec = pipeline.eeg_recording(stream.read_replay(args.input))
    if rec is None:
        raise PipelineError("input has no EEG stream")
    emotions, rejected = pipeline.classify_recording(model, *rec)
    Path(args.out).write_bytes(pipeline.write_emotions_csv(emotions))
    log.info("wrote %d emotion samples (%d windows rejected) to %s", len(emotions), rejected, args.out)
    return 0


def _slice(text: str):
    return text if text == "flatten" else int(text)


def cmd_map(args) -> int:
    scene = load_scene(args.scene)
    positions = pipeline.read_positions_csv(args.positions)
    emotions = pipeline.read_emotions_csv(args.emotions)
    aligned, dropped = stream.align_streams(positions, emotions, args.tolerance)
    grid = affectmap.AffectGrid.empty(scene.grid(args.cell_size))
    grid, oob = affectmap.accumulate(grid, aligned)
    img = affectmap.render_heatmap(grid, args.slice, args.channel, args.scale)
    Path(args.heatmap).write_bytes(img.to_ppm())
    if args.csv:
        Path(args.csv).write_bytes(affectmap.export_csv(grid))
    if args.summary:
        from .eeg import detect_change_points

        cps = detect_change_points([e.valence for e in emotions]) if len(emotions) >= 2 else None
        summary = report.build_summary(grid, emotions, cps, {"alignment": dropped, "out_of_bounds": oob})
        Path(args.summary).write_text(summary.to_json() + "\n", encoding="utf-8")
    log.info("mapped %d samples (%d unaligned, %d out of bounds)", len(aligned), dropped, oob)
    return 0


def cmd_report(args) -> int:
    summary = report.SessionSummary.from_dict(json.loads(Path(args.summary).read_text(encoding="utf-8")))
    if args.endpoint:
        req = report.ReportRequest.from_env(
            args.endpoint, model_name=args.model_name, timeout=args.timeout, max_retries=args.max_retries
        )
        text = report.llm_report(summary, req, fallback=not args.no_fallback)
    else:
        text = report.template_report(summary)
    Path(args.out).write_text(text, encoding="utf-8")
    return 0


def cmd_run(args) -> int:
    overrides = {
        "simulate": True if args.simulate else None,
        "replay": args.replay,
        "live": {"port": args.live} if args.live is not None else None,
        "out_dir": args.out_dir,
        "seed": args.seed,
        "method": args.method,
        "model": args.model,
    }
    cfg = pipeline.load_config(args.config, overrides)
    result = pipeline.run_pipeline(cfg)
    log.info(
        "session done: %d positions, %d emotions, %d aligned; outputs in %s",
        len(result.positions), len(result.emotions), len(result.aligned), cfg.out_dir,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="affectsense", description="Indoor user-sentiment mapping from UWB ranging and EEG.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("sim", help="simulate a session and emit NDJSON stream lines")
    s.add_argument("--config", required=True)
    dest = s.add_mutually_exclusive_group(required=True)
    dest.add_argument("--out", help="write lines to this file")
    dest.add_argument("--tcp", metavar="HOST:PORT", help="send lines to a listening pipeline")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_sim)

    s = sub.add_parser("locate", help="solve positions from the range stream of an NDJSON file")
    s.add_argument("--scene", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--method", default="gauss_newton", choices=["gauss_newton", "tdoa", "particle_filter"])
    s.add_argument("--sigma", type=float, default=0.05)
    s.add_argument("--dimension", type=int, default=2, choices=[2, 3])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_locate)

    s = sub.add_parser("train", help="train the EEG emotion classifier")
    s.add_argument("--data", help="training CSV (label column then features)")
    s.add_argument("--synthetic", type=int, metavar="N", help="simulate N windows per class instead")
    s.add_argument("--channels", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--layout", help="feature layout string for --data")
    s.add_argument("--export-data", help="also write the synthetic training CSV here")
    s.add_argument("--l2", type=float, default=1e-3)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("classify", help="classify the EEG stream of an NDJSON file")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_classify)

    s = sub.add_parser("map", help="align positions and emotions into the grid; render heatmap")
    s.add_argument("--scene", required=True)
    s.add_argument("--positions", required=True)
    s.add_argument("--emotions", required=True)
    s.add_argument("--cell-size", type=float)
    s.add_argument("--tolerance", type=float, default=stream.DEFAULT_TOLERANCE)
    s.add_argument("--slice", type=_slice, default="flatten")
    s.add_argument("--channel", choices=["valence", "occupancy"], default="valence")
    s.add_argument("--scale", type=int, default=10)
    s.add_argument("--heatmap", required=True)
    s.add_argument("--csv")
    s.add_argument("--summary")
    s.set_defaults(func=cmd_map)

    s = sub.add_parser("report", help="write a report from a summary JSON")
    s.add_argument("--summary", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--endpoint", help="chat-completion URL; omit for the offline template")
    s.add_argument("--model-name", default="gpt-4o-mini")
    s.add_argument("--timeout", type=float, default=30.0)
    s.add_argument("--max-retries", type=int, default=3)
    s.add_argument("--no-fallback", action="store_true")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="run the end-to-end pipeline")
    s.add_argument("--config", required=True)
    s.add_argument("--simulate", action="store_true")
    s.add_argument("--replay", metavar="FILE")
    s.add_argument("--live", type=int, metavar="PORT")
    s.add_argument("--out-dir")
    s.add_argument("--seed", type=int)
    s.add_argument("--method", choices=["gauss_newton", "tdoa", "particle_filter"])
    s.add_argument("--model")
    s.set_defaults(func=cmd_run)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    print(json.dumps({"error": kind, "code": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except (ConfigError, SceneError) as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)
    except (PipelineError, stream.StreamError, DegenerateGeometryError, report.ReportError, ValueError) as exc:
        return _fail(EXIT_PIPELINE, "pipeline", exc)


if __name__ == "__main__":
    sys.exit(main())
