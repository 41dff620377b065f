"""Session summaries and narrative reports (offline template or chat-completion API)."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import httpx
import numpy as np

from .affectmap import AffectGrid
from .eeg.changepoint import ChangePointSet, segment_means

log = logging.getLogger(__name__)

API_KEY_ENV = "AFFECTMAP_API_KEY"
DEFAULT_TOP_K = 3
DEFAULT_MIN_VISITS = 5
SYSTEM_PROMPT = (
    "You are an analyst for indoor architectural user-experience studies. "
    "You receive a JSON summary of one visitor session: emotional valence "
    "(-1 negative to +1 positive) measured from EEG, aggregated over a cube "
    "grid of the room. Write a short report describing where the visitor felt "
    "best and worst, how their state changed over time, and design suggestions. "
    "Use only the numbers given."
)


class ReportError(RuntimeError):
    pass


@dataclass(frozen=True)
class CellStat:
    index: tuple[int, int, int]
    mean_valence: float
    dwell: float
    visits: int


@dataclass(frozen=True)
class ChangeEvent:
    time: float
    before: str
    after: str


@dataclass(frozen=True)
class SessionSummary:
    duration: float = 0.0
    samples: int = 0
    mean_valence: float = 0.0
    top_positive: tuple[CellStat, ...] = ()
    top_negative: tuple[CellStat, ...] = ()
    change_points: tuple[ChangeEvent, ...] = ()
    dropped: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("top_positive", "top_negative"):
            for c in d[key]:
                c["index"] = list(c["index"])
        d["top_positive"] = list(d["top_positive"])
        d["top_negative"] = list(d["top_negative"])
        d["change_points"] = list(d["change_points"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "SessionSummary":
        cells = lambda xs: tuple(CellStat(tuple(c["index"]), c["mean_valence"], c["dwell"], c["visits"]) for c in xs)  # noqa: E731
        return cls(
            d["duration"],
            d["samples"],
            d["mean_valence"],
            cells(d["top_positive"]),
            cells(d["top_negative"]),
            tuple(ChangeEvent(**e) for e in d["change_points"]),
            dict(d.get("dropped", {})),
        )


def valence_state(v: float) -> str:
    if v > 1 / 3:
        return "positive"
    if v < -1 / 3:
        return "negative"
    return "neutral"


def build_summary(
    grid: AffectGrid,
    emotions: Sequence,
    change_points: ChangePointSet | None = None,
    counters: dict | None = None,
    *,
    k: int = DEFAULT_TOP_K,
    min_visits: int = DEFAULT_MIN_VISITS,
) -> SessionSummary:
    counters = dict(counters or {})
    if not emotions:
        return SessionSummary(dropped=counters)
    val = np.array([e.valence for e in emotions])
    times = [e.timestamp for e in emotions]

    means = grid.mean_valence()
    cells = [
        CellStat(
            (int(i), int(j), int(kk)),
            float(means[i, j, kk]),
            float(grid.dwell_seconds[i, j, kk]),
            int(grid.visits[i, j, kk]),
        )
        for i, j, kk in zip(*np.nonzero(grid.visits >= max(min_visits, 1)))
    ]
    pos = sorted((c for c in cells if c.mean_valence > 0), key=lambda c: (-c.mean_valence, c.index))[:k]
    neg = sorted((c for c in cells if c.mean_valence < 0), key=lambda c: (c.mean_valence, c.index))[:k]

    events = []
    if change_points is not None and change_points.indices:
        seg = segment_means(val, change_points)
        for n, idx in enumerate(change_points.indices):
            events.append(ChangeEvent(float(times[idx]), valence_state(seg[n]), valence_state(seg[n + 1])))

    return SessionSummary(
        float(times[-1] - times[0]), len(emotions), float(val.mean()), tuple(pos), tuple(neg), tuple(events), counters
    )


def _cell_sentence(c: CellStat, word: str) -> str:
    i, j, k = c.index
    return (
        f"- Cell ({i}, {j}, {k}): mean valence {c.mean_valence:+.3f} over {c.visits} samples, "
        f"{c.dwell:.1f} s dwell ({word})."
    )


def template_report(summary: SessionSummary) -> str:
    """Deterministic plain-text report."""
    lines = ["Session sentiment report", "========================", ""]
    if summary.samples == 0:
        lines.append("No samples were recorded.")
    else:
        lines.append(
            f"The session lasted {summary.duration:.1f} s with {summary.samples} emotion samples. "
            f"Mean valence was {summary.mean_valence:+.3f} ({valence_state(summary.mean_valence)} overall)."
        )
        lines.append("")
        lines.append("Most positive locations:")
        lines.extend(_cell_sentence(c, "positive") for c in summary.top_positive)
        if not summary.top_positive:
            lines.append("- none with enough visits.")
        lines.append("")
        lines.append("Most negative locations:")
        lines.extend(_cell_sentence(c, "negative") for c in summary.top_negative)
        if not summary.top_negative:
            lines.append("- none with enough visits.")
        lines.append("")
        if summary.change_points:
            lines.append("Emotional episodes:")
            for e in summary.change_points:
                lines.append(f"- At t = {e.time:.1f} s the state shifted from {e.before} to {e.after}.")
        else:
            lines.append("The emotional state stayed stable for the whole session.")
    if summary.dropped:
        lines.append("")
        parts = ", ".join(f"{k.replace('_', ' ')} {v}" for k, v in sorted(summary.dropped.items()))
        lines.append(f"Dropped samples: {parts}.")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class ReportRequest:
    endpoint: str
    model_name: str = "gpt-4o-mini"
    api_key: str | None = field(default=None, repr=False)
    timeout: float = 30.0
    max_retries: int = 3
    backoff_base: float = 1.0

    @classmethod
    def from_env(cls, endpoint: str, **kwargs) -> "ReportRequest":
        return cls(endpoint, api_key=os.environ.get(API_KEY_ENV) or None, **kwargs)


def request_body(summary: SessionSummary, model_name: str) -> dict:
    return {
        "model": model_name,
        "messages": [
            {"role": "system", "content": SYSTEM_PROMPT},
            {"role": "user", "content": summary.to_json()},
        ],
    }


def _retryable(status: int) -> bool:
    return status == 429 or 500 <= status < 600


def llm_report(
    summary: SessionSummary,
    req: ReportRequest,
    *,
    fallback: bool = True,
    client: httpx.Client | None = None,
    sleep: Callable[[float], None] = time.sleep,
) -> str:
    """Ask a chat-completion endpoint for the report.

    HTTP 429/5xx and transport errors are retried with backoff
    ``backoff_base * 2**attempt``. When retries run out the template report
    is returned (with a warning) if ``fallback`` is set.
    """
    if not req.api_key:
        raise ReportError("missing API key")
    body = request_body(summary, req.model_name)
    headers = {"Authorization": f"Bearer {req.api_key}", "Content-Type": "application/json"}
    own = client is None
    client = client or httpx.Client(timeout=req.timeout)
    last_error = "no attempt made"
    try:
        for attempt in range(req.max_retries + 1):
            if attempt:
                delay = req.backoff_base * 2 ** (attempt - 1)
                log.warning("retry %d/%d in %.2f s after %s", attempt, req.max_retries, delay, last_error)
                sleep(delay)
            try:
                resp = client.post(req.endpoint, json=body, headers=headers, timeout=req.timeout)
            except httpx.TimeoutException:
                last_error = "timeout"
                continue
            except httpx.TransportError as exc:
                last_error = f"transport error {type(exc).__name__}"
                continue
            if _retryable(resp.status_code):
                last_error = f"HTTP {resp.status_code}"
                continue
            if not resp.is_success:
                raise ReportError(f"HTTP {resp.status_code} from report endpoint")
            try:
                content = resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ReportError("malformed response JSON") from exc
            if not isinstance(content, str):
                raise ReportError("malformed response JSON")
            log.info("report received after %d retries", attempt)
            return content
    finally:
        if own:
            client.close()
    if fallback:
        log.warning("report endpoint failed (%s); using template report", last_error)
        return template_report(summary)
    raise ReportError(f"report endpoint failed after {req.max_retries} retries: {last_error}")
