import json
import logging
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from affectsense.affectmap import AffectGrid, accumulate
from affectsense.eeg.changepoint import ChangePointSet
from affectsense.eeg.classifier import EmotionSample
from affectsense.report import (
    API_KEY_ENV,
    CellStat,
    ChangeEvent,
    ReportError,
    ReportRequest,
    SessionSummary,
    build_summary,
    llm_report,
    request_body,
    template_report,
)
from affectsense.scene import GridSpec
from affectsense.stream import AlignedSample

SECRET = "sk-test-7f3a9c"


class Stub:
    """Scripted chat-completion endpoint: pops one (status, body) per request."""

    def __init__(self, script):
        self.script = list(script)
        self.requests = []
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                n = int(self.headers.get("Content-Length", 0))
                stub.requests.append((dict(self.headers), self.rfile.read(n)))
                status, body = stub.script.pop(0) if stub.script else (500, b"")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(body)))
                self.end_headers()
                self.wfile.write(body)

            def log_message(self, *args):
                pass

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}/v1/chat/completions"
        threading.Thread(target=self.server.serve_forever, daemon=True).start()

    def close(self):
        self.server.shutdown()
        self.server.server_close()


def ok(content):
    return 200, json.dumps({"choices": [{"message": {"content": content}}]}).encode()


@pytest.fixture
def stub_factory():
    made = []

    def make(*script):
        s = Stub(script)
        made.append(s)
        return s

    yield make
    for s in made:
        s.close()


def fixture_summary():
    return SessionSummary(
        duration=60.0,
        samples=119,
        mean_valence=0.125,
        top_positive=(CellStat((2, 3, 0), 0.8, 12.5, 25), CellStat((1, 3, 0), 0.4, 4.0, 8)),
        top_negative=(CellStat((15, 2, 0), -0.7, 10.0, 20),),
        change_points=(ChangeEvent(31.5, "positive", "negative"),),
        dropped={"alignment": 1, "out_of_bounds": 0, "rejected_windows": 2},
    )


def no_sleep(_):
    pass


def test_template_golden(golden_dir):
    text = template_report(fixture_summary())
    assert text == template_report(fixture_summary())
    assert text == (golden_dir / "template_report.txt").read_text(encoding="utf-8")


def test_template_empty():
    assert "No samples were recorded." in template_report(SessionSummary())


def test_summary_json_round_trip():
    s = fixture_summary()
    assert SessionSummary.from_dict(json.loads(s.to_json())) == s


def _sample(t, pos, v):
    return AlignedSample(t, np.asarray(pos, float), EmotionSample.from_probs(t, (max(-v, 0), 1 - abs(v), max(v, 0))))


def test_build_summary_empty():
    s = build_summary(AffectGrid.empty(GridSpec((0, 0, 0), 1, (2, 2, 1))), [])
    assert (s.duration, s.samples, s.top_positive, s.top_negative, s.change_points) == (0.0, 0, (), (), ())


def test_build_summary_top_cells():
    spec = GridSpec((0, 0, 0), 1, (3, 1, 1))
    samples = [_sample(t, (0.5, 0.5, 0.5), 0.8) for t in range(5)]
    samples += [_sample(5 + t, (1.5, 0.5, 0.5), 0.4) for t in range(5)]
    samples += [_sample(10 + t, (2.5, 0.5, 0.5), 0.4) for t in range(2)]  # below min_visits
    grid, _ = accumulate(AffectGrid.empty(spec), samples)
    emotions = [s.emotion for s in samples]
    s = build_summary(grid, emotions, k=1)
    assert [c.index for c in s.top_positive] == [(0, 0, 0)]
    assert s.top_positive[0].mean_valence == pytest.approx(0.8)
    assert s.top_negative == ()
    s2 = build_summary(grid, emotions, k=5)
    assert [c.index for c in s2.top_positive] == [(0, 0, 0), (1, 0, 0)]
    assert s.duration == 11.0


def test_build_summary_constant_and_episodes():
    emotions = [EmotionSample.from_probs(float(t), (0, 0, 1)) for t in range(4)]
    emotions += [EmotionSample.from_probs(float(t), (1, 0, 0)) for t in range(4, 8)]
    grid = AffectGrid.empty(GridSpec((0, 0, 0), 1, (1, 1, 1)))
    s = build_summary(grid, emotions[:4])
    assert s.mean_valence == 1.0
    s = build_summary(grid, emotions, ChangePointSet((4,), 1.0))
    assert s.change_points == (ChangeEvent(4.0, "positive", "negative"),)


def test_echo(stub_factory):
    stub = stub_factory(ok("OK-REPORT"))
    req = ReportRequest(stub.url, api_key=SECRET, backoff_base=0.0)
    assert llm_report(fixture_summary(), req, sleep=no_sleep) == "OK-REPORT"
    headers, _ = stub.requests[0]
    assert headers["Authorization"] == f"Bearer {SECRET}"


def test_missing_key_before_network(stub_factory, monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    stub = stub_factory(ok("never"))
    req = ReportRequest.from_env(stub.url)
    with pytest.raises(ReportError, match="missing API key"):
        llm_report(fixture_summary(), req)
    assert stub.requests == []


def test_key_from_env(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, SECRET)
    req = ReportRequest.from_env("http://x")
    assert req.api_key == SECRET
    assert SECRET not in repr(req)


def test_retries_429_then_success(stub_factory, caplog):
    stub = stub_factory((429, b"{}"), (429, b"{}"), ok("third time"))
    delays = []
    req = ReportRequest(stub.url, api_key=SECRET, backoff_base=1.0)
    with caplog.at_level(logging.INFO, logger="affectsense.report"):
        assert llm_report(fixture_summary(), req, sleep=delays.append) == "third time"
    assert delays == [1.0, 2.0]
    assert len(stub.requests) == 3
    retries = [r.getMessage() for r in caplog.records if "retry" in r.getMessage()]
    assert retries[0].startswith("retry 1/3") and retries[1].startswith("retry 2/3")
    assert "after 2 retries" in caplog.text
    assert SECRET not in caplog.text


def test_fallback_when_retries_exhausted(stub_factory, caplog):
    stub = stub_factory(*[(503, b"")] * 4)
    req = ReportRequest(stub.url, api_key=SECRET, max_retries=3)
    with caplog.at_level(logging.WARNING, logger="affectsense.report"):
        text = llm_report(fixture_summary(), req, sleep=no_sleep)
    assert text == template_report(fixture_summary())
    assert len(stub.requests) == 4
    assert "using template report" in caplog.text


def test_no_fallback_raises(stub_factory):
    stub = stub_factory(*[(500, b"")] * 2)
    req = ReportRequest(stub.url, api_key=SECRET, max_retries=1)
    with pytest.raises(ReportError, match="after 1 retries"):
        llm_report(fixture_summary(), req, fallback=False, sleep=no_sleep)


def test_malformed_response(stub_factory):
    stub = stub_factory((200, b"not json"))
    with pytest.raises(ReportError, match="malformed response JSON"):
        llm_report(fixture_summary(), ReportRequest(stub.url, api_key=SECRET), sleep=no_sleep)
    stub = stub_factory((200, b'{"choices": []}'))
    with pytest.raises(ReportError, match="malformed response JSON"):
        llm_report(fixture_summary(), ReportRequest(stub.url, api_key=SECRET), sleep=no_sleep)


def test_client_error_not_retried(stub_factory):
    stub = stub_factory((401, b"{}"))
    with pytest.raises(ReportError, match="HTTP 401"):
        llm_report(fixture_summary(), ReportRequest(stub.url, api_key=SECRET), sleep=no_sleep)
    assert len(stub.requests) == 1


def test_unreachable_endpoint_falls_back():
    req = ReportRequest("http://127.0.0.1:9/none", api_key=SECRET, max_retries=1, timeout=1.0)
    assert llm_report(fixture_summary(), req, sleep=no_sleep) == template_report(fixture_summary())


def _numbers(obj, prefix=""):
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from _numbers(v, f"{prefix}.{k}")
    elif isinstance(obj, (list, tuple)):
        for i, v in enumerate(obj):
            yield from _numbers(v, f"{prefix}[{i}]")
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
        yield prefix, obj


def test_request_body_schema(stub_factory):
    stub = stub_factory(ok("x"))
    summary = fixture_summary()
    llm_report(summary, ReportRequest(stub.url, "test-model", api_key=SECRET), sleep=no_sleep)
    _, raw = stub.requests[0]
    body = json.loads(raw)
    assert body == request_body(summary, "test-model")
    assert body["model"] == "test-model"
    assert [m["role"] for m in body["messages"]] == ["system", "user"]
    sent = json.loads(body["messages"][1]["content"])
    assert dict(_numbers(sent)) == dict(_numbers(summary.to_dict()))
    assert SECRET.encode() not in raw
