"""Shared fixtures builders and a scriptable chat-completions stub server."""

from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np

from sleepsense.ingest import ChannelSeries, Epoch
from sleepsense.llm_bridge import Payload, Task, build_zero_shot, transcript_record, write_transcript
from sleepsense.psqi import ORDINAL_ITEMS, PSQIRecord, PSQIResponse, SleepQuality, write_psqi_csv

TEST_KEY_VAR = "SLEEPSENSE_TEST_API_KEY"
TEST_KEY = "sk-test-not-a-real-key"


def make_epoch(signals: dict, fs: float, label=None, index: int = 0, subject: str = "s01") -> Epoch:
    signals = {k: np.asarray(v, dtype=np.float64) for k, v in signals.items()}
    n = next(iter(signals.values())).size
    return Epoch(
        signal=signals,
        sample_rates={k: fs for k in signals},
        length_s=n / fs,
        label=label,
        subject_id=subject,
        index=index,
    )


def sine(freq_hz: float, fs: float, seconds: float, amplitude: float = 1.0, phase: float = 0.0) -> np.ndarray:
    t = np.arange(int(round(fs * seconds))) / fs
    return amplitude * np.sin(2 * np.pi * freq_hz * t + phase)


def channel(name: str, samples, fs: float) -> ChannelSeries:
    return ChannelSeries(name, fs, np.asarray(samples, dtype=np.float64))


def completion(content: str) -> dict:
    return {"id": "cmpl-test", "object": "chat.completion",
            "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}]}


class StubServer:
    """Local OpenAI-compatible endpoint.

    Responses come from ``script`` (a list of ``(status, body)`` pairs used in
    order) and then from ``responder(request_json) -> (status, body)``. Request
    bodies and headers are recorded, and ``max_in_flight`` tracks the largest
    number of requests being handled at the same moment.
    """

    def __init__(self, script=(), responder=None, delay_s: float = 0.0):
        self.script = list(script)
        self.responder = responder or (lambda body: (200, completion('{"state": "focused", "confidence": 50}')))
        self.delay_s = delay_s
        self.requests = []
        self.headers = []
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()
        stub = self

        class Handler(BaseHTTPRequestHandler):
            def do_POST(self):
                length = int(self.headers.get("Content-Length", 0))
                raw = self.rfile.read(length)
                with stub._lock:
                    stub.in_flight += 1
                    stub.max_in_flight = max(stub.max_in_flight, stub.in_flight)
                    body = json.loads(raw)
                    stub.requests.append(body)
                    stub.headers.append(dict(self.headers))
                    scripted = stub.script.pop(0) if stub.script else None
                try:
                    status, payload = scripted if scripted is not None else stub.responder(body)
                    if stub.delay_s:
                        time.sleep(stub.delay_s)
                    data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
                    self.send_response(status)
                    self.send_header("Content-Type", "application/json")
                    self.send_header("Content-Length", str(len(data)))
                    self.end_headers()
                    self.wfile.write(data)
                finally:
                    with stub._lock:
                        stub.in_flight -= 1

            def log_message(self, *args):
                pass

        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.httpd.daemon_threads = True
        self.thread = threading.Thread(target=self.httpd.serve_forever, kwargs={"poll_interval": 0.02}, daemon=True)

    @property
    def base_url(self) -> str:
        return f"http://127.0.0.1:{self.httpd.server_address[1]}/v1"

    def __enter__(self):
        self.thread.start()
        return self

    def __exit__(self, *exc):
        self.httpd.shutdown()
        self.httpd.server_close()


def _good(i) -> PSQIResponse:
    return PSQIResponse(bedtime="23:00", latency_min=5, waketime="07:00", sleep_hours=8,
                        other_reason=f"note {i}", **{name: 0 for name in ORDINAL_ITEMS})


def _poor(i) -> PSQIResponse:
    return PSQIResponse(bedtime="22:00", latency_min=90, waketime="08:00", sleep_hours=4,
                        other_reason=f"note {i}", **{name: 3 for name in ORDINAL_ITEMS})


def _answer(quality: SleepQuality) -> str:
    return json.dumps({"quality": quality.text, "confidence": 70, "explanation": "fixture",
                       "suggestions": "keep a regular schedule"})


def agreement_fixture(tmp_path, outcomes):
    """PSQI answers and a transcript realising the (scored, answered) pairs in ``outcomes``."""
    records, entries = [], []
    for i, (scored, answered) in enumerate(outcomes):
        resp = _good(i) if scored is SleepQuality.GOOD else _poor(i)
        records.append(PSQIRecord(f"p{i:03d}", "pre", resp))
        entries.append(transcript_record(build_zero_shot(Task.SLEEP_QUALITY_PSQI, Payload.psqi(resp)),
                                         _answer(answered)))
    write_psqi_csv(tmp_path / "psqi.csv", records)
    write_transcript(tmp_path / "transcript.jsonl", entries)
    return {"task": "sleep_quality_psqi", "model": "llm_zero_shot", "payload": "psqi_text",
            "output_dir": str(tmp_path / "out"), "data": {"psqi_csv": str(tmp_path / "psqi.csv")},
            "transcript": str(tmp_path / "transcript.jsonl"), "replay": True}
