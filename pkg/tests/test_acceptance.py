"""Acceptance criteria, one test each, every one printing a single PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` to see the verdict lines next to the
usual pytest report. Criterion 4 needs the public datasets and is skipped when
their directories are not given through the environment.
"""

import hashlib
import json
import os
import random
import subprocess
import sys
import time
from pathlib import Path

import matplotlib
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps

from feedback_cases import BEACH_SCRIPT, LEAKY_SCRIPT, check_fields_reach_prompt, features, profiles
from helpers import TEST_KEY, TEST_KEY_VAR, StubServer, agreement_fixture, channel, make_epoch, sine
from oracles import brute_confusion, brute_metrics, internal_nodes
from prompt_cases import GOLDEN as PROMPT_GOLDEN
from prompt_cases import golden_bundles, show
from psqi_cases import BEST, HAND, WORST
from render_cases import cases, three_day_activity
from sleepsense.classify import GBTParams, evaluate, feature_importance, train_gbt
from sleepsense.cli import parse_config, run_detection, run_quality_agreement
from sleepsense.dsp import DEFAULT_BANDS, band_power, extract_features, lowpass_filter, wavelet_spectrogram, welch_psd
from sleepsense.feedback import validate_imagery
from sleepsense.ingest import AttentionState, SleepStage
from sleepsense.llm_bridge import (
    EndpointConfig,
    Payload,
    Task,
    build_zero_shot,
    chat_complete_detailed,
    export_finetune_jsonl,
    finetune_labels,
    parse_inference,
    run_batch,
)
from sleepsense.psqi import SleepQuality, classify_sleeper, score_components
from sleepsense.render import build_actogram

TESTS = Path(__file__).parent


def verdict(capsys, number: int, title: str, checks):
    """Print one line for the criterion and fail the test if any check failed."""
    failed = [name for name, ok in checks if not ok]
    line = f"criterion {number} ({title}): " + ("PASS" if not failed else "FAIL [" + "; ".join(failed) + "]")
    with capsys.disabled():
        print("\n" + line)
    assert not failed, line


def holds(check) -> bool:
    """Run a property check, reporting an assertion failure as False."""
    try:
        check()
    except AssertionError:
        return False
    return True


def rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


# ---------------------------------------------------------------------------


def test_criterion_1_dsp(capsys):
    start = time.perf_counter()
    fs = 128.0
    x = sine(10.0, fs, 10.0)
    freqs, psd = welch_psd(x, fs)
    total = float(np.trapezoid(psd, freqs))
    epoch = make_epoch({"C": x}, fs)
    shares = {b.name: band_power(epoch, "C", b) / total for b in DEFAULT_BANDS}
    # second route: scipy's Welch with the same 2 s Hann segments, integrated here
    f2, p2 = sps.welch(x, fs=fs, window="hann", nperseg=int(2 * fs))
    alpha = next(b for b in DEFAULT_BANDS if b.name == "alpha")
    inside = (f2 >= alpha.low_hz) & (f2 <= alpha.high_hz)
    scipy_alpha = float(np.trapezoid(p2[inside], f2[inside]) / np.trapezoid(p2, f2))

    passed = lowpass_filter(channel("C", sine(5.0, fs, 10.0), fs), 40.0, 128).samples
    stopped = lowpass_filter(channel("C", sine(60.0, fs, 10.0), fs), 40.0, 128).samples

    parseval = []
    for rate, seconds in ((100.0, 30.0), (128.0, 10.0)):
        noise = np.random.default_rng(1).normal(size=int(rate * seconds))
        power = wavelet_spectrogram(make_epoch({"C": noise}, rate), "C").power.sum()
        parseval.append(abs(power - np.sum(noise**2)) / np.sum(noise**2))

    gaussian = np.random.default_rng(42).standard_normal(10_000)
    kurt = extract_features(make_epoch({"C": gaussian}, fs)).get("C", "kurtosis")
    elapsed = time.perf_counter() - start

    verdict(capsys, 1, "DSP oracle suite", [
        (f"alpha share {shares['alpha']:.4f} >= 0.90", shares["alpha"] >= 0.90),
        (f"other bands {max(v for k, v in shares.items() if k != 'alpha'):.4f} <= 0.05",
         all(v <= 0.05 for k, v in shares.items() if k != "alpha")),
        (f"scipy-route alpha share {scipy_alpha:.4f} >= 0.90", scipy_alpha >= 0.90),
        ("5 Hz RMS within 1%", abs(rms(passed) / rms(sine(5.0, fs, 10.0)) - 1) < 0.01),
        ("60 Hz RMS below 1%", rms(stopped) < 0.01 * rms(sine(60.0, fs, 10.0))),
        (f"Parseval relative error {max(parseval):.2e} <= 1e-6", max(parseval) <= 1e-6),
        (f"Gaussian excess kurtosis {kurt:.3f} within 0.2", -0.2 <= kurt <= 0.2),
        (f"runtime {elapsed:.2f} s < 10 s", elapsed < 10),
    ])


def test_criterion_2_metrics(capsys):
    rng = random.Random(2024)
    mismatches = 0
    for _ in range(1000):
        k = rng.randint(1, 6)
        labels = list(range(k))
        n = rng.randint(1, 50)
        truth = [rng.randrange(k) for _ in range(n)]
        pred = [rng.randrange(k) for _ in range(n)]
        report = evaluate(pred, truth, labels=labels)
        acc, wf1, _ = brute_metrics(truth, pred, labels)
        counts = brute_confusion(truth, pred, labels)
        same = (report.accuracy == acc and report.weighted_f1 == wf1
                and report.confusion.counts.tolist() == [[counts[t][p] for p in labels] for t in labels])
        mismatches += not same
    hand = evaluate(["A", "B", "B", "B"], ["A", "A", "B", "B"])
    # F1(A) = 2/3, F1(B) = 4/5, equal support: (2/3 + 4/5) / 2 = 11/15
    verdict(capsys, 2, "metric oracle equivalence", [
        (f"{mismatches} of 1000 random cases differ from the brute-force oracle", mismatches == 0),
        (f"hand case weighted F1 {hand.weighted_f1!r} equals 11/15 within 1e-9",
         abs(hand.weighted_f1 - 11 / 15) <= 1e-9 and round(hand.weighted_f1, 4) == 0.7333),
    ])


def test_criterion_3_gbt(capsys):
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    centers = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
    which = np.repeat(np.arange(4), 100)
    X = centers[which] + rng.normal(scale=0.08, size=(400, 2))
    y = [int(a != b) for a, b in centers[which].astype(int)]
    model = train_gbt(X, y, params=GBTParams(n_rounds=50, max_depth=2))
    acc = float(np.mean(np.array(model.predict_labels(X)) == np.array(y)))
    loss = model.train_loss
    doc = json.loads(model.to_json())
    nodes = sum(internal_nodes(tree) for group in doc["trees"] for tree in group)
    importance = sum(feature_importance(model).values())
    elapsed = time.perf_counter() - start
    verdict(capsys, 3, "GBT sanity", [
        (f"XOR accuracy {acc:.4f} >= 0.99", acc >= 0.99),
        ("training log-loss non-increasing", all(b <= a for a, b in zip(loss, loss[1:]))),
        (f"importance total {importance} equals internal nodes {nodes}", importance == nodes and nodes > 0),
        (f"runtime {elapsed:.2f} s < 30 s", elapsed < 30),
    ])


ATTENTION_DIR = os.environ.get("SLEEPSENSE_ATTENTION_DIR")
SLEEP_EDF_DIR = os.environ.get("SLEEPSENSE_SLEEP_EDF_DIR")


def test_criterion_4_dataset_reproduction(capsys, tmp_path):
    if not (ATTENTION_DIR and SLEEP_EDF_DIR):
        with capsys.disabled():
            print("\ncriterion 4 (dataset-conditional reproduction): NOT RUN, public datasets not configured")
        pytest.skip("set SLEEPSENSE_ATTENTION_DIR and SLEEPSENSE_SLEEP_EDF_DIR to run on the public datasets")
    start = time.perf_counter()
    runs = {
        "attention": ({"attention_dir": ATTENTION_DIR},
                      {"train": 919, "validation": 230, "test": 287, "seed": 0}),
        "sleep_stage": ({"sleep_edf_dir": SLEEP_EDF_DIR},
                        {"train": 152362 / 190954, "validation": 38092 / 190954, "test": 500 / 190954, "seed": 0}),
    }
    acc = {}
    for task, (data, split) in runs.items():
        for model in ("majority", "gbt"):
            cfg = parse_config({"task": task, "model": model, "payload": "features", "data": data, "split": split,
                                "output_dir": str(tmp_path / task)})
            acc[task, model] = 100 * run_detection(cfg).accuracy
    elapsed = time.perf_counter() - start
    verdict(capsys, 4, "dataset-conditional reproduction", [
        (f"attention majority {acc['attention', 'majority']:.1f} within 1.5 of 66.6",
         abs(acc["attention", "majority"] - 66.6) <= 1.5),
        (f"sleep majority {acc['sleep_stage', 'majority']:.1f} within 1.5 of 37.2",
         abs(acc["sleep_stage", "majority"] - 37.2) <= 1.5),
        (f"attention GBT {acc['attention', 'gbt']:.1f} >= 85", acc["attention", "gbt"] >= 85),
        (f"sleep GBT {acc['sleep_stage', 'gbt']:.1f} >= 65", acc["sleep_stage", "gbt"] >= 65),
        (f"runtime {elapsed / 60:.1f} min < 20 min", elapsed < 20 * 60),
    ])


def test_criterion_5_psqi(capsys):
    best, worst, hand = score_components(BEST), score_components(WORST), score_components(HAND)
    verdict(capsys, 5, "PSQI scoring", [
        ("all-zero response gives 0 and good",
         best.global_score == 0 and classify_sleeper(best) is SleepQuality.GOOD),
        ("worst case gives 21 and poor", worst.global_score == 21 and classify_sleeper(worst) is SleepQuality.POOR),
        (f"hand-scored components {hand.components}", hand.components == (1, 2, 1, 1, 2, 0, 1)
         and hand.global_score == 8),
        ("cutoff 5 good, 6 poor",
         classify_sleeper(5) is SleepQuality.GOOD and classify_sleeper(6) is SleepQuality.POOR),
    ])


def test_criterion_6_agreement(capsys, tmp_path):
    G, P = SleepQuality.GOOD, SleepQuality.POOR
    raw = agreement_fixture(tmp_path, [(G, G)] * 39 + [(P, P)] * 27 + [(P, G)] * 11)
    table = run_quality_agreement(parse_config(raw))
    lines = (tmp_path / "out" / "agreement.txt").read_text().splitlines()
    rows = [tuple(c.strip() for c in line.split(" | ")) for line in lines[2:6]]
    verdict(capsys, 6, "agreement harness", [
        (f"agreement {100 * table.agreement:.2f}% within 0.1 of 85.7", abs(100 * table.agreement - 85.7) <= 0.1),
        ("2x2 counts", table.counts == {(G, G): 39, (P, P): 27, (G, P): 0, (P, G): 11}),
        ("table rows", rows == [("good", "good", "39"), ("poor", "poor", "27"), ("good", "poor", "0"),
                                ("poor", "good", "11")]),
    ])


def test_criterion_7_llm_bridge(capsys, monkeypatch):
    monkeypatch.setenv(TEST_KEY_VAR, TEST_KEY)
    bundles = golden_bundles()
    stale = [n for n, b in bundles.items() if show(b) != (PROMPT_GOLDEN / f"{n}.txt").read_text(encoding="utf-8")]
    files = {p.stem for p in PROMPT_GOLDEN.glob("*.txt")}

    plain = parse_inference('{"state": "focused", "confidence": 90}', Task.ATTENTION)
    fenced = parse_inference('```json\n{"stage": "REM", "confidence": 55}\n```', Task.SLEEP_STAGE)
    refusal = parse_inference("As a text-based AI, I do not have the capability to process images "
                              "and I cannot assist with this request", Task.ATTENTION)

    query = build_zero_shot(Task.ATTENTION, Payload.features({"x": 1.0}))
    with StubServer(script=[(429, {}), (429, {})]) as stub:
        cfg = EndpointConfig(base_url=stub.base_url, api_key_env_var=TEST_KEY_VAR, backoff_s=0.01)
        attempts = chat_complete_detailed(query, cfg, sleep=lambda s: None).attempts
        retried = len(stub.requests)

    many = [build_zero_shot(Task.ATTENTION, Payload.features({"x": float(i)})) for i in range(20)]
    with StubServer(delay_s=0.05) as stub:
        run_batch(many, EndpointConfig(base_url=stub.base_url, api_key_env_var=TEST_KEY_VAR, max_parallel=3))
        peak = stub.max_in_flight

    stages = [s for s in SleepStage if s is not SleepStage.UNKNOWN_OR_MOVEMENT] * 3
    states = list(AttentionState) * 4
    stage_rows = [({"f": float(i)}, s) for i, s in enumerate(stages)]
    state_rows = [({"f": float(i)}, s) for i, s in enumerate(states)]
    roundtrip = (finetune_labels(export_finetune_jsonl(stage_rows, Task.SLEEP_STAGE), Task.SLEEP_STAGE) == stages
                 and finetune_labels(export_finetune_jsonl(state_rows, Task.ATTENTION), Task.ATTENTION) == states)

    verdict(capsys, 7, "llm_bridge", [
        (f"golden snapshots differ: {stale}", not stale and files == set(bundles)),
        ("plain JSON", plain.label is AttentionState.FOCUSED and plain.confidence == 90),
        ("fenced JSON", fenced.label is SleepStage.REM and fenced.confidence == 55),
        ("verbatim refusal", refusal.refusal and refusal.label is None),
        (f"429, 429, 200 gave {attempts} attempts", attempts == 3 and retried == 3),
        ("fine-tune labels round-trip", roundtrip),
        (f"peak in-flight {peak} <= max_parallel 3", 1 <= peak <= 3),
    ])


def test_criterion_8_feedback(capsys):
    leaky = validate_imagery(LEAKY_SCRIPT, features(theta_alpha_ratio=2.3))
    beach = validate_imagery(BEACH_SCRIPT, features())

    @settings(max_examples=200, deadline=None)
    @given(profiles(), st.sampled_from(["suggestion", "imagery"]))
    def every_field_reaches_the_prompt(profile, kind):
        check_fields_reach_prompt(profile, kind)

    verdict(capsys, 8, "feedback", [
        ("'ratio of 2.3' script fails", not leaky.passed and "ratio of 2.3" in leaky.leaked_tokens),
        ("beach script passes", beach.passed),
        ("every profile field reaches the prompt", holds(every_field_reaches_the_prompt)),
    ])


def test_criterion_9_render(capsys):
    first = {k: hashlib.sha256(v).hexdigest() for k, v in cases().items()}
    second = {k: hashlib.sha256(v).hexdigest() for k, v in cases().items()}
    script = ("import json, sys; sys.path.insert(0, sys.argv[1]); "
              "from render_cases import case_hashes; print(json.dumps(case_hashes()))")
    other = json.loads(subprocess.run([sys.executable, "-c", script, str(TESTS)], capture_output=True, text=True,
                                      check=True).stdout)
    golden = json.loads((TESTS / "golden" / "render_hashes.json").read_text())
    frozen_ok = golden["hashes"] == first if golden["matplotlib"] == matplotlib.__version__ else True

    grid = build_actogram(three_day_activity())
    expected = np.full((3, 24), np.nan)
    expected[0, 0] = (1 + 2 + 3) / 3
    expected[0, 9] = (0 + 1) / 2
    expected[1, 9] = 3
    expected[2, 23] = (1 + 1 + 2) / 3
    verdict(capsys, 9, "render", [
        ("hashes equal across two in-process runs", first == second),
        ("hashes equal in a fresh interpreter", other == first),
        ("hashes equal the frozen set for this matplotlib", frozen_ok),
        ("3-day actogram hourly means exact", np.array_equal(grid.values, expected, equal_nan=True)),
    ])
