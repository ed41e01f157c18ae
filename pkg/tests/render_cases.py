"""Fixed render inputs shared by the in-process and subprocess hash checks."""

from __future__ import annotations

import datetime as dt
import hashlib

import numpy as np

from helpers import make_epoch, sine
from sleepsense.classify import ConfusionMatrix
from sleepsense.dsp import wavelet_spectrogram
from sleepsense.ingest import ActivitySeries, SleepStage
from sleepsense.render import (
    ImageSpec,
    build_actogram,
    render_actogram,
    render_avg_activity,
    render_confusion,
    render_spectrogram,
    render_waveform,
)


def utc(day: int, hour: int, minute: int = 0) -> int:
    return int(dt.datetime(2023, 3, day, hour, minute, tzinfo=dt.timezone.utc).timestamp())


def three_day_activity() -> ActivitySeries:
    entries = [
        (utc(1, 0, 5), 1), (utc(1, 0, 25), 2), (utc(1, 0, 50), 3),
        (utc(1, 9, 10), 0), (utc(1, 9, 40), 1),
        (utc(2, 9, 0), 3),
        (utc(3, 23, 1), 1), (utc(3, 23, 2), 1), (utc(3, 23, 59), 2),
    ]
    return ActivitySeries.from_entries("p01", entries)


def cases() -> dict:
    zero = make_epoch({"Fpz-Cz": np.zeros(3000)}, 100.0)
    alpha = make_epoch({"O2": sine(10.0, 128.0, 10.0)}, 128.0)
    labels = tuple(SleepStage(i) for i in range(5))
    confusion = ConfusionMatrix(np.array([[5, 1, 0, 0, 0], [2, 3, 1, 0, 0], [0, 1, 9, 1, 0],
                                          [0, 0, 2, 4, 0], [0, 1, 1, 0, 6]]), labels)
    return {
        "waveform_zero": render_waveform(zero, "Fpz-Cz"),
        "spectrogram_alpha": render_spectrogram(wavelet_spectrogram(alpha, "O2")),
        "spectrogram_alpha_gray": render_spectrogram(wavelet_spectrogram(alpha, "O2"), ImageSpec(color_map="gray")),
        "actogram_three_day": render_actogram(build_actogram(three_day_activity())),
        "avg_activity_three_day": render_avg_activity(three_day_activity()),
        "confusion_stages": render_confusion(confusion),
    }


def case_hashes() -> dict:
    return {name: hashlib.sha256(png).hexdigest() for name, png in cases().items()}
