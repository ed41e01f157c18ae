"""Deterministic PNG renderings: waveforms, spectrograms, actograms, activity profiles, confusion matrices."""

from __future__ import annotations

import base64
import datetime as dt
import io
from dataclasses import dataclass
from zoneinfo import ZoneInfo

import matplotlib

matplotlib.use("Agg")

import numpy as np
from matplotlib import colormaps
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .classify import ConfusionMatrix
from .dsp import Spectrogram
from .errors import DataError, EmptyGrid, EmptyMatrix, UnknownChannel
from .ingest import ActivitySeries, Epoch

MISSING_COLOR = "#d9d9d9"
FONT_SIZE = 8


@dataclass(frozen=True)
class ImageSpec:
    width_px: int = 512
    height_px: int = 512
    color_map: str = "viridis"  # or "gray"
    dpi: int = 100

    def __post_init__(self):
        if self.width_px < 1 or self.height_px < 1 or self.dpi < 1:
            raise ValueError("image dimensions and dpi must be positive")
        if self.color_map not in ("viridis", "gray"):
            raise ValueError("color_map must be 'viridis' or 'gray'")

    def figure(self) -> Figure:
        fig = Figure(figsize=(self.width_px / self.dpi, self.height_px / self.dpi), dpi=self.dpi)
        FigureCanvasAgg(fig)
        return fig

    def cmap(self):
        return colormaps[self.color_map].with_extremes(bad=MISSING_COLOR)


def figure_to_png(fig: Figure, spec: ImageSpec) -> bytes:
    buf = io.BytesIO()
    # no Software/date chunks, so identical figures give identical bytes
    fig.savefig(buf, format="png", dpi=spec.dpi, metadata={"Software": None})
    return buf.getvalue()


def png_size(data: bytes) -> tuple[int, int]:
    if data[:8] != b"\x89PNG\r\n\x1a\n":
        raise DataError("not a PNG stream")
    return int.from_bytes(data[16:20], "big"), int.from_bytes(data[20:24], "big")


def to_data_url(png: bytes) -> str:
    return "data:image/png;base64," + base64.b64encode(png).decode("ascii")


def image_filename(subject: str, span: str, kind: str) -> str:
    return f"{subject}_{span}_{kind}.png"


# ---------------------------------------------------------------------------
# EEG


def waveform_figure(epoch: Epoch, channel: str, spec: ImageSpec) -> Figure:
    if channel not in epoch.signal:
        raise UnknownChannel(f"epoch has no channel {channel!r}")
    x = np.asarray(epoch.signal[channel])
    fs = epoch.sample_rates[channel]
    t = np.arange(x.size) / fs
    fig = spec.figure()
    ax = fig.add_subplot(1, 1, 1)
    ax.plot(t, x, color="black" if spec.color_map == "gray" else "tab:blue", linewidth=0.6)
    ax.set_xlim(0.0, epoch.length_s)
    ax.set_xlabel("Time (s)", fontsize=FONT_SIZE)
    ax.set_ylabel("Amplitude (uV)", fontsize=FONT_SIZE)
    ax.set_title(channel, fontsize=FONT_SIZE)
    ax.tick_params(labelsize=FONT_SIZE)
    fig.tight_layout()
    return fig


def render_waveform(epoch: Epoch, channel: str, spec: ImageSpec = ImageSpec()) -> bytes:
    return figure_to_png(waveform_figure(epoch, channel, spec), spec)


def spectrogram_figure(sg: Spectrogram, spec: ImageSpec, max_freq_hz: float = 40.0) -> Figure:
    if sg.power.size == 0:
        raise EmptyGrid("spectrogram grid is empty")
    intensity = np.log10(1.0 + sg.power.T)
    step = sg.time_bins[1] - sg.time_bins[0] if sg.time_bins.size > 1 else 2 * sg.time_bins[0]
    t_edges = np.concatenate([[0.0], sg.time_bins + step / 2])
    top = float(intensity.max())
    fig = spec.figure()
    ax = fig.add_subplot(1, 1, 1)
    ax.pcolormesh(
        t_edges, sg.freq_edges, intensity, cmap=spec.cmap(), vmin=0.0, vmax=top if top > 0 else 1.0,
        shading="flat", antialiased=False,
    )
    ax.set_xlim(0.0, sg.duration_s)
    ax.set_ylim(0.0, max_freq_hz)
    ax.set_xlabel("Time (s)", fontsize=FONT_SIZE)
    ax.set_ylabel("Frequency (Hz)", fontsize=FONT_SIZE)
    ax.tick_params(labelsize=FONT_SIZE)
    fig.tight_layout()
    return fig


def render_spectrogram(sg: Spectrogram, spec: ImageSpec = ImageSpec()) -> bytes:
    """Power mapped through log10(1 + p) onto the colour map, frequency axis 0-40 Hz."""
    return figure_to_png(spectrogram_figure(sg, spec), spec)


# ---------------------------------------------------------------------------
# Activity


@dataclass(frozen=True)
class ActogramGrid:
    dates: tuple  # datetime.date per row
    values: np.ndarray  # (n_dates, 24) hourly mean activity code, NaN where missing

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)


def build_actogram(activity: ActivitySeries) -> ActogramGrid:
    """Hourly mean activity code per local calendar date, first to last date inclusive."""
    if len(activity) == 0:
        raise DataError("activity series is empty")
    tz = ZoneInfo(activity.tz)
    local = [dt.datetime.fromtimestamp(int(t), tz) for t in activity.timestamps]
    first, last = local[0].date(), local[-1].date()
    n_days = (last - first).days + 1
    sums = np.zeros((n_days, 24))
    counts = np.zeros((n_days, 24))
    for when, code in zip(local, activity.codes):
        row = (when.date() - first).days
        sums[row, when.hour] += code
        counts[row, when.hour] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        values = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    dates = tuple(first + dt.timedelta(days=i) for i in range(n_days))
    return ActogramGrid(dates, values)


def actogram_figure(grid: ActogramGrid, spec: ImageSpec) -> Figure:
    if grid.values.size == 0:
        raise EmptyGrid("actogram has no rows")
    fig = spec.figure()
    ax = fig.add_subplot(1, 1, 1)
    n = len(grid.dates)
    ax.pcolormesh(
        np.arange(25), np.arange(n + 1), np.ma.masked_invalid(grid.values), cmap=spec.cmap(),
        vmin=0.0, vmax=3.0, shading="flat", antialiased=False,
    )
    ax.set_facecolor(MISSING_COLOR)
    ax.set_xlim(0, 24)
    ax.set_ylim(n, 0)
    ax.set_xticks(range(0, 25, 6))
    ax.set_xticklabels([f"{h}:00" for h in range(0, 25, 6)])
    stride = max(1, n // 10)
    ax.set_yticks(np.arange(0, n, stride) + 0.5)
    ax.set_yticklabels([grid.dates[i].isoformat() for i in range(0, n, stride)])
    ax.set_xlabel("Time of day", fontsize=FONT_SIZE)
    ax.set_ylabel("Date", fontsize=FONT_SIZE)
    ax.tick_params(labelsize=FONT_SIZE)
    fig.tight_layout()
    return fig


def render_actogram(grid: ActogramGrid, spec: ImageSpec = ImageSpec()) -> bytes:
    """Dates down the y axis, 0:00-24:00 across; missing hours in a reserved grey."""
    return figure_to_png(actogram_figure(grid, spec), spec)


def hourly_activity_profile(activity: ActivitySeries) -> tuple[np.ndarray, np.ndarray]:
    """Mean and population standard deviation across days of each hour's mean activity.

    Hours never observed are NaN; an hour seen on a single day has std 0.
    """
    grid = build_actogram(activity)
    vals = grid.values
    seen = ~np.isnan(vals)
    n = seen.sum(axis=0)
    filled = np.where(seen, vals, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(n > 0, filled.sum(axis=0) / np.maximum(n, 1), np.nan)
        sq = np.where(seen, (vals - mean) ** 2, 0.0).sum(axis=0)
        std = np.where(n > 0, np.sqrt(sq / np.maximum(n, 1)), np.nan)
    return mean, std


def avg_activity_figure(activity: ActivitySeries, spec: ImageSpec) -> Figure:
    mean, std = hourly_activity_profile(activity)
    hours = np.arange(24) + 0.5
    fig = spec.figure()
    ax = fig.add_subplot(1, 1, 1)
    colour = "black" if spec.color_map == "gray" else "tab:blue"
    ax.fill_between(hours, mean - std, mean + std, color=colour, alpha=0.25, linewidth=0)
    ax.plot(hours, mean, color=colour, linewidth=1.2)
    ax.set_xlim(0, 24)
    ax.set_ylim(-0.1, 3.1)
    ax.set_xticks(range(0, 25, 6))
    ax.set_xticklabels([f"{h}:00" for h in range(0, 25, 6)])
    ax.set_xlabel("Time of day", fontsize=FONT_SIZE)
    ax.set_ylabel("Mean activity level", fontsize=FONT_SIZE)
    ax.tick_params(labelsize=FONT_SIZE)
    fig.tight_layout()
    return fig


def render_avg_activity(activity: ActivitySeries, spec: ImageSpec = ImageSpec()) -> bytes:
    return figure_to_png(avg_activity_figure(activity, spec), spec)


# ---------------------------------------------------------------------------
# Confusion matrix


def _display_label(label) -> str:
    return getattr(label, "short", getattr(label, "text", str(label)))


def confusion_figure(matrix: ConfusionMatrix, spec: ImageSpec) -> Figure:
    counts = np.asarray(matrix.counts)
    if counts.size == 0 or counts.ndim != 2 or counts.shape[0] != counts.shape[1]:
        raise EmptyMatrix("confusion matrix must be a non-empty square matrix")
    rows = counts.sum(axis=1, keepdims=True)
    norm = np.divide(counts, rows, out=np.zeros(counts.shape), where=rows > 0)
    k = counts.shape[0]
    names = [_display_label(l) for l in matrix.labels]
    fig = spec.figure()
    ax = fig.add_subplot(1, 1, 1)
    ax.imshow(norm, cmap=spec.cmap(), vmin=0.0, vmax=1.0, interpolation="nearest")
    for i in range(k):
        for j in range(k):
            ax.text(j, i, str(int(counts[i, j])), ha="center", va="center", fontsize=FONT_SIZE,
                    color="white" if norm[i, j] < 0.5 else "black")
    ax.set_xticks(range(k))
    ax.set_yticks(range(k))
    ax.set_xticklabels(names)
    ax.set_yticklabels(names)
    ax.set_xlabel("Predicted", fontsize=FONT_SIZE)
    ax.set_ylabel("True", fontsize=FONT_SIZE)
    ax.tick_params(labelsize=FONT_SIZE)
    fig.tight_layout()
    return fig


def render_confusion(matrix: ConfusionMatrix, spec: ImageSpec = ImageSpec()) -> bytes:
    """Row-normalised heatmap with raw counts printed in each cell."""
    return figure_to_png(confusion_figure(matrix, spec), spec)


def decode_png(data: bytes) -> np.ndarray:
    """RGBA pixel array of a PNG produced by this module."""
    from matplotlib.image import imread

    return imread(io.BytesIO(data), format="png")
