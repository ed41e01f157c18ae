"""EEG filtering, wavelet spectrograms, Welch band powers and the 11-feature vector."""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .errors import (
    CutoffAboveNyquist,
    DataError,
    EmptyInput,
    EpochTooShort,
    UnknownChannel,
    UnstableSection,
)
from .ingest import ChannelSeries, Epoch, Recording


@dataclass(frozen=True)
class BandDefinition:
    name: str
    low_hz: float
    high_hz: float

    def __post_init__(self):
        if not 0 <= self.low_hz < self.high_hz:
            raise ValueError(f"band {self.name}: need 0 <= low < high")


DEFAULT_BANDS = (
    BandDefinition("delta", 0.5, 4.0),
    BandDefinition("theta", 4.0, 8.0),
    BandDefinition("alpha", 8.0, 12.0),
    BandDefinition("beta", 12.0, 30.0),
)

FEATURE_NAMES = (
    "delta_pow",
    "theta_pow",
    "alpha_pow",
    "beta_pow",
    "amplitude",
    "std_dev",
    "kurtosis",
    "alpha_delta_ratio",
    "theta_alpha_ratio",
    "delta_theta_ratio",
    "p90_amplitude",
)

RATIO_FLOOR = 1e-12


class ConstantSignalWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Filtering


def butterworth_lowpass_sos(order: int, cutoff_hz: float, fs: float) -> np.ndarray:
    """Digital Butterworth low-pass as ``order // 2`` unity-DC-gain biquads.

    Analog prototype poles are placed on the prewarped cutoff circle and mapped
    with the bilinear transform; each conjugate pole pair gets a double zero at
    z = -1. Returns an (order/2, 6) array in scipy's sos layout.
    """
    if order < 2 or order % 2:
        raise ValueError("order must be an even positive integer")
    if order > 256:
        raise ValueError("order must be <= 256")
    if not 0 < cutoff_hz < fs / 2:
        raise CutoffAboveNyquist(f"cutoff {cutoff_hz} Hz is not below Nyquist {fs / 2} Hz")
    warped = 2.0 * fs * math.tan(math.pi * cutoff_hz / fs)
    k = np.arange(order // 2)
    theta = math.pi * (2 * k + 1 + order) / (2 * order)
    analog = warped * np.exp(1j * theta)  # upper-half-plane poles, left half-plane
    poles = (2 * fs + analog) / (2 * fs - analog)
    sos = np.zeros((order // 2, 6))
    for i, p in enumerate(poles):
        a1 = -2.0 * p.real
        a2 = abs(p) ** 2
        gain = (1.0 + a1 + a2) / 4.0
        sos[i] = (gain, 2 * gain, gain, 1.0, a1, a2)
        if abs(p) >= 1.0:
            raise UnstableSection(f"section {i} pole magnitude {abs(p):.12f} >= 1")
    return sos


def filter_array(x: np.ndarray, fs: float, cutoff_hz: float = 40.0, order: int = 128) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sos = butterworth_lowpass_sos(order, cutoff_hz, fs)
    if x.size <= 3 * (2 * sos.shape[0] + 1):
        # too short for the default edge padding
        return sps.sosfiltfilt(sos, x, padlen=max(0, x.size - 1))
    return sps.sosfiltfilt(sos, x)


def lowpass_filter(signal: ChannelSeries, cutoff_hz: float = 40.0, order: int = 128) -> ChannelSeries:
    """Zero-phase (forward-backward) Butterworth low-pass of one channel."""
    out = filter_array(signal.samples, signal.sample_rate_hz, cutoff_hz, order)
    return ChannelSeries(signal.name, signal.sample_rate_hz, out, signal.unit)


def filter_recording(recording: Recording, cutoff_hz: float = 40.0, order: int = 128) -> Recording:
    return Recording(
        channels=tuple(lowpass_filter(c, cutoff_hz, order) for c in recording.channels),
        start_time=recording.start_time,
        subject_id=recording.subject_id,
        source=recording.source,
        annotations=recording.annotations,
        header=recording.header,
    )


# ---------------------------------------------------------------------------
# Discrete wavelet transform

# Daubechies-4 scaling (reconstruction low-pass) filter
DB4 = np.array(
    [
        0.2303778133088965,
        0.7148465705529157,
        0.6308807679298589,
        -0.027983769416859854,
        -0.18703481171909309,
        0.030841381835560764,
        0.0328830116668852,
        -0.010597401785069032,
    ]
)


def _analysis_filters(scaling: np.ndarray):
    dec_lo = scaling[::-1]
    dec_hi = np.array([(-1) ** (m + 1) * scaling[m] for m in range(scaling.size)])
    return dec_lo, dec_hi


def dwt_step(x: np.ndarray, scaling: np.ndarray = DB4):
    """One periodized analysis step; ``x`` must have even length."""
    n = x.size
    if n % 2:
        raise ValueError("periodized DWT step needs an even-length input")
    lo, hi = _analysis_filters(scaling)
    taps = scaling.size
    k = np.arange(n // 2)[:, None]
    m = np.arange(taps)[None, :]
    idx = (2 * k + taps // 2 - m) % n
    window = x[idx]
    return window @ lo, window @ hi


def wavedec(x: np.ndarray, levels: int, scaling: np.ndarray = DB4) -> list[np.ndarray]:
    """Multi-level periodized DWT; returns ``[approx_L, detail_L, ..., detail_1]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size % (2**levels):
        raise ValueError(f"length {x.size} is not divisible by 2**{levels}")
    details = []
    approx = x
    for _ in range(levels):
        approx, detail = dwt_step(approx, scaling)
        details.append(detail)
    return [approx] + details[::-1]


def max_dwt_level(n_samples: int, filter_len: int = DB4.size) -> int:
    if n_samples < filter_len:
        return 0
    return int(math.floor(math.log2(n_samples / (filter_len - 1))))


@dataclass(frozen=True)
class Spectrogram:
    """Dyadic wavelet power grid, ``power[time, freq]``.

    ``freq_edges`` holds the ``len(freq_bins) + 1`` row boundaries in Hz.
    """

    time_bins: np.ndarray
    freq_bins: np.ndarray
    freq_edges: np.ndarray
    power: np.ndarray
    duration_s: float
    channel: str = ""

    def __post_init__(self):
        if self.power.shape != (self.time_bins.size, self.freq_bins.size):
            raise ValueError("power grid shape does not match the bin axes")
        if np.any(self.power < 0):
            raise ValueError("negative power in spectrogram")


def wavelet_spectrogram(
    epoch: Epoch, channel: str, levels: int | None = None, max_freq_hz: float = 40.0
) -> Spectrogram:
    """db4 wavelet scalogram of one epoch channel.

    The signal is zero-padded at the end to a multiple of ``2**levels``, so
    every coefficient is kept and total grid power equals the signal energy.
    Each level's coefficient energies are spread evenly over the finest time
    bins they cover. Levels whose band lies wholly above ``max_freq_hz`` are
    dropped (none are at 100 or 128 Hz sampling).
    """
    if channel not in epoch.signal:
        raise UnknownChannel(f"epoch has no channel {channel!r}")
    x = np.asarray(epoch.signal[channel], dtype=np.float64)
    fs = epoch.sample_rates[channel]
    taps = DB4.size
    if levels is None:
        levels = max_dwt_level(x.size, taps)
        if levels < 1:
            raise EpochTooShort(f"{x.size} samples is too short for a db4 decomposition")
    elif levels < 1 or x.size < taps * levels:
        raise EpochTooShort(f"{x.size} samples < filter length {taps} x {levels} levels")

    block = 2**levels
    padded = np.zeros(-(-x.size // block) * block)
    padded[: x.size] = x
    coeffs = wavedec(padded, levels)
    n_time = padded.size // 2

    rows = []
    edges = []
    # approximation first, then details from coarse to fine, i.e. low to high frequency
    bands = [(0.0, fs / 2 ** (levels + 1))] + [
        (fs / 2 ** (lvl + 1), fs / 2**lvl) for lvl in range(levels, 0, -1)
    ]
    spans = [2 ** (levels - 1)] + [2 ** (lvl - 1) for lvl in range(levels, 0, -1)]
    for c, (lo, hi), span in zip(coeffs, bands, spans):
        if lo >= max_freq_hz:
            continue
        rows.append(np.repeat(c**2 / span, span))
        edges.append((lo, min(hi, max_freq_hz)))
    power = np.stack(rows, axis=1)
    freq_edges = np.array([edges[0][0]] + [hi for _, hi in edges])
    return Spectrogram(
        time_bins=(np.arange(n_time) + 0.5) * 2.0 / fs,
        freq_bins=0.5 * (freq_edges[:-1] + freq_edges[1:]),
        freq_edges=freq_edges,
        power=power,
        duration_s=x.size / fs,
        channel=channel,
    )


# ---------------------------------------------------------------------------
# Spectral and amplitude features


def welch_psd(x: np.ndarray, fs: float, segment_s: float = 2.0):
    nperseg = int(round(segment_s * fs))
    x = np.asarray(x, dtype=np.float64)
    if x.size < nperseg:
        raise EpochTooShort(f"{x.size} samples is shorter than one {segment_s} s Welch segment")
    return sps.welch(x, fs=fs, window="hann", nperseg=nperseg, noverlap=nperseg // 2)


def integrate_band(freqs: np.ndarray, psd: np.ndarray, low_hz: float, high_hz: float) -> float:
    mask = (freqs >= low_hz) & (freqs <= high_hz)
    if mask.sum() < 2:
        return 0.0
    return float(np.trapezoid(psd[mask], freqs[mask]))


def total_power(freqs: np.ndarray, psd: np.ndarray) -> float:
    return float(np.trapezoid(psd, freqs))


def band_power(epoch: Epoch, channel: str, band: BandDefinition) -> float:
    """Welch PSD (2 s Hann segments, 50% overlap) integrated over the band."""
    if channel not in epoch.signal:
        raise UnknownChannel(f"epoch has no channel {channel!r}")
    fs = epoch.sample_rates[channel]
    if band.high_hz >= fs / 2:
        raise CutoffAboveNyquist(f"band {band.name} reaches Nyquist {fs / 2} Hz")
    freqs, psd = welch_psd(epoch.signal[channel], fs)
    return integrate_band(freqs, psd, band.low_hz, band.high_hz)


def percentile_amplitude(samples, p: float = 90.0) -> float:
    """Nearest-rank percentile of absolute values."""
    a = np.sort(np.abs(np.asarray(samples, dtype=np.float64)))
    if a.size == 0:
        raise EmptyInput("percentile of an empty sequence")
    if not 0 < p <= 100:
        raise ValueError("p must lie in (0, 100]")
    rank = math.ceil(p / 100.0 * a.size)
    return float(a[max(rank, 1) - 1])


def excess_kurtosis(x: np.ndarray) -> float:
    centered = x - x.mean()
    m2 = np.mean(centered**2)
    if m2 == 0:
        return 0.0
    return float(np.mean(centered**4) / m2**2 - 3.0)


@dataclass(frozen=True)
class FeatureVector:
    """Per-channel 11-value summaries, ordered as ``FEATURE_NAMES``."""

    channels: tuple
    values: dict
    flags: frozenset = field(default_factory=frozenset)

    def get(self, channel: str, feature: str) -> float:
        return float(self.values[channel][FEATURE_NAMES.index(feature)])

    def channel_dict(self, channel: str) -> dict:
        return dict(zip(FEATURE_NAMES, (float(v) for v in self.values[channel])))

    def as_row(self) -> np.ndarray:
        return np.concatenate([self.values[c] for c in self.channels])

    def column_names(self) -> list[str]:
        return feature_columns(self.channels)

    def all_values(self) -> list[float]:
        return [float(v) for v in self.as_row()]


def feature_columns(channels: Sequence[str]) -> list[str]:
    return [f"{c}_{f}" for c in channels for f in FEATURE_NAMES]


def channel_features(x: np.ndarray, fs: float, bands: Sequence[BandDefinition] = DEFAULT_BANDS):
    """The 11 features of one channel window plus a constant-signal flag."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < 2 * fs:
        raise EpochTooShort("feature extraction needs at least 2 s of samples")
    freqs, psd = welch_psd(x, fs)
    powers = {b.name: integrate_band(freqs, psd, b.low_hz, min(b.high_hz, fs / 2)) for b in bands}
    delta, theta, alpha, beta = (powers[n] for n in ("delta", "theta", "alpha", "beta"))
    std = float(np.std(x))
    constant = std == 0.0
    values = np.array(
        [
            delta,
            theta,
            alpha,
            beta,
            float(np.mean(np.abs(x))),
            std,
            0.0 if constant else excess_kurtosis(x),
            alpha / max(delta, RATIO_FLOOR),
            theta / max(alpha, RATIO_FLOOR),
            delta / max(theta, RATIO_FLOOR),
            percentile_amplitude(x, 90.0),
        ]
    )
    return values, constant


def extract_features(
    epoch: Epoch, channels: Sequence[str] | None = None, bands: Sequence[BandDefinition] = DEFAULT_BANDS
) -> FeatureVector:
    names = tuple(channels or epoch.channel_names)
    values = {}
    flags = set()
    for name in names:
        if name not in epoch.signal:
            raise UnknownChannel(f"epoch has no channel {name!r}")
        vals, constant = channel_features(epoch.signal[name], epoch.sample_rates[name], bands)
        if constant:
            flags.add(f"constant_signal:{name}")
            warnings.warn(
                f"channel {name!r} is constant; kurtosis undefined and reported as 0",
                ConstantSignalWarning,
                stacklevel=2,
            )
        values[name] = vals
    return FeatureVector(channels=names, values=values, flags=frozenset(flags))


# ---------------------------------------------------------------------------
# Feature matrix CSV


def label_text(label) -> str:
    if label is None:
        return ""
    return getattr(label, "text", str(label))


def write_feature_matrix(path, epochs: Sequence[Epoch], vectors: Sequence[FeatureVector]) -> None:
    if len(epochs) != len(vectors):
        raise DataError("one feature vector per epoch is required")
    if not vectors:
        raise EmptyInput("no feature vectors to write")
    columns = vectors[0].column_names()
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns + ["label", "subject_id", "epoch_index"])
        for ep, fv in zip(epochs, vectors):
            if fv.column_names() != columns:
                raise DataError("feature vectors have inconsistent channel layouts")
            writer.writerow([repr(v) for v in fv.all_values()] + [label_text(ep.label), ep.subject_id, ep.index])


@dataclass
class FeatureMatrix:
    columns: list
    X: np.ndarray
    labels: list
    subject_ids: list
    epoch_indices: list


def read_feature_matrix(path) -> FeatureMatrix:
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyInput(f"{path} is empty")
    head = rows[0]
    if head[-3:] != ["label", "subject_id", "epoch_index"]:
        raise DataError(f"{path} is not a feature matrix")
    body = rows[1:]
    X = np.array([[float(v) for v in r[:-3]] for r in body], dtype=np.float64).reshape(len(body), len(head) - 3)
    return FeatureMatrix(
        columns=head[:-3],
        X=X,
        labels=[r[-3] for r in body],
        subject_ids=[r[-2] for r in body],
        epoch_indices=[int(r[-1]) for r in body],
    )
