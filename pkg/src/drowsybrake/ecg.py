"""Single-lead ECG ingestion, filtering and R-peak detection."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .fileio import atomic_write, read_kv

RR_VALID_MS = (250.0, 2500.0)


class EcgFormatError(ValueError):
    pass


@dataclass(frozen=True)
class EventMarker:
    sample_index: int


@dataclass
class EcgRecording:
    samples: np.ndarray
    sample_rate_hz: int = 128
    resolution_bits: int = 16
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.events = np.asarray(self.events, dtype=np.int64).reshape(-1)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.events.size:
            if np.any(np.diff(self.events) <= 0):
                raise ValueError("events must be strictly increasing")
            if self.events[0] < 0 or self.events[-1] >= len(self.samples):
                raise ValueError("event index outside the recording")

    def __len__(self):
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    @property
    def markers(self) -> list[EventMarker]:
        return [EventMarker(int(e)) for e in self.events]


@dataclass
class RrSeries:
    """Peak positions (samples) and the intervals between them (ms).

    ``flags`` marks intervals outside the physiological range; they are kept
    so downstream code can reject a segment instead of silently losing beats.
    """
    peak_indices: np.ndarray
    intervals_ms: np.ndarray
    flags: np.ndarray
    origin_window: str | None = None

    @classmethod
    def from_peaks(cls, peaks, sample_rate_hz: float, origin_window=None) -> "RrSeries":
        peaks = np.asarray(peaks, dtype=np.int64)
        rr = np.diff(peaks) * (1000.0 / sample_rate_hz)
        flags = (rr < RR_VALID_MS[0]) | (rr > RR_VALID_MS[1])
        return cls(peaks, rr, flags, origin_window)

    @classmethod
    def from_intervals(cls, intervals_ms, sample_rate_hz: float = 1000.0) -> "RrSeries":
        rr = np.asarray(intervals_ms, dtype=np.float64)
        peaks = np.concatenate([[0], np.cumsum(rr)]) * sample_rate_hz / 1000.0
        flags = (rr < RR_VALID_MS[0]) | (rr > RR_VALID_MS[1])
        return cls(np.round(peaks).astype(np.int64), rr, flags)

    def __len__(self):
        return len(self.intervals_ms)

    def between(self, start: int, stop: int, sample_rate_hz: float) -> "RrSeries":
        """Beats whose peaks fall in ``[start, stop)``."""
        lo, hi = np.searchsorted(self.peak_indices, [start, stop])
        return RrSeries.from_peaks(self.peak_indices[lo:hi], sample_rate_hz)


def _parse_column(path: Path, kind=float) -> list:
    out = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.strip()
            if not line:
                continue
            try:
                out.append(kind(line))
            except ValueError:
                raise EcgFormatError(f"{path}: line {lineno}: cannot parse {line!r}") from None
    return out


def load_recording(path_signal, path_events=None, sample_rate_hz: int | None = None,
                   path_meta=None) -> EcgRecording:
    """Read a one-sample-per-line signal file plus optional events and metadata.

    Without an explicit ``sample_rate_hz`` the metadata file (default:
    ``<signal>.meta``) must provide ``sample_rate_hz=<int>``.
    """
    path_signal = Path(path_signal)
    meta = {}
    meta_path = Path(path_meta) if path_meta else path_signal.with_name(path_signal.name + ".meta")
    if path_meta or meta_path.exists():
        meta = read_kv(meta_path)
    if sample_rate_hz is None:
        if "sample_rate_hz" not in meta:
            raise EcgFormatError("sample rate not given and no metadata file found")
        sample_rate_hz = int(meta["sample_rate_hz"])
    bits = int(meta.get("resolution_bits", 16))
    samples = np.array(_parse_column(path_signal), dtype=np.float64)
    events = np.zeros(0, dtype=np.int64)
    if path_events is not None:
        raw = _parse_column(Path(path_events), int)
        events = np.unique(np.array(raw, dtype=np.int64))
        bad = events[(events < 0) | (events >= len(samples))]
        if bad.size:
            raise ValueError(f"event index {int(bad[0])} outside recording of {len(samples)} samples")
    return EcgRecording(samples, int(sample_rate_hz), bits, events)


def save_recording(rec: EcgRecording, path_signal, path_events=None, path_meta=None):
    path_signal = Path(path_signal)
    atomic_write(path_signal, "".join(f"{x:.6f}\n" for x in rec.samples))
    meta = path_meta or path_signal.with_name(path_signal.name + ".meta")
    atomic_write(meta, f"sample_rate_hz={rec.sample_rate_hz}\nresolution_bits={rec.resolution_bits}\n")
    if path_events is not None:
        atomic_write(path_events, "".join(f"{int(e)}\n" for e in rec.events))


def _band_sos(fs: float, low: float, high: float, order: int):
    return signal.butter(order, [low, high], btype="bandpass", fs=fs, output="sos")


def warmup_length(sos) -> int:
    # same pad length scipy's sosfiltfilt uses by default
    n = 2 * len(sos) + 1 - min((sos[:, 2] == 0).sum(), (sos[:, 5] == 0).sum())
    return 3 * n


def bandpass_filter(rec: EcgRecording, low_hz: float = 0.5, high_hz: float = 40.0,
                    order: int = 4) -> EcgRecording:
    """Zero-phase Butterworth band-pass (forward and backward pass)."""
    sos = _band_sos(rec.sample_rate_hz, low_hz, high_hz, order)
    need = warmup_length(sos) + 1
    if len(rec) < need:
        raise ValueError(f"recording too short for the filter warm-up ({len(rec)} < {need} samples)")
    out = signal.sosfiltfilt(sos, rec.samples)
    # edge transients of the 0.5 Hz corner leave a small offset on finite records
    out -= out.mean()
    return EcgRecording(out, rec.sample_rate_hz, rec.resolution_bits, rec.events.copy())


def detection_function(x: np.ndarray, fs: float) -> np.ndarray:
    """QRS emphasis (5-15 Hz), derivative, squaring and a centred 150 ms
    moving-window integration.  Every stage is shift invariant."""
    sos = _band_sos(fs, 5.0, 15.0, 2)
    y = signal.sosfiltfilt(sos, x) if len(x) > warmup_length(sos) else x
    d = np.gradient(y)
    win = max(1, int(round(0.150 * fs)))
    return np.convolve(d * d, np.ones(win) / win, mode="same")


def detect_r_peaks(rec: EcgRecording, refractory_s: float = 0.2,
                   min_duration_s: float = 10.0) -> RrSeries:
    """Pan-Tompkins style detector with adaptive signal/noise thresholds and
    search-back for missed beats; peaks are refined to the local maximum of
    the (filtered) input within +-75 ms."""
    fs = rec.sample_rate_hz
    if rec.duration_s < min_duration_s:
        raise ValueError(f"recording shorter than {min_duration_s} s")
    x = rec.samples
    mwi = detection_function(x, fs)
    refractory = int(np.ceil(refractory_s * fs))
    cand, props = signal.find_peaks(mwi, distance=refractory, height=0.0)
    heights = props["peak_heights"]
    if cand.size == 0 or heights.max() <= 0:
        raise ValueError("insufficient peaks")

    init = heights[cand < 10 * fs] if np.any(cand < 10 * fs) else heights
    spki = 0.5 * init.max()
    npki = 0.0
    rr_avg = float(fs)  # 1 s until beats are seen
    beats: list[int] = []
    beat_pos: list[int] = []  # index into cand
    last_j = -1
    for j, (c, h) in enumerate(zip(cand, heights)):
        thr1 = npki + 0.25 * (spki - npki)
        if beats and c - beats[-1] > 1.66 * rr_avg:
            # search back among skipped candidates with half threshold
            window = [i for i in range(last_j + 1, j)
                      if heights[i] > 0.5 * thr1 and cand[i] - beats[-1] >= refractory]
            if window:
                i = max(window, key=lambda i: heights[i])
                beats.append(int(cand[i]))
                beat_pos.append(i)
                spki = 0.25 * heights[i] + 0.75 * spki
        if h > thr1 and (not beats or c - beats[-1] >= refractory):
            beats.append(int(c))
            beat_pos.append(j)
            last_j = j
            spki = 0.125 * h + 0.875 * spki
            if len(beats) >= 2:
                recent = np.diff(beats[-9:])
                rr_avg = float(np.mean(recent))
        else:
            npki = 0.125 * h + 0.875 * npki

    half = int(round(0.075 * fs))
    peaks = []
    for b in beats:
        lo, hi = max(0, b - half), min(len(x), b + half + 1)
        p = lo + int(np.argmax(x[lo:hi]))
        if peaks and p - peaks[-1] < refractory:
            if x[p] > x[peaks[-1]]:
                peaks[-1] = p
            continue
        peaks.append(p)
    if len(peaks) < 2:
        raise ValueError("insufficient peaks")
    return RrSeries.from_peaks(np.array(peaks), fs)
