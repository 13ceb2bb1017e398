"""Drowsiness/normal windows, CNM capsule configurations and HRV features."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import interpolate, signal

from .ecg import EcgRecording, RrSeries
from .fileio import atomic_write, fmt

WINDOW_SAMPLES = 15360
FEATURES = ("mean_rr_ms", "sdnn_ms", "rmssd_ms", "pnn50_pct", "lf_power", "hf_power", "lfhf_ratio")
N_FEATURES = len(FEATURES)
MIN_INTERVALS = 30
LF_BAND = (0.04, 0.15)
HF_BAND = (0.15, 0.40)
DEW, NSRW = "DEW", "NSRW"
BENCHMARK_COLUMNS = ("label", "C", "N", "M", "fold", "accuracy", "f1")


class CapsuleError(ValueError):
    pass


@dataclass(frozen=True)
class Window:
    kind: str
    start_sample: int
    length_samples: int = WINDOW_SAMPLES
    pair_id: int = 0
    event_sample: int | None = None

    def __post_init__(self):
        if self.kind not in (DEW, NSRW):
            raise ValueError(f"unknown window kind {self.kind!r}")
        if self.start_sample < 0:
            raise ValueError("window start must be non-negative")

    @property
    def end_sample(self) -> int:
        return self.start_sample + self.length_samples

    @property
    def label(self) -> int:
        return 1 if self.kind == DEW else 0

    def overlaps(self, other: "Window") -> bool:
        return self.start_sample < other.end_sample and other.start_sample < self.end_sample


@dataclass(frozen=True)
class CapsuleConfig:
    C: int
    N: int
    M: float
    L: int = WINDOW_SAMPLES

    @property
    def label(self) -> str:
        return f"C{self.C}_N{self.N}_M{int(round(100 * self.M))}"

    @classmethod
    def from_label(cls, label: str, L: int = WINDOW_SAMPLES) -> "CapsuleConfig":
        try:
            c, n, m = label.split("_")
            C, N = int(c[1:]), int(n[1:])
        except ValueError:
            raise ValueError(f"bad capsule label {label!r}") from None
        M = compute_overlap(C, N, L)
        if M is None or int(round(100 * M)) != int(m[1:]):
            raise ValueError(f"{label} is not a valid configuration for L={L}")
        return cls(C, N, M, L)


@dataclass
class HrvFeatureVector:
    mean_rr_ms: float
    sdnn_ms: float
    rmssd_ms: float
    pnn50_pct: float
    lf_power: float
    hf_power: float
    lfhf_ratio: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, f) for f in FEATURES])

    @property
    def lfhf_defined(self) -> bool:
        return np.isfinite(self.lfhf_ratio)


@dataclass
class CapsuleSequence:
    config: CapsuleConfig
    rows: np.ndarray  # N x F
    label: int
    source_window: Window


@dataclass(frozen=True)
class SlidingInference:
    window_overlap: float = 0.75

    def __post_init__(self):
        if not 0.0 <= self.window_overlap < 1.0:
            raise ValueError("window overlap must lie in [0, 1)")

    def stride(self, L: int) -> int:
        return max(1, int(round(L * (1.0 - self.window_overlap))))


# -- windows ---------------------------------------------------------------

def qualifying_events(events, min_gap: int) -> np.ndarray:
    """Events at least ``min_gap`` samples after the previous event.  The
    first event always qualifies."""
    ev = np.sort(np.asarray(events, dtype=np.int64))
    if ev.size == 0:
        return ev
    keep = np.concatenate([[True], np.diff(ev) >= min_gap])
    return ev[keep]


def _free_starts(n: int, L: int, blocked):
    """Start ranges [a, b] such that [s, s+L) avoids every blocked [lo, hi)."""
    spans = sorted((max(0, lo), min(n, hi)) for lo, hi in blocked if hi > 0 and lo < n)
    merged = []
    for lo, hi in spans:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    out = []
    cur = 0
    for lo, hi in merged + [[n, n]]:
        if lo - cur >= L:
            out.append((cur, lo - L))
        cur = max(cur, hi)
    return out


def extract_windows(rec: EcgRecording, L: int = WINDOW_SAMPLES, min_gap_s: float = 120.0,
                    anchor: str = "end") -> list[Window]:
    """One DEW per qualifying event plus one balancing NSRW each.

    DEWs end at the event (``anchor="end"``) or are centred on it.  A DEW that
    would leave the recording is skipped.  Each NSRW is the event-free start
    position nearest to its DEW that keeps ``min_gap_s`` from every event and
    overlaps no previously chosen window.
    """
    if L > len(rec):
        raise ValueError(f"window length {L} exceeds recording of {len(rec)} samples")
    if anchor not in ("end", "centered"):
        raise ValueError(f"unknown anchor {anchor!r}")
    gap = int(round(min_gap_s * rec.sample_rate_hz))
    n = len(rec)
    dews = []
    for e in qualifying_events(rec.events, gap):
        start = int(e) - L if anchor == "end" else int(e) - L // 2
        if start < 0 or start + L > n:
            continue
        dews.append(Window(DEW, start, L, len(dews), int(e)))
    if not dews:
        return []
    blocked = [(int(e) - gap, int(e) + gap) for e in rec.events]
    blocked += [(w.start_sample, w.end_sample) for w in dews]
    nsrws = []
    for d in dews:
        ranges = _free_starts(n, L, blocked)
        if not ranges:
            raise CapsuleError("cannot balance classes: not enough event-free signal")
        best = min((min(max(d.start_sample, a), b) for a, b in ranges),
                   key=lambda s: (abs(s - d.start_sample), s))
        w = Window(NSRW, best, L, d.pair_id)
        nsrws.append(w)
        blocked.append((w.start_sample, w.end_sample))
    return dews + nsrws


# -- capsule configurations ---------------------------------------------------

def _overlap_fraction(C: int, N: int, L: int) -> Fraction:
    if N < 2:
        raise ValueError("N must be at least 2")
    if C <= 0:
        raise ValueError("C must be positive")
    return Fraction(C * N - L, (N - 1) * C)


def compute_overlap(C: int, N: int, L: int = WINDOW_SAMPLES) -> float | None:
    """Overlap fraction M = (C N - L) / ((N - 1) C), or ``None`` when it is not
    in (0, 1) or has no exact two-decimal value."""
    m = _overlap_fraction(C, N, L)
    if not 0 < m < 1 or (100 * m).denominator != 1:
        return None
    return (100 * m).numerator / 100


def enumerate_configs(L: int = WINDOW_SAMPLES, sample_rate_hz: int = 128,
                      N_range=(2, 200), C_range_s=(40, 120)) -> list[CapsuleConfig]:
    out = []
    for cs in range(int(C_range_s[0]), int(C_range_s[1]) + 1):
        C = cs * sample_rate_hz
        for N in range(max(2, int(N_range[0])), int(N_range[1]) + 1):
            M = compute_overlap(C, N, L)
            if M is not None:
                out.append(CapsuleConfig(C, N, M, L))
    return sorted(out, key=lambda c: c.label)


def capsule_starts(cfg: CapsuleConfig, L: int | None = None) -> np.ndarray:
    L = cfg.L if L is None else L
    # round each start separately so rounding error never accumulates
    return np.array([int(round(i * (L - cfg.C) / (cfg.N - 1))) for i in range(cfg.N)], dtype=np.int64)


def slice_capsules(w: Window, cfg: CapsuleConfig) -> list[tuple[int, int]]:
    """Capsule ``[start, end)`` ranges relative to the window start."""
    L = w.length_samples
    starts = capsule_starts(cfg, L)
    stride = cfg.C * (1 - cfg.M)
    if (starts[0] != 0 or abs(starts[-1] + cfg.C - L) > 1
            or np.any(np.abs(starts - np.arange(cfg.N) * stride) > 1)):
        raise CapsuleError(f"non-tiling configuration {cfg.label} for L={L}")
    return [(int(s), int(s) + cfg.C) for s in starts]


# -- HRV ---------------------------------------------------------------------

def _intervals(rr) -> np.ndarray:
    if isinstance(rr, RrSeries):
        return rr.intervals_ms[~rr.flags]
    return np.asarray(rr, dtype=np.float64)


def mean_rr(rr) -> float:
    return float(np.mean(_intervals(rr)))


def sdnn(rr) -> float:
    return float(np.std(_intervals(rr)))


def rmssd(rr) -> float:
    d = np.diff(_intervals(rr))
    return float(np.sqrt(np.mean(d * d))) if d.size else 0.0


def pnn50(rr) -> float:
    d = np.abs(np.diff(_intervals(rr)))
    return float(100.0 * np.mean(d > 50.0)) if d.size else 0.0


def tachogram(intervals_ms, fs_resample: float = 4.0):
    """Cubic interpolation of the RR series on an even grid (mean removed)."""
    rr = np.asarray(intervals_ms, dtype=np.float64)
    t = np.cumsum(rr) / 1000.0
    grid = np.arange(t[0], t[-1], 1.0 / fs_resample)
    y = interpolate.CubicSpline(t, rr)(grid)
    return grid, y - y.mean()


def band_powers(intervals_ms, fs_resample: float = 4.0):
    """(lf, hf, total) power in ms^2 from a Welch periodogram of the tachogram."""
    _, y = tachogram(intervals_ms, fs_resample)
    f, pxx = signal.welch(y, fs=fs_resample, nperseg=min(256, len(y)))
    df = f[1] - f[0]
    lf = float(pxx[(f >= LF_BAND[0]) & (f < LF_BAND[1])].sum() * df)
    hf = float(pxx[(f >= HF_BAND[0]) & (f < HF_BAND[1])].sum() * df)
    return lf, hf, float(pxx.sum() * df)


def hrv_features(rr, min_intervals: int = MIN_INTERVALS) -> HrvFeatureVector:
    x = _intervals(rr)
    if x.size < min_intervals:
        raise CapsuleError(f"capsule under-sampled: {x.size} < {min_intervals} RR intervals")
    lf, hf, _ = band_powers(x)
    return HrvFeatureVector(mean_rr(x), sdnn(x), rmssd(x), pnn50(x), lf, hf,
                            lf / hf if hf > 0 else float("nan"))


def capsule_features(rr: RrSeries, w: Window, cfg: CapsuleConfig, fs: float) -> np.ndarray:
    rows = []
    for a, b in slice_capsules(w, cfg):
        seg = rr.between(w.start_sample + a, w.start_sample + b, fs)
        v = hrv_features(seg)
        if not v.lfhf_defined:
            raise CapsuleError("lfhf undefined (zero HF power)")
        rows.append(v.as_array())
    return np.array(rows)


def build_dataset(windows, cfg: CapsuleConfig, rr: RrSeries, fs: float) -> list[CapsuleSequence]:
    """Capsule sequences for every window.  A window with an invalid capsule
    is dropped together with its partner of the other class."""
    seqs, bad = {}, set()
    for w in windows:
        try:
            seqs[(w.kind, w.pair_id)] = CapsuleSequence(cfg, capsule_features(rr, w, cfg, fs), w.label, w)
        except CapsuleError:
            bad.add(w.pair_id)
    out = [s for (kind, pid), s in seqs.items() if pid not in bad
           and (DEW, pid) in seqs and (NSRW, pid) in seqs]
    if not out:
        raise CapsuleError("no valid capsule sequences")
    out.sort(key=lambda s: (s.source_window.pair_id, -s.label))
    return out


def stack(seqs) -> tuple[np.ndarray, np.ndarray]:
    X = np.stack([s.rows for s in seqs])
    y = np.array([s.label for s in seqs], dtype=np.int64)
    return X, y


# -- files -----------------------------------------------------------------

def write_dataset(path, seqs) -> None:
    cfg = seqs[0].config
    lines = ["format_version=1", f"config={cfg.label}", f"L={cfg.L}",
             f"sequences={len(seqs)}", f"features={','.join(FEATURES)}"]
    for s in seqs:
        w = s.source_window
        lines.append(f"sequence label={s.label} kind={w.kind} start={w.start_sample} pair={w.pair_id}")
        lines += [" ".join(f"{v:.17g}" for v in row) for row in s.rows]
    atomic_write(path, "\n".join(lines) + "\n")


def read_dataset(path) -> list[CapsuleSequence]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0].strip() != "format_version=1":
        raise CapsuleError(f"{path}: unsupported dataset format")
    head = dict(l.split("=", 1) for l in lines[1:5])
    L = int(head["L"])
    cfg = CapsuleConfig.from_label(head["config"], L)
    out, i = [], 5
    for _ in range(int(head["sequences"])):
        fields = dict(kv.split("=", 1) for kv in lines[i].split()[1:])
        rows = np.array([[float(v) for v in lines[i + 1 + k].split()] for k in range(cfg.N)])
        w = Window(fields["kind"], int(fields["start"]), L, int(fields["pair"]))
        out.append(CapsuleSequence(cfg, rows, int(fields["label"]), w))
        i += 1 + cfg.N
    return out


def benchmark_row(cfg: CapsuleConfig, fold, accuracy: float, f1: float) -> list:
    return [cfg.label, cfg.C, cfg.N, fmt(cfg.M), fold, fmt(accuracy), fmt(f1)]
