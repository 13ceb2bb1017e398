"""Synthetic fixtures with known ground truth: RR tachograms, ECG traces
built from Gaussian waves, annotated recordings and separable capsule data."""
from __future__ import annotations

import numpy as np

from .ecg import EcgRecording

# (mean RR ms, LF amplitude ms, HF amplitude ms, white jitter ms)
ALERT = (780.0, 15.0, 30.0, 8.0)
DROWSY = (930.0, 55.0, 12.0, 8.0)


def synthetic_rr(duration_s: float, rng: np.random.Generator, mean_ms: float = 800.0,
                 lf_ms: float = 20.0, hf_ms: float = 20.0, jitter_ms: float = 5.0,
                 lf_hz: float = 0.1, hf_hz: float = 0.25) -> np.ndarray:
    """RR intervals with sinusoidal LF/HF modulation, long enough to cover ``duration_s``."""
    out = []
    t = 0.0
    phase_lf, phase_hf = rng.uniform(0, 2 * np.pi, 2)
    while t < duration_s * 1000.0:
        rr = (mean_ms + lf_ms * np.sin(2 * np.pi * lf_hz * t / 1000 + phase_lf)
              + hf_ms * np.sin(2 * np.pi * hf_hz * t / 1000 + phase_hf)
              + jitter_ms * rng.standard_normal())
        rr = float(np.clip(rr, 300.0, 2000.0))
        out.append(rr)
        t += rr
    return np.array(out)


def _gauss(n, centre, sigma, amp):
    lo = max(0, int(centre - 5 * sigma))
    hi = min(n, int(centre + 5 * sigma) + 1)
    idx = np.arange(lo, hi)
    return lo, hi, amp * np.exp(-0.5 * ((idx - centre) / sigma) ** 2)


def synthetic_ecg(rr_ms, fs: int = 128, rng: np.random.Generator | None = None,
                  snr_db: float | None = 20.0, start_s: float = 0.5,
                  qrs_sigma_ms: float = 12.0, t_wave: bool = True,
                  duration_s: float | None = None):
    """Sum of Gaussian P/QRS/T waves at the beats implied by ``rr_ms``.

    Returns ``(samples, true_peaks)``; ``true_peaks`` are the sample indices
    of the R-wave maxima.  White noise is scaled to ``snr_db`` relative to the
    clean signal power (``None`` for a clean trace).
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    rr_ms = np.asarray(rr_ms, dtype=np.float64)
    beat_t = start_s + np.concatenate([[0.0], np.cumsum(rr_ms)]) / 1000.0
    if duration_s is None:
        duration_s = beat_t[-1] + 1.0
    n = int(round(duration_s * fs))
    x = np.zeros(n)
    peaks = []
    sig_qrs = qrs_sigma_ms / 1000.0 * fs
    for bt in beat_t:
        c = bt * fs
        if c >= n - 1:
            break
        r = int(round(c))
        for off_s, sigma, amp in ((-0.16, 0.025, 0.12), (0.0, None, 1.0), (0.28, 0.05, 0.3 if t_wave else 0.0)):
            if amp == 0.0 or (off_s == -0.16 and not t_wave):
                continue
            s = sig_qrs if sigma is None else sigma * fs
            lo, hi, w = _gauss(n, r + off_s * fs, s, amp)
            x[lo:hi] += w
        peaks.append(r)
    if snr_db is not None:
        p_sig = np.mean(x ** 2)
        x = x + rng.standard_normal(n) * np.sqrt(p_sig / 10 ** (snr_db / 10.0))
    return x, np.array(peaks, dtype=np.int64)


def annotated_recording(event_times_s, duration_s: float, rng: np.random.Generator,
                        fs: int = 128, drowsy_span_s: float = 120.0,
                        snr_db: float = 20.0, alert=ALERT, drowsy=DROWSY) -> EcgRecording:
    """ECG whose physiology switches to the drowsy profile for ``drowsy_span_s``
    before every event (button press)."""
    segments = []
    t = 0.0
    events = sorted(event_times_s)
    bounds = []
    for e in events:
        start = max(0.0, e - drowsy_span_s)
        if start > t:
            bounds.append((t, start, alert))
        bounds.append((max(start, t), e, drowsy))
        t = e
    if t < duration_s:
        bounds.append((t, duration_s, alert))
    for a, b, prof in bounds:
        if b <= a:
            continue
        mean, lf, hf, jit = prof
        rr = synthetic_rr(b - a, rng, mean, lf, hf, jit)
        # trim so this block ends close to b
        keep = np.cumsum(rr) <= (b - a) * 1000.0
        segments.append(rr[keep] if keep.any() else rr[:1])
    rr_all = np.concatenate(segments)
    samples, _ = synthetic_ecg(rr_all, fs, rng, snr_db, start_s=0.4, duration_s=duration_s)
    ev = np.array([int(round(e * fs)) for e in events if int(round(e * fs)) < len(samples)], dtype=np.int64)
    return EcgRecording(samples, fs, 16, ev)


def separable_capsules(n_per_class: int, n_capsules: int, rng: np.random.Generator,
                       n_features: int = 7, separation: float = 2.0):
    """Linearly separable capsule sequences: class 1 is shifted by
    ``separation`` along a fixed random unit direction at every capsule."""
    direction = rng.standard_normal(n_features)
    direction /= np.linalg.norm(direction)
    X = rng.standard_normal((2 * n_per_class, n_capsules, n_features)) * 0.5
    y = np.repeat([0, 1], n_per_class)
    X[y == 1] += separation * direction
    X[y == 0] -= separation * direction
    order = rng.permutation(len(y))
    return X[order], y[order]
