"""From a raw synthetic ECG to HRV features.

Builds a two-hour recording with a handful of button presses, filters it,
finds R-peaks, cuts drowsiness / normal windows and prints the capsule
features of one pair so the two classes can be compared by eye.

    python demos/01_ecg_to_hrv.py
"""
import numpy as np

from drowsybrake.capsules import DEW, CapsuleConfig, capsule_features, extract_windows, FEATURES
from drowsybrake.ecg import bandpass_filter, detect_r_peaks
from drowsybrake.synthetic import annotated_recording

rng = np.random.default_rng(1)
rec = annotated_recording([900, 2100, 3300, 4500, 5700], 7200, rng)
print(f"recording: {rec.duration_s:.0f} s at {rec.sample_rate_hz} Hz, {len(rec.events)} events")

filtered = bandpass_filter(rec)
rr = detect_r_peaks(filtered)
print(f"{len(rr.peak_indices)} beats, mean RR {rr.intervals_ms.mean():.0f} ms, "
      f"{int(rr.flags.sum())} flagged intervals")

windows = extract_windows(rec)
print(f"{len(windows)} windows ({sum(w.kind == DEW for w in windows)} drowsiness windows)")

cfg = CapsuleConfig.from_label("C6400_N6_M72")
pair = [w for w in windows if w.pair_id == 0]
np.set_printoptions(precision=1, suppress=True, linewidth=120)
for w in pair:
    rows = capsule_features(rr, w, cfg, rec.sample_rate_hz)
    print(f"\n{w.kind} starting at {w.start_sample / rec.sample_rate_hz:.0f} s")
    print("  " + "  ".join(f"{f:>10}" for f in FEATURES))
    for r in rows:
        print("  " + "  ".join(f"{v:10.2f}" for v in r))
