"""Capsule configurations and a small detector benchmark.

Lists the configurations accepted by the overlap equation for a 2-minute
window, then cross-validates the recurrent detector on three of them using
a synthetic recording.

    python demos/02_capsule_benchmark.py
"""
import numpy as np

from drowsybrake.capsules import CapsuleConfig, build_dataset, enumerate_configs, extract_windows, stack
from drowsybrake.detector import DetectorConfig, cross_validate
from drowsybrake.ecg import bandpass_filter, detect_r_peaks
from drowsybrake.synthetic import annotated_recording

configs = enumerate_configs(15360, 128)
print(f"{len(configs)} configurations, e.g.")
for c in configs[:6]:
    print(f"  {c.label}: capsule {c.C / 128:.0f} s, {c.N} capsules, overlap {c.M:.2f}")

rng = np.random.default_rng(7)
events = [600 * (k + 1) for k in range(11)]
rec = annotated_recording(events, 7200, rng)
rr = detect_r_peaks(bandpass_filter(rec))
windows = extract_windows(rec)

cfg = DetectorConfig(max_epochs=40)
for label in ("C6400_N6_M72", "C10240_N2_M50", "C5120_N6_M60"):
    X, y = stack(build_dataset(windows, CapsuleConfig.from_label(label), rr, rec.sample_rate_hz))
    rep = cross_validate(X, y, cfg, k=3, seed=0)
    print(f"{label}: {len(y)} sequences, CV accuracy {rep.mean_accuracy:.3f}, F1 {rep.mean_f1:.3f}")
    print(f"  hold-out confusion [[TN, FP], [FN, TP]] = {rep.confusion.tolist()}")
