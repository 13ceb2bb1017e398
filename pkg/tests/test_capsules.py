import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drowsybrake.capsules import (DEW, NSRW, CapsuleConfig, CapsuleError, SlidingInference,
                                  Window, band_powers, build_dataset, capsule_starts,
                                  compute_overlap, enumerate_configs, extract_windows,
                                  hrv_features, mean_rr, pnn50, qualifying_events,
                                  read_dataset, rmssd, sdnn, slice_capsules, stack,
                                  write_dataset)
from drowsybrake.ecg import EcgRecording, RrSeries
from drowsybrake.synthetic import synthetic_rr

FS = 128
L = 15360


def _rec(duration_s, events_s):
    return EcgRecording(np.zeros(int(duration_s * FS)), FS, 16, [int(e * FS) for e in events_s])


# -- windows -----------------------------------------------------------------

def test_events_far_apart_both_qualify():
    assert len(qualifying_events(np.array([100, 500]) * FS, 120 * FS)) == 2


def test_close_event_rejected():
    q = qualifying_events(np.array([100, 150]) * FS, 120 * FS)
    assert q.tolist() == [100 * FS]


def test_one_dew_gets_one_disjoint_nsrw():
    ws = extract_windows(_rec(3600, [1000]))
    dews = [w for w in ws if w.kind == DEW]
    nsrws = [w for w in ws if w.kind == NSRW]
    assert len(dews) == 1 and len(nsrws) == 1
    assert not dews[0].overlaps(nsrws[0])
    assert dews[0].end_sample == 1000 * FS


def test_nsrw_keeps_gap_from_every_event():
    events = [400, 520, 1300, 2000, 2900]
    ws = extract_windows(_rec(3600, events))
    assert sum(w.kind == DEW for w in ws) == sum(w.kind == NSRW for w in ws)
    for w in ws:
        if w.kind != NSRW:
            continue
        for e in events:
            e = e * FS
            assert w.end_sample <= e - 120 * FS or w.start_sample >= e + 120 * FS
    for i, a in enumerate(ws):
        for b in ws[i + 1:]:
            assert not a.overlaps(b)


def test_no_events_gives_no_windows():
    assert extract_windows(_rec(600, [])) == []


def test_dew_before_record_start_is_skipped():
    assert extract_windows(_rec(3600, [60])) == []


def test_cannot_balance():
    with pytest.raises(CapsuleError, match="cannot balance classes"):
        extract_windows(_rec(400, [200, 390]))


def test_window_longer_than_record():
    with pytest.raises(ValueError):
        extract_windows(_rec(60, [30]))


# -- overlap equation ---------------------------------------------------------

def test_overlap_examples():
    assert compute_overlap(6400, 6, L) == 0.72
    assert compute_overlap(10240, 2, L) == 0.50
    assert compute_overlap(15360, 2, L) is None


def test_overlap_needs_two_capsules():
    with pytest.raises(ValueError):
        compute_overlap(6400, 1, L)


def _oracle_configs():
    # float evaluation with the two-decimal tolerance test, independent of the
    # exact rational arithmetic used by the library
    out = set()
    for cs in range(40, 121):
        C = cs * FS
        for N in range(2, 201):
            M = (C * N - L) / ((N - 1) * C)
            if 0 < M < 1 and abs(100 * M - round(100 * M)) < 1e-9:
                out.add(f"C{C}_N{N}_M{round(100 * M)}")
    return out


def test_enumeration_matches_brute_force():
    labels = [c.label for c in enumerate_configs(L, FS)]
    assert labels == sorted(labels)
    assert set(labels) == _oracle_configs()


def test_enumeration_named_configs():
    cfgs = {c.label: c for c in enumerate_configs(L, FS)}
    assert cfgs["C6400_N6_M72"].M == 0.72
    assert cfgs["C10240_N2_M50"].M == 0.50
    assert cfgs["C5120_N6_M60"].M == 0.60
    assert all(c.N >= 2 for c in cfgs.values())


def test_eq11_roundtrip_and_tiling():
    w = Window(DEW, 0, L)
    for c in enumerate_configs(L, FS):
        m100 = round(100 * c.M)
        assert (c.N - 1) * c.C * m100 == 100 * (c.C * c.N - L)
        spans = slice_capsules(w, c)
        assert len(spans) == c.N
        assert spans[0][0] == 0
        assert abs(spans[-1][1] - L) <= 1


def test_label_roundtrip():
    c = CapsuleConfig.from_label("C6400_N6_M72")
    assert (c.C, c.N, c.M) == (6400, 6, 0.72)
    with pytest.raises(ValueError):
        CapsuleConfig.from_label("C6400_N6_M70")


# -- slicing -------------------------------------------------------------------

def test_slice_c6400():
    spans = slice_capsules(Window(DEW, 0, L), CapsuleConfig(6400, 6, 0.72))
    assert [s for s, _ in spans] == [0, 1792, 3584, 5376, 7168, 8960]
    assert spans[-1][1] == 15360


def test_slice_c10240():
    spans = slice_capsules(Window(DEW, 0, L), CapsuleConfig(10240, 2, 0.5))
    assert [s for s, _ in spans] == [0, 5120]
    assert spans[-1][1] == 15360


def test_slice_zero_overlap_halves():
    spans = slice_capsules(Window(DEW, 0, L), CapsuleConfig(7680, 2, 0.0))
    assert spans == [(0, 7680), (7680, 15360)]


def test_slice_rejects_mismatched_length():
    with pytest.raises(CapsuleError, match="non-tiling"):
        slice_capsules(Window(DEW, 0, 20000), CapsuleConfig(6400, 6, 0.72))


def test_capsule_starts_no_accumulated_rounding():
    c = CapsuleConfig.from_label("C6144_N151_M99")
    s = capsule_starts(c)
    assert s[-1] + c.C == L
    assert np.all(np.abs(s - np.arange(c.N) * c.C * (1 - c.M)) <= 0.5 + 1e-9)


# -- HRV ------------------------------------------------------------------------

def test_constant_series():
    x = np.full(40, 800.0)
    assert (sdnn(x), rmssd(x), pnn50(x), mean_rr(x)) == (0.0, 0.0, 0.0, 800.0)


def test_rmssd_and_pnn50_hand_values():
    assert rmssd([800, 850, 800]) == 50.0
    assert pnn50([800, 850, 800]) == 0.0
    assert pnn50([800, 860, 800]) == 100.0


def test_under_sampled_capsule():
    with pytest.raises(CapsuleError, match="under-sampled"):
        hrv_features(np.full(29, 800.0))


def test_lfhf_undefined_without_hf():
    v = hrv_features(np.full(60, 800.0))
    assert v.hf_power == 0.0
    assert math.isnan(v.lfhf_ratio) and not v.lfhf_defined


def test_lf_dominates_for_slow_modulation():
    rng = np.random.default_rng(0)
    slow = hrv_features(synthetic_rr(120, rng, 800, lf_ms=40, hf_ms=2, jitter_ms=0.5))
    fast = hrv_features(synthetic_rr(120, rng, 800, lf_ms=2, hf_ms=40, jitter_ms=0.5))
    assert slow.lfhf_ratio > 5 and fast.lfhf_ratio < 0.2


def test_flagged_intervals_excluded():
    rr = RrSeries.from_intervals([800.0] * 40 + [3000.0] + [800.0] * 5)
    assert mean_rr(rr) == 800.0


rr_lists = st.lists(st.floats(300, 2000, allow_nan=False), min_size=30, max_size=200)


@settings(max_examples=60, deadline=None)
@given(x=rr_lists, c=st.floats(-250, 250))
def test_sdnn_shift_invariant(x, c):
    x = np.array(x)
    assert sdnn(x + c) == pytest.approx(sdnn(x), rel=1e-9, abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(x=rr_lists)
def test_reversal_invariance(x):
    x = np.array(x)
    assert rmssd(x[::-1]) == pytest.approx(rmssd(x), rel=1e-12)
    assert pnn50(x[::-1]) == pnn50(x)


@settings(max_examples=60, deadline=None)
@given(x=rr_lists)
def test_band_powers_bounded_by_total(x):
    lf, hf, total = band_powers(np.array(x))
    assert lf >= 0 and hf >= 0
    assert lf + hf <= total * (1 + 1e-12)


@settings(max_examples=30, deadline=None)
@given(x=rr_lists)
def test_feature_ranges(x):
    v = hrv_features(np.array(x))
    assert v.sdnn_ms >= 0 and v.rmssd_ms >= 0 and 0 <= v.pnn50_pct <= 100


# -- datasets ---------------------------------------------------------------------

def _windows_and_rr(n_pairs, seed=0):
    rng = np.random.default_rng(seed)
    duration = 700 * (n_pairs + 1)
    events = [700 * (k + 1) for k in range(n_pairs)]
    rec = _rec(duration, events)
    ws = extract_windows(rec)
    rr = RrSeries.from_intervals(synthetic_rr(duration, rng, 800, 20, 20, 5), FS)
    return ws, rr


def test_dataset_all_valid():
    ws, rr = _windows_and_rr(4)
    seqs = build_dataset(ws, CapsuleConfig(6400, 6, 0.72), rr, FS)
    X, y = stack(seqs)
    assert len(seqs) == 8 and y.sum() == 4
    assert X.shape == (8, 6, 7)
    assert not np.isnan(X).any()


def test_dataset_pairwise_drop():
    ws, rr = _windows_and_rr(4)
    bad = next(w for w in ws if w.kind == DEW and w.pair_id == 2)
    keep = (rr.peak_indices < bad.start_sample) | (rr.peak_indices >= bad.end_sample)
    rr = RrSeries.from_peaks(rr.peak_indices[keep], FS)
    seqs = build_dataset(ws, CapsuleConfig(6400, 6, 0.72), rr, FS)
    labels = [s.label for s in seqs]
    assert labels.count(1) == 3 and labels.count(0) == 3
    assert all(s.source_window.pair_id != 2 for s in seqs)


def test_dataset_all_invalid():
    ws, _ = _windows_and_rr(2)
    with pytest.raises(CapsuleError):
        build_dataset(ws, CapsuleConfig(6400, 6, 0.72), RrSeries.from_peaks([0, 100], FS), FS)


@settings(max_examples=10, deadline=None)
@given(n=st.integers(1, 5), seed=st.integers(0, 1000), drop=st.integers(0, 4))
def test_dataset_balanced(n, seed, drop):
    ws, rr = _windows_and_rr(n, seed)
    w = ws[drop % len(ws)]
    keep = (rr.peak_indices < w.start_sample + 5000) | (rr.peak_indices >= w.end_sample)
    rr = RrSeries.from_peaks(rr.peak_indices[keep], FS)
    try:
        seqs = build_dataset(ws, CapsuleConfig(6400, 6, 0.72), rr, FS)
    except CapsuleError:
        return
    labels = [s.label for s in seqs]
    assert labels.count(1) == labels.count(0)


def test_dataset_file_roundtrip(tmp_path):
    ws, rr = _windows_and_rr(3)
    seqs = build_dataset(ws, CapsuleConfig(6400, 6, 0.72), rr, FS)
    write_dataset(tmp_path / "d.txt", seqs)
    assert (tmp_path / "d.txt").read_text().splitlines()[0] == "format_version=1"
    back = read_dataset(tmp_path / "d.txt")
    X1, y1 = stack(seqs)
    X2, y2 = stack(back)
    np.testing.assert_array_equal(X1, X2)
    np.testing.assert_array_equal(y1, y2)


def test_sliding_inference_overlap():
    assert SlidingInference(0.0).stride(L) == L
    assert SlidingInference().stride(L) == 3840
    with pytest.raises(ValueError):
        SlidingInference(1.0)
