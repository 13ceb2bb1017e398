"""Recurrent drowsiness classifier over capsule sequences: training with early
stopping, stratified cross-validation, model bundles and sliding inference."""
from __future__ import annotations

import threading
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from . import nn
from .capsules import (CapsuleConfig, CapsuleError, NSRW, SlidingInference, Window,
                       benchmark_row, build_dataset, capsule_features, stack)
from .ecg import EcgRecording, RrSeries, bandpass_filter, detect_r_peaks
from .fileio import atomic_write, fmt, read_kv, write_csv, write_kv


@dataclass
class DetectorConfig:
    units: int = 40
    recurrent_layers: int = 3
    dropout: float = 0.25
    l2: float = 0.28
    learning_rate: float = 0.002
    batch_size: int = 48
    max_epochs: int = 100
    early_stop_patience: int = 10
    decision_threshold: float = 0.5
    validation_fraction: float = 0.2

    def validate(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        for name in ("units", "recurrent_layers", "batch_size", "max_epochs"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be non-negative")
        if self.l2 < 0 or self.learning_rate <= 0:
            raise ValueError("l2 must be >= 0 and learning_rate > 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for k, v in d.items():
            out[k] = int(v) if kinds[k] in ("int", int) else float(v)
        return cls(**out).validate()


class Standardizer:
    """Per-feature z-scoring with population statistics.  Constant features
    are dropped and remembered in ``mask``."""

    def __init__(self, mean=None, std=None, mask=None):
        self.mean, self.std, self.mask = mean, std, mask

    def fit(self, rows) -> "Standardizer":
        x = np.asarray(rows, dtype=np.float64)
        x = x.reshape(-1, x.shape[-1])
        if x.shape[0] == 0:
            raise ValueError("cannot fit a standardizer on zero rows")
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.mask = std > 1e-12 * np.maximum(1.0, np.abs(mean))
        self.mean, self.std = mean[self.mask], std[self.mask]
        return self

    def transform(self, rows) -> np.ndarray:
        if self.mask is None:
            raise RuntimeError("standardizer is not fitted")
        x = np.asarray(rows, dtype=np.float64)[..., self.mask]
        return (x - self.mean) / self.std

    @property
    def n_features(self) -> int:
        return int(self.mask.sum())

    def to_text(self) -> str:
        return "".join([
            "format_version=1\n",
            "mask=" + " ".join(str(int(m)) for m in self.mask) + "\n",
            "mean=" + " ".join(f"{v:.17g}" for v in self.mean) + "\n",
            "std=" + " ".join(f"{v:.17g}" for v in self.std) + "\n",
        ])

    @classmethod
    def from_text(cls, text: str) -> "Standardizer":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        vec = lambda s: np.array([float(t) for t in s.split()])
        return cls(vec(kv["mean"]), vec(kv["std"]), vec(kv["mask"]).astype(bool))


def fit_standardizer(train_rows) -> Standardizer:
    return Standardizer().fit(train_rows)


def apply_standardizer(st: Standardizer, rows) -> np.ndarray:
    return st.transform(rows)


def build_network(n_features: int, cfg: DetectorConfig, rng: np.random.Generator) -> nn.Sequential:
    layers = []
    n_in = n_features
    for i in range(cfg.recurrent_layers):
        layers.append(nn.Recurrent(n_in, cfg.units, rng, name=f"rnn{i}"))
        layers.append(nn.Dropout(cfg.dropout, rng))
        n_in = cfg.units
    layers += [nn.LastStep(), nn.Dense(cfg.units, 1, "identity", rng, name="head")]
    return nn.Sequential(layers)


@dataclass
class DetectorModel:
    net: nn.Sequential
    standardizer: Standardizer
    config: DetectorConfig
    capsule_config: CapsuleConfig | None = None
    epochs_run: int = 0

    def predict_proba(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 2
        if single:
            X = X[None]
        self.net.eval()
        p = nn.sigmoid(self.net.forward(self.standardizer.transform(X))[:, 0])
        return p[0] if single else p

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= self.config.decision_threshold).astype(np.int64)


# -- metrics ---------------------------------------------------------------

def confusion(y_true, y_pred) -> np.ndarray:
    """``[[TN, FP], [FN, TP]]`` with drowsy (1) as the positive class."""
    y_true = np.asarray(y_true).astype(int)
    y_pred = np.asarray(y_pred).astype(int)
    cm = np.zeros((2, 2), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def accuracy_f1(y_true, y_pred) -> tuple[float, float]:
    cm = confusion(y_true, y_pred)
    tp, fp, fn = cm[1, 1], cm[0, 1], cm[1, 0]
    acc = float(np.trace(cm) / cm.sum()) if cm.sum() else 0.0
    f1 = float(2 * tp / (2 * tp + fp + fn)) if tp else 0.0
    return acc, f1


# -- splitting ---------------------------------------------------------------

def stratified_folds(y, k: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Index arrays of ``k`` folds, every class spread over all folds."""
    y = np.asarray(y)
    if len(y) < k:
        raise ValueError(f"dataset of {len(y)} samples is smaller than k={k}")
    folds = [[] for _ in range(k)]
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        if len(idx) < k:
            raise ValueError(f"cannot stratify: class {c} has {len(idx)} samples for {k} folds")
        for f, part in enumerate(np.array_split(idx, k)):
            folds[f].extend(part.tolist())
    return [np.sort(np.array(f, dtype=np.int64)) for f in folds]


def stratified_split(y, fraction: float, rng: np.random.Generator):
    """(train, held) index arrays with ``fraction`` of every class held out
    (at least one sample per class when the class has two or more)."""
    y = np.asarray(y)
    train, held = [], []
    for c in np.unique(y):
        idx = rng.permutation(np.flatnonzero(y == c))
        n = int(round(fraction * len(idx)))
        if len(idx) >= 2:
            n = min(max(1, n), len(idx) - 1)
        else:
            n = 0
        held.extend(idx[:n].tolist())
        train.extend(idx[n:].tolist())
    return np.sort(np.array(train, dtype=np.int64)), np.sort(np.array(held, dtype=np.int64))


# -- training ----------------------------------------------------------------

def train_detector(X, y, cfg: DetectorConfig | None = None, seed: int = 0,
                   capsule_config: CapsuleConfig | None = None, X_val=None, y_val=None) -> DetectorModel:
    """Mini-batch Adam on binary cross-entropy with L2, early-stopped on the
    validation F1.  Without an explicit validation set a stratified fraction
    of the training data is held back.  The best epoch's weights are kept."""
    cfg = (cfg or DetectorConfig()).validate()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    counts = np.bincount(y, minlength=2)
    if len(counts) > 2 or counts.min() < 2:
        raise ValueError("need at least 2 samples of each class")
    rng = np.random.default_rng(seed)
    if X_val is None:
        tr, va = stratified_split(y, cfg.validation_fraction, rng)
        X, y, X_val, y_val = X[tr], y[tr], X[va], y[va]
    st = Standardizer().fit(X)
    Xs, Xv = st.transform(X), st.transform(X_val)
    net = build_network(st.n_features, cfg, rng)
    adam = nn.Adam(net.parameters(), learning_rate=cfg.learning_rate)
    yf = y.astype(np.float64)
    best_key, best, since_best, epochs = (-1.0, -np.inf), adam.flat.copy(), 0, 0
    for epoch in range(cfg.max_epochs):
        net.train()
        order = rng.permutation(len(y))
        for s in range(0, len(order), cfg.batch_size):
            b = order[s:s + cfg.batch_size]
            nn.backward_and_step(net, (Xs[b], yf[b]), "bce", adam, cfg.l2)
        epochs = epoch + 1
        net.eval()
        logits = net.forward(Xv)[:, 0]
        pred = (nn.sigmoid(logits) >= cfg.decision_threshold).astype(int)
        _, f1 = accuracy_f1(y_val, pred)
        # equal F1 on a small validation set is common; the lower loss breaks the tie
        key = (f1, -nn.bce_with_logits(logits, y_val.astype(np.float64))[0])
        if key > best_key:
            best_key, best, since_best = key, adam.flat.copy(), 0
        else:
            since_best += 1
        if since_best >= cfg.early_stop_patience:
            break
    adam.flat[:] = best
    net.eval()
    return DetectorModel(net, st, cfg, capsule_config, epochs)


@dataclass
class CvReport:
    fold_accuracy: list
    fold_f1: list
    confusion: np.ndarray  # hold-out, [[TN, FP], [FN, TP]]
    holdout_accuracy: float
    holdout_f1: float

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracy))

    @property
    def mean_f1(self) -> float:
        return float(np.mean(self.fold_f1))

    def write(self, out_dir, prefix: str = "cv") -> None:
        out_dir = Path(out_dir)
        rows = [[i, fmt(a), fmt(f)] for i, (a, f) in enumerate(zip(self.fold_accuracy, self.fold_f1))]
        rows.append(["mean", fmt(self.mean_accuracy), fmt(self.mean_f1)])
        rows.append(["holdout", fmt(self.holdout_accuracy), fmt(self.holdout_f1)])
        write_csv(out_dir / f"{prefix}_report.csv", ["fold", "accuracy", "f1"], rows)
        write_csv(out_dir / f"{prefix}_confusion.csv", ["actual", "pred_0", "pred_1"],
                  [[0, *self.confusion[0]], [1, *self.confusion[1]]])


def cross_validate(X, y, cfg: DetectorConfig | None = None, k: int = 5, seed: int = 0,
                   holdout_fraction: float = 0.2, capsule_config=None) -> CvReport:
    """Stratified hold-out split, then stratified k-fold on the rest.  The
    hold-out confusion matrix uses the mean probability of the k fold models."""
    cfg = cfg or DetectorConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    if holdout_fraction > 0:
        dev, hold = stratified_split(y, holdout_fraction, rng)
    else:
        dev, hold = np.arange(len(y)), np.zeros(0, dtype=np.int64)
    folds = stratified_folds(y[dev], k, rng)
    accs, f1s, models = [], [], []
    for i, va in enumerate(folds):
        tr = np.setdiff1d(np.arange(len(dev)), va)
        m = train_detector(X[dev[tr]], y[dev[tr]], cfg, seed=seed * 1009 + i + 1,
                           capsule_config=capsule_config)
        a, f = accuracy_f1(y[dev[va]], m.predict(X[dev[va]]))
        accs.append(a)
        f1s.append(f)
        models.append(m)
    if hold.size:
        p = np.mean([m.predict_proba(X[hold]) for m in models], axis=0)
        pred = (p >= cfg.decision_threshold).astype(int)
        cm = confusion(y[hold], pred)
        ha, hf = accuracy_f1(y[hold], pred)
    else:
        cm, ha, hf = np.zeros((2, 2), dtype=np.int64), float("nan"), float("nan")
    return CvReport(accs, f1s, cm, ha, hf)


def benchmark_configs(windows, rr: RrSeries, fs: float, configs, cfg: DetectorConfig,
                      k: int = 5, seed: int = 0, progress=None) -> list[list]:
    """Rows ``label,C,N,M,fold,accuracy,f1`` for every configuration that
    yields a usable dataset; fold ``mean`` closes each configuration."""
    rows = []
    for cc in configs:
        try:
            X, y = stack(build_dataset(windows, cc, rr, fs))
            rep = cross_validate(X, y, cfg, k, seed, capsule_config=cc)
        except (CapsuleError, ValueError) as exc:
            if progress:
                progress(f"{cc.label}: skipped ({exc})")
            continue
        for i, (a, f) in enumerate(zip(rep.fold_accuracy, rep.fold_f1)):
            rows.append(benchmark_row(cc, i, a, f))
        rows.append(benchmark_row(cc, "mean", rep.mean_accuracy, rep.mean_f1))
        if progress:
            progress(f"{cc.label}: accuracy {rep.mean_accuracy:.4f} f1 {rep.mean_f1:.4f}")
    return rows


# -- bundles -----------------------------------------------------------------

def save_model(model: DetectorModel, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    nn.save_weights(out_dir / "weights.txt", model.net.parameters())
    atomic_write(out_dir / "standardizer.txt", model.standardizer.to_text())
    meta = {"format_version": 1,
            "capsule_config": model.capsule_config.label if model.capsule_config else "",
            "window_samples": model.capsule_config.L if model.capsule_config else "",
            "mask_length": len(model.standardizer.mask)}
    meta.update(asdict(model.config))
    write_kv(out_dir / "model.txt", meta)


def load_model(in_dir) -> DetectorModel:
    in_dir = Path(in_dir)
    meta = read_kv(in_dir / "model.txt")
    cc = None
    if meta.get("capsule_config"):
        cc = CapsuleConfig.from_label(meta["capsule_config"], int(meta["window_samples"]))
    names = {f.name for f in fields(DetectorConfig)}
    cfg = DetectorConfig.from_dict({k: v for k, v in meta.items() if k in names})
    st = Standardizer.from_text((in_dir / "standardizer.txt").read_text())
    net = build_network(st.n_features, cfg, np.random.default_rng(0))
    nn.load_weights(in_dir / "weights.txt", net.parameters())
    net.eval()
    return DetectorModel(net, st, cfg, cc)


# -- inference ---------------------------------------------------------------

@dataclass(frozen=True)
class Prediction:
    probability: float
    theta: int
    timestamp_s: float
    valid: bool = True


def sliding_predict(rec: EcgRecording, capsule_config: CapsuleConfig, model: DetectorModel,
                    window_overlap: float = 0.75, rr: RrSeries | None = None) -> Iterator[Prediction]:
    """One prediction per window position (stride ``L (1 - M')``), stamped at
    the window end.  A window that cannot be featurized yields an invalid
    prediction that carries the previous theta forward."""
    L = capsule_config.L
    if len(rec) < L:
        return
    stride = SlidingInference(window_overlap).stride(L)
    fs = rec.sample_rate_hz
    if rr is None:
        rr = detect_r_peaks(bandpass_filter(rec))
    theta = 0
    for s in range(0, len(rec) - L + 1, stride):
        t = (s + L) / fs
        try:
            rows = capsule_features(rr, Window(NSRW, s, L), capsule_config, fs)
        except CapsuleError:
            yield Prediction(float("nan"), theta, t, valid=False)
            continue
        p = float(model.predict_proba(rows))
        theta = int(p >= model.config.decision_threshold)
        yield Prediction(p, theta, t)


class ThetaSnapshot:
    """Single-slot, last-writer-wins holder for the latest prediction."""

    def __init__(self):
        self._lock = threading.Lock()
        self._pred: Prediction | None = None

    def publish(self, pred: Prediction) -> None:
        with self._lock:
            self._pred = pred

    def latest(self) -> Prediction | None:
        with self._lock:
            return self._pred

    def theta(self) -> int:
        p = self.latest()
        return 0 if p is None else p.theta


def start_monitor(stream, snapshot: ThetaSnapshot) -> threading.Thread:
    """Drain a prediction stream into ``snapshot`` on a daemon thread."""
    def run():
        for pred in stream:
            snapshot.publish(pred)
    th = threading.Thread(target=run, name="drowsiness-monitor", daemon=True)
    th.start()
    return th
