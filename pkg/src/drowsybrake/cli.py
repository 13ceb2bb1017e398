"""Command-line entry point: ``drowsybrake <command> [options]``.

Exit codes: 0 success, 2 input/output problem, 3 invalid configuration,
4 numeric divergence.
"""
from __future__ import annotations

import argparse
import hashlib
import sys
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__
from .agent import VARIANTS, DQNAgent, evaluate_paired, train, variant_tag
from .capsules import (BENCHMARK_COLUMNS, CapsuleConfig, CapsuleError, enumerate_configs,
                       extract_windows, build_dataset, stack, write_dataset)
from .config import ConfigError, RunConfig
from .detector import benchmark_configs, cross_validate, save_model, train_detector
from .ecg import EcgFormatError, bandpass_filter, detect_r_peaks, load_recording, save_recording
from .env import BrakingEnv, PHASES
from .fileio import fmt, read_csv, read_kv, write_csv, write_kv
from .nn import DivergenceError
from .synthetic import annotated_recording

EXIT_OK, EXIT_IO, EXIT_CONFIG, EXIT_DIVERGENCE = 0, 2, 3, 4


class InputError(Exception):
    pass


# -- run directories -----------------------------------------------------------

def git_blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(path) -> str:
    """Blob hash of a file, or a tree-like hash over a directory's files."""
    p = Path(path)
    if p.is_file():
        return git_blob_hash(p.read_bytes())
    if p.is_dir():
        lines = [f"{f.relative_to(p).as_posix()} {git_blob_hash(f.read_bytes())}\n"
                 for f in sorted(p.rglob("*")) if f.is_file()]
        return hashlib.sha1("".join(lines).encode()).hexdigest()
    raise InputError(f"missing input: {p}")


class RunDirectory:
    """A fresh output directory whose manifest is written before any result
    and rewritten with the artifact list once the command finishes."""

    def __init__(self, path: Path, command: str, seed: int, config: RunConfig, inputs: dict):
        self.path = Path(path)
        self.inputs = {k: str(v) for k, v in inputs.items() if v is not None}
        self.input_hashes = {k: content_hash(v) for k, v in self.inputs.items()}
        if self.path.exists() and any(self.path.iterdir()):
            raise InputError(f"run directory {self.path} is not empty")
        self.path.mkdir(parents=True, exist_ok=True)
        self.command, self.seed, self.config = command, seed, config
        self.artifacts: list[str] = []
        self._write_manifest("running")

    def inputs_hash(self) -> str:
        joined = "".join(f"{k} {h}\n" for k, h in sorted(self.input_hashes.items()))
        return hashlib.sha1(joined.encode()).hexdigest()

    def _write_manifest(self, status: str):
        kv = {"format_version": 1, "package_version": __version__, "command": self.command,
              "seed": self.seed, "status": status, "inputs_hash": self.inputs_hash()}
        for k in sorted(self.inputs):
            kv[f"input.{k}"] = self.inputs[k]
            kv[f"input.{k}.hash"] = self.input_hashes[k]
        for k, v in self.config.snapshot().items():
            kv[f"config.{k}"] = v
        for i, a in enumerate(self.artifacts):
            kv[f"artifact.{i}"] = a
        write_kv(self.path / "manifest.txt", kv)

    def add(self, rel: str) -> Path:
        self.artifacts.append(rel)
        return self.path / rel

    def finish(self):
        self._write_manifest("complete")


def default_run_dir(command: str, seed: int, config: RunConfig, inputs: dict) -> Path:
    h = hashlib.sha1((config.to_text() + repr(sorted(inputs.items()))).encode()).hexdigest()[:8]
    base = Path("runs") / f"{command}-seed{seed}-{h}"
    path, n = base, 1
    while path.exists() and any(path.iterdir()):
        n += 1
        path = base.with_name(f"{base.name}-{n}")
    return path


def open_run(args, config: RunConfig, inputs: dict) -> RunDirectory:
    out = Path(args.out) if args.out else default_run_dir(args.command, args.seed, config, inputs)
    return RunDirectory(out, args.command, args.seed, config, inputs)


def say(msg: str):
    print(msg, file=sys.stderr, flush=True)


# -- shared pieces -------------------------------------------------------------

def _load_ecg(args, config):
    for name in ("ecg", "events"):
        if not Path(getattr(args, name)).is_file():
            raise InputError(f"cannot read --{name} {getattr(args, name)}")
    has_meta = args.meta or Path(args.ecg + ".meta").is_file()
    rec = load_recording(args.ecg, args.events, None if has_meta else config["capsule.sample_rate_hz"],
                         path_meta=args.meta)
    rec = bandpass_filter(rec)
    rr = detect_r_peaks(rec)
    windows = extract_windows(rec, config["capsule.window_samples"], config["capsule.min_gap_s"],
                              config["capsule.anchor"])
    if not windows:
        raise InputError("no qualifying drowsiness events in the recording")
    return rec, rr, windows


def _ecg_inputs(args):
    meta = args.meta or (args.ecg + ".meta" if Path(args.ecg + ".meta").is_file() else None)
    return {"ecg": args.ecg, "events": args.events, "meta": meta}


# -- commands -------------------------------------------------------------------

def cmd_synth_ecg(args, config):
    run = open_run(args, config, {})
    rng = np.random.default_rng(args.seed)
    duration = float(args.duration_s)
    n_events = int(args.events_count)
    spacing = duration / (n_events + 1)
    events = [spacing * (k + 1) for k in range(n_events)]
    rec = annotated_recording(events, duration, rng, fs=config["capsule.sample_rate_hz"])
    save_recording(rec, run.add("ecg.txt"), run.add("events.txt"), run.add("ecg.txt.meta"))
    run.finish()
    say(f"wrote {run.path}")
    return EXIT_OK


def cmd_benchmark_capsules(args, config):
    run = open_run(args, config, _ecg_inputs(args))
    rec, rr, windows = _load_ecg(args, config)
    L = config["capsule.window_samples"]
    configs = enumerate_configs(L, config["capsule.sample_rate_hz"],
                                (config["capsule.n_min"], config["capsule.n_max"]),
                                (config["capsule.c_min_s"], config["capsule.c_max_s"]))
    if args.configs_limit is not None:
        configs = configs[:args.configs_limit]
    folds = args.folds if args.folds is not None else config["cv.folds"]
    rows = benchmark_configs(windows, rr, rec.sample_rate_hz, configs, config.detector_config(),
                             folds, args.seed, progress=say)
    if not rows:
        raise InputError("no capsule configuration produced a usable dataset")
    by_label = defaultdict(list)
    for r in rows:
        by_label[r[0]].append(r)
    mean_acc = {k: float(v[-1][5]) for k, v in by_label.items()}
    order = sorted(by_label, key=lambda k: (-mean_acc[k], k))
    write_csv(run.add("benchmark.csv"), BENCHMARK_COLUMNS, [r for k in order for r in by_label[k]])
    run.finish()
    say(f"wrote {run.path / 'benchmark.csv'} ({len(order)} configurations)")
    return EXIT_OK


def cmd_train_detector(args, config):
    run = open_run(args, config, _ecg_inputs(args))
    rec, rr, windows = _load_ecg(args, config)
    cc = CapsuleConfig.from_label(config["capsule.config"], config["capsule.window_samples"])
    seqs = build_dataset(windows, cc, rr, rec.sample_rate_hz)
    write_dataset(run.add(f"dataset_{cc.label}.txt"), seqs)
    X, y = stack(seqs)
    dcfg = config.detector_config()
    rep = cross_validate(X, y, dcfg, config["cv.folds"], args.seed,
                         config["cv.holdout_fraction"], capsule_config=cc)
    run.add("cv_report.csv"), run.add("cv_confusion.csv")
    rep.write(run.path)
    model = train_detector(X, y, dcfg, seed=args.seed, capsule_config=cc)
    save_model(model, run.add("model"))
    run.finish()
    say(f"cv accuracy {rep.mean_accuracy:.4f} f1 {rep.mean_f1:.4f}; model in {run.path / 'model'}")
    return EXIT_OK


def cmd_train_agent(args, config):
    run = open_run(args, config, {})
    variant = args.variant or config["train.variant"]
    episodes = args.episodes if args.episodes is not None else config["train.episodes"]
    env_cfg = config.env_config()

    def progress(ep, total):
        if (ep + 1) % 50 == 0:
            say(f"episode {ep + 1}/{episodes} reward {total:.1f}")

    rep = train(lambda: BrakingEnv(env_cfg), variant, episodes, args.seed, config.agent_config(),
                config["train.drowsy_mode"], progress)
    rep.write_csv(run.add("training.csv"))
    rep.agent.save(run.add("checkpoint"))
    run.finish()
    say(f"final 10-episode average {rep.moving_avg[-1]:.2f}; checkpoint in {run.path / 'checkpoint'}")
    return EXIT_OK


def cmd_eval_paired(args, config):
    ck = Path(args.checkpoint)
    if not (ck / "policy.txt").is_file():
        raise InputError(f"no checkpoint at {ck}")
    run = open_run(args, config, {"checkpoint": ck})
    agent = DQNAgent.load(ck)
    n = args.episodes if args.episodes is not None else config["eval.scenarios"]
    log_dir = None
    if config["eval.write_logs"]:
        log_dir = run.add("logs")
        log_dir.mkdir()
    rep = evaluate_paired(agent, n, args.seed, config.env_config(), log_dir, config["eval.drowsy_mode"])
    run.add("episodes.csv"), run.add("summary.csv")
    rep.write(run.path)
    run.finish()
    s = rep.summary()
    say(f"success rate {s['success_rate']:.3f}, unsafe time drowsy {s['unsafe_time_drowsy_s']:.2f} s, "
        f"alert {s['unsafe_time_alert_s']:.2f} s")
    return EXIT_OK


REPORT_FIELDS = ("success_rate", "mean_reward", "unsafe_time_drowsy_s", "unsafe_time_alert_s",
                 "mean_distance_m", "mean_brake_pressure")


def _series_by_arm(log_dir: Path):
    """Per-arm stacks of the step logs, aligned on the step index."""
    arms = defaultdict(list)
    for f in sorted(log_dir.glob("scenario_*_*.csv")):
        arm = f.stem.rsplit("_", 1)[1]
        rows = read_csv(f)
        arms[arm].append({k: np.array([float(r[k]) for r in rows])
                          for k in ("t", "v", "d_rel", "throttle", "brake")})
    return arms


def _stat_rows(runs, key, stats):
    # episodes end early on collision, so later steps average fewer runs
    t = max((r["t"] for r in runs), key=len)
    out = []
    for i in range(len(t)):
        vals = np.array([r[key][i] for r in runs if i < len(r[key])])
        out.append([fmt(float(t[i]))] + [fmt(float(s(vals))) for s in stats])
    return out


def cmd_report(args, config):
    runs = [Path(r) for r in args.run]
    for r in runs:
        if not (r / "manifest.txt").is_file():
            raise InputError(f"{r} is not a run directory")
    run = open_run(args, config, {f"run{i}": r for i, r in enumerate(runs)})
    curves = []
    for r in runs:
        if (r / "training.csv").is_file():
            tag = variant_tag(read_kv_safe(r / "checkpoint" / "agent_config.txt").get("variant", "agent"))
            for row in read_csv(r / "training.csv"):
                curves.append([r.name, tag, row["episode"], row["cumulative_reward"],
                               row["moving_avg_10"], row["min_reward_to_date"]])
        if (r / "summary.csv").is_file():
            summary = {row["metric"]: row["value"] for row in read_csv(r / "summary.csv")}
            write_csv(run.add(f"summary_{r.name}.csv"), ("metric", "value"),
                      [(k, summary[k]) for k in REPORT_FIELDS])
            arms = _series_by_arm(r / "logs") if (r / "logs").is_dir() else {}
            for arm, logs in sorted(arms.items()):
                write_csv(run.add(f"speed_{r.name}_{arm}.csv"), ("t", "v_mean", "v_sd"),
                          _stat_rows(logs, "v", (np.mean, np.std)))
                write_csv(run.add(f"distance_{r.name}_{arm}.csv"), ("t", "d_min", "d_mean", "d_max"),
                          _stat_rows(logs, "d_rel", (np.min, np.mean, np.max)))
                thr = _stat_rows(logs, "throttle", (np.mean,))
                brk = _stat_rows(logs, "brake", (np.mean,))
                write_csv(run.add(f"controls_{r.name}_{arm}.csv"), ("t", "throttle_mean", "brake_mean"),
                          [a + b[1:] for a, b in zip(thr, brk)])
    if curves:
        write_csv(run.add("reward_curves.csv"),
                  ("run", "variant", "episode", "cumulative_reward", "moving_avg_10", "min_reward_to_date"),
                  curves)
    if not run.artifacts:
        raise InputError("no training or evaluation outputs found in the given runs")
    run.finish()
    say(f"wrote {len(run.artifacts)} report files to {run.path}")
    return EXIT_OK


def read_kv_safe(path) -> dict:
    try:
        return read_kv(path)
    except OSError:
        return {}


def cmd_show_config(args, config):
    sys.stdout.write(config.to_text())
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", help="run directory (created; must be empty)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")

    p = argparse.ArgumentParser(prog="drowsybrake", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def ecg_args(sp):
        sp.add_argument("--ecg", required=True, help="signal file, one sample per line")
        sp.add_argument("--events", required=True, help="event sample indices, one per line")
        sp.add_argument("--meta", help="metadata file (default: <ecg>.meta)")

    sp = sub.add_parser("benchmark-capsules", parents=[common], help="cross-validate every capsule configuration")
    ecg_args(sp)
    sp.add_argument("--configs-limit", type=int)
    sp.add_argument("--folds", type=int)
    sp.set_defaults(func=cmd_benchmark_capsules)

    sp = sub.add_parser("train-detector", parents=[common], help="train the drowsiness classifier")
    ecg_args(sp)
    sp.set_defaults(func=cmd_train_detector)

    sp = sub.add_parser("train-agent", parents=[common], help="train a braking agent")
    sp.add_argument("--variant", choices=[*VARIANTS, "dqn", "double", "dueling", "dddqn"])
    sp.add_argument("--episodes", type=int)
    sp.set_defaults(func=cmd_train_agent)

    sp = sub.add_parser("eval-paired", parents=[common], help="greedy paired drowsy/alert evaluation")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--episodes", type=int, help="number of paired scenarios")
    sp.set_defaults(func=cmd_eval_paired)

    sp = sub.add_parser("report", parents=[common], help="aggregate runs into plot-ready CSV series")
    sp.add_argument("--run", action="append", required=True, help="run directory (repeatable)")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("synth-ecg", parents=[common], help="write a synthetic annotated ECG recording")
    sp.add_argument("--duration-s", type=float, default=7200.0)
    sp.add_argument("--events-count", type=int, default=12)
    sp.set_defaults(func=cmd_synth_ecg)

    sp = sub.add_parser("show-config", parents=[common], help="print the effective configuration")
    sp.set_defaults(func=cmd_show_config)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = RunConfig.load(args.config, args.set)
        if getattr(args, "configs_limit", None) is not None and args.configs_limit < 1:
            raise ConfigError("--configs-limit must be positive")
        # validate every component section up front
        config.env_config(), config.agent_config(), config.detector_config()
        return args.func(args, config)
    except ConfigError as exc:
        say(f"config error: {exc}")
        return EXIT_CONFIG
    except DivergenceError as exc:
        say(f"numeric divergence: {exc}")
        return EXIT_DIVERGENCE
    except (InputError, EcgFormatError, CapsuleError, OSError) as exc:
        say(f"input error: {exc}")
        return EXIT_IO
    except ValueError as exc:
        say(f"input error: {exc}")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
