import re
import shutil
import subprocess

import pytest

from drowsybrake.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, REPORT_FIELDS, content_hash, git_blob_hash, main
from drowsybrake.fileio import read_csv, read_kv

FAST_DETECTOR = ["--set", "detector.max_epochs=15"]
TINY_AGENT = ["--set", "agent.warmup_threshold=200", "--set", "agent.buffer_capacity=2000",
              "--set", "agent.batch_size=16", "--set", "agent.guided_episodes=1"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def ecg(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth") / "run"
    assert run("synth-ecg", "--out", out, "--seed", 3) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def agent_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("agent") / "run"
    assert run("train-agent", "--variant", "dddqn", "--episodes", 3, "--seed", 7, "--out", out,
               *TINY_AGENT) == EXIT_OK
    return out


@pytest.fixture(scope="module")
def eval_run(tmp_path_factory, agent_run):
    out = tmp_path_factory.mktemp("eval") / "run"
    assert run("eval-paired", "--checkpoint", agent_run / "checkpoint", "--episodes", 3,
               "--out", out) == EXIT_OK
    return out


def _ecg_args(ecg):
    return ["--ecg", ecg / "ecg.txt", "--events", ecg / "events.txt"]


# -- hashing and manifests ------------------------------------------------------

@pytest.mark.skipif(shutil.which("git") is None, reason="git not installed")
@pytest.mark.parametrize("data", [b"", b"hello\n", bytes(range(256)) * 3])
def test_git_blob_hash_matches_git(data):
    ref = subprocess.run(["git", "hash-object", "--stdin"], input=data, capture_output=True,
                         check=True).stdout.decode().strip()
    assert git_blob_hash(data) == ref


def test_content_hash_of_directory(tmp_path):
    (tmp_path / "a").write_text("x")
    h1 = content_hash(tmp_path)
    (tmp_path / "a").write_text("y")
    assert content_hash(tmp_path) != h1


def test_manifest_complete(ecg):
    m = read_kv(ecg / "manifest.txt")
    assert m["command"] == "synth-ecg" and m["status"] == "complete" and m["seed"] == "3"
    assert {"ecg.txt", "events.txt", "ecg.txt.meta"} <= {v for k, v in m.items() if k.startswith("artifact.")}
    assert "config.agent.gamma" in m


# -- benchmark and detector ---------------------------------------------------------

def test_benchmark_limit_and_labels(ecg, tmp_path):
    out = tmp_path / "bench"
    assert run("benchmark-capsules", *_ecg_args(ecg), "--configs-limit", 3, "--folds", 3,
               "--out", out, *FAST_DETECTOR) == EXIT_OK
    rows = read_csv(out / "benchmark.csv")
    labels = {r["label"] for r in rows}
    assert len(labels) == 3
    assert all(re.fullmatch(r"C\d+_N\d+_M\d{2}", lab) for lab in labels)
    assert sum(r["fold"] == "mean" for r in rows) == 3
    assert len(rows) == 3 * 4
    means = [float(r["accuracy"]) for r in rows if r["fold"] == "mean"]
    assert means == sorted(means, reverse=True)
    # inputs are not touched
    assert read_kv(ecg / "manifest.txt")["status"] == "complete"


def test_train_detector_outputs(ecg, tmp_path):
    out = tmp_path / "det"
    assert run("train-detector", *_ecg_args(ecg), "--out", out, *FAST_DETECTOR) == EXIT_OK
    for f in ("cv_report.csv", "cv_confusion.csv", "model/weights.txt", "model/standardizer.txt",
              "dataset_C6400_N6_M72.txt", "manifest.txt"):
        assert (out / f).is_file(), f
    report = {r["fold"]: r for r in read_csv(out / "cv_report.csv")}
    assert float(report["mean"]["accuracy"]) >= 0.9


def test_train_detector_deterministic(ecg, tmp_path):
    for name in ("a", "b"):
        assert run("train-detector", *_ecg_args(ecg), "--out", tmp_path / name, "--seed", 1,
                   *FAST_DETECTOR) == EXIT_OK
    for f in ("cv_report.csv", "cv_confusion.csv", "model/weights.txt", "manifest.txt"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


# -- agent ----------------------------------------------------------------------------

def test_train_agent_rows(agent_run):
    rows = read_csv(agent_run / "training.csv")
    assert len(rows) == 3
    assert list(rows[0]) == ["episode", "cumulative_reward", "moving_avg_10", "min_reward_to_date", "epsilon"]
    assert (agent_run / "checkpoint" / "policy.txt").is_file()


def test_train_agent_deterministic(agent_run, tmp_path):
    out = tmp_path / "again"
    assert run("train-agent", "--variant", "dddqn", "--episodes", 3, "--seed", 7, "--out", out,
               *TINY_AGENT) == EXIT_OK
    assert (out / "training.csv").read_bytes() == (agent_run / "training.csv").read_bytes()
    assert (out / "checkpoint" / "policy.txt").read_bytes() == \
        (agent_run / "checkpoint" / "policy.txt").read_bytes()


def test_eval_paired_logs(eval_run):
    logs = sorted((eval_run / "logs").iterdir())
    assert len(logs) == 6
    assert len(read_csv(eval_run / "episodes.csv")) == 6
    summary = {r["metric"] for r in read_csv(eval_run / "summary.csv")}
    assert set(REPORT_FIELDS) <= summary


def test_report_fields(eval_run, agent_run, tmp_path):
    out = tmp_path / "rep"
    assert run("report", "--run", eval_run, "--run", agent_run, "--out", out) == EXIT_OK
    s = read_csv(out / f"summary_{eval_run.name}.csv")
    assert [r["metric"] for r in s] == list(REPORT_FIELDS)
    for arm in ("drowsy", "alert"):
        assert list(read_csv(out / f"speed_{eval_run.name}_{arm}.csv")[0]) == ["t", "v_mean", "v_sd"]
        assert list(read_csv(out / f"distance_{eval_run.name}_{arm}.csv")[0]) == ["t", "d_min", "d_mean", "d_max"]
        assert (out / f"controls_{eval_run.name}_{arm}.csv").is_file()
    assert len(read_csv(out / "reward_curves.csv")) == 3


@pytest.mark.slow
def test_train_agent_500_rows(tmp_path):
    # no learning updates (warm-up never reached) keeps this cheap; the row contract is what matters
    out = tmp_path / "r"
    assert run("train-agent", "--variant", "dddqn", "--episodes", 500, "--seed", 7, "--out", out,
               "--set", "agent.warmup_threshold=1000000000", "--set", "agent.buffer_capacity=1000") == EXIT_OK
    assert len(read_csv(out / "training.csv")) == 500


@pytest.mark.slow
def test_eval_200_pairs_gives_400_logs(agent_run, tmp_path):
    out = tmp_path / "e"
    assert run("eval-paired", "--checkpoint", agent_run / "checkpoint", "--episodes", 200,
               "--out", out) == EXIT_OK
    assert len(list((out / "logs").glob("scenario_*.csv"))) == 400


# -- exit codes ------------------------------------------------------------------------

def test_non_empty_output_directory(tmp_path):
    (tmp_path / "x").write_text("keep")
    assert run("synth-ecg", "--out", tmp_path, "--duration-s", 600, "--events-count", 1) == EXIT_IO
    assert (tmp_path / "x").read_text() == "keep"


def test_missing_checkpoint(tmp_path):
    assert run("eval-paired", "--checkpoint", tmp_path / "nope", "--out", tmp_path / "o") == EXIT_IO


def test_missing_ecg(tmp_path):
    assert run("train-detector", "--ecg", tmp_path / "a", "--events", tmp_path / "b",
               "--out", tmp_path / "o") == EXIT_IO


def test_unknown_config_key(tmp_path):
    assert run("show-config", "--set", "agent.nope=1") == EXIT_CONFIG


def test_invalid_config_value(tmp_path):
    assert run("show-config", "--set", "agent.gamma=2") == EXIT_CONFIG
    assert run("show-config", "--set", "agent.gamma=abc") == EXIT_CONFIG
    cfg = tmp_path / "c.txt"
    cfg.write_text("# comment\nenv.delay_s=0.33\n")
    assert run("show-config", "--config", cfg) == EXIT_CONFIG


def test_config_file_and_snapshot_roundtrip(tmp_path, capsys):
    assert run("show-config", "--set", "agent.gamma=0.5") == EXIT_OK
    text = capsys.readouterr().out
    assert "agent.gamma=0.5\n" in text
    cfg = tmp_path / "c.txt"
    cfg.write_text(text)
    assert run("show-config", "--config", cfg) == EXIT_OK
    assert capsys.readouterr().out == text
