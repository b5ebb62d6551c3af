import csv
import os

import numpy as np
import pytest
import torch
from click.testing import CliRunner

from _2024_03._01_CLCMT_DRL.a_config import ConfigError, build_run_config, load_run_config
from _2024_03._01_CLCMT_DRL.e_clcmt_env import ClcmtEnv, TRAJECTORY_FIELDS
from _2024_03._01_CLCMT_DRL.f_clcmt_env_with_dummy_agent import NoOpAgent, StationaryEgoAgent
from _2024_03._01_CLCMT_DRL.l_train import METRICS_FIELDS, should_record_trajectory, train
from _2024_03._01_CLCMT_DRL.m_evaluate import (
    EXPORT_FIELDS, AlgorithmStats, compute_utilities, evaluate, evaluate_agent, evaluation_seed, export_trajectories,
    read_metrics, stage_ranges, stats_from_records, stats_from_run
)
from _2024_03._01_CLCMT_DRL.n_cli import cli

CONFIG_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")

SMALL_SCHEDULE = {
    "episodes": 3,
    "checkpoint_interval": 2,
    "eval_interval": 2,
    "validation_num_episodes": 1,
    "print_episode_interval": 1,
    "trajectory_interval": 1,
    "stage_window": 1,
    "moving_average_window": 2,
    "convergence_window": 3,
}

SMALL_ALGORITHMS = {
    "ppo": {"hidden_sizes": [16], "batch_size": 64, "minibatch_size": 32, "ppo_epochs": 2},
    "ddpg": {"hidden_sizes": [16], "batch_size": 16, "replay_buffer_size": 1000, "warmup_steps": 50},
    "td3": {"hidden_sizes": [16], "batch_size": 16, "replay_buffer_size": 1000, "warmup_steps": 50},
    "sac": {"hidden_sizes": [16], "batch_size": 16, "replay_buffer_size": 1000, "warmup_steps": 50},
}


def small_run_config(algo, seed=0, **schedule):
    return build_run_config(
        {"algorithm": {"name": algo} | SMALL_ALGORITHMS.get(algo, {}), "schedule": SMALL_SCHEDULE | schedule},
        seed=seed
    )


def read_export(path):
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


### UTILITIES ###

def test_utilities_reproduce_reference_table():
    report = compute_utilities({
        "TD3": AlgorithmStats(20.0, 0.134, 3.32, 0.15),
        "SAC": AlgorithmStats(30.0, 1.0, 6.08, 1.0),
        "DDPG": AlgorithmStats(20.07, 0.026, 10.0, 0.02),
        "PPO": AlgorithmStats(20.32, 0.0, 0.0, 0.0),
    })
    np.testing.assert_allclose(report.row("DDPG"), (0.993, 0.974, 0.0, 0.98), atol=1e-9)
    np.testing.assert_allclose(report.row("SAC"), (0.0, 0.0, 0.392, 0.0), atol=1e-9)
    for j in range(4):
        column = [report.row(name)[j] for name in report.utilities]
        assert max(column) == 1.0 and min(column) == 0.0


def test_utilities_min_max_arithmetic():
    report = compute_utilities({
        "a": AlgorithmStats(10.0, 0.0, 1.0, 1.0),
        "b": AlgorithmStats(20.0, 0.0, 1.0, 1.0),
        "c": AlgorithmStats(15.0, 0.0, 1.0, 1.0),
    })
    assert [report.row(name)[0] for name in "abc"] == [1.0, 0.0, 0.5]
    # equal columns are all 1
    assert all(report.row(name)[1:] == (1.0, 1.0, 1.0) for name in "abc")


def test_utilities_need_two_finite_algorithms():
    with pytest.raises(ValueError):
        compute_utilities({"ppo": AlgorithmStats(20.0, 0.0, 1.0, 1.0)})
    with pytest.raises(ValueError):
        compute_utilities({"a": AlgorithmStats(np.nan, 0.0, 1.0, 1.0), "b": AlgorithmStats(1.0, 0.0, 1.0, 1.0)})


def test_completion_time_counts_successful_episodes():
    rows = [
        {"termination": "Success", "steps": 20, "comfort": -1.0, "fuel": -0.1, "warnings": 0, "total": 5.0},
        {"termination": "Crash", "steps": 8, "comfort": -3.0, "fuel": -0.1, "warnings": 2, "total": -50.0},
        {"termination": "Success", "steps": 30, "comfort": -2.0, "fuel": -0.1, "warnings": 0, "total": 4.0},
    ]
    stats = stats_from_records(rows)
    assert stats.mean_completion_steps == 25.0
    assert stats.crash_rate == pytest.approx(1.0 / 3.0)
    assert stats.utility_inputs().comfort_cost == pytest.approx(2.0)

    timeouts = stats_from_records([rows[1] | {"termination": "Timeout", "steps": 200}])
    assert timeouts.mean_completion_steps == 200.0


### TRAINING ###

def test_noop_training_smoke(tmp_path):
    run_config = small_run_config("ppo", episodes=1)
    run_dir = train(run_config, run_dir=str(tmp_path / "run"), agent=NoOpAgent())

    rows = read_metrics(os.path.join(run_dir, "metrics.csv"))
    assert len(rows) == 1
    assert list(rows[0]) == METRICS_FIELDS
    components = sum(float(rows[0][k]) for k in ("safety", "warning", "comfort", "fuel", "lateral"))
    assert float(rows[0]["total"]) == pytest.approx(components, abs=1e-9)
    assert int(rows[0]["steps"]) <= 200

    assert os.path.isfile(os.path.join(run_dir, "config.yaml"))
    assert load_run_config(os.path.join(run_dir, "config.yaml")).to_dict() == run_config.to_dict()
    assert os.path.isfile(os.path.join(run_dir, "trajectories", "episode_00001.csv"))
    assert os.listdir(os.path.join(run_dir, "checkpoints")) == []
    with open(os.path.join(run_dir, "metrics.csv"), "rb") as f:
        assert b"\r\n" not in f.read()


@pytest.mark.parametrize("algo", ["ddpg", "td3", "sac", "ppo"])
def test_training_is_deterministic(tmp_path, algo):
    run_config = small_run_config(algo, seed=3)
    first = train(run_config, run_dir=str(tmp_path / "first"))
    second = train(run_config, run_dir=str(tmp_path / "second"))

    with open(os.path.join(first, "metrics.csv"), "rb") as a, open(os.path.join(second, "metrics.csv"), "rb") as b:
        assert a.read() == b.read()

    checkpoints = set(os.listdir(os.path.join(first, "checkpoints")))
    assert {
        "{0}_CLCMT_00002.pth".format(algo), "{0}_CLCMT_00003.pth".format(algo),
        "{0}_CLCMT_best.pth".format(algo), "{0}_latest.pth".format(algo)
    } <= checkpoints


def test_trajectory_recording_schedule():
    recorded = [n for n in range(1, 11) if should_record_trajectory(n, 10, 2, 4)]
    assert recorded == [1, 2, 4, 8, 9, 10]


### EVALUATION ###

@pytest.fixture(scope="module")
def ddpg_run(tmp_path_factory):
    run_dir = str(tmp_path_factory.mktemp("ddpg_run"))
    return train(small_run_config("ddpg", seed=1), run_dir=run_dir)


def test_evaluation_is_deterministic(ddpg_run):
    checkpoint = os.path.join(ddpg_run, "checkpoints", "ddpg_CLCMT_00003.pth")
    first = evaluate(checkpoint, episodes=2, seed=4)
    second = evaluate(checkpoint, episodes=2, seed=4)
    assert first == second
    assert first.episodes == 2
    assert sum(first.terminations.values()) == 2


def test_evaluation_seed_is_separate_from_training_streams(ddpg_run):
    assert evaluation_seed(1) not in (1, 2)
    assert evaluation_seed(1) == evaluation_seed(1)
    assert evaluation_seed(1) != evaluation_seed(2)
    assert 0 <= evaluation_seed(2 ** 64 - 1) < 2 ** 64

    checkpoint = os.path.join(ddpg_run, "checkpoints", "ddpg_CLCMT_00003.pth")
    assert evaluate(checkpoint, episodes=2) == evaluate(checkpoint, episodes=2, seed=evaluation_seed(1))


@pytest.mark.parametrize("key, value", [("algorithm", "sac"), ("hidden_sizes", [32])])
def test_evaluation_rejects_mismatched_checkpoint(ddpg_run, tmp_path, key, value):
    checkpoint = torch.load(os.path.join(ddpg_run, "checkpoints", "ddpg_latest.pth"))
    checkpoint[key] = value
    path = str(tmp_path / "tampered.pth")
    torch.save(checkpoint, path)
    with pytest.raises(ConfigError):
        evaluate(path, episodes=1)


def test_stationary_policy_always_times_out():
    run_config = build_run_config(seed=2)
    env = ClcmtEnv(env_config=run_config.environment, seed=run_config.seed)
    stats = evaluate_agent(env, StationaryEgoAgent(dt=0.1, speed_scale=env.speed_scale), episodes=3)
    assert stats.terminations == {"Timeout": 3}
    assert stats.crash_rate == 0.0
    assert stats.mean_completion_steps == 200.0


### TRAJECTORY EXPORT ###

def test_stage_ranges_partition():
    ranges = stage_ranges(1000, 200)
    assert ranges["early"] == range(1, 201)
    assert ranges["late"] == range(801, 1001)
    assert set(ranges["early"]).isdisjoint(ranges["late"])
    assert set(ranges["early"]) | set(ranges["mid"]) | set(ranges["late"]) == set(range(1, 1001))

    short = stage_ranges(3, 2)
    assert list(short["early"]) == [1, 2] and list(short["mid"]) == [] and list(short["late"]) == [3]


@pytest.fixture(scope="module")
def noop_run(tmp_path_factory):
    run_dir = str(tmp_path_factory.mktemp("noop_run"))
    run_config = small_run_config("ppo", episodes=5, stage_window=2, trajectory_interval=100)
    return train(run_config, run_dir=run_dir, agent=NoOpAgent())


def test_export_stages(noop_run):
    early = read_export(export_trajectories(noop_run, "early"))
    assert {int(r["episode"]) for r in early} == {1, 2}
    assert {r["stage"] for r in early} == {"early"}
    assert list(early[0]) == EXPORT_FIELDS

    late = read_export(export_trajectories(noop_run, "late"))
    assert {int(r["episode"]) for r in late} == {4, 5}

    best = read_export(export_trajectories(noop_run, "final-optimal"))
    totals = {int(r["episode"]): float(r["total"]) for r in read_metrics(os.path.join(noop_run, "metrics.csv"))}
    assert {int(r["episode"]) for r in best} == {max((4, 5), key=lambda e: totals[e])}


def test_export_of_unrecorded_range_has_header_only(noop_run, tmp_path):
    path = export_trajectories(noop_run, "mid", out_path=str(tmp_path / "mid.csv"))
    with open(path, "r", encoding="utf-8") as f:
        assert f.read() == ",".join(EXPORT_FIELDS) + "\n"


def test_export_reports_missing_episodes(noop_run, tmp_path):
    with pytest.warns(RuntimeWarning, match="episode 3"):
        path = export_trajectories(noop_run, "mid", out_path=str(tmp_path / "mid.csv"), episodes=[2, 3])
    assert {int(r["episode"]) for r in read_export(path)} == {2}


def test_trajectory_files_use_the_step_layout(noop_run):
    with open(os.path.join(noop_run, "trajectories", "episode_00001.csv"), "r", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    assert list(rows[0]) == TRAJECTORY_FIELDS
    assert {r["role"] for r in rows} == {"Ego", "Pre", "Lead", "Lag", "Sur1", "Sur2"}


### COMMAND LINE ###

def write_fake_run(root, algo, rows):
    run_dir = os.path.join(root, algo)
    os.makedirs(run_dir)
    build_run_config({"algorithm": {"name": algo}}).save(os.path.join(run_dir, "config.yaml"))
    with open(os.path.join(run_dir, "metrics.csv"), "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS, lineterminator="\n")
        writer.writeheader()
        for i, (termination, steps, comfort, fuel) in enumerate(rows, start=1):
            writer.writerow({
                "episode": i, "termination": termination, "steps": steps,
                "comfort": comfort, "fuel": fuel, "warnings": 0, "total": 0.0,
            })
    return run_dir


def test_cli_utilities_table(tmp_path):
    runs = [
        write_fake_run(str(tmp_path), "ddpg", [("Success", 20, -1.0, -0.01)] * 2),
        write_fake_run(str(tmp_path), "ppo", [("Success", 30, -2.0, -0.02)] * 2),
        write_fake_run(str(tmp_path), "sac", [("Crash", 40, -3.0, -0.03)] * 2),
        write_fake_run(str(tmp_path), "td3", [("Success", 25, -2.5, -0.025), ("Crash", 10, -2.5, -0.025)]),
    ]
    args = ["utilities"]
    for run in runs:
        args += ["--runs", run]
    result = CliRunner().invoke(cli, args)

    assert result.exit_code == 0, result.output
    lines = result.output.strip().splitlines()
    assert lines[0].split() == ["algorithm", "U_t", "U_s", "U_c", "U_e"]
    table = {line.split()[0]: line.split()[1:] for line in lines[1:]}
    assert set(table) == {"ddpg", "ppo", "sac", "td3"}
    assert table["ddpg"] == ["1.000"] * 4
    assert table["sac"] == ["0.000"] * 4
    assert table["td3"] == ["0.750", "0.500", "0.250", "0.250"]


def test_cli_utilities_accepts_several_runs_per_flag(tmp_path):
    runs = [
        write_fake_run(str(tmp_path), "ddpg", [("Success", 20, -1.0, -0.01)]),
        write_fake_run(str(tmp_path), "sac", [("Crash", 40, -3.0, -0.03)]),
    ]
    result = CliRunner().invoke(cli, ["utilities", "--window", "1", "--runs"] + runs)
    assert result.exit_code == 0, result.output
    table = {line.split()[0]: line.split()[1:] for line in result.output.strip().splitlines()[1:]}
    assert table == {"ddpg": ["1.000"] * 4, "sac": ["0.000"] * 4}


def test_cli_utilities_without_runs():
    result = CliRunner().invoke(cli, ["utilities"])
    assert result.exit_code == 2
    assert result.output.startswith("error: usage:")


def test_cli_utilities_rejects_duplicate_algorithms(tmp_path):
    run = write_fake_run(str(tmp_path), "ppo", [("Success", 30, -2.0, -0.02)])
    result = CliRunner().invoke(cli, ["utilities", "--runs", run, "--runs", run])
    assert result.exit_code == 2
    assert result.output.startswith("error: usage:")


def test_cli_train_with_missing_config(tmp_path):
    result = CliRunner().invoke(cli, ["train", "--config", str(tmp_path / "missing.yaml")])
    assert result.exit_code == 2
    assert result.output.startswith("error: config:")


def test_cli_rejects_unknown_flags():
    assert CliRunner().invoke(cli, ["train", "--bogus"]).exit_code == 2
    assert CliRunner().invoke(cli, ["export", "--run", ".", "--stage", "middle"]).exit_code == 2


def test_cli_gradcheck():
    result = CliRunner().invoke(cli, ["gradcheck"])
    assert result.exit_code == 0, result.output
    worst = float(result.output.strip().splitlines()[-1].split()[-1])
    assert worst < 1e-4
    assert "hidden_sizes [256, 256]" in result.output
    assert "hidden_sizes [64, 64]" in result.output


def test_cli_gradcheck_with_config():
    config = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs", "ppo_desk_scale.yaml")
    result = CliRunner().invoke(cli, ["gradcheck", "--config", config])
    assert result.exit_code == 0, result.output
    architectures = [line for line in result.output.splitlines() if line.startswith("hidden_sizes")]
    assert architectures == ["hidden_sizes [64, 64]"]
    assert float(result.output.strip().splitlines()[-1].split()[-1]) < 1e-4


def test_cli_eval_and_export(ddpg_run, tmp_path):
    checkpoint = os.path.join(ddpg_run, "checkpoints", "ddpg_latest.pth")
    result = CliRunner().invoke(cli, ["eval", "--checkpoint", checkpoint, "--episodes", "2", "--seed", "1"])
    assert result.exit_code == 0, result.output
    assert "crash_rate:" in result.output

    out = str(tmp_path / "early.csv")
    result = CliRunner().invoke(cli, ["export", "--run", ddpg_run, "--stage", "early", "--out", out])
    assert result.exit_code == 0, result.output
    assert {int(r["episode"]) for r in read_export(out)} == {1}


### DESK-SCALE RUN ###

@pytest.mark.slow
def test_ppo_desk_scale_converges(tmp_path):
    crash_rates, completion_steps = [], []
    for seed in (0, 1, 2):
        run_config = load_run_config(os.path.join(CONFIG_DIR, "ppo_desk_scale.yaml"), seed=seed)
        run_dir = train(run_config, run_dir=str(tmp_path / "ppo_desk_{0}".format(seed)))

        stats = stats_from_run(run_dir, 100)
        crash_rates.append(stats.crash_rate)
        completion_steps.append(stats.mean_completion_steps)

        final = read_export(export_trajectories(run_dir, "final-optimal"))
        assert final and abs(float(final[-1]["y"]) - 5.625) <= 0.1

    assert np.mean(crash_rates) <= 0.02
    assert 20.0 <= np.mean(completion_steps) <= 35.0
