import csv
import glob
import os
import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import yaml

from _2024_03._01_CLCMT_DRL.a_config import ConfigError, RunConfig, build_run_config
from _2024_03._01_CLCMT_DRL.e_clcmt_env import ClcmtEnv, TerminationType
from _2024_03._01_CLCMT_DRL.g_networks import load_checkpoint
from _2024_03._01_CLCMT_DRL.l_train import make_agent, run_episode

STAGES = ("early", "mid", "late", "final-optimal")
EXPORT_FIELDS = ["stage", "episode", "step", "x", "y"]
UTILITY_COLUMNS = ("U_t", "U_s", "U_c", "U_e")


@dataclass
class EvaluationStats:
    episodes: int
    mean_completion_steps: float
    crash_rate: float
    mean_comfort: float
    mean_fuel: float
    mean_warnings: float
    mean_total_reward: float
    terminations: Dict[str, int] = field(default_factory=dict)

    def utility_inputs(self) -> "AlgorithmStats":
        return AlgorithmStats(
            completion_time=self.mean_completion_steps,
            crash_rate=self.crash_rate,
            comfort_cost=abs(self.mean_comfort),
            fuel_cost=abs(self.mean_fuel),
        )


class AlgorithmStats(NamedTuple):
    # lower is better in every column
    completion_time: float
    crash_rate: float
    comfort_cost: float
    fuel_cost: float


def stats_from_records(records: Sequence[Mapping]) -> EvaluationStats:
    """Aggregate episode rows (EpisodeRecord._asdict() or metrics.csv rows)."""
    if not records:
        raise ValueError("no episodes to aggregate")

    terminations = Counter(str(r["termination"]) for r in records)
    steps = np.array([float(r["steps"]) for r in records])
    success = np.array([str(r["termination"]) == TerminationType.SUCCESS.value for r in records])
    crashes = np.array([str(r["termination"]) == TerminationType.CRASH.value for r in records])

    # completion time over successful episodes; all episodes when none succeeded
    completion_steps = steps[success] if success.any() else steps

    return EvaluationStats(
        episodes=len(records),
        mean_completion_steps=float(completion_steps.mean()),
        crash_rate=float(crashes.mean()),
        mean_comfort=float(np.mean([float(r["comfort"]) for r in records])),
        mean_fuel=float(np.mean([float(r["fuel"]) for r in records])),
        mean_warnings=float(np.mean([float(r["warnings"]) for r in records])),
        mean_total_reward=float(np.mean([float(r["total"]) for r in records])),
        terminations=dict(sorted(terminations.items())),
    )


def evaluate_agent(env: ClcmtEnv, agent, episodes: int) -> EvaluationStats:
    records = []
    for _ in range(episodes):
        record, _ = run_episode(env, agent, learn=False, exploration=False)
        records.append(record._asdict())
    return stats_from_records(records)


def evaluation_seed(train_seed: int) -> int:
    """Environment seed for evaluating a checkpoint; disjoint from the training and validation streams."""
    state = np.random.SeedSequence(train_seed, spawn_key=(1,)).generate_state(1, dtype=np.uint64)
    return int(state[0])


def evaluate(checkpoint_path: str, episodes: int, seed: Optional[int] = None) -> EvaluationStats:
    checkpoint = load_checkpoint(checkpoint_path)
    run_config = build_run_config(checkpoint["run_config"], seed=seed)
    env_seed = evaluation_seed(run_config.seed) if seed is None else run_config.seed

    if checkpoint["algorithm"] != run_config.algorithm_name:
        raise ConfigError("checkpoint algorithm {0} does not match its configuration ({1})".format(
            checkpoint["algorithm"], run_config.algorithm_name
        ))
    if list(checkpoint["hidden_sizes"]) != list(run_config.algorithm["hidden_sizes"]):
        raise ConfigError("checkpoint hidden sizes do not match its configuration")

    env = ClcmtEnv(env_config=run_config.environment, seed=env_seed)
    agent = make_agent(run_config, env)
    agent.load_networks(checkpoint["networks"])
    return evaluate_agent(env, agent, episodes)


def read_metrics(metrics_path: str) -> List[dict]:
    with open(metrics_path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def stats_from_run(run_dir: str, convergence_window: Optional[int] = None) -> EvaluationStats:
    run_config = load_run_dir_config(run_dir)
    window = convergence_window if convergence_window is not None else run_config.schedule["convergence_window"]
    rows = read_metrics(os.path.join(run_dir, "metrics.csv"))
    return stats_from_records(rows[-window:])


def load_run_dir_config(run_dir: str) -> RunConfig:
    path = os.path.join(run_dir, "config.yaml")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError as e:
        raise ConfigError("run directory has no config.yaml: {0}".format(run_dir)) from e
    return build_run_config(raw)


### UTILITIES ###

class UtilityReport(NamedTuple):
    utilities: Dict[str, Dict[str, float]]

    def row(self, algorithm: str) -> tuple:
        return tuple(self.utilities[algorithm][c] for c in UTILITY_COLUMNS)

    def format_table(self) -> str:
        lines = ["{0:<10}".format("algorithm") + "".join("{0:>8}".format(c) for c in UTILITY_COLUMNS)]
        for algorithm in self.utilities:
            lines.append("{0:<10}".format(algorithm) + "".join("{0:>8.3f}".format(u) for u in self.row(algorithm)))
        return "\n".join(lines)


def _min_max_utilities(values: Sequence[float]) -> List[float]:
    low, high = min(values), max(values)
    if high == low:
        return [1.0] * len(values)
    return [float(np.clip((high - v) / (high - low), 0.0, 1.0)) for v in values]


def compute_utilities(per_algorithm_stats: Mapping[str, AlgorithmStats]) -> UtilityReport:
    if len(per_algorithm_stats) < 2:
        raise ValueError("utilities need at least 2 algorithms, got {0}".format(len(per_algorithm_stats)))

    names = list(per_algorithm_stats)
    columns = list(zip(*(per_algorithm_stats[name] for name in names)))
    for column in columns:
        if not all(np.isfinite(column)):
            raise ValueError("raw statistics must be finite")

    normalized = [_min_max_utilities(column) for column in columns]
    return UtilityReport(utilities={
        name: {c: normalized[j][i] for j, c in enumerate(UTILITY_COLUMNS)} for i, name in enumerate(names)
    })


### TRAJECTORY EXPORT ###

def stage_ranges(max_num_episodes: int, stage_window: int) -> Dict[str, range]:
    early_end = min(stage_window, max_num_episodes)
    late_start = max(max_num_episodes - stage_window, early_end) + 1
    return {
        "early": range(1, early_end + 1),
        "mid": range(early_end + 1, late_start),
        "late": range(late_start, max_num_episodes + 1),
    }


def _recorded_episodes(trajectory_dir: str) -> Dict[int, str]:
    recorded = {}
    for path in glob.glob(os.path.join(trajectory_dir, "episode_*.csv")):
        match = re.search(r"episode_(\d+)\.csv$", path)
        if match:
            recorded[int(match.group(1))] = path
    return recorded


def _best_episode(run_dir: str, episodes: Iterable[int], recorded: Mapping[int, str]) -> List[int]:
    totals = {int(r["episode"]): float(r["total"]) for r in read_metrics(os.path.join(run_dir, "metrics.csv"))}
    candidates = [e for e in episodes if e in recorded and e in totals]
    if not candidates:
        return []
    return [max(candidates, key=lambda e: (totals[e], -e))]


def export_trajectories(
        run_dir: str, stage: str, out_path: Optional[str] = None, episodes: Optional[Iterable[int]] = None
) -> str:
    """Write the ego (x, y) polylines of one stage to CSV; unrecorded episodes are reported and skipped."""
    if stage not in STAGES:
        raise ValueError("stage must be one of {0}".format(", ".join(STAGES)))

    run_config = load_run_dir_config(run_dir)
    schedule = run_config.schedule
    recorded = _recorded_episodes(os.path.join(run_dir, "trajectories"))
    ranges = stage_ranges(schedule["episodes"], schedule["stage_window"])

    if episodes is None:
        if stage == "final-optimal":
            episodes = _best_episode(run_dir, ranges["late"], recorded)
        else:
            episodes = [e for e in ranges[stage] if e in recorded] if stage == "mid" else list(ranges[stage])

    out_path = out_path if out_path is not None else os.path.join(run_dir, "trajectories_{0}.csv".format(stage))
    with open(out_path, "w", encoding="utf-8", newline="") as out:
        writer = csv.DictWriter(out, fieldnames=EXPORT_FIELDS, lineterminator="\n")
        writer.writeheader()
        for episode in episodes:
            if episode not in recorded:
                warnings.warn("episode {0} has no recorded trajectory".format(episode), RuntimeWarning)
                continue
            with open(recorded[episode], "r", encoding="utf-8", newline="") as f:
                for row in csv.DictReader(f):
                    if row["role"] == "Ego":
                        writer.writerow({
                            "stage": stage, "episode": episode, "step": row["step"], "x": row["x"], "y": row["y"]
                        })
    return out_path
