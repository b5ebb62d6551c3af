import glob
import os
import sys
from typing import List, Sequence

import click

from _2024_03._01_CLCMT_DRL.a_config import ALGORITHM_NAMES, ConfigError, algorithm_configs, load_run_config
from _2024_03._01_CLCMT_DRL.b_world import StructuralError, UsageError
from _2024_03._01_CLCMT_DRL.g_networks import NonFiniteError, gradcheck_networks
from _2024_03._01_CLCMT_DRL.l_train import train
from _2024_03._01_CLCMT_DRL.m_evaluate import (
    STAGES, compute_utilities, evaluate, export_trajectories, load_run_dir_config, stats_from_run
)

GRADCHECK_TOLERANCE = 1e-4
SHIPPED_CONFIGS_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "configs")


def _fail(kind: str, message: str, exit_code: int):
    click.echo("error: {0}: {1}".format(kind, message), err=True)
    sys.exit(exit_code)


def _run_guarded(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except ConfigError as e:
        _fail("config", str(e), 2)
    except (StructuralError, UsageError) as e:
        _fail("usage", str(e), 2)
    except NonFiniteError as e:
        _fail("numeric", str(e), 1)
    except (OSError, ValueError, RuntimeError) as e:
        _fail("runtime", str(e), 1)


@click.group()
def cli():
    """Cooperative lane-changing DRL: training, evaluation and reporting."""


@cli.command("train")
@click.option("--config", "config_path", required=True, help="Run configuration YAML.")
@click.option("--seed", type=int, default=None)
@click.option("--algo", type=click.Choice(ALGORITHM_NAMES), default=None)
@click.option("--episodes", type=click.IntRange(min=1), default=None)
@click.option("--run-dir", default=None, help="Output directory (default: runs/<algo>_CLCMT_seed<N>_<time>).")
@click.option("--wandb/--no-wandb", "use_wandb", default=False)
def train_command(config_path, seed, algo, episodes, run_dir, use_wandb):
    run_config = _run_guarded(load_run_config, config_path, seed=seed, algo=algo, episodes=episodes)
    run_dir = _run_guarded(train, run_config, run_dir=run_dir, use_wandb=use_wandb, verbose=True)
    click.echo("run directory: {0}".format(run_dir))


@cli.command("eval")
@click.option("--checkpoint", required=True)
@click.option("--episodes", type=click.IntRange(min=1), required=True)
@click.option("--seed", type=int, default=None, help="Environment seed (default: derived from the training seed).")
def eval_command(checkpoint, episodes, seed):
    stats = _run_guarded(evaluate, checkpoint, episodes, seed=seed)
    click.echo("episodes: {0}".format(stats.episodes))
    click.echo("mean_completion_steps: {0:.3f}".format(stats.mean_completion_steps))
    click.echo("crash_rate: {0:.4f}".format(stats.crash_rate))
    click.echo("mean_comfort_reward: {0:.4f}".format(stats.mean_comfort))
    click.echo("mean_fuel_reward: {0:.6f}".format(stats.mean_fuel))
    click.echo("mean_warnings: {0:.3f}".format(stats.mean_warnings))
    click.echo("terminations: {0}".format(stats.terminations))


@cli.command("utilities")
@click.option("--runs", "run_dirs", multiple=True, help="Completed run directory (repeatable).")
@click.option("--window", type=click.IntRange(min=1), default=None, help="Episodes counted from the end of each run.")
@click.argument("extra_run_dirs", nargs=-1)
def utilities_command(run_dirs, window, extra_run_dirs):
    """Utility table over run directories given with --runs or as trailing arguments (--runs a b c)."""
    run_dirs = list(run_dirs) + list(extra_run_dirs)
    if not run_dirs:
        _fail("usage", "no run directories given", 2)

    per_algorithm = {}
    for run_dir in run_dirs:
        name = _run_guarded(load_run_dir_config, run_dir).algorithm_name
        if name in per_algorithm:
            _fail("usage", "algorithm {0} appears in more than one run".format(name), 2)
        per_algorithm[name] = _run_guarded(stats_from_run, run_dir, window).utility_inputs()

    report = _run_guarded(compute_utilities, per_algorithm)
    click.echo(report.format_table())


@cli.command("export")
@click.option("--run", "run_dir", required=True)
@click.option("--stage", type=click.Choice(STAGES), required=True)
@click.option("--out", "out_path", default=None)
def export_command(run_dir, stage, out_path):
    path = _run_guarded(export_trajectories, run_dir, stage, out_path=out_path)
    click.echo("exported: {0}".format(path))


def _architectures(config_paths: Sequence[str]) -> List[List[int]]:
    candidates = []
    if not config_paths:
        candidates = [algorithm_configs[name]["hidden_sizes"] for name in ALGORITHM_NAMES]
        config_paths = sorted(glob.glob(os.path.join(SHIPPED_CONFIGS_DIR, "*.yaml")))
    candidates += [_run_guarded(load_run_config, path).algorithm["hidden_sizes"] for path in config_paths]

    architectures = []
    for hidden_sizes in map(list, candidates):
        if hidden_sizes not in architectures:
            architectures.append(hidden_sizes)
    return architectures


@cli.command("gradcheck")
@click.option("--seed", type=int, default=0)
@click.option(
    "--config", "config_paths", multiple=True,
    help="Run configuration whose network widths are checked (repeatable; default: built-in and shipped configs)."
)
def gradcheck_command(seed, config_paths):
    worst = 0.0
    for hidden_sizes in _architectures(config_paths):
        click.echo("hidden_sizes {0}".format(hidden_sizes))
        errors = _run_guarded(gradcheck_networks, hidden_sizes, seed=seed)
        for name, error in errors.items():
            click.echo("{0:>20}: max rel-err {1:.3e}".format(name, error))
        worst = max(worst, max(errors.values()))
    click.echo("max rel-err: {0:.3e}".format(worst))
    if worst >= GRADCHECK_TOLERANCE:
        _fail("gradcheck", "max relative error {0:.3e} >= {1:.0e}".format(worst, GRADCHECK_TOLERANCE), 1)


if __name__ == "__main__":
    cli()
