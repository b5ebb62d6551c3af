import csv
import os
import time
from collections import deque
from datetime import datetime
from shutil import copyfile
from typing import List, NamedTuple, Optional

import numpy as np

import wandb

from _2024_03._01_CLCMT_DRL.a_config import ENV_NAME, RunConfig, build_run_config, print_config
from _2024_03._01_CLCMT_DRL.e_clcmt_env import ClcmtEnv, TerminationType
from _2024_03._01_CLCMT_DRL.g_networks import NonFiniteError, save_checkpoint
from _2024_03._01_CLCMT_DRL.i_ddpg_and_td3 import DDPG, TD3
from _2024_03._01_CLCMT_DRL.j_sac import SAC
from _2024_03._01_CLCMT_DRL.k_ppo import PPO

AGENT_CLASSES = {"ddpg": DDPG, "td3": TD3, "sac": SAC, "ppo": PPO}

METRICS_FIELDS = [
    "episode", "total", "safety", "warning", "comfort", "fuel", "lateral", "move_on", "lane_change",
    "steps", "termination", "warnings", "crash", "moving_avg", "critic_loss", "actor_loss", "coeff_hash"
]


class EpisodeRecord(NamedTuple):
    episode: int
    total: float
    safety: float
    warning: float
    comfort: float
    fuel: float
    lateral: float
    move_on: float
    lane_change: float
    steps: int
    termination: str
    warnings: int
    crash: bool
    critic_loss: float
    actor_loss: float


def make_agent(run_config: RunConfig, env: ClcmtEnv):
    agent_class = AGENT_CLASSES[run_config.algorithm_name]
    return agent_class(run_config.algorithm, env.action_low, env.action_high, seed=run_config.seed)


def should_record_trajectory(n_episode: int, max_num_episodes: int, stage_window: int, interval: int) -> bool:
    return (
        n_episode <= stage_window
        or n_episode > max_num_episodes - stage_window
        or n_episode % interval == 0
    )


def run_episode(env: ClcmtEnv, agent, learn: bool, exploration: bool, options: Optional[dict] = None):
    """Play one episode; returns its EpisodeRecord and the loss reports of the updates it triggered."""
    observation, info = env.reset(options=options)
    if hasattr(agent, "reset"):
        agent.reset()

    components = np.zeros(5, dtype=np.float64)
    move_on = 0.0
    n_warnings = 0
    loss_reports = []
    done = False
    beta = env.coefficients.beta

    while not done:
        action_mask = info["ACTION_MASK"]
        padded_action = agent.get_action(observation, action_mask, exploration=exploration)

        next_observation, reward, terminated, truncated, info = env.step(env.compact_action(padded_action))

        breakdown = info["REWARD_BREAKDOWN"]
        components += np.array(breakdown)
        if info["TERMINATION"] is not TerminationType.CRASH:
            move_on += breakdown.safety - beta
        n_warnings += info["WARNINGS"]

        if learn:
            report = agent.observe_step(
                observation, action_mask, padded_action, reward, next_observation, terminated, truncated
            )
            if report is not None:
                loss_reports.append(report)

        observation = next_observation
        done = terminated or truncated

    termination = info["TERMINATION"]
    record = EpisodeRecord(
        episode=env.episode_index,
        total=float(components.sum()),
        safety=components[0], warning=components[1], comfort=components[2],
        fuel=components[3], lateral=components[4],
        move_on=move_on,
        lane_change=components[4],
        steps=env.clock.step_index,
        termination=termination.value,
        warnings=n_warnings,
        crash=termination is TerminationType.CRASH,
        critic_loss=float(np.mean([r["critic_loss"] for r in loss_reports])) if loss_reports else 0.0,
        actor_loss=float(np.mean([r["actor_loss"] for r in loss_reports])) if loss_reports else 0.0,
    )
    return record, loss_reports


class CheckpointSaver:
    """Numbered checkpoints plus a <algo>_latest.pth copy; tracks the best validation reward."""

    def __init__(self, model_dir: str, algorithm: str, run_config: RunConfig):
        self.model_dir = model_dir
        self.algorithm = algorithm
        self.run_config = run_config
        self.max_validation_episode_reward = -np.inf
        os.makedirs(model_dir, exist_ok=True)

    def model_save(self, agent, n_episode: int, tag: Optional[str] = None) -> str:
        filename = "{0}_{1}_{2}.pth".format(self.algorithm, ENV_NAME, tag or "{0:05d}".format(n_episode))
        filename = os.path.join(self.model_dir, filename)
        save_checkpoint(
            filename, self.algorithm, agent.networks, agent.optimizers, self.run_config.to_dict(),
            extra={"episode": n_episode}
        )
        print("*** MODEL SAVED TO {0}".format(filename))

        latest_file_name = os.path.join(self.model_dir, "{0}_latest.pth".format(self.algorithm))
        copyfile(src=filename, dst=latest_file_name)
        print("*** MODEL UPDATED TO {0}".format(latest_file_name))
        return filename

    def check(self, validation_episode_reward_avg: float, agent, n_episode: int) -> bool:
        if validation_episode_reward_avg >= self.max_validation_episode_reward:
            print("[VALIDATION] validation_episode_reward {0:.5f} is increased to {1:.5f}".format(
                self.max_validation_episode_reward, validation_episode_reward_avg
            ))
            self.max_validation_episode_reward = validation_episode_reward_avg
            self.model_save(agent, n_episode, tag="best")
            return True
        return False


class Trainer:
    def __init__(self, run_config: RunConfig, run_dir: str, agent=None, use_wandb: bool = False):
        self.run_config = run_config
        self.run_dir = run_dir
        self.use_wandb = use_wandb

        self.env = ClcmtEnv(env_config=run_config.environment, seed=run_config.seed)
        self.validation_env = ClcmtEnv(env_config=run_config.environment, seed=(run_config.seed + 1) % 2 ** 64)

        self.agent = agent if agent is not None else make_agent(run_config, self.env)
        self.learn = hasattr(self.agent, "observe_step")
        self.algorithm = getattr(self.agent, "name", run_config.algorithm_name)

        schedule = run_config.schedule
        self.max_num_episodes = schedule["episodes"]
        self.checkpoint_interval = schedule["checkpoint_interval"]
        self.eval_interval = schedule["eval_interval"]
        self.validation_num_episodes = schedule["validation_num_episodes"]
        self.print_episode_interval = schedule["print_episode_interval"]
        self.trajectory_interval = schedule["trajectory_interval"]
        self.stage_window = schedule["stage_window"]
        self.moving_average_window = schedule["moving_average_window"]

        self.coeff_hash = run_config.coefficient_hash()
        self.current_time = datetime.now().astimezone().strftime('%Y-%m-%d_%H-%M-%S')

        self.trajectory_dir = os.path.join(run_dir, "trajectories")
        self.checkpoint_dir = os.path.join(run_dir, "checkpoints")
        self.metrics_path = os.path.join(run_dir, "metrics.csv")
        os.makedirs(self.trajectory_dir, exist_ok=True)
        os.makedirs(self.checkpoint_dir, exist_ok=True)

        self.checkpoint_saver = CheckpointSaver(self.checkpoint_dir, self.algorithm, run_config)

        self.time_steps = 0
        self.records: List[EpisodeRecord] = []

        if self.use_wandb:
            self.wandb = wandb.init(
                project="{0}_{1}_{2}".format(
                    ENV_NAME, self.algorithm.upper(), run_config.environment["episode"]["composition"]
                ),
                name=self.current_time,
                config=run_config.to_dict()
            )

    def train_loop(self) -> List[EpisodeRecord]:
        total_train_start_time = time.time()
        validation_episode_reward_avg = 0.0
        recent_totals = deque(maxlen=self.moving_average_window)

        with open(self.metrics_path, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=METRICS_FIELDS, lineterminator="\n")
            writer.writeheader()

            for n_episode in range(1, self.max_num_episodes + 1):
                record_trajectory = should_record_trajectory(
                    n_episode, self.max_num_episodes, self.stage_window, self.trajectory_interval
                )
                self.env.record_trajectory = record_trajectory

                try:
                    record, _ = run_episode(self.env, self.agent, learn=self.learn, exploration=True)
                except NonFiniteError as e:
                    print("[ERROR] non-finite training signal at episode {0}: {1}".format(n_episode, e))
                    if self.learn:
                        self.checkpoint_saver.model_save(self.agent, n_episode, tag="diagnostic")
                    raise

                self.time_steps += record.steps
                self.records.append(record)
                recent_totals.append(record.total)
                moving_avg = float(np.mean(recent_totals))

                row = record._asdict() | {"moving_avg": moving_avg, "coeff_hash": self.coeff_hash}
                row["crash"] = int(record.crash)
                writer.writerow(row)
                f.flush()

                if record_trajectory:
                    self.env.write_trajectory(
                        os.path.join(self.trajectory_dir, "episode_{0:05d}.csv".format(n_episode))
                    )

                total_training_time = time.time() - total_train_start_time
                total_training_time_str = time.strftime('%H:%M:%S', time.gmtime(total_training_time))

                if n_episode % self.print_episode_interval == 0:
                    print(
                        "[Episode {0:4,}/{1:5,}, Time Steps {2:7,}]".format(
                            n_episode, self.max_num_episodes, self.time_steps
                        ),
                        "Episode Reward: {:>8.2f},".format(record.total),
                        "Moving Avg.: {:>8.2f},".format(moving_avg),
                        "Steps: {:>3},".format(record.steps),
                        "Termination: {:>11},".format(record.termination),
                        "Critic Loss: {:.4f},".format(record.critic_loss),
                        "Actor Loss: {:.4f},".format(record.actor_loss),
                        "Elapsed Time: {}".format(total_training_time_str)
                    )

                if self.learn and n_episode % self.eval_interval == 0:
                    validation_episode_reward_lst, validation_episode_reward_avg = self.validate()
                    print("[Validation Episode Reward: {0}] Average: {1:.3f}".format(
                        validation_episode_reward_lst, validation_episode_reward_avg
                    ))
                    self.checkpoint_saver.check(validation_episode_reward_avg, self.agent, n_episode)

                if self.learn and n_episode % self.checkpoint_interval == 0:
                    self.checkpoint_saver.model_save(self.agent, n_episode)

                if self.use_wandb:
                    self.wandb.log({
                        "[VALIDATION] Mean Episode Reward ({0} Episodes)".format(self.validation_num_episodes):
                            validation_episode_reward_avg,
                        "[TRAIN] Episode Reward": record.total,
                        "[TRAIN] Moving Average Reward": moving_avg,
                        "[TRAIN] Move-On Reward": record.move_on,
                        "[TRAIN] Lane-Changing Reward": record.lane_change,
                        "[TRAIN] Episode Steps": record.steps,
                        "[TRAIN] Crash": int(record.crash),
                        "[TRAIN] Critic Loss": record.critic_loss,
                        "[TRAIN] Actor Loss": record.actor_loss,
                        "Training Episode": n_episode,
                        "Time Steps": self.time_steps,
                    })

        if self.learn and self.max_num_episodes % self.checkpoint_interval != 0:
            self.checkpoint_saver.model_save(self.agent, self.max_num_episodes)

        total_training_time = time.time() - total_train_start_time
        total_training_time_str = time.strftime('%H:%M:%S', time.gmtime(total_training_time))
        print("Total Training End : {}".format(total_training_time_str))

        if self.use_wandb:
            self.wandb.finish()

        return self.records

    def validate(self):
        episode_reward_lst = np.zeros(shape=(self.validation_num_episodes,), dtype=float)
        recording = self.validation_env.record_trajectory
        self.validation_env.record_trajectory = False

        for i in range(self.validation_num_episodes):
            record, _ = run_episode(self.validation_env, self.agent, learn=False, exploration=False)
            episode_reward_lst[i] = record.total

        self.validation_env.record_trajectory = recording
        return episode_reward_lst, np.average(episode_reward_lst)


def default_run_dir(run_config: RunConfig, root: str = "runs") -> str:
    current_time = datetime.now().astimezone().strftime('%Y-%m-%d_%H-%M-%S')
    return os.path.join(root, "{0}_{1}_seed{2}_{3}".format(
        run_config.algorithm_name, ENV_NAME, run_config.seed, current_time
    ))


def train(
        run_config: RunConfig, run_dir: Optional[str] = None, agent=None, use_wandb: bool = False,
        verbose: bool = False
) -> str:
    run_dir = run_dir if run_dir is not None else default_run_dir(run_config)
    os.makedirs(run_dir, exist_ok=True)
    run_config.save(os.path.join(run_dir, "config.yaml"))

    if verbose:
        print_config(run_config.to_dict())
        print("*" * 100)

    trainer = Trainer(run_config=run_config, run_dir=run_dir, agent=agent, use_wandb=use_wandb)
    trainer.train_loop()
    return run_dir


def main():
    run_config = build_run_config(algo="ppo")
    train(run_config, verbose=True)


if __name__ == '__main__':
    main()
