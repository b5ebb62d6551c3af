import numpy as np

from _2024_03._01_CLCMT_DRL.a_config import env_config
from _2024_03._01_CLCMT_DRL.b_world import MAX_ACTION_DIM
from _2024_03._01_CLCMT_DRL.e_clcmt_env import ClcmtEnv


class NoOpAgent:
    name = "noop"

    def get_action(self, observation, action_mask, exploration=False):
        # observation is not used
        return np.zeros(MAX_ACTION_DIM, dtype=np.float64)


class ScriptedLaneChangeAgent:
    """Bang-bang lateral profile: +a for n steps, -a for n steps, then zero.

    With a = lane_width / (n * dt)^2 the ego ends exactly one lane over with zero lateral speed.
    """
    name = "scripted"

    def __init__(self, lateral_acceleration, n_steps, longitudinal_acceleration=0.0):
        self.lateral_acceleration = lateral_acceleration
        self.n_steps = n_steps
        self.longitudinal_acceleration = longitudinal_acceleration
        self.episode_step = 0

    @classmethod
    def for_lane_change(cls, lane_width, n_steps, dt, longitudinal_acceleration=0.0, overshoot=0.0):
        a = (lane_width + overshoot) / (n_steps * dt) ** 2
        return cls(a, n_steps, longitudinal_acceleration)

    def reset(self):
        self.episode_step = 0

    def get_action(self, observation, action_mask, exploration=False):
        if self.episode_step < self.n_steps:
            ay = self.lateral_acceleration
        elif self.episode_step < 2 * self.n_steps:
            ay = -self.lateral_acceleration
        else:
            ay = 0.0
        self.episode_step += 1
        return np.array([self.longitudinal_acceleration, ay, 0.0, 0.0], dtype=np.float64)


class StationaryEgoAgent:
    """Brakes the ego to a standstill and keeps it in its lane."""
    name = "stationary"

    def __init__(self, dt, speed_scale=1.0, longitudinal_bounds=(-3.0, 3.0)):
        self.dt = dt
        self.speed_scale = speed_scale
        self.longitudinal_bounds = longitudinal_bounds

    def get_action(self, observation, action_mask, exploration=False):
        vx = observation[2] * self.speed_scale
        ax = float(np.clip(-vx / self.dt, *self.longitudinal_bounds))
        return np.array([ax, 0.0, 0.0, 0.0], dtype=np.float64)


def main():
    print("START RUN!!!")

    env = ClcmtEnv(env_config=env_config, seed=0)

    agent = ScriptedLaneChangeAgent.for_lane_change(
        lane_width=env_config["geometry"]["lane_width"], n_steps=12, dt=env_config["episode"]["dt"]
    )
    observation, info = env.reset(options={"noise": False})
    agent.reset()

    episode_step = 0
    done = False
    print("[Step: RESET] Composition: {0}, Action Mask: {1}".format(info["COMPOSITION"].name, info["ACTION_MASK"]))

    while not done:
        padded_action = agent.get_action(observation, info["ACTION_MASK"])
        action = env.compact_action(padded_action)
        next_observation, reward, terminated, truncated, info = env.step(action)

        episode_step += 1
        print("[Step: {0:3}] Obs.: {1}, Action: {2}, Next Obs.: {3}, "
              "Reward: {4:>7.3f}, Terminated: {5}, Truncated: {6}, Termination: {7}, Warnings: {8}".format(
            episode_step, observation.shape, action, next_observation.shape,
            reward, terminated, truncated, info["TERMINATION"].value, info["WARNINGS"]
        ))
        observation = next_observation
        done = terminated or truncated

    print("[REWARD BREAKDOWN] {0}".format(info["REWARD_BREAKDOWN"]))


if __name__ == "__main__":
    main()
