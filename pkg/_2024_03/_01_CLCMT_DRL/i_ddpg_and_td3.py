import copy
from typing import Dict, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from _2024_03._01_CLCMT_DRL.b_world import MAX_ACTION_DIM
from _2024_03._01_CLCMT_DRL.g_networks import (
    DeterministicActor, QCritic, adam_step, make_adam, polyak_update, policy_input, to_tensor
)
from _2024_03._01_CLCMT_DRL.h_buffers import Batch, ReplayBuffer, Transition


class OffPolicyAgent:
    name = "off_policy"

    def __init__(self, config: Mapping, action_low: np.ndarray, action_high: np.ndarray, seed: int = 0):
        self.config = dict(config)
        self.gamma = config["gamma"]
        self.tau = config["tau"]
        self.batch_size = config["batch_size"]
        self.steps_between_train = config["steps_between_train"]
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)

        self.generator = torch.Generator().manual_seed(seed)
        self.rng = np.random.default_rng(seed)

        self.replay_buffer = ReplayBuffer(
            capacity=config["replay_buffer_size"], warmup=config["warmup_steps"], seed=seed
        )
        self.time_steps = 0
        self.training_time_steps = 0

    @property
    def networks(self) -> Dict[str, torch.nn.Module]:
        raise NotImplementedError

    @property
    def optimizers(self) -> Dict[str, torch.optim.Optimizer]:
        raise NotImplementedError

    def load_networks(self, state_dicts: Mapping[str, dict]) -> None:
        for name, net in self.networks.items():
            net.load_state_dict(state_dicts[name])

    def store(self, transition: Transition) -> None:
        self.replay_buffer.append(transition)

    def observe_step(self, observation, action_mask, action, reward, next_observation, terminated, truncated):
        """Store one environment step and train when due. Returns the loss report or None."""
        self.store(Transition(observation, action, next_observation, reward, terminated, action_mask))
        self.time_steps += 1
        if self.replay_buffer.is_warm() and self.time_steps % self.steps_between_train == 0:
            return self.update(self.replay_buffer.sample(self.batch_size))
        return None

    def compute_td_targets(self, batch: Batch) -> torch.Tensor:
        raise NotImplementedError

    def update(self, batch: Batch) -> Dict[str, float]:
        raise NotImplementedError


class DDPG(OffPolicyAgent):
    name = "ddpg"

    def __init__(self, config: Mapping, action_low: np.ndarray, action_high: np.ndarray, seed: int = 0):
        super(DDPG, self).__init__(config, action_low, action_high, seed)
        self.exploration_noise = config["exploration_noise"]
        self.exploration_noise_clip = config["exploration_noise_clip"]

        hidden_sizes = config["hidden_sizes"]
        self.actor = DeterministicActor(hidden_sizes, self.action_low, self.action_high, self.generator)
        self.critic = QCritic(hidden_sizes, self.generator)
        self.target_actor = copy.deepcopy(self.actor)
        self.target_critic = copy.deepcopy(self.critic)

        self.actor_optimizer = make_adam(self.actor.parameters(), config["learning_rate"])
        self.critic_optimizer = make_adam(self.critic.parameters(), config["learning_rate"])

    @property
    def networks(self):
        return {
            "actor": self.actor, "critic": self.critic,
            "target_actor": self.target_actor, "target_critic": self.target_critic,
        }

    @property
    def optimizers(self):
        return {"actor": self.actor_optimizer, "critic": self.critic_optimizer}

    def get_action(self, observation, action_mask, exploration: bool = True) -> np.ndarray:
        with torch.no_grad():
            action = self.actor(to_tensor(policy_input(observation, action_mask))).numpy()

        if exploration and self.exploration_noise > 0.0:
            noise = self.rng.normal(0.0, self.exploration_noise, size=MAX_ACTION_DIM)
            action = action + np.clip(noise, -self.exploration_noise_clip, self.exploration_noise_clip)
            action = np.clip(action, self.action_low, self.action_high)

        return action * np.asarray(action_mask, dtype=np.float64)

    def compute_td_targets(self, batch: Batch) -> torch.Tensor:
        with torch.no_grad():
            next_actions = self.target_actor(batch.next_policy_inputs)
            next_q = self.target_critic(batch.next_policy_inputs, next_actions)
            return batch.rewards + self.gamma * (1.0 - batch.dones) * next_q

    def update(self, batch: Batch) -> Dict[str, float]:
        self.training_time_steps += 1

        targets = self.compute_td_targets(batch)
        q_values = self.critic(batch.policy_inputs, batch.actions)
        critic_loss = F.mse_loss(q_values, targets)
        adam_step(self.critic_optimizer, critic_loss)

        actor_loss = -self.critic(batch.policy_inputs, self.actor(batch.policy_inputs)).mean()
        adam_step(self.actor_optimizer, actor_loss)

        polyak_update(self.target_actor, self.actor, self.tau)
        polyak_update(self.target_critic, self.critic, self.tau)

        return {"critic_loss": critic_loss.item(), "actor_loss": actor_loss.item()}


class TD3(DDPG):
    name = "td3"

    def __init__(self, config: Mapping, action_low: np.ndarray, action_high: np.ndarray, seed: int = 0):
        super(TD3, self).__init__(config, action_low, action_high, seed)
        self.smoothing_noise = config["smoothing_noise"]
        self.smoothing_noise_clip = config["smoothing_noise_clip"]
        self.policy_delay = config["policy_delay"]

        self.critic_2 = QCritic(config["hidden_sizes"], self.generator)
        self.target_critic_2 = copy.deepcopy(self.critic_2)
        self.critic_2_optimizer = make_adam(self.critic_2.parameters(), config["learning_rate"])

        self.critic_updates = 0
        self.actor_updates = 0
        self._last_actor_loss = 0.0

    @property
    def networks(self):
        return super(TD3, self).networks | {"critic_2": self.critic_2, "target_critic_2": self.target_critic_2}

    @property
    def optimizers(self):
        return super(TD3, self).optimizers | {"critic_2": self.critic_2_optimizer}

    def compute_td_targets(self, batch: Batch) -> torch.Tensor:
        with torch.no_grad():
            next_actions = self.target_actor(batch.next_policy_inputs)
            if self.smoothing_noise > 0.0:
                noise = torch.randn(next_actions.shape, generator=self.generator, dtype=next_actions.dtype)
                noise = (noise * self.smoothing_noise).clamp(-self.smoothing_noise_clip, self.smoothing_noise_clip)
                low, high = to_tensor(self.action_low), to_tensor(self.action_high)
                next_actions = torch.max(torch.min(next_actions + noise, high), low) * batch.next_policy_inputs[
                    :, -MAX_ACTION_DIM:
                ]
            next_q = torch.min(
                self.target_critic(batch.next_policy_inputs, next_actions),
                self.target_critic_2(batch.next_policy_inputs, next_actions),
            )
            return batch.rewards + self.gamma * (1.0 - batch.dones) * next_q

    def update(self, batch: Batch) -> Dict[str, float]:
        self.training_time_steps += 1

        targets = self.compute_td_targets(batch)
        critic_loss = (
            F.mse_loss(self.critic(batch.policy_inputs, batch.actions), targets)
            + F.mse_loss(self.critic_2(batch.policy_inputs, batch.actions), targets)
        )
        self.critic_optimizer.zero_grad()
        self.critic_2_optimizer.zero_grad()
        adam_step(self.critic_optimizer, critic_loss)
        adam_step(self.critic_2_optimizer)
        self.critic_updates += 1

        if self.critic_updates % self.policy_delay == 0:
            actor_loss = -self.critic(batch.policy_inputs, self.actor(batch.policy_inputs)).mean()
            adam_step(self.actor_optimizer, actor_loss)
            self.actor_updates += 1
            self._last_actor_loss = actor_loss.item()

            polyak_update(self.target_actor, self.actor, self.tau)
            polyak_update(self.target_critic, self.critic, self.tau)
            polyak_update(self.target_critic_2, self.critic_2, self.tau)

        return {"critic_loss": critic_loss.item(), "actor_loss": self._last_actor_loss}
