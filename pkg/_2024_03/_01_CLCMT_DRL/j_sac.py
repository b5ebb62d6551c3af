import copy
import math
from typing import Dict, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from _2024_03._01_CLCMT_DRL.g_networks import (
    DTYPE, GaussianHead, QCritic, StochasticActor, adam_step, make_adam, polyak_update, policy_input, to_tensor
)
from _2024_03._01_CLCMT_DRL.h_buffers import Batch
from _2024_03._01_CLCMT_DRL.i_ddpg_and_td3 import OffPolicyAgent


class Temperature(torch.nn.Module):
    def __init__(self, initial_alpha: float):
        super(Temperature, self).__init__()
        if initial_alpha <= 0:
            raise ValueError("initial_alpha must be > 0")
        self.log_alpha = torch.nn.Parameter(torch.tensor(math.log(initial_alpha), dtype=DTYPE))


class SAC(OffPolicyAgent):
    """Twin soft critics, squashed Gaussian actor and an entropy temperature that is either
    learned toward -(active action dims) or held fixed at initial_alpha."""

    name = "sac"

    def __init__(self, config: Mapping, action_low: np.ndarray, action_high: np.ndarray, seed: int = 0):
        super(SAC, self).__init__(config, action_low, action_high, seed)
        hidden_sizes = config["hidden_sizes"]
        self.auto_entropy = config["auto_entropy"]

        head = GaussianHead(
            config["log_std_min"], config["log_std_max"], squash=True, low=self.action_low, high=self.action_high
        )
        self.actor = StochasticActor(hidden_sizes, head, self.generator)
        self.critic = QCritic(hidden_sizes, self.generator)
        self.critic_2 = QCritic(hidden_sizes, self.generator)
        self.target_critic = copy.deepcopy(self.critic)
        self.target_critic_2 = copy.deepcopy(self.critic_2)

        self.temperature = Temperature(config["initial_alpha"])

        learning_rate = config["learning_rate"]
        self.actor_optimizer = make_adam(self.actor.parameters(), learning_rate)
        self.critic_optimizer = make_adam(
            list(self.critic.parameters()) + list(self.critic_2.parameters()), learning_rate
        )
        self.alpha_optimizer = make_adam(self.temperature.parameters(), learning_rate)

    @property
    def log_alpha(self) -> torch.Tensor:
        return self.temperature.log_alpha

    @property
    def alpha(self) -> float:
        return float(self.log_alpha.exp())

    @property
    def networks(self):
        return {
            "actor": self.actor, "critic": self.critic, "critic_2": self.critic_2,
            "target_critic": self.target_critic, "target_critic_2": self.target_critic_2,
            "temperature": self.temperature,
        }

    @property
    def optimizers(self):
        return {"actor": self.actor_optimizer, "critic": self.critic_optimizer, "alpha": self.alpha_optimizer}

    def get_action(self, observation, action_mask, exploration: bool = True) -> np.ndarray:
        with torch.no_grad():
            sample = self.actor.sample(
                to_tensor(policy_input(observation, action_mask)),
                generator=self.generator,
                deterministic=not exploration
            )
        return sample.action.numpy()

    @staticmethod
    def target_entropy(batch: Batch) -> torch.Tensor:
        return -batch.masks.sum(dim=-1)

    def compute_td_targets(self, batch: Batch) -> torch.Tensor:
        with torch.no_grad():
            next_sample = self.actor.sample(batch.next_policy_inputs, generator=self.generator)
            next_q = torch.min(
                self.target_critic(batch.next_policy_inputs, next_sample.action),
                self.target_critic_2(batch.next_policy_inputs, next_sample.action),
            )
            soft_value = next_q - self.log_alpha.exp() * next_sample.log_prob
            return batch.rewards + self.gamma * (1.0 - batch.dones) * soft_value

    def update(self, batch: Batch) -> Dict[str, float]:
        self.training_time_steps += 1

        targets = self.compute_td_targets(batch)
        critic_loss = (
            F.mse_loss(self.critic(batch.policy_inputs, batch.actions), targets)
            + F.mse_loss(self.critic_2(batch.policy_inputs, batch.actions), targets)
        )
        adam_step(self.critic_optimizer, critic_loss)

        sample = self.actor.sample(batch.policy_inputs, generator=self.generator)
        q = torch.min(
            self.critic(batch.policy_inputs, sample.action),
            self.critic_2(batch.policy_inputs, sample.action),
        )
        alpha = self.log_alpha.exp().detach()
        actor_loss = (alpha * sample.log_prob - q).mean()
        adam_step(self.actor_optimizer, actor_loss)

        alpha_loss = torch.zeros((), dtype=DTYPE)
        if self.auto_entropy:
            # entropy below target (log_prob + target > 0) pushes log_alpha up
            alpha_loss = -(self.log_alpha * (sample.log_prob.detach() + self.target_entropy(batch))).mean()
            adam_step(self.alpha_optimizer, alpha_loss)

        polyak_update(self.target_critic, self.critic, self.tau)
        polyak_update(self.target_critic_2, self.critic_2, self.tau)

        return {
            "critic_loss": critic_loss.item(),
            "actor_loss": actor_loss.item(),
            "alpha_loss": alpha_loss.item(),
            "alpha": self.alpha,
        }
