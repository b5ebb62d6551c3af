import warnings
from typing import Dict, Mapping, Optional

import numpy as np
import torch
import torch.nn.functional as F

from _2024_03._01_CLCMT_DRL.g_networks import (
    GaussianHead, StochasticActor, ValueNet, adam_step, make_adam, policy_input, to_tensor
)
from _2024_03._01_CLCMT_DRL.h_buffers import RolloutBuffer


def clipped_surrogate(ratio: torch.Tensor, advantages: torch.Tensor, clip_ratio: float) -> torch.Tensor:
    """Per-sample min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)."""
    return torch.min(ratio * advantages, torch.clamp(ratio, 1.0 - clip_ratio, 1.0 + clip_ratio) * advantages)


class PPO:
    name = "ppo"

    def __init__(self, config: Mapping, action_low: np.ndarray, action_high: np.ndarray, seed: int = 0):
        self.config = dict(config)
        self.gamma = config["gamma"]
        self.gae_lambda = config["gae_lambda"]
        self.clip_ratio = config["clip_ratio"]
        self.rollout_length = config["batch_size"]
        self.minibatch_size = config["minibatch_size"]
        self.ppo_epochs = config["ppo_epochs"]
        self.entropy_coef = config["entropy_coef"]
        self.value_loss_coef = config["value_loss_coef"]
        self.action_low = np.asarray(action_low, dtype=np.float64)
        self.action_high = np.asarray(action_high, dtype=np.float64)

        self.generator = torch.Generator().manual_seed(seed)

        hidden_sizes = config["hidden_sizes"]
        head = GaussianHead(config["log_std_min"], config["log_std_max"], squash=False)
        self.actor = StochasticActor(hidden_sizes, head, self.generator)
        self.value = ValueNet(hidden_sizes, self.generator)
        self.optimizer = make_adam(
            list(self.actor.parameters()) + list(self.value.parameters()), config["learning_rate"]
        )

        self.rollout = RolloutBuffer(seed=seed)
        self.time_steps = 0
        self.training_time_steps = 0
        self.skipped_samples = 0

        self._last_log_prob = 0.0
        self._last_value = 0.0

    @property
    def networks(self):
        return {"actor": self.actor, "value": self.value}

    @property
    def optimizers(self):
        return {"optimizer": self.optimizer}

    def load_networks(self, state_dicts: Mapping[str, dict]) -> None:
        for name, net in self.networks.items():
            net.load_state_dict(state_dicts[name])

    def get_action(self, observation, action_mask, exploration: bool = True) -> np.ndarray:
        inputs = to_tensor(policy_input(observation, action_mask))
        with torch.no_grad():
            sample = self.actor.sample(inputs, generator=self.generator, deterministic=not exploration)
            self._last_log_prob = float(sample.log_prob)
            self._last_value = float(self.value(inputs))
        return sample.action.numpy()

    def log_prob(self, policy_inputs, actions) -> torch.Tensor:
        policy_inputs = to_tensor(policy_inputs)
        mean, log_std = self.actor(policy_inputs)
        return self.actor.head.log_prob(mean, log_std, actions, policy_inputs[..., -actions.shape[-1]:])

    def state_value(self, observation, action_mask) -> float:
        with torch.no_grad():
            return float(self.value(to_tensor(policy_input(observation, action_mask))))

    def observe_step(self, observation, action_mask, action, reward, next_observation, terminated, truncated):
        """Store the step taken by the last get_action call; update when the rollout is full."""
        self.rollout.add(
            observation, action_mask, action, self._last_log_prob, reward, self._last_value,
            done=terminated, episode_end=terminated or truncated
        )
        self.time_steps += 1

        if truncated and not terminated:
            self.rollout.close_episode(self.state_value(next_observation, action_mask))

        if len(self.rollout) >= self.rollout_length:
            last_value = 0.0 if terminated else self.state_value(next_observation, action_mask)
            return self.update(last_value)
        return None

    def update(self, last_value: float = 0.0) -> Optional[Dict[str, float]]:
        self.rollout.finish(self.gamma, self.gae_lambda, last_value)
        self.training_time_steps += 1

        policy_losses, value_losses, entropies = [], [], []
        for _ in range(self.ppo_epochs):
            for batch in self.rollout.minibatches(self.minibatch_size):
                mean, log_std = self.actor(batch.policy_inputs)
                masks = batch.policy_inputs[:, -batch.actions.shape[-1]:]
                log_probs = self.actor.head.log_prob(mean, log_std, batch.actions, masks)
                with torch.no_grad():
                    finite = torch.isfinite(torch.exp(log_probs - batch.log_probs))
                if not torch.all(finite):
                    n_bad = int((~finite).sum())
                    self.skipped_samples += n_bad
                    warnings.warn(
                        "skipping {0} samples with non-finite probability ratio".format(n_bad), RuntimeWarning
                    )
                    if n_bad == len(finite):
                        continue

                # skipped samples stay out of the graph
                ratio = torch.exp(log_probs[finite] - batch.log_probs[finite])
                surrogate = clipped_surrogate(ratio, batch.advantages[finite], self.clip_ratio)
                policy_loss = -surrogate.mean()
                value_loss = F.mse_loss(self.value(batch.policy_inputs), batch.returns)
                entropy = self.actor.head.entropy(log_std, masks).mean()

                loss = policy_loss + self.value_loss_coef * value_loss - self.entropy_coef * entropy
                adam_step(self.optimizer, loss)

                policy_losses.append(policy_loss.item())
                value_losses.append(value_loss.item())
                entropies.append(entropy.item())

        self.rollout.clear()
        return {
            "critic_loss": float(np.mean(value_losses)) if value_losses else 0.0,
            "actor_loss": float(np.mean(policy_losses)) if policy_losses else 0.0,
            "entropy": float(np.mean(entropies)) if entropies else 0.0,
        }
