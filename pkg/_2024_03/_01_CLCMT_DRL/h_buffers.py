import collections
from typing import Iterator, List, NamedTuple, Optional

import numpy as np
import torch

from _2024_03._01_CLCMT_DRL.b_world import MAX_ACTION_DIM, STATE_DIM, StructuralError, UsageError
from _2024_03._01_CLCMT_DRL.g_networks import DTYPE, DEVICE, NonFiniteError, policy_input

Transition = collections.namedtuple(
    typename='Transition',
    field_names=['observation', 'action', 'next_observation', 'reward', 'done', 'action_mask']
)


class Batch(NamedTuple):
    policy_inputs: torch.Tensor          # (B, 20): observation + action mask
    actions: torch.Tensor                # (B, 4): padded actions
    next_policy_inputs: torch.Tensor
    rewards: torch.Tensor                # (B,)
    dones: torch.Tensor                  # (B,) 1.0 for Success/Crash/OutOfBounds

    @property
    def masks(self) -> torch.Tensor:
        return self.policy_inputs[:, STATE_DIM:]


class ReplayBuffer:
    """Fixed-capacity ring of transitions; sampling is uniform with replacement once warm-up is reached."""

    def __init__(self, capacity: int, warmup: int, seed: int = 0):
        if capacity <= 0:
            raise ValueError("capacity must be > 0")
        self.capacity = capacity
        self.warmup = warmup
        self._rng = np.random.default_rng(seed)

        self._policy_inputs = np.zeros((capacity, STATE_DIM + MAX_ACTION_DIM), dtype=np.float64)
        self._actions = np.zeros((capacity, MAX_ACTION_DIM), dtype=np.float64)
        self._next_policy_inputs = np.zeros_like(self._policy_inputs)
        self._rewards = np.zeros((capacity,), dtype=np.float64)
        self._dones = np.zeros((capacity,), dtype=np.float64)

        self._index = 0
        self._size = 0

    def size(self) -> int:
        return self._size

    def is_full(self) -> bool:
        return self._size >= self.capacity

    def is_warm(self) -> bool:
        return self._size >= self.warmup

    def append(self, transition: Transition) -> None:
        action = np.asarray(transition.action, dtype=np.float64)
        if action.shape != (MAX_ACTION_DIM,):
            raise StructuralError("replay buffer stores padded actions of shape (4,), got {0}".format(action.shape))
        for name, value in (("observation", transition.observation), ("action", action),
                            ('next_observation', transition.next_observation), ('reward', transition.reward)):
            if not np.all(np.isfinite(value)):
                raise NonFiniteError("non-finite {0} in transition".format(name))

        i = self._index
        self._policy_inputs[i] = policy_input(transition.observation, transition.action_mask)
        self._actions[i] = action
        self._next_policy_inputs[i] = policy_input(transition.next_observation, transition.action_mask)
        self._rewards[i] = transition.reward
        self._dones[i] = float(transition.done)

        self._index = (self._index + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    push = append

    def clear(self) -> None:
        self._index = 0
        self._size = 0

    def sample_indices(self, batch_size: int) -> np.ndarray:
        if not self.is_warm():
            raise UsageError("replay buffer holds {0} transitions, warm-up needs {1}".format(self._size, self.warmup))
        if batch_size > self._size:
            raise UsageError("batch size {0} exceeds occupancy {1}".format(batch_size, self._size))
        return self._rng.integers(0, self._size, size=batch_size)

    def sample(self, batch_size: int) -> Batch:
        indices = self.sample_indices(batch_size)
        return Batch(
            policy_inputs=torch.tensor(self._policy_inputs[indices], dtype=DTYPE, device=DEVICE),
            actions=torch.tensor(self._actions[indices], dtype=DTYPE, device=DEVICE),
            next_policy_inputs=torch.tensor(self._next_policy_inputs[indices], dtype=DTYPE, device=DEVICE),
            rewards=torch.tensor(self._rewards[indices], dtype=DTYPE, device=DEVICE),
            dones=torch.tensor(self._dones[indices], dtype=DTYPE, device=DEVICE),
        )

    def stored_actions(self) -> np.ndarray:
        # oldest first
        if self.is_full():
            return np.roll(self._actions, -self._index, axis=0).copy()
        return self._actions[:self._size].copy()


def compute_gae(
        rewards: np.ndarray,
        values: np.ndarray,
        next_values: np.ndarray,
        dones: np.ndarray,
        episode_ends: np.ndarray,
        gamma: float,
        gae_lambda: float
):
    """Advantages and returns by backward recursion.

    dones masks the bootstrap (terminal states); episode_ends stops the recursion (terminal or truncated).
    """
    n = len(rewards)
    advantages = np.zeros(n, dtype=np.float64)
    next_advantage = 0.0
    for t in reversed(range(n)):
        delta = rewards[t] + gamma * (1.0 - dones[t]) * next_values[t] - values[t]
        next_advantage = delta + gamma * gae_lambda * (1.0 - episode_ends[t]) * next_advantage
        advantages[t] = next_advantage
    returns = advantages + np.asarray(values, dtype=np.float64)
    return advantages, returns


class RolloutBatch(NamedTuple):
    policy_inputs: torch.Tensor
    actions: torch.Tensor
    log_probs: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor


class RolloutBuffer:
    def __init__(self, seed: int = 0):
        self._rng = np.random.default_rng(seed)
        self.clear()

    def clear(self) -> None:
        self.policy_inputs: List[np.ndarray] = []
        self.actions: List[np.ndarray] = []
        self.log_probs: List[float] = []
        self.rewards: List[float] = []
        self.values: List[float] = []
        self.next_values: List[Optional[float]] = []
        self.dones: List[float] = []
        self.episode_ends: List[float] = []
        self.advantages: Optional[np.ndarray] = None
        self.returns: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.rewards)

    def add(self, observation, action_mask, action, log_prob, reward, value, done, episode_end) -> None:
        # the value of this state is the bootstrap of the previous step when that episode continues
        if self.next_values and self.next_values[-1] is None:
            self.next_values[-1] = float(value)

        self.policy_inputs.append(policy_input(observation, action_mask))
        self.actions.append(np.asarray(action, dtype=np.float64))
        self.log_probs.append(float(log_prob))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.next_values.append(None)
        self.dones.append(float(done))
        self.episode_ends.append(float(episode_end))

    def close_episode(self, next_value: float) -> None:
        """Bootstrap value of the last stored step's successor (ignored when that step was terminal)."""
        if self.next_values:
            self.next_values[-1] = float(next_value)

    def finish(self, gamma: float, gae_lambda: float, last_value: float = 0.0) -> None:
        if not self.rewards:
            raise UsageError("rollout is empty")
        if self.next_values[-1] is None:
            self.next_values[-1] = float(last_value)

        self.advantages, self.returns = compute_gae(
            rewards=np.array(self.rewards),
            values=np.array(self.values),
            next_values=np.array(self.next_values, dtype=np.float64),
            dones=np.array(self.dones),
            episode_ends=np.array(self.episode_ends),
            gamma=gamma,
            gae_lambda=gae_lambda,
        )

    def normalized_advantages(self) -> np.ndarray:
        if self.advantages is None:
            raise UsageError("finish() must be called before reading advantages")
        std = self.advantages.std()
        return (self.advantages - self.advantages.mean()) / (std + 1e-8)

    def minibatches(self, minibatch_size: int) -> Iterator[RolloutBatch]:
        advantages = self.normalized_advantages()
        n = len(self)
        permutation = self._rng.permutation(n)
        policy_inputs = np.array(self.policy_inputs)
        actions = np.array(self.actions)
        log_probs = np.array(self.log_probs)
        for start in range(0, n, minibatch_size):
            idx = permutation[start:start + minibatch_size]
            yield RolloutBatch(
                policy_inputs=torch.tensor(policy_inputs[idx], dtype=DTYPE, device=DEVICE),
                actions=torch.tensor(actions[idx], dtype=DTYPE, device=DEVICE),
                log_probs=torch.tensor(log_probs[idx], dtype=DTYPE, device=DEVICE),
                advantages=torch.tensor(advantages[idx], dtype=DTYPE, device=DEVICE),
                returns=torch.tensor(self.returns[idx], dtype=DTYPE, device=DEVICE),
            )
