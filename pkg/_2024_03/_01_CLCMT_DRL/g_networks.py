"""Float64 MLP toolkit shared by the four agents: deterministic and stochastic actors,
critics, polyak averaging, guarded Adam steps, finite-difference checks and checkpoints."""
import enum
import math
from typing import Dict, Mapping, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.distributions import Normal

from _2024_03._01_CLCMT_DRL.b_world import MAX_ACTION_DIM, STATE_DIM, StructuralError, UsageError

DTYPE = torch.float64
DEVICE = torch.device("cpu")

POLICY_INPUT_DIM = STATE_DIM + MAX_ACTION_DIM
CRITIC_INPUT_DIM = POLICY_INPUT_DIM + MAX_ACTION_DIM

CHECKPOINT_VERSION = 1

# squashed samples stay strictly inside the action box
_TANH_LIMIT = 1.0 - 1e-7


class NonFiniteError(FloatingPointError):
    pass


class Activation(enum.Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        if self is Activation.RELU:
            return F.relu(x)
        if self is Activation.TANH:
            return torch.tanh(x)
        return x


def policy_input(observation: np.ndarray, action_mask: np.ndarray) -> np.ndarray:
    return np.concatenate((np.asarray(observation, dtype=np.float64), np.asarray(action_mask, dtype=np.float64)))


def to_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype=DTYPE)
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE, device=DEVICE)


def check_finite(name: str, x: torch.Tensor) -> None:
    if not torch.all(torch.isfinite(x)):
        raise NonFiniteError("{0} contains non-finite values".format(name))


class MlpGradients(NamedTuple):
    parameters: Dict[str, torch.Tensor]
    input: torch.Tensor


class Mlp(nn.Module):
    """Fully connected network; the last forward pass is kept so that backward() can be called on it."""

    def __init__(
            self,
            sizes: Sequence[int],
            hidden_activation: Activation = Activation.RELU,
            output_activation: Activation = Activation.IDENTITY,
            final_layer_scale: float = 1.0,
            generator: Optional[torch.Generator] = None
    ):
        super(Mlp, self).__init__()
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise StructuralError("invalid layer sizes: {0}".format(list(sizes)))

        self.sizes = tuple(int(s) for s in sizes)
        self.activations = tuple(
            [hidden_activation] * (len(self.sizes) - 2) + [output_activation]
        )
        self.layers = nn.ModuleList(
            [nn.Linear(n_in, n_out, dtype=DTYPE) for n_in, n_out in zip(self.sizes[:-1], self.sizes[1:])]
        )
        self._init_weights(final_layer_scale, generator)
        self._retained = None

    def _init_weights(self, final_layer_scale: float, generator: Optional[torch.Generator]) -> None:
        # uniform fan-in: U(-1/sqrt(fan_in), 1/sqrt(fan_in))
        with torch.no_grad():
            for i, layer in enumerate(self.layers):
                bound = 1.0 / math.sqrt(layer.in_features)
                if i == len(self.layers) - 1:
                    bound *= final_layer_scale
                for p in (layer.weight, layer.bias):
                    u = torch.rand(p.shape, generator=generator, dtype=DTYPE)
                    p.copy_((2.0 * u - 1.0) * bound)

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    def activation_pattern(self, x) -> torch.Tensor:
        """Signs of the ReLU pre-activations; a change means a kink lies between two inputs."""
        with torch.no_grad():
            out = to_tensor(x)
            signs = []
            for layer, activation in zip(self.layers, self.activations):
                out = layer(out)
                if activation is Activation.RELU:
                    signs.append((out > 0).flatten())
                out = activation(out)
        return torch.cat(signs) if signs else torch.zeros(0, dtype=torch.bool)

    def forward(self, x) -> torch.Tensor:
        x = to_tensor(x)
        if x.shape[-1] != self.input_dim:
            raise StructuralError("input has {0} features, network expects {1}".format(x.shape[-1], self.input_dim))
        check_finite("network input", x)

        if torch.is_grad_enabled() and not x.requires_grad:
            x = x.detach().requires_grad_(True)

        out = x
        for layer, activation in zip(self.layers, self.activations):
            out = activation(layer(out))

        self._retained = (x, out) if torch.is_grad_enabled() else None
        return out

    def backward(self, upstream_grad) -> MlpGradients:
        if self._retained is None:
            raise UsageError("backward() needs a preceding forward() with gradients enabled")
        x, out = self._retained
        upstream_grad = to_tensor(upstream_grad)
        if upstream_grad.shape != out.shape:
            raise StructuralError("upstream gradient shape {0} != output shape {1}".format(
                tuple(upstream_grad.shape), tuple(out.shape)
            ))

        names, params = zip(*self.named_parameters())
        grads = torch.autograd.grad(
            out, (x,) + params, grad_outputs=upstream_grad, allow_unused=True, retain_graph=True
        )
        input_grad = grads[0] if grads[0] is not None else torch.zeros_like(x)
        parameter_grads = {
            name: (g if g is not None else torch.zeros_like(p)) for name, p, g in zip(names, params, grads[1:])
        }
        self._retained = None
        return MlpGradients(parameters=parameter_grads, input=input_grad)


def adam_step(optimizer: torch.optim.Optimizer, loss: Optional[torch.Tensor] = None) -> None:
    """Backpropagate loss (if given) and take one Adam step, refusing non-finite losses or gradients."""
    if loss is not None:
        if not torch.isfinite(loss):
            raise NonFiniteError("loss is not finite: {0}".format(loss.item()))
        optimizer.zero_grad()
        loss.backward()

    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.all(torch.isfinite(p.grad)):
                raise NonFiniteError("non-finite gradient in parameter of shape {0}".format(tuple(p.shape)))
    optimizer.step()


def make_adam(parameters, learning_rate: float) -> torch.optim.Adam:
    return torch.optim.Adam(parameters, lr=learning_rate, betas=(0.9, 0.999), eps=1e-8)


def polyak_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    if not 0.0 < tau <= 1.0:
        raise ValueError("tau must be in (0, 1], got {0}".format(tau))
    with torch.no_grad():
        for target_p, online_p in zip(target.parameters(), online.parameters()):
            if target_p.shape != online_p.shape:
                raise StructuralError("polyak shape mismatch: {0} vs {1}".format(
                    tuple(target_p.shape), tuple(online_p.shape)
                ))
            target_p.mul_(1.0 - tau).add_(online_p, alpha=tau)


class GaussianSample(NamedTuple):
    action: torch.Tensor
    log_prob: torch.Tensor


class GaussianHead:
    """Diagonal Gaussian over the padded action slots. Masked slots are zeroed in the action and
    left out of log-probabilities and entropies."""

    def __init__(
            self,
            log_std_min: float,
            log_std_max: float,
            squash: bool,
            low: Optional[np.ndarray] = None,
            high: Optional[np.ndarray] = None
    ):
        if log_std_min >= log_std_max:
            raise ValueError("log_std_min must be < log_std_max")
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max
        self.squash = squash
        if squash:
            if low is None or high is None:
                raise ValueError("a squashed head needs action bounds")
            low, high = to_tensor(low), to_tensor(high)
            self.center = (high + low) / 2.0
            self.scale = (high - low) / 2.0

    def clamp_log_std(self, log_std: torch.Tensor) -> torch.Tensor:
        return torch.clamp(log_std, self.log_std_min, self.log_std_max)

    def sample(
            self,
            mean: torch.Tensor,
            log_std: torch.Tensor,
            mask: torch.Tensor,
            generator: Optional[torch.Generator] = None,
            deterministic: bool = False
    ) -> GaussianSample:
        mask = to_tensor(mask)
        log_std = self.clamp_log_std(log_std)
        std = log_std.exp()
        if deterministic:
            u = mean
        else:
            u = mean + std * torch.randn(mean.shape, generator=generator, dtype=DTYPE)

        log_prob = (Normal(mean, std).log_prob(u) * mask).sum(dim=-1)
        if self.squash:
            action = self.center + self.scale * torch.clamp(torch.tanh(u), -_TANH_LIMIT, _TANH_LIMIT)
            # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u))
            log_det = torch.log(self.scale) + 2.0 * (math.log(2.0) - u - F.softplus(-2.0 * u))
            log_prob = log_prob - (log_det * mask).sum(dim=-1)
        else:
            action = u
        return GaussianSample(action=action * mask, log_prob=log_prob)

    def log_prob(self, mean: torch.Tensor, log_std: torch.Tensor, action: torch.Tensor, mask: torch.Tensor):
        if self.squash:
            raise UsageError("log_prob of a stored action is only defined for the unsquashed head")
        mask = to_tensor(mask)
        std = self.clamp_log_std(log_std).exp()
        return (Normal(mean, std).log_prob(to_tensor(action)) * mask).sum(dim=-1)

    def entropy(self, log_std: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        mask = to_tensor(mask)
        log_std = self.clamp_log_std(log_std)
        return ((0.5 + 0.5 * math.log(2.0 * math.pi) + log_std) * mask).sum(dim=-1)


class DeterministicActor(nn.Module):
    def __init__(self, hidden_sizes, low, high, generator: Optional[torch.Generator] = None):
        super(DeterministicActor, self).__init__()
        self.net = Mlp(
            [POLICY_INPUT_DIM, *hidden_sizes, MAX_ACTION_DIM],
            output_activation=Activation.TANH, final_layer_scale=1e-2, generator=generator
        )
        self.register_buffer("low", to_tensor(low))
        self.register_buffer("high", to_tensor(high))

    def forward(self, policy_inputs) -> torch.Tensor:
        policy_inputs = to_tensor(policy_inputs)
        mask = policy_inputs[..., STATE_DIM:]
        squashed = self.net(policy_inputs)
        action = self.low + (squashed + 1.0) * (self.high - self.low) / 2.0
        return action * mask


class QCritic(nn.Module):
    def __init__(self, hidden_sizes, generator: Optional[torch.Generator] = None):
        super(QCritic, self).__init__()
        self.net = Mlp([CRITIC_INPUT_DIM, *hidden_sizes, 1], generator=generator)

    def forward(self, policy_inputs, actions) -> torch.Tensor:
        policy_inputs, actions = to_tensor(policy_inputs), to_tensor(actions)
        mask = policy_inputs[..., STATE_DIM:]
        return self.net(torch.cat((policy_inputs, actions * mask), dim=-1)).squeeze(-1)


class StochasticActor(nn.Module):
    def __init__(self, hidden_sizes, head: GaussianHead, generator: Optional[torch.Generator] = None):
        super(StochasticActor, self).__init__()
        self.net = Mlp(
            [POLICY_INPUT_DIM, *hidden_sizes, 2 * MAX_ACTION_DIM], final_layer_scale=1e-2, generator=generator
        )
        self.head = head

    def forward(self, policy_inputs):
        out = self.net(policy_inputs)
        mean, log_std = out[..., :MAX_ACTION_DIM], out[..., MAX_ACTION_DIM:]
        return mean, self.head.clamp_log_std(log_std)

    def sample(self, policy_inputs, generator=None, deterministic=False) -> GaussianSample:
        policy_inputs = to_tensor(policy_inputs)
        mean, log_std = self.forward(policy_inputs)
        return self.head.sample(mean, log_std, policy_inputs[..., STATE_DIM:], generator, deterministic)


class ValueNet(nn.Module):
    def __init__(self, hidden_sizes, generator: Optional[torch.Generator] = None):
        super(ValueNet, self).__init__()
        self.net = Mlp([POLICY_INPUT_DIM, *hidden_sizes, 1], generator=generator)

    def forward(self, policy_inputs) -> torch.Tensor:
        return self.net(policy_inputs).squeeze(-1)


### FINITE-DIFFERENCE CHECK ###

def gradcheck(
        net: Mlp, inputs: torch.Tensor, h: float = 1e-5, num_samples: int = 64, seed: int = 0
) -> float:
    """Max relative error between backward() and central differences over sampled parameter entries.

    Entries whose perturbation moves a ReLU across its kink are skipped and redrawn.
    """
    generator = torch.Generator().manual_seed(seed)
    inputs = to_tensor(inputs)
    with torch.no_grad():
        out_shape = net(inputs).shape
    weights = torch.randn(out_shape, generator=generator, dtype=DTYPE)

    def loss() -> float:
        with torch.no_grad():
            return float((net(inputs) * weights).sum())

    net(inputs)
    analytic = net.backward(weights).parameters
    pattern = net.activation_pattern(inputs)

    rng = np.random.default_rng(seed)
    named = list(net.named_parameters())
    max_error = 0.0
    checked, attempts = 0, 0
    while checked < num_samples and attempts < 20 * num_samples:
        attempts += 1
        name, p = named[int(rng.integers(len(named)))]
        index = tuple(int(rng.integers(n)) for n in p.shape)
        with torch.no_grad():
            original = p[index].item()
            p[index] = original + h
            plus, plus_pattern = loss(), net.activation_pattern(inputs)
            p[index] = original - h
            minus, minus_pattern = loss(), net.activation_pattern(inputs)
            p[index] = original
        if not (torch.equal(plus_pattern, pattern) and torch.equal(minus_pattern, pattern)):
            continue
        checked += 1
        numeric = (plus - minus) / (2.0 * h)
        a = float(analytic[name][index])
        error = abs(a - numeric) / max(abs(a), abs(numeric), 1e-3)
        max_error = max(max_error, error)
    return max_error


def gradcheck_networks(hidden_sizes: Sequence[int], batch_size: int = 8, seed: int = 0) -> Dict[str, float]:
    generator = torch.Generator().manual_seed(seed)
    low, high = -3.0 * np.ones(MAX_ACTION_DIM), 3.0 * np.ones(MAX_ACTION_DIM)
    networks = {
        "actor": DeterministicActor(hidden_sizes, low, high, generator).net,
        "critic": QCritic(hidden_sizes, generator).net,
        "stochastic_actor": StochasticActor(hidden_sizes, GaussianHead(-20.0, 2.0, False), generator).net,
        "value": ValueNet(hidden_sizes, generator).net,
    }
    errors = {}
    for name, net in networks.items():
        inputs = torch.randn((batch_size, net.input_dim), generator=generator, dtype=DTYPE)
        errors[name] = gradcheck(net, inputs, seed=seed)
    return errors


### CHECKPOINTS ###

def save_checkpoint(
        path: str,
        algorithm: str,
        networks: Mapping[str, nn.Module],
        optimizers: Mapping[str, torch.optim.Optimizer],
        run_config: Mapping,
        extra: Optional[Mapping] = None
) -> None:
    torch.save({
        "version": CHECKPOINT_VERSION,
        "algorithm": algorithm,
        "observation_dim": STATE_DIM,
        "action_dim": MAX_ACTION_DIM,
        "hidden_sizes": list(run_config["algorithm"]["hidden_sizes"]),
        "run_config": dict(run_config),
        "networks": {name: net.state_dict() for name, net in networks.items()},
        "optimizers": {name: opt.state_dict() for name, opt in optimizers.items()},
        "extra": dict(extra or {}),
    }, path)


def load_checkpoint(path: str) -> dict:
    checkpoint = torch.load(path, map_location=DEVICE)
    if not isinstance(checkpoint, dict) or checkpoint.get("version") != CHECKPOINT_VERSION:
        raise StructuralError("unsupported checkpoint format in {0}".format(path))
    if checkpoint["observation_dim"] != STATE_DIM or checkpoint["action_dim"] != MAX_ACTION_DIM:
        raise StructuralError("checkpoint dimensions do not match this environment")
    return checkpoint
