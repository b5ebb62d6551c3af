import math

import numpy as np
import pytest
import torch
from scipy import stats

from _2024_03._01_CLCMT_DRL.a_config import build_run_config
from _2024_03._01_CLCMT_DRL.b_world import StructuralError, UsageError
from _2024_03._01_CLCMT_DRL.g_networks import (
    DTYPE, POLICY_INPUT_DIM, Activation, DeterministicActor, GaussianHead, Mlp, NonFiniteError, QCritic,
    StochasticActor, ValueNet, adam_step, gradcheck, gradcheck_networks, load_checkpoint, make_adam, polyak_update,
    policy_input, save_checkpoint
)

LOW, HIGH = -3.0 * np.ones(4), 3.0 * np.ones(4)


def small_mlp():
    net = Mlp([2, 2, 1])
    with torch.no_grad():
        net.layers[0].weight.copy_(torch.tensor([[1.0, -1.0], [0.5, 2.0]], dtype=DTYPE))
        net.layers[0].bias.copy_(torch.tensor([0.0, -1.0], dtype=DTYPE))
        net.layers[1].weight.copy_(torch.tensor([[1.0, -2.0]], dtype=DTYPE))
        net.layers[1].bias.copy_(torch.tensor([0.5], dtype=DTYPE))
    return net


def batch_inputs(n, mask=(1.0, 1.0, 1.0, 1.0), seed=0):
    rng = np.random.default_rng(seed)
    observations = rng.uniform(-1.0, 1.0, size=(n, 16))
    return np.stack([policy_input(o, np.array(mask)) for o in observations])


def test_mlp_forward_and_backward_by_hand():
    net = small_mlp()
    out = net(np.array([1.0, 0.5]))
    assert out.item() == pytest.approx(0.0)

    grads = net.backward(np.ones(1))
    np.testing.assert_allclose(grads.input.numpy(), [0.0, -5.0])
    np.testing.assert_allclose(grads.parameters["layers.1.weight"].numpy(), [[0.5, 0.5]])
    np.testing.assert_allclose(grads.parameters["layers.1.bias"].numpy(), [1.0])
    np.testing.assert_allclose(grads.parameters["layers.0.weight"].numpy(), [[1.0, 0.5], [-2.0, -1.0]])
    np.testing.assert_allclose(grads.parameters["layers.0.bias"].numpy(), [1.0, -2.0])


def test_mlp_misuse():
    net = small_mlp()
    with pytest.raises(UsageError):
        net.backward(np.ones(1))
    net(np.array([1.0, 0.5]))
    with pytest.raises(StructuralError):
        net.backward(np.ones(2))
    with pytest.raises(StructuralError):
        net(np.ones(3))
    with pytest.raises(NonFiniteError):
        net(np.array([np.nan, 0.0]))
    with pytest.raises(StructuralError):
        Mlp([4])


def test_seeded_initialization_is_reproducible():
    a = Mlp([POLICY_INPUT_DIM, 8, 4], generator=torch.Generator().manual_seed(3))
    b = Mlp([POLICY_INPUT_DIM, 8, 4], generator=torch.Generator().manual_seed(3))
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)
        assert p.dtype == torch.float64
    bound = 1.0 / math.sqrt(POLICY_INPUT_DIM)
    assert a.layers[0].weight.abs().max().item() <= bound


def test_gradcheck_on_every_network_kind():
    errors = gradcheck_networks([32, 32], seed=0)
    assert set(errors) == {"actor", "critic", "stochastic_actor", "value"}
    assert max(errors.values()) < 1e-4


def test_gradcheck_on_tanh_network():
    net = Mlp([5, 6, 3], hidden_activation=Activation.TANH, output_activation=Activation.TANH)
    inputs = torch.randn((4, 5), generator=torch.Generator().manual_seed(1), dtype=DTYPE)
    assert gradcheck(net, inputs, seed=1) < 1e-4


def test_adam_first_step_moves_by_learning_rate():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=DTYPE))
    optimizer = make_adam([p], learning_rate=0.1)
    adam_step(optimizer, (p * torch.tensor([3.0, -0.5], dtype=DTYPE)).sum())
    np.testing.assert_allclose(p.detach().numpy(), [0.9, -1.9], rtol=1e-6)


def test_adam_with_zero_gradient_keeps_parameters():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0], dtype=DTYPE))
    optimizer = make_adam([p], learning_rate=0.1)
    adam_step(optimizer, (p * 0.0).sum())
    np.testing.assert_array_equal(p.detach().numpy(), [1.0, -2.0])


def test_adam_refuses_non_finite_values():
    p = torch.nn.Parameter(torch.tensor([1.0], dtype=DTYPE))
    optimizer = make_adam([p], learning_rate=0.1)
    with pytest.raises(NonFiniteError):
        adam_step(optimizer, (p * math.nan).sum())

    p.grad = torch.tensor([math.inf], dtype=DTYPE)
    with pytest.raises(NonFiniteError):
        adam_step(optimizer)
    assert p.item() == 1.0


def test_polyak_update():
    online = Mlp([3, 2], generator=torch.Generator().manual_seed(0))
    target = Mlp([3, 2], generator=torch.Generator().manual_seed(1))
    before = [p.clone() for p in target.parameters()]

    polyak_update(target, online, 0.5)
    for t, o, b in zip(target.parameters(), online.parameters(), before):
        torch.testing.assert_close(t, 0.5 * o + 0.5 * b)

    polyak_update(target, online, 1.0)
    for t, o in zip(target.parameters(), online.parameters()):
        torch.testing.assert_close(t, o)

    with pytest.raises(ValueError):
        polyak_update(target, online, 0.0)
    with pytest.raises(StructuralError):
        polyak_update(Mlp([3, 3]), online, 0.5)


### GAUSSIAN POLICY HEAD ###

def test_deterministic_sample_is_the_mean():
    head = GaussianHead(-5.0, 1.0, squash=False)
    mean = torch.tensor([[0.3, -0.2, 1.0, 2.0]], dtype=DTYPE)
    sample = head.sample(mean, torch.zeros_like(mean), torch.tensor([[1.0, 1.0, 1.0, 0.0]]), deterministic=True)
    np.testing.assert_allclose(sample.action.numpy(), [[0.3, -0.2, 1.0, 0.0]])


def test_unsquashed_density_matches_scipy():
    head = GaussianHead(-5.0, 1.0, squash=False)
    mean = torch.tensor([0.5, -1.0, 0.0, 0.0], dtype=DTYPE)
    log_std = torch.tensor([0.0, -0.5, 0.2, 0.0], dtype=DTYPE)
    action = torch.tensor([1.0, -0.4, 0.3, 9.0], dtype=DTYPE)
    mask = torch.tensor([1.0, 1.0, 1.0, 0.0], dtype=DTYPE)

    expected = stats.norm.logpdf(action[:3].numpy(), mean[:3].numpy(), np.exp(log_std[:3].numpy())).sum()
    assert head.log_prob(mean, log_std, action, mask).item() == pytest.approx(expected)

    entropy = stats.norm.entropy(scale=np.exp(log_std[:3].numpy())).sum()
    assert head.entropy(log_std, mask).item() == pytest.approx(entropy)


def test_monte_carlo_moments():
    head = GaussianHead(-5.0, 1.0, squash=False)
    n = 20_000
    mean = torch.full((n, 4), 0.5, dtype=DTYPE)
    log_std = torch.full((n, 4), math.log(2.0), dtype=DTYPE)
    sample = head.sample(mean, log_std, torch.ones(4), generator=torch.Generator().manual_seed(0))
    assert sample.action.mean().item() == pytest.approx(0.5, abs=0.05)
    assert sample.action.std().item() == pytest.approx(2.0, rel=0.02)


def test_log_std_is_clamped():
    head = GaussianHead(-5.0, 1.0, squash=False)
    clamped = head.clamp_log_std(torch.tensor([-50.0, 0.0, 50.0], dtype=DTYPE))
    np.testing.assert_array_equal(clamped.numpy(), [-5.0, 0.0, 1.0])


def test_squashed_density_applies_change_of_variables():
    head = GaussianHead(-20.0, 2.0, squash=True, low=LOW, high=HIGH)
    mean = torch.tensor([0.4, -0.8, 0.1, 0.0], dtype=DTYPE)
    log_std = torch.tensor([-0.3, 0.1, 0.0, 0.0], dtype=DTYPE)
    mask = torch.tensor([1.0, 1.0, 1.0, 0.0], dtype=DTYPE)
    sample = head.sample(mean, log_std, mask, deterministic=True)

    u = mean[:3].numpy()
    expected = (
        stats.norm.logpdf(u, u, np.exp(log_std[:3].numpy())) - np.log(3.0) - np.log(1.0 - np.tanh(u) ** 2)
    ).sum()
    assert sample.log_prob.item() == pytest.approx(expected)
    np.testing.assert_allclose(sample.action.numpy(), [*(3.0 * np.tanh(u)), 0.0])


def test_squashed_samples_stay_in_bounds():
    head = GaussianHead(-20.0, 2.0, squash=True, low=LOW, high=HIGH)
    mean = torch.tensor([[50.0, -50.0, 0.0, 0.0]], dtype=DTYPE).repeat(1000, 1)
    sample = head.sample(mean, torch.zeros_like(mean), torch.ones(4), generator=torch.Generator().manual_seed(2))
    assert torch.all(sample.action < 3.0) and torch.all(sample.action > -3.0)
    assert torch.all(torch.isfinite(sample.log_prob))


def test_masked_slots_do_not_change_log_prob():
    head = GaussianHead(-20.0, 2.0, squash=True, low=LOW, high=HIGH)
    mask = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=DTYPE)
    a = head.sample(torch.tensor([0.1, 0.2, 0.0, 0.0], dtype=DTYPE), torch.zeros(4, dtype=DTYPE), mask,
                    deterministic=True)
    b = head.sample(torch.tensor([0.1, 0.2, 7.0, -3.0], dtype=DTYPE), torch.zeros(4, dtype=DTYPE), mask,
                    deterministic=True)
    assert a.log_prob.item() == pytest.approx(b.log_prob.item())
    assert torch.equal(b.action[2:], torch.zeros(2, dtype=DTYPE))


def test_head_configuration_errors():
    with pytest.raises(ValueError):
        GaussianHead(1.0, 1.0, squash=False)
    with pytest.raises(ValueError):
        GaussianHead(-1.0, 1.0, squash=True)
    with pytest.raises(UsageError):
        GaussianHead(-1.0, 1.0, squash=True, low=LOW, high=HIGH).log_prob(
            torch.zeros(4), torch.zeros(4), torch.zeros(4), torch.ones(4)
        )


### ACTORS AND CRITICS ###

def test_deterministic_actor_respects_bounds_and_mask():
    actor = DeterministicActor([16, 16], LOW, HIGH, torch.Generator().manual_seed(0))
    inputs = batch_inputs(32, mask=(1.0, 1.0, 0.0, 1.0))
    with torch.no_grad():
        actions = actor(inputs)
    assert actions.shape == (32, 4)
    assert torch.all(actions.abs() <= 3.0)
    assert torch.all(actions[:, 2] == 0.0)


def test_critic_ignores_masked_action_slots():
    critic = QCritic([16, 16], torch.Generator().manual_seed(0))
    inputs = batch_inputs(8, mask=(1.0, 1.0, 0.0, 0.0))
    actions = np.zeros((8, 4))
    other = actions.copy()
    other[:, 2:] = 2.5
    with torch.no_grad():
        torch.testing.assert_close(critic(inputs, actions), critic(inputs, other))
        assert critic(inputs, actions).shape == (8,)


def test_stochastic_actor_and_value_shapes():
    actor = StochasticActor([16], GaussianHead(-5.0, 1.0, squash=False), torch.Generator().manual_seed(0))
    value = ValueNet([16], torch.Generator().manual_seed(0))
    inputs = batch_inputs(5, mask=(1.0, 1.0, 1.0, 0.0))
    with torch.no_grad():
        sample = actor.sample(inputs, generator=torch.Generator().manual_seed(1))
        assert sample.action.shape == (5, 4) and sample.log_prob.shape == (5,)
        assert torch.all(sample.action[:, 3] == 0.0)
        assert value(inputs).shape == (5,)


### CHECKPOINTS ###

def test_checkpoint_round_trip(tmp_path):
    run_config = build_run_config({"algorithm": {"name": "ddpg", "hidden_sizes": [16, 16]}}).to_dict()
    actor = DeterministicActor([16, 16], LOW, HIGH, torch.Generator().manual_seed(0))
    optimizer = make_adam(actor.parameters(), 1e-3)
    path = str(tmp_path / "ddpg_CLCMT_best.pth")
    save_checkpoint(path, "ddpg", {"actor": actor}, {"actor": optimizer}, run_config, extra={"episode": 3})

    checkpoint = load_checkpoint(path)
    assert checkpoint["algorithm"] == "ddpg"
    assert checkpoint["hidden_sizes"] == [16, 16]
    assert checkpoint["extra"] == {"episode": 3}

    restored = DeterministicActor([16, 16], LOW, HIGH, torch.Generator().manual_seed(99))
    restored.load_state_dict(checkpoint["networks"]["actor"])
    inputs = batch_inputs(4)
    with torch.no_grad():
        torch.testing.assert_close(restored(inputs), actor(inputs))


def test_checkpoint_version_is_checked(tmp_path):
    path = str(tmp_path / "old.pth")
    torch.save({"version": 0}, path)
    with pytest.raises(StructuralError):
        load_checkpoint(path)
