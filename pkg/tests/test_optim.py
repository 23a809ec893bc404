import numpy as np
import pytest
import torch
from torch import nn

from nucseg.optim import PRESETS, Optimizer, OptimizerConfig


def _model(seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(nn.Linear(6, 5), nn.Tanh(), nn.Linear(5, 2))


def _data(seed=1, n=8):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn((n, 6), generator=gen)
    y = torch.randn((n, 2), generator=gen)
    return x, y


def _train_steps(model, opt, steps, backward_only=False):
    x, y = _data()
    for _ in range(steps):
        opt.zero_grad()
        loss = ((model(x) - y) ** 2).sum()
        loss.backward()
        if not backward_only:
            opt.step()


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(preset="adagrad")
    with pytest.raises(ValueError):
        OptimizerConfig(learning_rate=-1e-3)
    assert set(PRESETS) == {"rmsprop", "adam", "sgd"}


@pytest.mark.parametrize("preset", PRESETS)
def test_updates_match_torch_reference(preset):
    ours = _model()
    ref = _model()
    for p_a, p_b in zip(ours.parameters(), ref.parameters()):
        assert torch.equal(p_a, p_b)

    lr = 1e-2
    opt = Optimizer(dict(ours.named_parameters()), OptimizerConfig(preset, lr))
    if preset == "rmsprop":
        topt = torch.optim.RMSprop(ref.parameters(), lr=lr, alpha=0.99, eps=1e-8)
    elif preset == "adam":
        topt = torch.optim.Adam(ref.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8)
    else:
        topt = torch.optim.SGD(ref.parameters(), lr=lr)

    x, y = _data()
    for _ in range(20):
        opt.zero_grad()
        ((ours(x) - y) ** 2).sum().backward()
        opt.step()
        topt.zero_grad()
        ((ref(x) - y) ** 2).sum().backward()
        topt.step()

    # adam differs from torch only in float op ordering; the others match
    # the reference bitwise.
    atol = 1e-6 if preset == "adam" else 0.0
    for (name, p_a), p_b in zip(ours.named_parameters(), ref.parameters()):
        np.testing.assert_allclose(
            p_a.detach().numpy(), p_b.detach().numpy(), rtol=0.0, atol=atol, err_msg=name
        )


@pytest.mark.parametrize("preset", PRESETS)
def test_state_round_trip_resumes_bit_exactly(preset):
    cfg = OptimizerConfig(preset, 5e-3)
    model_a = _model()
    opt_a = Optimizer(dict(model_a.named_parameters()), cfg)
    _train_steps(model_a, opt_a, 7)

    saved_state = opt_a.state_arrays()
    saved_meta = opt_a.meta()
    saved_params = {k: v.detach().numpy().copy() for k, v in model_a.named_parameters()}

    model_b = _model(seed=9)  # different init, then overwritten
    with torch.no_grad():
        for name, p in model_b.named_parameters():
            p.copy_(torch.from_numpy(saved_params[name]))
    opt_b = Optimizer(dict(model_b.named_parameters()), cfg)
    opt_b.load_state(saved_state, saved_meta)
    assert opt_b.step_count == opt_a.step_count

    _train_steps(model_a, opt_a, 5)
    _train_steps(model_b, opt_b, 5)
    for (name, p_a), (_, p_b) in zip(model_a.named_parameters(), model_b.named_parameters()):
        assert torch.equal(p_a, p_b), name


def test_state_arrays_keyed_by_param_and_slot():
    model = _model()
    opt = Optimizer(dict(model.named_parameters()), OptimizerConfig("adam", 1e-3))
    keys = set(opt.state_arrays())
    for name, _ in model.named_parameters():
        assert f"{name}/exp_avg" in keys
        assert f"{name}/exp_avg_sq" in keys
    assert len(keys) == 2 * len(list(model.named_parameters()))

    sgd = Optimizer(dict(model.named_parameters()), OptimizerConfig("sgd", 1e-3))
    assert sgd.state_arrays() == {}


def test_zero_learning_rate_is_a_no_op():
    model = _model()
    before = {k: v.detach().numpy().copy() for k, v in model.named_parameters()}
    opt = Optimizer(dict(model.named_parameters()), OptimizerConfig("rmsprop", 0.0))
    _train_steps(model, opt, 3)
    for name, p in model.named_parameters():
        assert np.array_equal(p.detach().numpy(), before[name]), name


def test_step_skips_parameters_without_gradients():
    model = _model()
    before = {k: v.detach().numpy().copy() for k, v in model.named_parameters()}
    opt = Optimizer(dict(model.named_parameters()), OptimizerConfig("sgd", 1.0))
    opt.zero_grad()
    opt.step()  # no backward happened
    for name, p in model.named_parameters():
        assert np.array_equal(p.detach().numpy(), before[name]), name
    assert opt.step_count == 1


def test_load_state_rejects_preset_mismatch():
    model = _model()
    adam = Optimizer(dict(model.named_parameters()), OptimizerConfig("adam", 1e-3))
    rms = Optimizer(dict(model.named_parameters()), OptimizerConfig("rmsprop", 1e-3))
    with pytest.raises(ValueError):
        rms.load_state(adam.state_arrays(), adam.meta())


def test_load_state_rejects_missing_slot():
    model = _model()
    opt = Optimizer(dict(model.named_parameters()), OptimizerConfig("rmsprop", 1e-3))
    arrays = opt.state_arrays()
    arrays.pop(sorted(arrays)[0])
    fresh = Optimizer(dict(model.named_parameters()), OptimizerConfig("rmsprop", 1e-3))
    with pytest.raises(ValueError):
        fresh.load_state(arrays, opt.meta())


def test_meta_records_preset_rate_and_steps():
    model = _model()
    opt = Optimizer(dict(model.named_parameters()), OptimizerConfig("adam", 2e-4))
    _train_steps(model, opt, 4)
    meta = opt.meta()
    assert meta["preset"] == "adam"
    assert meta["learning_rate"] == 2e-4
    assert meta["step_count"] == 4
