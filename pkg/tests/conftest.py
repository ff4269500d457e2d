import numpy as np
import pytest
import torch

from odelt.netcore import NetConfig, init_params


def randomize(model, seed=0, std=0.3):
    """Overwrite every parameter (incl. zero-init ones) with N(0, std^2) draws."""
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for _, p in sorted(model.named_parameters()):
            p.copy_(torch.from_numpy(rng.normal(0.0, std, tuple(p.shape))))
    return model


@pytest.fixture
def tiny_config():
    return NetConfig(data_dim=2, hidden_dim=16, L=4, G=1, L_min=1, embed_dim=8)


@pytest.fixture
def tiny_model(tiny_config):
    return randomize(init_params(tiny_config, seed=0, dtype=torch.float64), seed=1)


def flat_params(model):
    return torch.nn.utils.parameters_to_vector(model.parameters()).detach().clone()


def fd_gradient(loss_fn, model, h=1e-5):
    """Central finite differences of ``loss_fn()`` w.r.t. every parameter of ``model``."""
    grads = []
    with torch.no_grad():
        for p in model.parameters():
            flat = p.view(-1)
            g = torch.zeros_like(flat)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + h
                up = float(loss_fn())
                flat[i] = orig - h
                down = float(loss_fn())
                flat[i] = orig
                g[i] = (up - down) / (2 * h)
            grads.append(g)
    return torch.cat(grads)


def autograd_gradient(loss_fn, model):
    model.zero_grad(set_to_none=True)
    loss_fn().backward()
    return torch.cat([p.grad.reshape(-1) if p.grad is not None else torch.zeros(p.numel(), dtype=p.dtype)
                      for p in model.parameters()])


def rel_err(a, b):
    a, b = a.detach(), b.detach()
    return float((a - b).norm() / max(float(a.norm()), float(b.norm()), 1e-300))


ACCEPTANCE_LINES = []


def report_criterion(name, passed, detail):
    """Record and print one acceptance verdict line."""
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
