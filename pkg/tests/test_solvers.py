import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from odelt.netcore import NetConfig, init_params
from odelt.rng import STREAM_SAMPLE, make_rng
from odelt.solvers import (
    DEFAULT_GUIDANCE,
    GuidedField,
    MaxStepsExceeded,
    NonFiniteState,
    SolverSpec,
    dopri5_solve,
    euler_solve,
    guided_field,
    sample_model,
)

from conftest import randomize

F64 = torch.float64
X0 = torch.tensor([[1.0, -0.5], [0.25, 2.0]], dtype=F64)


class Counted:
    def __init__(self, fn, evals_per_call=1):
        self.fn, self.calls, self.times = fn, 0, []
        self.evals_per_call = evals_per_call

    def __call__(self, t, x):
        self.calls += 1
        self.times.append(t)
        return self.fn(t, x)


def test_euler_single_step():
    field = lambda t, x: torch.sin(x) + t
    x1, stats = euler_solve(field, X0, 1)
    assert torch.equal(x1, X0 + field(0.0, X0))
    assert stats.nfe == 1


@pytest.mark.parametrize("T", [1, 7, 64])
def test_euler_zero_field(T):
    x1, _ = euler_solve(lambda t, x: torch.zeros_like(x), X0, T)
    assert torch.equal(x1, X0)


def test_euler_linear_closed_form():
    x1, stats = euler_solve(lambda t, x: x, X0, 128)
    exact = X0 * (1 + 1 / 128) ** 128
    assert (x1 - exact).abs().max() <= 1e-10
    assert stats.nfe == 128 and stats.accepted_steps == 128
    assert abs(float(exact[0, 0]) - math.e) < 0.011  # approaches e * x0


def test_euler_first_order_convergence():
    err = {T: float((euler_solve(lambda t, x: x, X0, T)[0] - math.e * X0).abs().max()) for T in (16, 32, 64, 128)}
    for T in (16, 32, 64):
        assert 1.8 <= err[T] / err[2 * T] <= 2.2


@settings(max_examples=30, deadline=None)
@given(st.floats(-2, 2), st.integers(1, 50))
def test_euler_linear_any_rate(lam, T):
    x1, _ = euler_solve(lambda t, x: lam * x, X0, T)
    torch.testing.assert_close(x1, X0 * (1 + lam / T) ** T, rtol=1e-12, atol=1e-12)


def test_euler_non_finite_step():
    field = lambda t, x: torch.full_like(x, math.inf) if t >= 2 / 8 else x
    with pytest.raises(NonFiniteState) as err:
        euler_solve(field, X0, 8)
    assert err.value.step == 3


def test_dopri5_constant_field_exact():
    c = torch.tensor([[0.3, -1.1], [2.0, 0.5]], dtype=F64)
    field = Counted(lambda t, x: c)
    x1, stats = dopri5_solve(field, X0, SolverSpec("dopri5", rtol=1e-6))
    torch.testing.assert_close(x1, X0 + c, rtol=0, atol=1e-14)
    assert stats.rejected_steps == 0
    assert max(field.times) == 1.0


def test_dopri5_decay():
    x1, _ = dopri5_solve(lambda t, x: -x, X0, SolverSpec("dopri5", rtol=1e-6, atol=1e-6))
    assert (x1 - math.exp(-1) * X0).norm() <= 1e-5


def test_dopri5_tighter_tolerance_costs_more():
    _, loose = dopri5_solve(lambda t, x: x, X0, SolverSpec("dopri5", rtol=1e-3))
    _, tight = dopri5_solve(lambda t, x: x, X0, SolverSpec("dopri5", rtol=1e-8))
    assert tight.nfe > loose.nfe


def test_dopri5_halving_rtol_never_hurts():
    errs = []
    for k in range(14):
        rtol = 1e-3 * 2.0**-k
        x1, _ = dopri5_solve(lambda t, x: x, X0, SolverSpec("dopri5", rtol=rtol))
        errs.append(float((x1 - math.e * X0).abs().max()))
    assert all(b <= a for a, b in zip(errs, errs[1:])), errs


@pytest.mark.parametrize("rtol", [1e-2, 1e-5, 1e-8])
def test_dopri5_nfe_accounting(rtol):
    field = Counted(lambda t, x: math.cos(3 * t) * x - x**3)
    _, stats = dopri5_solve(field, X0, SolverSpec("dopri5", rtol=rtol))
    assert stats.nfe == field.calls == 6 * (stats.accepted_steps + stats.rejected_steps) + 1


def test_dopri5_counts_guided_evaluations_twice():
    field = Counted(lambda t, x: -x, evals_per_call=2)
    _, stats = dopri5_solve(field, X0, SolverSpec("dopri5", rtol=1e-4))
    assert stats.nfe == 2 * field.calls


def test_dopri5_ends_exactly_at_one():
    field = Counted(lambda t, x: math.sin(10 * t) * x)
    dopri5_solve(field, X0, SolverSpec("dopri5", rtol=1e-4, initial_dt=0.3))
    assert max(field.times) == 1.0


def test_dopri5_max_steps():
    with pytest.raises(MaxStepsExceeded) as err:
        dopri5_solve(lambda t, x: 50 * math.sin(50 * t) * x, X0, SolverSpec("dopri5", rtol=1e-10, max_steps=5))
    e = err.value
    assert e.stats.accepted_steps + e.stats.rejected_steps == 5
    assert 0.0 <= e.t < 1.0 and e.x.shape == X0.shape


def test_solver_spec_validation():
    with pytest.raises(ValueError):
        SolverSpec(T=0)
    with pytest.raises(ValueError):
        SolverSpec("dopri5", rtol=0.0)
    assert SolverSpec("dopri5", rtol=0.1).abs_tol == 0.1


def _cond_model(seed=0, zero=False):
    cfg = NetConfig(hidden_dim=16, L=4, G=2, L_min=2, embed_dim=8, num_classes=3)
    m = init_params(cfg, seed=seed, dtype=F64)
    return m if zero else randomize(m, seed=seed + 1)


def test_guidance_zero_weight_is_conditional():
    m = _cond_model()
    x = X0.clone()
    assert torch.equal(guided_field(m, 4, None, 0.3, x, label=1, w=0.0), m(x, 0.3, 4, None, 1))
    v = guided_field(m, 4, None, 0.3, x, label=1, w=DEFAULT_GUIDANCE)
    expected = 2.5 * m(x, 0.3, 4, None, 1) - 1.5 * m(x, 0.3, 4, None, None)
    torch.testing.assert_close(v, expected, rtol=0, atol=1e-14)


def test_guidance_independent_of_weight_when_fields_agree():
    m = _cond_model(zero=True)
    base = guided_field(m, 4, None, 0.5, X0, label=2, w=0.0)
    for w in (0.5, 1.5, 4.0):
        assert torch.equal(guided_field(m, 4, None, 0.5, X0, label=2, w=w), base)


def test_guidance_validation():
    m = _cond_model()
    with pytest.raises(ValueError):
        GuidedField(m, 4, label=3, w=1.5)
    with pytest.raises(ValueError):
        GuidedField(init_params(NetConfig(hidden_dim=8, embed_dim=8)), 6, w=1.5)
    assert DEFAULT_GUIDANCE == 1.5


@pytest.mark.parametrize("spec", [SolverSpec("euler", T=5), SolverSpec("dopri5", rtol=1e-3)])
def test_sample_zero_field_returns_prior(spec):
    m = init_params(NetConfig(hidden_dim=16, embed_dim=8), seed=0)
    pts, _ = sample_model(m, spec, 4, n=33, seed=9)
    prior = make_rng(9, STREAM_SAMPLE).standard_normal((33, 2))
    np.testing.assert_array_equal(pts, prior.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize("spec", [SolverSpec("euler", T=6), SolverSpec("dopri5", rtol=1e-4)])
def test_sample_deterministic(spec):
    m = randomize(init_params(NetConfig(hidden_dim=16, embed_dim=8)), seed=3, std=0.2)
    a, _ = sample_model(m, spec, 6, n=17, seed=4)
    b, _ = sample_model(m, spec, 6, n=17, seed=4)
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("spec", [SolverSpec("euler", T=6), SolverSpec("dopri5", rtol=1e-4)])
@pytest.mark.parametrize("w", [0.0, 1.5])
def test_reported_nfe_matches_network_calls(spec, w):
    m = _cond_model(seed=2)
    calls = [0]
    m.register_forward_hook(lambda *a: calls.__setitem__(0, calls[0] + 1))
    _, stats = sample_model(m, spec, 2, n=8, seed=0, w=w, label=torch.tensor([0, 1, 2, 0, 1, 2, 0, 1]))
    assert stats.nfe == calls[0]
    if spec.kind == "euler":
        assert stats.nfe == spec.T * (2 if w else 1)
