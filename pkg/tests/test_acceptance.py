"""Acceptance criteria; each test prints one PASS/FAIL line (also summarized at the end of the run)."""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from odelt import checkpoint as ckpt_io
from odelt.cli import main as cli_main
from odelt.data import generate
from odelt.evaluation import energy_distance, length_gap, linear_r2, time_forwards, wasserstein2
from odelt.experiments import TOY_DATA, TOY_NET, train_toy, w2_by_length
from odelt.netcore import NetConfig, init_params
from odelt.solvers import SolverSpec, dopri5_solve, euler_solve, sample_model
from odelt.train import TrainConfig, compute_loss, field_at_lengths, make_batch
from odelt.rng import make_rng

from conftest import autograd_gradient, fd_gradient, randomize, rel_err, report_criterion

REFERENCE = Path(__file__).parent / "reference" / "w2_threshold.json"
F64 = torch.float64

_RUNS = {}


def _run(lc_fraction):
    if lc_fraction not in _RUNS:
        t0 = time.perf_counter()
        ckpt = train_toy(seed=0, lc_fraction=lc_fraction)
        ckpt.history["train_s"] = time.perf_counter() - t0
        _RUNS[lc_fraction] = ckpt
    return _RUNS[lc_fraction]


# 1. gradients


def test_criterion_1_gradients():
    net = NetConfig(data_dim=2, hidden_dim=16, L=4, G=1, L_min=1, embed_dim=8)
    data = generate(TOY_DATA)
    cfg = TrainConfig(batch_size=8, lc_fraction=0.5)
    start = time.perf_counter()
    worst = 0.0
    for draw in range(20):
        model = randomize(init_params(net, dtype=F64), seed=100 + draw, std=0.3)
        batch = make_batch(make_rng(draw, 2), data, cfg, net, F64)
        with torch.no_grad():
            teacher = model(batch.x_t, batch.t, net.L).clone()
        mask = torch.as_tensor(batch.is_lc, dtype=F64)

        def frozen():
            v = field_at_lengths(model, batch.x_t, batch.t, batch.l)
            return (((v - batch.target) ** 2).sum(-1) + mask * ((v - teacher) ** 2).sum(-1)).mean()

        auto = autograd_gradient(lambda: compute_loss(model, batch).total, model)
        worst = max(worst, rel_err(auto, fd_gradient(frozen, model)))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed <= 120
    assert report_criterion(1, ok, f"max relative gradient error {worst:.2e} (<= 1e-4) over 20 draws in {elapsed:.0f}s (<= 120s)")


# 2. monolithic equivalence and endpoint identity


def _plain_stack(model, x, t, l):
    c = torch.nn.functional.silu(model.embed_condition(t, l, x.shape[0]))
    r, v = x, torch.zeros_like(x)
    for blk in model.blocks[:l]:
        o = blk(r, c)
        v, r = v + o, r + o
    return v


def test_criterion_2_monolithic_and_endpoint():
    x = torch.as_tensor(np.random.default_rng(0).normal(size=(64, 2)))
    t = torch.as_tensor(np.random.default_rng(1).random(64))
    mono = randomize(init_params(NetConfig(hidden_dim=32, L=6, G=6, L_min=6, embed_dim=16), dtype=F64), seed=2, std=0.2)
    a, b = mono(x, t, 6), _plain_stack(mono, x, t, 6)
    mono_err = rel_err(a, b)
    worst_endpoint = 0.0
    for cfg in (NetConfig(hidden_dim=32, L=6, G=2, L_min=2, embed_dim=16), NetConfig(hidden_dim=32, L=12, G=4, L_min=4, embed_dim=16)):
        m = randomize(init_params(cfg, dtype=F64), seed=3, std=0.2)
        for l in cfg.admissible_lengths:
            r = m.residuals(x, t, l)
            worst_endpoint = max(worst_endpoint, rel_err(m(x, t, l), (r[-1] - x) * (l // cfg.G)))
    ok = mono_err <= 1e-6 and worst_endpoint <= 1e-6
    assert report_criterion(2, ok, f"G=L vs plain stack rel {mono_err:.1e}; endpoint identity worst rel {worst_endpoint:.1e} (<= 1e-6)")


# 3. solver oracles


def test_criterion_3_solvers():
    x0 = torch.tensor([[1.0, -2.0]], dtype=F64)
    e_euler = float((euler_solve(lambda t, x: x, x0, 128)[0] - x0 * (1 + 1 / 128) ** 128).abs().max())
    e_dp = float((dopri5_solve(lambda t, x: -x, x0, SolverSpec("dopri5", rtol=1e-6, atol=1e-6))[0] - x0 * math.exp(-1)).norm())
    err = {T: float((euler_solve(lambda t, x: x, x0, T)[0] - math.e * x0).abs().max()) for T in (16, 32, 64, 128)}
    ratios = [err[T] / err[2 * T] for T in (16, 32, 64)]
    ok = e_euler <= 1e-10 and e_dp <= 1e-5 and all(1.8 <= r <= 2.2 for r in ratios)
    detail = f"Euler closed form {e_euler:.1e}; Dopri5 decay {e_dp:.1e}; Euler ratios {', '.join(f'{r:.3f}' for r in ratios)}"
    assert report_criterion(3, ok, detail)


# 4. trained quality ordering


@pytest.fixture(scope="module")
def w2():
    return w2_by_length(_run(0.125))


def test_criterion_4a_threshold(w2):
    ref = json.loads(REFERENCE.read_text())
    theta = ref["theta"]
    secs = _run(0.125).history["train_s"]
    ok = w2[6] <= theta and secs <= 20 * 60
    assert report_criterion("4a", ok, f"W2(l=6, Euler T=128) {w2[6]:.4f} <= theta {theta:.4f}; training {secs:.0f}s (<= 1200s)")


def test_criterion_4b_mid_length(w2):
    ok = w2[4] <= 1.5 * w2[6]
    assert report_criterion("4b", ok, f"W2(l=4) {w2[4]:.4f} <= 1.5 * W2(l=6) = {1.5 * w2[6]:.4f}")


def test_criterion_4c_full_vs_min_length(w2):
    ok = w2[6] <= w2[2]
    assert report_criterion("4c", ok, f"W2(l=6) {w2[6]:.4f} <= W2(l=2) {w2[2]:.4f}")


@pytest.mark.xfail(strict=True, reason="the CFM loss has an irreducible floor near 3.57 against an initial value near 6.0")
def test_smoke_loss_halves():
    loss = _run(0.125).history["loss_cfm"]
    assert loss[-100:].mean() < 0.5 * loss[:100].mean()


# 5. length-consistency effect


def test_criterion_5_length_consistency():
    with_lc, without = _run(0.125), _run(0.0)
    pts = generate(TOY_DATA).points
    path = with_lc.train_config.path
    gap_lc = length_gap(with_lc.build_model(), path, pts, seed=11)
    gap_0 = length_gap(without.build_model(), path, pts, seed=11)
    early = with_lc.history["gap_early"]
    m_lc, m_0, m_early = np.mean(list(gap_lc.values())), np.mean(list(gap_0.values())), np.mean(list(early.values()))
    ok = m_lc < 0.25 * m_early and m_lc < m_0
    detail = (
        f"gap after training {m_lc:.4f} < 25% of gap at iter 100 ({m_early:.4f}); K=1/8 {m_lc:.4f} < K=0 {m_0:.4f} "
        f"[per l: {', '.join(f'{l}: {gap_lc[l]:.4f}/{gap_0[l]:.4f}' for l in gap_lc)}]"
    )
    assert report_criterion(5, ok, detail)


# 6. cross-solver agreement


def test_criterion_6_cross_solver():
    model = _run(0.125).build_model()
    worst = 0.0
    for l in TOY_NET.admissible_lengths:
        a, _ = sample_model(model, SolverSpec("dopri5", rtol=1e-5), l, 1024, seed=3)
        b, _ = sample_model(model, SolverSpec("euler", T=4096), l, 1024, seed=3)
        worst = max(worst, float(np.sqrt(((a - b) ** 2).sum(-1).mean())))
    assert report_criterion(6, worst <= 1e-2, f"max RMS endpoint difference Dopri5(1e-5) vs Euler(4096) {worst:.2e} (<= 1e-2)")


# 7. latency linearity


def test_criterion_7_latency():
    field = init_params(TOY_NET, seed=0)
    plain = init_params(NetConfig(hidden_dim=128, L=6, G=6, L_min=6), seed=0)
    plain.load_state_dict(field.state_dict() | {"length_embed": plain.length_embed.detach()})
    lengths = list(TOY_NET.admissible_lengths)
    cases = [(field, l) for l in lengths] + [(plain, 6)]
    times = time_forwards(cases, n=1024, repeats=200, warmup=10)
    r2 = linear_r2(lengths, times[:3])
    overhead = times[2] / times[3] - 1.0
    ok = r2 >= 0.95 and abs(overhead) <= 0.02
    ms = ", ".join(f"l={l}: {1e3 * s:.2f}ms" for l, s in zip(lengths, times))
    assert report_criterion(7, ok, f"R^2 {r2:.4f} (>= 0.95) [{ms}]; l=L vs plain stack {100 * overhead:+.2f}% (within 2%)")


# 8. determinism


def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "c.ini"
    cfg.write_text("[train]\niterations = 200\nlog_every = 50\n")
    files = []
    for run in ("a", "b"):
        root = tmp_path / run
        assert cli_main(["--runs-root", str(root), "train", "--config", str(cfg)]) == 0
        (ck,) = root.glob("*/checkpoint.odlt")
        out = root / "samples.csv"
        assert cli_main(["--runs-root", str(root), "sample", "--checkpoint", str(ck), "--length", "4", "--seed", "7", "--out", str(out)]) == 0
        telem = [ln.rsplit(",", 1)[0] for ln in (ck.parent / "telemetry.csv").read_text().splitlines()]
        files.append((ck.read_bytes(), out.read_bytes(), telem))
    (ck_a, s_a, t_a), (ck_b, s_b, t_b) = files
    ok = ck_a == ck_b and s_a == s_b and t_a == t_b
    assert report_criterion(8, ok, f"checkpoint bytes equal {ck_a == ck_b}; samples CSV equal {s_a == s_b}; telemetry (minus wall_ms) equal {t_a == t_b}")


# 9. metric oracles


def _w2_brute(a, b):
    from itertools import permutations

    n = len(a)
    return math.sqrt(min(sum(float(((a[i] - b[p[i]]) ** 2).sum()) for i in range(n)) for p in permutations(range(n))) / n)


def _energy_loops(a, b):
    def md(p, q):
        return sum(math.dist(x, y) for x in p for y in q) / (len(p) * len(q))

    return 2 * md(a, b) - md(a, a) - md(b, b)


def test_criterion_9_metric_oracles():
    rng = np.random.default_rng(9)
    w_err = 0.0
    for trial in range(1000):
        n = 3 if trial < 500 else 4
        a, b = rng.normal(size=(n, 2)), rng.normal(size=(n, 2))
        w_err = max(w_err, abs(wasserstein2(a, b) - _w2_brute(a, b)))
    e_err = 0.0
    for _ in range(50):
        a, b = rng.normal(size=(rng.integers(2, 30), 2)), rng.normal(size=(rng.integers(2, 30), 2)) + 0.3
        e_err = max(e_err, abs(energy_distance(a, b) - _energy_loops(a.tolist(), b.tolist())))
    ok = w_err <= 1e-9 and e_err <= 1e-12
    assert report_criterion(9, ok, f"W2 vs brute force max err {w_err:.1e} (<= 1e-9); energy vs double loop {e_err:.1e} (<= 1e-12)")
