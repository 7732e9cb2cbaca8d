import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from realign.config import dataset_from_result
from realign.diffusion import (DenoiserParams, NetConfig, NonFiniteError, attach_adapter, init_denoiser,
                               make_linear_schedule)
from realign.evaluation import generate, sliced_wasserstein
from realign.objectives import Stage1Config, Stage2Config
from realign.optim import OptimizerConfig, OptimState, optimizer_step, params_hash
from realign.training import (AdapterConfig, Checkpoint, TrainConfig, apply_prompt_dropout, fit_denoiser,
                              run_stage1, run_stage2)

from conftest import SMALL_NET, conds, perturbed

SCHED = make_linear_schedule(SMALL_NET.T, 1e-3, 0.3)
BASE = init_denoiser(SMALL_NET, np.random.default_rng(0))


def data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 4))
    return x, conds(rng.integers(0, 3, n)), x + 0.5 * rng.standard_normal((n, 4))


def s1cfg(**kw):
    base = dict(stage="stage1", optimizer=OptimizerConfig(lr=1e-3), steps=4, batch_size=8,
                stage1=Stage1Config(sampling_steps=4))
    base.update(kw)
    return TrainConfig(**base)


def s2cfg(**kw):
    base = dict(stage="stage2", optimizer=OptimizerConfig(lr=1e-3), steps=4, batch_size=8, prompt_dropout=0.0,
                stage2=Stage2Config(beta=0.5))
    base.update(kw)
    return TrainConfig(**base)


def same_params(a, b):
    return np.array_equal(a.flat(), b.flat())


# -- optimizer --------------------------------------------------------------------


def test_zero_gradient_leaves_params_and_advances_state():
    for kind in ("adam", "sgd"):
        cfg = OptimizerConfig(kind=kind, lr=0.1)
        grads = {k: torch.zeros_like(v) for k, v in BASE.weights.items()}
        new, state = optimizer_step(BASE, grads, OptimState(), cfg)
        assert same_params(new, BASE) and state.step == 1


def test_sgd_step_is_exact():
    g = {k: torch.as_tensor(np.random.default_rng(1).standard_normal(tuple(v.shape))) for k, v in BASE.weights.items()}
    new, _ = optimizer_step(BASE, g, OptimState(), OptimizerConfig(kind="sgd", lr=0.1))
    for k in g:
        assert torch.equal(new.weights[k], BASE.weights[k] - 0.1 * g[k])


def test_adam_converges_on_quadratic_bowl():
    a = torch.tensor([1.0, 4.0, 0.25], dtype=torch.float64)
    c = torch.tensor([1.5, -2.0, 0.3], dtype=torch.float64)
    p = DenoiserParams(None, {"w": torch.zeros(3, dtype=torch.float64)})
    state, cfg = OptimState(), OptimizerConfig(lr=1e-2)
    for _ in range(5000):
        p, state = optimizer_step(p, {"w": a * (p.weights["w"] - c)}, state, cfg)
    assert float((p.weights["w"] - c).abs().max()) < 1e-6


def test_optimizer_errors():
    g = {k: torch.zeros_like(v) for k, v in BASE.weights.items()}
    with pytest.raises(ValueError):
        optimizer_step(BASE, {"W0": g["W0"]}, OptimState(), OptimizerConfig())
    g["W0"] = g["W0"] + float("nan")
    with pytest.raises(NonFiniteError):
        optimizer_step(BASE, g, OptimState(), OptimizerConfig())


def test_warmup_is_linear_then_constant():
    cfg = OptimizerConfig(lr=1.0, warmup_steps=4)
    assert [cfg.lr_at(s) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]


def test_adapter_only_updates_leave_base_weights():
    adapted = attach_adapter(BASE, 2, 2.0, np.random.default_rng(0))
    g = {k: torch.ones_like(v) for k, v in adapted.adapter.factors.items()}
    new, _ = optimizer_step(adapted, g, OptimState(), OptimizerConfig(lr=0.1))
    assert all(torch.equal(new.weights[k], BASE.weights[k]) for k in BASE.weights)
    assert not torch.equal(new.adapter.factors["W0.up"], adapted.adapter.factors["W0.up"])


# -- prompt dropout --------------------------------------------------------------------


def test_prompt_dropout_rate_within_three_standard_errors():
    c = conds(np.arange(10_000) % 3)
    out, drop = apply_prompt_dropout(c, 0.2, np.random.default_rng(0))
    frac = np.mean(out[:, -1] == 1.0)
    se = math.sqrt(0.2 * 0.8 / 10_000)
    assert abs(frac - 0.2) < 3 * se and frac == drop.mean()
    assert np.array_equal(out[~drop], c[~drop])


# -- stage 1 ---------------------------------------------------------------------------


def test_stage1_zero_steps_returns_base():
    x, c, _ = data()
    res = run_stage1(BASE, x, c, s1cfg(steps=0), SCHED)
    assert same_params(res.params, BASE) and res.history == []


def test_stage1_zero_lr_returns_base_and_logs(tmp_path):
    x, c, _ = data()
    res = run_stage1(BASE, x, c, s1cfg(optimizer=OptimizerConfig(lr=0.0)), SCHED, run_dir=tmp_path)
    assert same_params(res.params, BASE)
    assert len(res.history) == 4 and (tmp_path / "logs" / "stage1.jsonl").read_text().count("\n") == 4
    assert {"loss", "real_branch", "policy_branch", "hinge_active_fraction", "grad_norm"} <= set(res.history[0])


def test_stage1_reference_is_the_untouched_base():
    x, c, _ = data()
    h = params_hash(BASE)
    res = run_stage1(BASE, x, c, s1cfg(), SCHED)
    assert params_hash(res.reference) == h == params_hash(BASE)
    assert res.reference.role == "reference" and not same_params(res.params, BASE)


def test_stage1_accumulation_equivalence_sgd():
    x, c, _ = data()
    opt = OptimizerConfig(kind="sgd", lr=1e-2)
    a = run_stage1(BASE, x, c, s1cfg(optimizer=opt, batch_size=16, accumulation=1), SCHED)
    b = run_stage1(BASE, x, c, s1cfg(optimizer=opt, batch_size=4, accumulation=4), SCHED)
    assert np.max(np.abs(a.params.flat() - b.params.flat())) <= 1e-10


def test_stage1_adapter_mode_keeps_base_weights():
    x, c, _ = data()
    res = run_stage1(BASE, x, c, s1cfg(adapter=AdapterConfig(rank=2, alpha=2.0)), SCHED)
    assert all(torch.equal(res.params.weights[k], BASE.weights[k]) for k in BASE.weights)
    assert res.params.adapter is not None and float(res.params.adapter.factors["W0.up"].abs().sum()) > 0


def test_stage1_resume_is_bitwise(tmp_path):
    x, c, _ = data()
    cfg = s1cfg(steps=6, policy_refresh=2)
    full = run_stage1(BASE, x, c, cfg, SCHED)
    run_stage1(BASE, x, c, cfg, SCHED, run_dir=tmp_path, stop_at=3)
    ck = Checkpoint.load(tmp_path / "checkpoints" / "stage1_step000003.ckpt")
    resumed = run_stage1(BASE, x, c, cfg, SCHED, resume=ck)
    assert np.array_equal(full.params.flat(), resumed.params.flat())
    assert [h["loss"] for h in full.history[3:]] == [h["loss"] for h in resumed.history]


def test_stage1_on_standard_normal_halves_distance():
    # base pretrained on a shifted, narrower Gaussian; stage 1 pulls it to N(0, I)
    s = make_linear_schedule(100, 1e-4, 0.2)
    net = NetConfig(2, 1, hidden=64, depth=2, time_features=8, T=100)
    one = np.array([[1.0, 0.0]])

    def shifted(rng, n):
        return 0.5 * rng.standard_normal((n, 2)) + np.array([0.8, 0.0]), np.repeat(one, n, axis=0)

    base = fit_denoiser(init_denoiser(net, np.random.default_rng(0)), shifted, s, 1500, 256,
                        OptimizerConfig(lr=3e-3), seed=3)
    x = np.random.default_rng(1).standard_normal((4096, 2))
    c = np.repeat(one, 4096, axis=0)
    held = np.random.default_rng(2).standard_normal((4096, 2))
    before = sliced_wasserstein(generate(base, c, s, 99), held)
    cfg = TrainConfig(stage="stage1", optimizer=OptimizerConfig(lr=3e-3), steps=300, batch_size=256, seed=7,
                      stage1=Stage1Config(margin=-1.0))
    after = sliced_wasserstein(generate(run_stage1(base, x, c, cfg, s).params, c, s, 99), held)
    assert after <= 0.5 * before


def test_stage1_non_finite_aborts_with_dump(tmp_path):
    x, c, _ = data()
    bad = BASE.clone()
    bad.weights["W0"][0, 0] = float("inf")
    with pytest.raises(NonFiniteError):
        run_stage1(bad, x, c, s1cfg(), SCHED, run_dir=tmp_path)
    assert (tmp_path / "stage1_failure.json").exists()


def test_stage_and_data_errors():
    x, c, xl = data()
    with pytest.raises(ValueError):
        run_stage1(BASE, x, c, s2cfg(), SCHED)
    with pytest.raises(ValueError):
        run_stage1(BASE, x[:0], c[:0], s1cfg(), SCHED)
    with pytest.raises(ValueError):
        run_stage2(BASE, x, xl, c, s1cfg(), SCHED)
    with pytest.raises(ValueError):
        run_stage2(BASE, x, xl[:, :3], c, s2cfg(), SCHED)
    with pytest.raises(ValueError):
        TrainConfig(prompt_dropout=1.5)


# -- stage 2 ----------------------------------------------------------------------------


def test_stage2_zero_steps_returns_input():
    x, c, xl = data()
    start = perturbed(BASE, 0.1)
    assert same_params(run_stage2(start, x, xl, c, s2cfg(steps=0), SCHED).params, start)


def test_stage2_first_loss_is_ln2_and_reference_is_stage1_model():
    x, c, xl = data()
    start = perturbed(BASE, 0.1)
    res = run_stage2(start, x, xl, c, s2cfg(), SCHED)
    assert abs(res.history[0]["loss"] - math.log(2)) < 1e-6
    assert params_hash(res.reference) == params_hash(start)


def test_stage2_accumulation_equivalence_sgd():
    x, c, xl = data()
    opt = OptimizerConfig(kind="sgd", lr=1e-2)
    a = run_stage2(BASE, x, xl, c, s2cfg(optimizer=opt, batch_size=16, accumulation=1), SCHED)
    b = run_stage2(BASE, x, xl, c, s2cfg(optimizer=opt, batch_size=4, accumulation=4), SCHED)
    assert np.max(np.abs(a.params.flat() - b.params.flat())) <= 1e-10


def test_stage2_resume_is_bitwise(tmp_path):
    x, c, xl = data()
    cfg = s2cfg(steps=6)
    full = run_stage2(BASE, x, xl, c, cfg, SCHED)
    run_stage2(BASE, x, xl, c, cfg, SCHED, run_dir=tmp_path, stop_at=2)
    resumed = run_stage2(BASE, x, xl, c, cfg, SCHED, resume=Checkpoint.load(tmp_path / "checkpoints" / "stage2_step000002.ckpt"))
    assert np.array_equal(full.params.flat(), resumed.params.flat())


def test_stage2_learns_positive_reward_gap_on_toy_pairs(toy_pipeline, toy_curation):
    pairs = dataset_from_result(toy_curation)
    cfg = replace(toy_pipeline.cfg.stage2, steps=200, batch_size=32)
    for seed in range(3):
        res = run_stage2(toy_pipeline.world.base, pairs.winners, pairs.losers, pairs.conds, replace(cfg, seed=seed),
                         toy_pipeline.schedule)
        assert np.mean([h["reward_gap"] for h in res.history[-50:]]) > 0


# -- checkpoints --------------------------------------------------------------------------


def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    x, c, _ = data()
    res = run_stage1(attach_adapter(BASE, 2, 2.0, np.random.default_rng(0)).merged(), x, c,
                     s1cfg(adapter=AdapterConfig(2, 2.0)), SCHED)
    ck = res.checkpoint(s1cfg(adapter=AdapterConfig(2, 2.0)), SCHED)
    first = ck.save(tmp_path / "a.ckpt").read_bytes()
    loaded = Checkpoint.load(tmp_path / "a.ckpt")
    second = loaded.save(tmp_path / "b.ckpt").read_bytes()
    assert first == second
    assert same_params(loaded.params, res.params) and loaded.step == 4 and loaded.schedule == SCHED
    assert loaded.optim.step == 4 and set(loaded.optim.m) == set(res.optim.m)
