"""Two-stage training loops, pretraining of toy denoisers, and the gradient-check harness.

Randomness inside the loops is counter based: step ``s`` of a run seeded with
``seed`` draws everything from ``default_rng([seed, s])``. The whole effective
batch (``batch_size * accumulation``) is drawn up front and then split into
micro-batches, so changing the accumulation split never changes the draws, and
a resumed run replays exactly the draws of an uninterrupted one.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from realign.diffusion import (DenoiserParams, NetConfig, NoiseSchedule, NonFiniteError, attach_adapter,
                               denoising_mse, forward_diffuse, init_denoiser, params_from_arrays,
                               params_to_arrays, to_null)
from realign.io import JsonlLog, load_arrays, save_arrays
from realign.objectives import (PolicyBatch, Stage1Config, Stage1Draws, Stage2Config, Stage2Draws,
                                generate_policy_batch, stage1_dro_loss, stage2_dpo_loss)
from realign.optim import OptimizerConfig, OptimState, grad_norm, optimizer_step, params_hash

log = logging.getLogger(__name__)


@dataclass
class AdapterConfig:
    rank: int = 4
    alpha: float = 4.0


@dataclass
class TrainConfig:
    stage: str = "stage1"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    steps: int = 300
    batch_size: int = 256
    accumulation: int = 1
    prompt_dropout: float = 0.2
    seed: int = 0
    adapter: AdapterConfig | None = None
    policy_refresh: int = 1
    checkpoint_every: int = 0
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)

    def __post_init__(self):
        if self.stage not in ("stage1", "stage2"):
            raise ValueError(f"stage must be stage1 or stage2, got {self.stage!r}")
        if not 0.0 <= self.prompt_dropout <= 1.0:
            raise ValueError("prompt_dropout must lie in [0, 1]")
        if self.batch_size < 1 or self.accumulation < 1 or self.policy_refresh < 1:
            raise ValueError("batch_size, accumulation and policy_refresh must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.accumulation


# stream id for adapter initialisation, disjoint from the per-step streams [seed, step]
ADAPTER_STREAM = 2**31


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def apply_prompt_dropout(c: np.ndarray, p: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    drop = rng.random(len(c)) < p
    out = c.copy()
    out[drop] = to_null(c[drop])
    return out, drop


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


@dataclass
class Checkpoint:
    params: DenoiserParams
    reference: DenoiserParams | None
    optim: OptimState
    step: int
    stage: str
    seed: int
    config: dict
    schedule: NoiseSchedule | None = None
    policy: PolicyBatch | None = None

    def save(self, path) -> Path:
        arrays, pmeta = params_to_arrays(self.params, "params/")
        meta = {
            "kind": "checkpoint",
            "params": pmeta,
            "step": self.step,
            "stage": self.stage,
            # counter-based RNG: the generator for step s is default_rng([seed, s])
            "rng": {"seed": self.seed, "next_step": self.step},
            "config": self.config,
        }
        if self.reference is not None:
            rarr, rmeta = params_to_arrays(self.reference, "reference/")
            arrays.update(rarr)
            meta["reference"] = rmeta
        oarr, ometa = self.optim.to_arrays()
        arrays.update(oarr)
        meta["optim"] = ometa
        if self.schedule is not None:
            arrays["schedule/betas"] = self.schedule.betas
        if self.policy is not None:
            arrays["policy/x"] = self.policy.x
            arrays["policy/c"] = self.policy.c
            meta["policy_source"] = self.policy.source
        return save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, meta = load_arrays(path)
        if meta.get("kind") == "denoiser":
            params = params_from_arrays(arrays, meta["params"], "params/")
            schedule = NoiseSchedule.from_betas(arrays["schedule/betas"]) if "schedule/betas" in arrays else None
            return cls(params, None, OptimState(), 0, meta.get("stage", "base"), 0, {}, schedule)
        params = params_from_arrays(arrays, meta["params"], "params/")
        ref = params_from_arrays(arrays, meta["reference"], "reference/") if "reference" in meta else None
        schedule = NoiseSchedule.from_betas(arrays["schedule/betas"]) if "schedule/betas" in arrays else None
        policy = None
        if "policy/x" in arrays:
            policy = PolicyBatch(arrays["policy/x"], arrays["policy/c"], meta["policy_source"])
        return cls(params, ref, OptimState.from_arrays(arrays, meta["optim"]), meta["step"], meta["stage"],
                   meta["rng"]["seed"], meta["config"], schedule, policy)


def config_snapshot(cfg: TrainConfig) -> dict:
    return asdict(cfg)


@dataclass
class TrainResult:
    params: DenoiserParams
    reference: DenoiserParams
    history: list[dict]
    optim: OptimState | None = None
    step: int = 0
    policy: PolicyBatch | None = None

    def checkpoint(self, cfg: TrainConfig, schedule: NoiseSchedule | None = None) -> Checkpoint:
        return Checkpoint(self.params, self.reference, self.optim or OptimState(), self.step, cfg.stage, cfg.seed,
                          config_snapshot(cfg), schedule, self.policy)


def _prepare(base: DenoiserParams, cfg: TrainConfig, resume: Checkpoint | None):
    if resume is not None:
        if resume.stage != cfg.stage:
            raise ValueError(f"checkpoint stage {resume.stage!r} does not match {cfg.stage!r}")
        return resume.params.clone(), resume.reference.frozen(), resume.optim, resume.step, resume.policy
    start = base.merged() if base.adapter is not None else base
    ref = start.frozen()
    model = start.clone(role="trainable")
    if cfg.adapter is not None:
        model = attach_adapter(model, cfg.adapter.rank, cfg.adapter.alpha, np.random.default_rng([cfg.seed, ADAPTER_STREAM]))
    return model, ref, OptimState(), 0, None


def _accumulate(total: dict | None, grads: dict, weight: float) -> dict:
    if total is None:
        return {k: g * weight for k, g in grads.items()}
    for k, g in grads.items():
        total[k] = total[k] + g * weight
    return total


def _finish_step(model, grads, state, cfg, diag, step, logger):
    if not math.isfinite(diag["loss"]):
        raise NonFiniteError(f"non-finite loss at step {step}: {diag}")
    model, state = optimizer_step(model, grads, state, cfg.optimizer)
    record = {"step": step, "stage": cfg.stage, **diag}
    if logger is not None:
        logger.append(record)
    return model, state, record


def run_stage1(base: DenoiserParams, x_real: np.ndarray, c_real: np.ndarray, cfg: TrainConfig,
               schedule: NoiseSchedule, run_dir=None, resume: Checkpoint | None = None,
               stop_at: int | None = None) -> TrainResult:
    """Distribution warm-up: phi starts at ``base``, the reference is a frozen copy of ``base``.

    ``stop_at`` ends the loop early (after writing a checkpoint when ``run_dir`` is
    set); used to exercise resume.
    """
    if cfg.stage != "stage1":
        raise ValueError("run_stage1 needs cfg.stage == 'stage1'")
    x_real = np.asarray(x_real, dtype=np.float64)
    if len(x_real) == 0:
        raise ValueError("no real data")
    model, ref, state, start, policy = _prepare(base, cfg, resume)
    ref_hash = params_hash(ref)
    logger = JsonlLog(Path(run_dir) / "logs" / "stage1.jsonl") if run_dir else None
    history = []
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    for step in range(start, end):
        rng = step_rng(cfg.seed, step)
        idx = rng.integers(0, len(x_real), size=cfg.effective_batch)
        x = x_real[idx]
        c, _ = apply_prompt_dropout(c_real[idx], cfg.prompt_dropout, rng)
        fresh = policy is None or step % cfg.policy_refresh == 0
        if fresh:
            try:
                policy = generate_policy_batch(model, c, schedule, cfg.stage1, rng)
            except NonFiniteError:
                _dump(run_dir, "stage1", model, ref, state, step, cfg, {"failed_in": "policy sampling"})
                raise
        else:
            # stale policy samples keep their own conditions
            c = policy.c
        draws = Stage1Draws.sample(rng, len(x), x.shape[1], schedule.T)
        grads, diag = None, {}
        try:
            for j in range(cfg.accumulation):
                sl = slice(j * cfg.batch_size, (j + 1) * cfg.batch_size)
                pol = PolicyBatch(policy.x[sl], policy.c[sl], policy.source)
                res = stage1_dro_loss(model, ref, x[sl], c[sl], pol, cfg.stage1, schedule, draws=draws.take(sl),
                                      check_provenance=fresh)
                grads = _accumulate(grads, res.grads, 1.0 / cfg.accumulation)
                for k, v in res.diagnostics.items():
                    if isinstance(v, float):
                        diag[k] = diag.get(k, 0.0) + v / cfg.accumulation
            diag["policy_mode"] = cfg.stage1.policy_mode
            diag["grad_norm"] = grad_norm(grads)
            model, state, record = _finish_step(model, grads, state, cfg, diag, step, logger)
        except NonFiniteError:
            _dump(run_dir, "stage1", model, ref, state, step, cfg, diag)
            raise
        history.append(record)
        if run_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _checkpoint(run_dir, "stage1", model, ref, state, step + 1, cfg, schedule, policy)
    if params_hash(ref) != ref_hash:
        raise RuntimeError("reference parameters changed during stage 1")
    if run_dir and stop_at is not None and end < cfg.steps:
        _checkpoint(run_dir, "stage1", model, ref, state, end, cfg, schedule, policy)
    return TrainResult(model, ref, history, state, end, policy)


def run_stage2(stage1_model: DenoiserParams, x_w: np.ndarray, x_l: np.ndarray, c: np.ndarray, cfg: TrainConfig,
               schedule: NoiseSchedule, run_dir=None, resume: Checkpoint | None = None,
               stop_at: int | None = None) -> TrainResult:
    """Pairwise preference learning; policy and frozen reference both start at ``stage1_model``."""
    if cfg.stage != "stage2":
        raise ValueError("run_stage2 needs cfg.stage == 'stage2'")
    x_w = np.asarray(x_w, dtype=np.float64)
    x_l = np.asarray(x_l, dtype=np.float64)
    if len(x_w) == 0:
        raise ValueError("no preference pairs")
    if x_w.shape != x_l.shape:
        raise ValueError("winner/loser arrays differ in shape")
    model, ref, state, start, _ = _prepare(stage1_model, cfg, resume)
    ref_hash = params_hash(ref)
    logger = JsonlLog(Path(run_dir) / "logs" / "stage2.jsonl") if run_dir else None
    history = []
    end = cfg.steps if stop_at is None else min(stop_at, cfg.steps)
    for step in range(start, end):
        rng = step_rng(cfg.seed, step)
        idx = rng.integers(0, len(x_w), size=cfg.effective_batch)
        draws = Stage2Draws.sample(rng, len(idx), x_w.shape[1], schedule.T)
        grads, diag = None, {}
        try:
            for j in range(cfg.accumulation):
                sl = slice(j * cfg.batch_size, (j + 1) * cfg.batch_size)
                sub = idx[sl]
                res = stage2_dpo_loss(model, ref, x_w[sub], x_l[sub], c[sub], cfg.stage2, schedule,
                                      draws=draws.take(sl))
                grads = _accumulate(grads, res.grads, 1.0 / cfg.accumulation)
                for k, v in res.diagnostics.items():
                    diag[k] = diag.get(k, 0.0) + v / cfg.accumulation
            diag["grad_norm"] = grad_norm(grads)
            model, state, record = _finish_step(model, grads, state, cfg, diag, step, logger)
        except NonFiniteError:
            _dump(run_dir, "stage2", model, ref, state, step, cfg, diag)
            raise
        history.append(record)
        if run_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            _checkpoint(run_dir, "stage2", model, ref, state, step + 1, cfg, schedule, None)
    if params_hash(ref) != ref_hash:
        raise RuntimeError("reference parameters changed during stage 2")
    if run_dir and stop_at is not None and end < cfg.steps:
        _checkpoint(run_dir, "stage2", model, ref, state, end, cfg, schedule, None)
    return TrainResult(model, ref, history, state, end)


def _checkpoint(run_dir, stage, model, ref, state, step, cfg, schedule, policy) -> Path:
    path = Path(run_dir) / "checkpoints" / f"{stage}_step{step:06d}.ckpt"
    Checkpoint(model, ref, state, step, stage, cfg.seed, config_snapshot(cfg), schedule, policy).save(path)
    return path


def _dump(run_dir, stage, model, ref, state, step, cfg, diag):
    if not run_dir:
        return
    from realign.io import write_json

    write_json(Path(run_dir) / f"{stage}_failure.json", {"step": step, "diagnostics": diag})
    Checkpoint(model, ref, state, step, stage, cfg.seed, config_snapshot(cfg)).save(
        Path(run_dir) / f"{stage}_failure.ckpt")


# --------------------------------------------------------------------------
# Pretraining with the plain denoising objective
# --------------------------------------------------------------------------


def fit_denoiser(params: DenoiserParams, sampler: Callable, schedule: NoiseSchedule, steps: int,
                 batch_size: int, optimizer: OptimizerConfig, seed: int,
                 cond_dropout: float = 0.1) -> DenoiserParams:
    """Standard epsilon-prediction training; ``sampler(rng, n)`` returns ``(x, c)``."""
    state = OptimState()
    for step in range(steps):
        rng = step_rng(seed, step)
        x, c = sampler(rng, batch_size)
        c, _ = apply_prompt_dropout(c, cond_dropout, rng)
        t = rng.integers(0, schedule.T, size=batch_size)
        eps = rng.standard_normal(x.shape)
        x_t = forward_diffuse(x, t, eps, schedule)
        live = params.clone()
        leaves = live.trainable()
        for v in leaves.values():
            v.requires_grad_(True)
        loss = denoising_mse(live, x_t, c, t, eps).mean()
        loss.backward()
        params, state = optimizer_step(params, {k: v.grad for k, v in leaves.items()}, state, optimizer)
    return params


# --------------------------------------------------------------------------
# Finite-difference harness
# --------------------------------------------------------------------------


@dataclass
class GradCheckTrial:
    trial: int
    loss: float
    max_rel_error: float
    n_checked: int


@dataclass
class GradCheckReport:
    kind: str
    tol: float
    trials: list[GradCheckTrial]

    @property
    def passed(self) -> bool:
        return all(t.max_rel_error < self.tol for t in self.trials)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "tol": self.tol, "passed": self.passed, "trials": [asdict(t) for t in self.trials]}


def relative_errors(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    keep = scale > floor
    return np.abs(analytic - numeric)[keep] / scale[keep]


def finite_difference(loss_fn: Callable[[DenoiserParams], float], params: DenoiserParams, h: float = 1e-5):
    """Central differences of ``loss_fn`` over every trainable coordinate."""
    out = {}
    for name, tensor in params.trainable().items():
        g = np.zeros(tensor.shape)
        flat = g.reshape(-1)
        for i in range(tensor.numel()):
            vals = []
            for sign in (1.0, -1.0):
                p = params.clone()
                p.trainable()[name].view(-1)[i] += sign * h
                vals.append(loss_fn(p))
            flat[i] = (vals[0] - vals[1]) / (2 * h)
        out[name] = g
    return out


GRADCHECK_NET = NetConfig(data_dim=3, cond_dim=2, hidden=6, depth=2, time_features=4, T=20)


def _gradcheck_problem(kind: str, trial: int, seed: int):
    from realign.diffusion import make_linear_schedule

    rng = np.random.default_rng([seed, trial])
    net = GRADCHECK_NET
    schedule = make_linear_schedule(net.T, 1e-3, 0.3)
    ref = init_denoiser(net, rng, role="reference", out_scale=1.0)
    model = ref.clone(role="trainable")
    identity = kind == "stage2" and trial == 0
    if not identity:
        for k, v in model.weights.items():
            v += torch.as_tensor(0.2 * rng.standard_normal(tuple(v.shape)))
    B = 8
    x = rng.standard_normal((B, net.data_dim))
    labels = rng.integers(0, net.cond_dim, size=B)
    c = np.zeros((B, net.cond_dim + 1))
    c[np.arange(B), labels] = 1.0
    if kind == "stage1":
        cfg = Stage1Config(margin=-0.001, sampling_steps=5)
        pol = PolicyBatch(rng.standard_normal((B, net.data_dim)), c, "fixed")
        draws = Stage1Draws.sample(rng, B, net.data_dim, net.T)

        def loss_fn(p):
            return stage1_dro_loss(p, ref, x, c, pol, cfg, schedule, draws=draws, check_provenance=False)
    elif kind == "stage2":
        cfg = Stage2Config(beta=0.05)
        x_l = x + 0.5 * rng.standard_normal(x.shape)
        draws = Stage2Draws.sample(rng, B, net.data_dim, net.T)

        def loss_fn(p):
            return stage2_dpo_loss(p, ref, x, x_l, c, cfg, schedule, draws=draws)
    else:
        raise ValueError(f"unknown loss kind {kind!r}")
    return model, loss_fn


def gradient_check(kind: str, trials: int = 10, tol: float = 1e-4, seed: int = 0, h: float = 1e-5) -> GradCheckReport:
    """Compare autograd gradients with central differences on small random problems."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    out = []
    for trial in range(trials):
        model, loss_fn = _gradcheck_problem(kind, trial, seed)
        res = loss_fn(model)
        numeric = finite_difference(lambda p: loss_fn(p).loss, model, h)
        errs = np.concatenate([relative_errors(res.grads[k].numpy().ravel(), numeric[k].ravel())
                               for k in numeric])
        out.append(GradCheckTrial(trial, res.loss, float(errs.max()) if len(errs) else 0.0, int(len(errs))))
    return GradCheckReport(kind, tol, out)
