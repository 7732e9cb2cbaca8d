"""Stage-1 ranking loss and stage-2 pairwise preference loss.

Both losses are estimated with one uniformly drawn timestep per batch element.
Squared norms are unreduced sums over coordinates; batch losses are means
over elements. Gradients come from torch autograd on float64 copies of the
trainable tensors, so the parameters passed in are never touched.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from realign.diffusion import (DenoiserParams, NoiseSchedule, ancestral_sample, denoising_mse,
                               forward_diffuse, predict_eps)
from realign.optim import grad_norm

POLICY_MODES = ("forward_noise_target", "detached_self_prediction")

# named presets for the stage-2 regularisation weight
BETA_PRESETS = {"sd15": 2000.0, "sd35m": 100.0}


@dataclass
class Stage1Config:
    margin: float = -0.001
    sampling_steps: int = 20
    guidance_scale: float = 1.0
    policy_mode: str = "forward_noise_target"
    clip_x0: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.margin):
            raise ValueError("margin must be finite")
        if self.policy_mode not in POLICY_MODES:
            raise ValueError(f"policy_mode must be one of {POLICY_MODES}")


@dataclass
class Stage2Config:
    beta: float = 2000.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")

    @classmethod
    def preset(cls, name: str) -> "Stage2Config":
        return cls(beta=BETA_PRESETS[name])


@dataclass
class LossResult:
    loss: float
    grads: dict[str, torch.Tensor]
    diagnostics: dict[str, float]
    per_element: np.ndarray = field(repr=False, default=None)


def params_digest(params: DenoiserParams) -> str:
    return hashlib.sha1(params.flat().tobytes()).hexdigest()


@dataclass
class PolicyBatch:
    """Samples drawn from a policy, tagged with the digest of the parameters that drew them."""

    x: np.ndarray
    c: np.ndarray
    source: str


def generate_policy_batch(phi: DenoiserParams, c, schedule: NoiseSchedule, cfg: Stage1Config,
                          rng: np.random.Generator) -> PolicyBatch:
    x, _ = ancestral_sample(phi, c, schedule, cfg.sampling_steps, cfg.guidance_scale, rng, record=False,
                            clip_x0=cfg.clip_x0)
    return PolicyBatch(x, np.asarray(c), params_digest(phi))


def _live(params: DenoiserParams) -> tuple[DenoiserParams, dict[str, torch.Tensor]]:
    """Clone ``params`` with its trainable tensors as fresh autograd leaves."""
    live = params.clone()
    leaves = live.trainable()
    for k in leaves:
        leaves[k].requires_grad_(True)
    return live, leaves


def _check_roles(trainable: DenoiserParams, ref: DenoiserParams):
    if trainable.role != "trainable":
        raise ValueError(f"trainable model has role {trainable.role!r}")
    if ref.role != "reference":
        raise ValueError(f"reference model has role {ref.role!r}")


# --------------------------------------------------------------------------
# Stage 1
# --------------------------------------------------------------------------


@dataclass
class Stage1Draws:
    t: np.ndarray
    eps_real: np.ndarray
    eps_policy: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator, batch: int, dim: int, T: int) -> "Stage1Draws":
        return cls(rng.integers(0, T, size=batch), rng.standard_normal((batch, dim)),
                   rng.standard_normal((batch, dim)))

    def take(self, idx) -> "Stage1Draws":
        return Stage1Draws(self.t[idx], self.eps_real[idx], self.eps_policy[idx])


def stage1_inner(phi, ref, x_real, c_real, x_pol, c_pol, draws: Stage1Draws, schedule, mode):
    """Per-element ``-(real advantage) + (policy advantage)`` and the branch terms."""
    t = draws.t
    xr_t = forward_diffuse(torch.as_tensor(x_real), t, torch.as_tensor(draws.eps_real), schedule)
    xp_t = forward_diffuse(torch.as_tensor(x_pol), t, torch.as_tensor(draws.eps_policy), schedule)
    with torch.no_grad():
        eps_pol = torch.as_tensor(draws.eps_policy)
        if mode == "detached_self_prediction":
            eps_pol = predict_eps(phi, xp_t, c_pol, t).detach()
        a_ref = denoising_mse(ref, xr_t, c_real, t, draws.eps_real)
        b_ref = denoising_mse(ref, xp_t, c_pol, t, eps_pol)
    a_phi = denoising_mse(phi, xr_t, c_real, t, draws.eps_real)
    b_phi = denoising_mse(phi, xp_t, c_pol, t, eps_pol)
    real_adv = a_ref - a_phi
    pol_adv = b_ref - b_phi
    return -real_adv + pol_adv, real_adv, pol_adv


def stage1_dro_loss(phi: DenoiserParams, theta_ref: DenoiserParams, x_real, c_real, policy: PolicyBatch,
                    cfg: Stage1Config, schedule: NoiseSchedule, rng: np.random.Generator | None = None,
                    draws: Stage1Draws | None = None, check_provenance: bool = True) -> LossResult:
    """Mean over elements of ``max(m, -(real advantage) + (policy advantage))``.

    The advantage of phi on a branch is ``||eps - eps_ref||^2 - ||eps - eps_phi||^2``.
    Only ``phi`` receives gradients; elements with inner value <= m contribute none.
    """
    _check_roles(phi, theta_ref)
    x_real = np.asarray(x_real, dtype=np.float64)
    if len(x_real) == 0 or len(policy.x) == 0:
        raise ValueError("real and policy batches must be non-empty")
    if len(policy.x) != len(x_real):
        raise ValueError("real and policy batches must have equal length")
    if check_provenance and policy.source != params_digest(phi):
        raise ValueError("policy batch was not generated by the current trainable model")
    if draws is None:
        draws = Stage1Draws.sample(rng, len(x_real), x_real.shape[1], schedule.T)
    live, leaves = _live(phi)
    inner, real_adv, pol_adv = stage1_inner(live, theta_ref, x_real, c_real, policy.x, policy.c,
                                            draws, schedule, cfg.policy_mode)
    m = cfg.margin
    active = inner > m
    per_elem = torch.where(active, inner, torch.full_like(inner, m))
    loss = per_elem.mean()
    if loss.requires_grad:
        loss.backward()
    grads = {k: v.grad.detach().clone() if v.grad is not None else torch.zeros_like(v) for k, v in leaves.items()}
    diag = {
        "loss": float(loss.detach()),
        "real_branch": float(real_adv.mean().detach()),
        "policy_branch": float(pol_adv.mean().detach()),
        "hinge_active_fraction": float(active.double().mean()),
        "grad_norm": grad_norm(grads),
        "policy_mode": cfg.policy_mode,
    }
    return LossResult(float(loss.detach()), grads, diag, inner.detach().numpy().copy())


# --------------------------------------------------------------------------
# Stage 2
# --------------------------------------------------------------------------


@dataclass
class Stage2Draws:
    t: np.ndarray
    eps_w: np.ndarray
    eps_l: np.ndarray

    @classmethod
    def sample(cls, rng: np.random.Generator, batch: int, dim: int, T: int) -> "Stage2Draws":
        return cls(rng.integers(0, T, size=batch), rng.standard_normal((batch, dim)),
                   rng.standard_normal((batch, dim)))

    def take(self, idx) -> "Stage2Draws":
        return Stage2Draws(self.t[idx], self.eps_w[idx], self.eps_l[idx])


def stage2_inner(theta, ref, x_w, x_l, c, draws: Stage2Draws, schedule, beta: float):
    """Per-element sigmoid argument ``-beta*T*((w_theta - w_ref) - (l_theta - l_ref))``."""
    t = draws.t
    xw_t = forward_diffuse(torch.as_tensor(x_w), t, torch.as_tensor(draws.eps_w), schedule)
    xl_t = forward_diffuse(torch.as_tensor(x_l), t, torch.as_tensor(draws.eps_l), schedule)
    with torch.no_grad():
        w_ref = denoising_mse(ref, xw_t, c, t, draws.eps_w)
        l_ref = denoising_mse(ref, xl_t, c, t, draws.eps_l)
    w_th = denoising_mse(theta, xw_t, c, t, draws.eps_w)
    l_th = denoising_mse(theta, xl_t, c, t, draws.eps_l)
    # implicit reward margin: how much more theta improved the winner than the loser
    reward_gap = -((w_th - w_ref) - (l_th - l_ref))
    return beta * schedule.T * reward_gap, reward_gap


def stage2_dpo_loss(theta: DenoiserParams, theta_ref: DenoiserParams, x_w, x_l, c, cfg: Stage2Config,
                    schedule: NoiseSchedule, rng: np.random.Generator | None = None,
                    draws: Stage2Draws | None = None) -> LossResult:
    """Mean over pairs of ``-log sigmoid(-beta*T*((w_theta - w_ref) - (l_theta - l_ref)))``."""
    _check_roles(theta, theta_ref)
    if not cfg.beta > 0:
        raise ValueError("beta must be positive")
    x_w = np.asarray(x_w, dtype=np.float64)
    x_l = np.asarray(x_l, dtype=np.float64)
    if len(x_w) == 0:
        raise ValueError("pairs must be non-empty")
    if x_w.shape != x_l.shape:
        raise ValueError(f"winner/loser shape mismatch {x_w.shape} vs {x_l.shape}")
    if draws is None:
        draws = Stage2Draws.sample(rng, len(x_w), x_w.shape[1], schedule.T)
    live, leaves = _live(theta)
    arg, reward_gap = stage2_inner(live, theta_ref, x_w, x_l, c, draws, schedule, cfg.beta)
    per_elem = -F.logsigmoid(arg)
    loss = per_elem.mean()
    if loss.requires_grad:
        loss.backward()
    grads = {k: v.grad.detach().clone() if v.grad is not None else torch.zeros_like(v) for k, v in leaves.items()}
    diag = {
        "loss": float(loss.detach()),
        "reward_gap": float(reward_gap.mean().detach()),
        "reward_accuracy": float((reward_gap > 0).double().mean()),
        "grad_norm": grad_norm(grads),
    }
    return LossResult(float(loss.detach()), grads, diag, arg.detach().numpy().copy())
