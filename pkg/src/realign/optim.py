"""Adam / SGD over dicts of tensors, with constant-plus-linear-warmup learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from realign.diffusion import DenoiserParams, NonFiniteError


@dataclass
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")

    def lr_at(self, step: int) -> float:
        if self.warmup_steps > 0:
            return self.lr * min(1.0, (step + 1) / self.warmup_steps)
        return self.lr


@dataclass
class OptimState:
    step: int = 0
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)

    def to_arrays(self, prefix: str = "optim/") -> tuple[dict, dict]:
        arrays = {f"{prefix}m/{k}": t.numpy() for k, t in self.m.items()}
        arrays.update({f"{prefix}v/{k}": t.numpy() for k, t in self.v.items()})
        return arrays, {"step": self.step}

    @classmethod
    def from_arrays(cls, arrays: dict, meta: dict, prefix: str = "optim/") -> "OptimState":
        state = cls(step=int(meta["step"]))
        for key, arr in arrays.items():
            if key.startswith(prefix):
                kind, _, name = key[len(prefix):].partition("/")
                getattr(state, kind)[name] = torch.as_tensor(arr.copy())
        return state


def optimizer_step(params: DenoiserParams, grads: dict[str, torch.Tensor], state: OptimState,
                   cfg: OptimizerConfig) -> tuple[DenoiserParams, OptimState]:
    """Return updated copies of ``params`` and ``state``; the inputs are left as they were.

    Only ``params.trainable()`` is touched, so with an adapter attached the base
    weights pass through unchanged.
    """
    target = params.trainable()
    if set(grads) != set(target):
        raise ValueError(f"gradient keys {sorted(grads)} do not match trainable keys {sorted(target)}")
    for k, g in grads.items():
        if g.shape != target[k].shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        if not torch.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {k}")
    new = params.clone()
    out = new.trainable()
    lr = cfg.lr_at(state.step)
    new_state = OptimState(step=state.step + 1)
    if cfg.kind == "sgd":
        for k, g in grads.items():
            out[k] = target[k] - lr * g
        return new, new_state
    t = new_state.step
    for k, g in grads.items():
        m = state.m.get(k, torch.zeros_like(g))
        v = state.v.get(k, torch.zeros_like(g))
        m = cfg.beta1 * m + (1 - cfg.beta1) * g
        v = cfg.beta2 * v + (1 - cfg.beta2) * g * g
        m_hat = m / (1 - cfg.beta1 ** t)
        v_hat = v / (1 - cfg.beta2 ** t)
        out[k] = target[k] - lr * m_hat / (torch.sqrt(v_hat) + cfg.eps)
        new_state.m[k] = m
        new_state.v[k] = v
    return new, new_state


def grad_norm(grads: dict[str, torch.Tensor]) -> float:
    return math.sqrt(sum(float((g ** 2).sum()) for g in grads.values()))


def params_hash(params: DenoiserParams) -> str:
    import hashlib

    return hashlib.sha256(np.ascontiguousarray(params.flat()).tobytes()).hexdigest()
