"""Minimal DDPM machinery on flat, low-dimensional data.

Everything runs in float64. Samples are arrays with a leading batch axis and
a flat data axis ``(B, d)``; toy images are stored flattened and reshaped only
by the image metrics. Conditions are fed to the network as a feature row of
length ``cond_dim + 1`` whose last entry flags the NULL (empty-prompt)
condition; see :func:`condition_features`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

torch.set_default_dtype(torch.float64)

ROLES = ("trainable", "reference", "oracle")


class NonFiniteError(FloatingPointError):
    """Raised when a network evaluation produces NaN or inf."""


# --------------------------------------------------------------------------
# Schedule and forward process
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas)

    @classmethod
    def from_betas(cls, betas) -> "NoiseSchedule":
        betas = np.asarray(betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if not np.all(np.isfinite(betas)) or np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("every beta must lie in (0, 1)")
        alphas = 1.0 - betas
        return cls(betas=betas, alphas=alphas, alpha_bars=np.cumprod(alphas))

    def to_dict(self) -> dict:
        return {"betas": self.betas.tolist()}

    def __eq__(self, other) -> bool:
        return isinstance(other, NoiseSchedule) and np.array_equal(self.betas, other.betas)


def make_linear_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ValueError(f"T must be an integer >= 2, got {T!r}")
    if not (math.isfinite(beta_start) and math.isfinite(beta_end)):
        raise ValueError("beta endpoints must be finite")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T)))


def _coef(schedule: NoiseSchedule, t, like):
    t_arr = np.asarray(t)
    if np.any(t_arr < 0) or np.any(t_arr >= schedule.T):
        raise IndexError(f"timestep out of range [0, {schedule.T})")
    ab = schedule.alpha_bars[t_arr]
    if torch.is_tensor(like):
        ab = torch.as_tensor(ab, dtype=like.dtype)
        sqrt = torch.sqrt
    else:
        sqrt = np.sqrt
    if np.ndim(ab) == 1:
        ab = ab[:, None]
    return sqrt(ab), sqrt(1.0 - ab)


def forward_diffuse(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    ``t`` is a scalar or one timestep per batch row. Works on numpy arrays and
    torch tensors alike.
    """
    if tuple(x0.shape) != tuple(eps.shape):
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    a, s = _coef(schedule, t, x0)
    return a * x0 + s * eps


# --------------------------------------------------------------------------
# Conditions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Condition:
    """A conditioning vector, or the canonical NULL condition when ``embedding`` is None."""

    embedding: tuple[float, ...] | None = None

    @property
    def is_null(self) -> bool:
        return self.embedding is None

    def features(self, dim: int) -> np.ndarray:
        row = np.zeros(dim + 1)
        if self.embedding is None:
            row[dim] = 1.0
        else:
            if len(self.embedding) != dim:
                raise ValueError(f"condition length {len(self.embedding)} != {dim}")
            row[:dim] = self.embedding
        return row


NULL = Condition(None)


def condition_features(conds: Sequence[Condition], dim: int) -> np.ndarray:
    return np.stack([c.features(dim) for c in conds]) if len(conds) else np.zeros((0, dim + 1))


def null_features(batch: int, dim: int) -> np.ndarray:
    out = np.zeros((batch, dim + 1))
    out[:, dim] = 1.0
    return out


def to_null(c: np.ndarray) -> np.ndarray:
    out = np.zeros_like(c)
    out[:, -1] = 1.0
    return out


# --------------------------------------------------------------------------
# Network
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NetConfig:
    data_dim: int
    cond_dim: int
    hidden: int = 128
    depth: int = 2
    time_features: int = 16
    T: int = 100

    @property
    def layer_sizes(self) -> list[tuple[int, int]]:
        d_in = self.data_dim + self.cond_dim + 1 + self.time_features
        sizes = [(d_in, self.hidden)]
        sizes += [(self.hidden, self.hidden)] * (self.depth - 1)
        sizes.append((self.hidden, self.data_dim))
        return sizes


@dataclass
class LowRankAdapter:
    """Additive rank-r update ``(alpha / rank) * down @ up`` per adapted weight."""

    rank: int
    alpha: float
    factors: dict[str, torch.Tensor] = field(default_factory=dict)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def delta(self, name: str) -> torch.Tensor | None:
        down = self.factors.get(f"{name}.down")
        if down is None:
            return None
        return self.scale * (down @ self.factors[f"{name}.up"])


@dataclass
class DenoiserParams:
    net: NetConfig | None
    weights: dict[str, torch.Tensor]
    role: str = "trainable"
    adapter: LowRankAdapter | None = None
    analytic: Callable | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")

    def trainable(self) -> dict[str, torch.Tensor]:
        """Tensors an optimizer may update: adapter factors if attached, else all weights."""
        if self.adapter is not None:
            return self.adapter.factors
        return self.weights

    def clone(self, role: str | None = None) -> "DenoiserParams":
        new = DenoiserParams(
            net=self.net,
            weights={k: v.detach().clone() for k, v in self.weights.items()},
            role=role or self.role,
            adapter=None,
            analytic=self.analytic,
        )
        if self.adapter is not None:
            new.adapter = LowRankAdapter(
                self.adapter.rank,
                self.adapter.alpha,
                {k: v.detach().clone() for k, v in self.adapter.factors.items()},
            )
        return new

    def frozen(self) -> "DenoiserParams":
        return self.clone(role="reference")

    def flat(self) -> np.ndarray:
        parts = [self.weights[k].detach().numpy().ravel() for k in sorted(self.weights)]
        if self.adapter is not None:
            parts += [self.adapter.factors[k].detach().numpy().ravel() for k in sorted(self.adapter.factors)]
        return np.concatenate(parts) if parts else np.zeros(0)

    def merged(self) -> "DenoiserParams":
        """Fold the adapter into the base weights."""
        if self.adapter is None:
            return self.clone()
        weights = {}
        for k, v in self.weights.items():
            d = self.adapter.delta(k)
            weights[k] = (v + d).detach().clone() if d is not None else v.detach().clone()
        return DenoiserParams(self.net, weights, self.role)


def init_denoiser(net: NetConfig, rng: np.random.Generator, role: str = "trainable",
                  out_scale: float = 0.1) -> DenoiserParams:
    weights = {}
    sizes = net.layer_sizes
    for i, (fan_in, fan_out) in enumerate(sizes):
        scale = 1.0 / math.sqrt(fan_in)
        if i == len(sizes) - 1:
            scale *= out_scale
        weights[f"W{i}"] = torch.as_tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)))
        weights[f"b{i}"] = torch.zeros(fan_out)
    return DenoiserParams(net, weights, role)


def zero_denoiser(net: NetConfig, role: str = "trainable") -> DenoiserParams:
    weights = {}
    for i, (fan_in, fan_out) in enumerate(net.layer_sizes):
        weights[f"W{i}"] = torch.zeros(fan_in, fan_out)
        weights[f"b{i}"] = torch.zeros(fan_out)
    return DenoiserParams(net, weights, role)


def attach_adapter(params: DenoiserParams, rank: int, alpha: float, rng: np.random.Generator) -> DenoiserParams:
    """Return a copy of ``params`` with a fresh adapter on every weight matrix.

    The up factors start at zero so the adapted network is exactly the base network.
    """
    if rank < 1:
        raise ValueError("adapter rank must be >= 1")
    out = params.clone()
    factors = {}
    for name in sorted(k for k in params.weights if k.startswith("W")):
        fan_in, fan_out = params.weights[name].shape
        factors[f"{name}.down"] = torch.as_tensor(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=(fan_in, rank)))
        factors[f"{name}.up"] = torch.zeros(rank, fan_out)
    out.adapter = LowRankAdapter(rank, float(alpha), factors)
    return out


def time_embedding(t, n_features: int, T: int) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(t, dtype=np.float64)).reshape(-1, 1)
    half = n_features // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    # scale so the slowest frequency sweeps about one radian over [0, T)
    ang = t * freqs * (1000.0 / T)
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


def _as_tensor(x) -> torch.Tensor:
    return x if torch.is_tensor(x) else torch.as_tensor(np.asarray(x, dtype=np.float64))


def predict_eps(params: DenoiserParams, x_t, c, t) -> torch.Tensor:
    """Noise prediction ``eps(x_t, c, t)`` for a batch; differentiable w.r.t. params."""
    x_t = _as_tensor(x_t)
    c = _as_tensor(c)
    if x_t.ndim != 2:
        raise ValueError("x_t must have shape (batch, dim)")
    B = x_t.shape[0]
    t_arr = np.broadcast_to(np.asarray(t), (B,))
    if params.analytic is not None:
        out = params.analytic(x_t, c, t_arr)
    else:
        net = params.net
        if x_t.shape[1] != net.data_dim:
            raise ValueError(f"x_t has dim {x_t.shape[1]}, network expects {net.data_dim}")
        if c.shape != (B, net.cond_dim + 1):
            raise ValueError(f"condition features must have shape {(B, net.cond_dim + 1)}, got {tuple(c.shape)}")
        if np.any(t_arr < 0) or np.any(t_arr >= net.T):
            raise IndexError(f"timestep out of range [0, {net.T})")
        h = torch.cat([x_t, c, time_embedding(t_arr, net.time_features, net.T)], dim=1)
        n_layers = len(net.layer_sizes)
        for i in range(n_layers):
            W = params.weights[f"W{i}"]
            if params.adapter is not None:
                d = params.adapter.delta(f"W{i}")
                if d is not None:
                    W = W + d
            h = h @ W + params.weights[f"b{i}"]
            if i < n_layers - 1:
                h = torch.nn.functional.silu(h)
        out = h
    if not torch.isfinite(out).all():
        raise NonFiniteError("non-finite activations in predict_eps")
    return out


def guided_eps(params: DenoiserParams, x_t, c, t, guidance_scale: float) -> torch.Tensor:
    """Classifier-free guidance; g=1 and g=0 return the single branch exactly."""
    if guidance_scale == 1.0:
        return predict_eps(params, x_t, c, t)
    c_null = to_null(np.asarray(c))
    if guidance_scale == 0.0:
        return predict_eps(params, x_t, c_null, t)
    e_c = predict_eps(params, x_t, c, t)
    e_n = predict_eps(params, x_t, c_null, t)
    return e_n + guidance_scale * (e_c - e_n)


def denoising_mse(params: DenoiserParams, x_t, c, t, eps_target) -> torch.Tensor:
    """Per-row unreduced sum of squares ``||eps_target - eps(x_t, c, t)||^2``."""
    eps_target = _as_tensor(eps_target)
    pred = predict_eps(params, x_t, c, t)
    if pred.shape != eps_target.shape:
        raise ValueError("eps_target shape does not match prediction")
    return ((eps_target - pred) ** 2).sum(dim=1)


# --------------------------------------------------------------------------
# Samplers
# --------------------------------------------------------------------------


@dataclass
class Trajectory:
    timesteps: list[int]
    states: list[np.ndarray]


def sampling_timesteps(T: int, steps: int) -> np.ndarray:
    """Descending, evenly spaced timesteps ending at 0."""
    if steps < 1 or steps > T:
        raise ValueError(f"steps must be in [1, {T}], got {steps}")
    if steps == 1:
        return np.array([T - 1])
    return np.round(np.linspace(0, T - 1, steps)).astype(int)[::-1]


def _reverse_step(schedule: NoiseSchedule, x, eps, t: int, t_prev: int, z, clip_x0: float | None = None):
    ab_t = schedule.alpha_bars[t]
    ab_prev = schedule.alpha_bars[t_prev] if t_prev >= 0 else 1.0
    if clip_x0 is not None:
        # clip the implied x0 to the data range and re-derive eps from it
        x0 = np.clip((x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t), -clip_x0, clip_x0)
        eps = (x - math.sqrt(ab_t) * x0) / math.sqrt(1.0 - ab_t)
    a_eff = ab_t / ab_prev
    b_eff = 1.0 - a_eff
    mean = (x - b_eff / math.sqrt(1.0 - ab_t) * eps) / math.sqrt(a_eff)
    if t_prev < 0:
        return mean
    var = b_eff * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + math.sqrt(var) * z


def ancestral_sample(params: DenoiserParams, c, schedule: NoiseSchedule, steps: int,
                     guidance_scale: float, rng: np.random.Generator, record: bool = True,
                     clip_x0: float | None = None):
    """Strided DDPM ancestral sampling for a batch of condition rows ``c``.

    Returns ``(x0, trajectory)``; the trajectory is None when ``record`` is False.
    ``clip_x0`` bounds the implied clean sample at every step (off by default).
    """
    if guidance_scale < 0:
        raise ValueError("guidance_scale must be >= 0")
    if steps > schedule.T:
        raise ValueError(f"steps={steps} exceeds T={schedule.T}")
    c = np.asarray(c, dtype=np.float64)
    d = params.net.data_dim if params.net is not None else params.analytic.dim
    ts = sampling_timesteps(schedule.T, steps)
    x = rng.standard_normal((c.shape[0], d))
    traj = Trajectory([int(ts[0])], [x.copy()]) if record else None
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
            eps = guided_eps(params, x, c, int(t), guidance_scale).numpy()
            z = rng.standard_normal(x.shape) if t_prev >= 0 else None
            x = _reverse_step(schedule, x, eps, int(t), t_prev, z, clip_x0)
            if record:
                traj.timesteps.append(t_prev)
                traj.states.append(x.copy())
    return x, traj


def inpaint_sample(params: DenoiserParams, x_known, mask, c, schedule: NoiseSchedule, steps: int,
                   rng: np.random.Generator, guidance_scale: float = 1.0,
                   clip_x0: float | None = None) -> np.ndarray:
    """Regenerate entries where ``mask == 1``; entries where ``mask == 0`` are kept from ``x_known``.

    The known region is replaced by a forward-diffused copy of ``x_known`` after
    every reverse step and copied back verbatim at the end.
    """
    x_known = np.asarray(x_known, dtype=np.float64)
    mask = np.broadcast_to(np.asarray(mask), x_known.shape) if np.ndim(mask) == 1 else np.asarray(mask)
    if mask.shape != x_known.shape:
        raise ValueError(f"mask shape {mask.shape} does not match sample shape {x_known.shape}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    if steps > schedule.T:
        raise ValueError(f"steps={steps} exceeds T={schedule.T}")
    regen = mask == 1
    c = np.asarray(c, dtype=np.float64)
    ts = sampling_timesteps(schedule.T, steps)
    x = rng.standard_normal(x_known.shape)
    x = np.where(regen, x, forward_diffuse(x_known, int(ts[0]), rng.standard_normal(x.shape), schedule))
    with torch.no_grad():
        for i, t in enumerate(ts):
            t_prev = int(ts[i + 1]) if i + 1 < len(ts) else -1
            eps = guided_eps(params, x, c, int(t), guidance_scale).numpy()
            z = rng.standard_normal(x.shape) if t_prev >= 0 else None
            x = _reverse_step(schedule, x, eps, int(t), t_prev, z, clip_x0)
            if t_prev >= 0:
                known = forward_diffuse(x_known, t_prev, rng.standard_normal(x.shape), schedule)
                x = np.where(regen, x, known)
    return np.where(regen, x, x_known)


# --------------------------------------------------------------------------
# Closed-form oracle
# --------------------------------------------------------------------------


class GaussianPosteriorEps:
    """Exact E[eps | x_t] when x0 ~ N(mean, s^2 I); ignores the condition."""

    def __init__(self, mean, cov_scale: float, schedule: NoiseSchedule):
        if cov_scale <= 0:
            raise ValueError("cov_scale must be positive")
        self.mean = torch.as_tensor(np.asarray(mean, dtype=np.float64))
        self.s2 = float(cov_scale) ** 2
        self.schedule = schedule
        self.dim = int(self.mean.shape[0])

    def __call__(self, x_t, c, t):
        ab = torch.as_tensor(self.schedule.alpha_bars[np.asarray(t)])[:, None]
        return torch.sqrt(1 - ab) * (x_t - torch.sqrt(ab) * self.mean) / (ab * self.s2 + 1 - ab)


class ClassGaussianEps:
    """Exact E[eps | x_t, class] when x0 | class ~ N(mean_k, cov_k).

    The class is the argmax of the one-hot part of the condition row; a null
    condition uses the pooled Gaussian over all classes.
    """

    def __init__(self, means, covs, pooled_mean, pooled_cov, schedule: NoiseSchedule):
        self.schedule = schedule
        self.means = np.asarray(means, dtype=np.float64)
        self.dim = int(self.means.shape[1])
        mats = list(covs) + [pooled_cov]
        self.centers = np.concatenate([self.means, np.asarray(pooled_mean, dtype=np.float64)[None]])
        eig = [np.linalg.eigh(np.asarray(m, dtype=np.float64)) for m in mats]
        self.lams = np.stack([np.clip(e[0], 0.0, None) for e in eig])
        self.vecs = np.stack([e[1] for e in eig])

    @classmethod
    def fit(cls, x, labels, n_classes: int, schedule: NoiseSchedule, shrink: float = 1e-2) -> "ClassGaussianEps":
        x = np.asarray(x, dtype=np.float64)
        labels = np.asarray(labels)
        eye = shrink * np.eye(x.shape[1])
        means, covs = [], []
        for k in range(n_classes):
            xk = x[labels == k]
            if len(xk) < 2:
                raise ValueError(f"need at least two samples of class {k}")
            means.append(xk.mean(axis=0))
            covs.append(np.cov(xk, rowvar=False) + eye)
        return cls(means, covs, x.mean(axis=0), np.cov(x, rowvar=False) + eye, schedule)

    def classes(self, c) -> np.ndarray:
        c = np.asarray(c)
        k = np.argmax(c[:, : len(self.means)], axis=1)
        return np.where(c[:, -1] > 0.5, len(self.means), k)

    def __call__(self, x_t, c, t):
        x = x_t.detach().numpy() if torch.is_tensor(x_t) else np.asarray(x_t)
        c = c.detach().numpy() if torch.is_tensor(c) else np.asarray(c)
        ab = self.schedule.alpha_bars[np.asarray(t)][:, None]
        k = self.classes(c)
        r = x - np.sqrt(ab) * self.centers[k]
        V = self.vecs[k]
        proj = np.einsum("bji,bj->bi", V, r)
        proj *= np.sqrt(1 - ab) / (ab * self.lams[k] + 1 - ab)
        return torch.as_tensor(np.einsum("bij,bj->bi", V, proj))


def class_gaussian_oracle(x, labels, n_classes: int, schedule: NoiseSchedule, shrink: float = 1e-2) -> DenoiserParams:
    return DenoiserParams(net=None, weights={}, role="oracle",
                          analytic=ClassGaussianEps.fit(x, labels, n_classes, schedule, shrink))


def oracle_denoiser(mean, cov_scale: float, schedule: NoiseSchedule) -> DenoiserParams:
    return DenoiserParams(net=None, weights={}, role="oracle",
                          analytic=GaussianPosteriorEps(mean, cov_scale, schedule))


# --------------------------------------------------------------------------
# Checkpoint files
# --------------------------------------------------------------------------


def params_to_arrays(params: DenoiserParams, prefix: str = "") -> tuple[dict, dict]:
    if params.analytic is not None:
        raise ValueError("analytic oracle denoisers are not serialisable")
    arrays = {f"{prefix}weights/{k}": v.detach().numpy() for k, v in params.weights.items()}
    meta = {"role": params.role, "net": vars(params.net).copy(), "adapter": None}
    if params.adapter is not None:
        arrays.update({f"{prefix}adapter/{k}": v.detach().numpy() for k, v in params.adapter.factors.items()})
        meta["adapter"] = {"rank": params.adapter.rank, "alpha": params.adapter.alpha}
    return arrays, meta


def params_from_arrays(arrays: dict, meta: dict, prefix: str = "") -> DenoiserParams:
    weights, factors = {}, {}
    for key, arr in arrays.items():
        if not key.startswith(prefix):
            continue
        kind, _, name = key[len(prefix):].partition("/")
        if kind == "weights":
            weights[name] = torch.as_tensor(arr.copy())
        elif kind == "adapter":
            factors[name] = torch.as_tensor(arr.copy())
    params = DenoiserParams(NetConfig(**meta["net"]), weights, meta["role"])
    if meta.get("adapter"):
        params.adapter = LowRankAdapter(meta["adapter"]["rank"], meta["adapter"]["alpha"], factors)
    return params


def save_denoiser(path, params: DenoiserParams, schedule: NoiseSchedule | None = None, meta: dict | None = None):
    from realign.io import save_arrays

    arrays, pmeta = params_to_arrays(params, "params/")
    if schedule is not None:
        arrays["schedule/betas"] = schedule.betas
    return save_arrays(path, arrays, {"kind": "denoiser", "params": pmeta, **(meta or {})})


def load_denoiser(path) -> tuple[DenoiserParams, NoiseSchedule | None, dict]:
    from realign.io import load_arrays

    arrays, meta = load_arrays(path)
    params = params_from_arrays(arrays, meta["params"], "params/")
    schedule = NoiseSchedule.from_betas(arrays["schedule/betas"]) if "schedule/betas" in arrays else None
    return params, schedule, meta
