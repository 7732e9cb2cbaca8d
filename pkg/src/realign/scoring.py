"""Toy preference scorers.

A scorer maps a batch of samples and condition rows to one real number per
sample, higher meaning preferred. The default is an ELBO-style proxy: the
negative mean denoising error of a well-trained model over a fixed set of
timesteps and a fixed bank of noise draws, so repeated calls are deterministic.
"""

from __future__ import annotations

from typing import Protocol

import numpy as np
import torch

from realign.diffusion import DenoiserParams, NoiseSchedule, forward_diffuse, predict_eps


class Scorer(Protocol):
    name: str

    def score(self, x: np.ndarray, c: np.ndarray) -> np.ndarray: ...


class DenoisingScorer:
    def __init__(self, model: DenoiserParams, schedule: NoiseSchedule, name: str = "denoising",
                 n_timesteps: int = 10, n_noise: int = 2, seed: int = 0, max_t_fraction: float = 0.6):
        self.model = model
        self.schedule = schedule
        self.name = name
        top = max(1, int(round(max_t_fraction * (schedule.T - 1))))
        self.timesteps = np.round(np.linspace(0, top, n_timesteps)).astype(int)
        dim = model.net.data_dim if model.net is not None else model.analytic.dim
        self.noise = np.random.default_rng(seed).standard_normal((n_noise, n_timesteps, dim))

    def score(self, x, c) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        c = np.atleast_2d(np.asarray(c, dtype=np.float64))
        B, d = x.shape
        total = np.zeros(B)
        with torch.no_grad():
            for bank in self.noise:
                for t, eps in zip(self.timesteps, bank):
                    e = np.broadcast_to(eps, (B, d))
                    x_t = forward_diffuse(x, int(t), e, self.schedule)
                    pred = predict_eps(self.model, x_t, c, int(t)).numpy()
                    total += ((pred - e) ** 2).mean(axis=1)
        return -total / (len(self.noise) * len(self.timesteps))


class FunctionScorer:
    """Wrap a plain function ``f(x, c) -> scores``."""

    def __init__(self, fn, name: str = "function"):
        self.fn = fn
        self.name = name

    def score(self, x, c) -> np.ndarray:
        return np.asarray(self.fn(np.atleast_2d(x), np.atleast_2d(c)), dtype=np.float64)
