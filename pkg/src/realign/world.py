"""The toy world every experiment runs in: data spaces plus pretrained denoisers.

A world bundles
  * ``real``: the preferred "real" distribution (sharp, high-contrast shapes or
    a tight Gaussian mixture),
  * ``base_space``: what the base model was pretrained on (blurred, lower
    contrast, noisier; or a shrunken, wider mixture) so the base model starts
    away from the real distribution,
  * pretrained models: ``base`` and an under-trained ``weak`` copy used to
    construct negatives,
  * two oracle scorers: exact class-conditional Gaussian denoisers fit to two
    independent draws of real data. One drives curation, the other is only ever
    used for evaluation.

Pretraining is deterministic given the config, and results are cached on disk
keyed by a hash of the config.
"""

from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from realign.diffusion import DenoiserParams, NetConfig, class_gaussian_oracle, init_denoiser, load_denoiser, make_linear_schedule, save_denoiser
from realign.io import canonical_json, sha256_bytes
from realign.optim import OptimizerConfig
from realign.scoring import DenoisingScorer
from realign.toydata import GaussianMixture2D, ShapeImages
from realign.training import fit_denoiser

log = logging.getLogger(__name__)

WORLD_VERSION = 1


PRETRAIN_FIELDS = ("kind", "image_size", "T", "beta_start", "beta_end", "hidden", "depth", "time_features",
                   "pretrain_steps", "pretrain_batch", "pretrain_lr", "weak_fraction", "seed")


@dataclass
class WorldConfig:
    kind: str = "images"
    image_size: int = 8
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.2
    hidden: int = 256
    depth: int = 3
    time_features: int = 16
    pretrain_steps: int = 3000
    pretrain_batch: int = 128
    pretrain_lr: float = 1e-3
    weak_fraction: float = 0.1
    corpus_size: int = 200
    flat_fraction: float = 0.3
    oracle_samples: int = 3000
    oracle_shrink: float = 1e-2
    clip_x0: float | None = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("images", "points"):
            raise ValueError(f"world kind must be 'images' or 'points', got {self.kind!r}")

    def digest(self) -> str:
        return sha256_bytes(canonical_json({"v": WORLD_VERSION, **asdict(self)}))[:16]

    def pretrain_digest(self) -> str:
        """Hash of the fields that determine the pretrained checkpoints (the cache key)."""
        keys = PRETRAIN_FIELDS
        return sha256_bytes(canonical_json({"v": WORLD_VERSION, **{k: getattr(self, k) for k in keys}}))[:16]


def default_cache_dir() -> Path:
    return Path(os.environ.get("REALIGN_CACHE", Path.home() / ".cache" / "realign"))


class World:
    def __init__(self, cfg: WorldConfig, cache_dir: Path | str | None = None):
        self.cfg = cfg
        self.cache_dir = Path(cache_dir) if cache_dir is not None else None
        self.schedule = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
        if cfg.kind == "images":
            geom = dict(size=cfg.image_size, extent=(1, 2), jitter=1) if cfg.image_size < 12 else dict(size=cfg.image_size)
            self.real = ShapeImages(contrast=(1.4, 1.8), **geom)
            self.flat = ShapeImages(contrast=(0.2, 0.6), **geom)
            self.base_space = ShapeImages(contrast=(0.8, 1.2), blur=1, texture=0.05, **geom)
            self.image_shape = (self.real.size, self.real.size)
        else:
            self.real = GaussianMixture2D(radius=2.0, std=0.3)
            self.flat = None
            self.base_space = GaussianMixture2D(radius=1.4, std=0.6)
            self.image_shape = None
        self.net = NetConfig(self.real.dim, self.real.cond_dim, hidden=cfg.hidden, depth=cfg.depth,
                             time_features=cfg.time_features, T=cfg.T)

    @property
    def clip_x0(self) -> float | None:
        return self.cfg.clip_x0 if self.cfg.kind == "images" else None

    def _sampler(self, space):
        def draw(rng, n):
            x, labels = space.sample(rng, n)
            return x, space.conditions(labels)

        return draw

    def _pretrain(self, name: str, space, steps: int, seed: int) -> DenoiserParams:
        path = None
        if self.cache_dir is not None:
            path = self.cache_dir / f"{self.cfg.kind}-{self.cfg.pretrain_digest()}-{name}.ckpt"
            if path.exists():
                return load_denoiser(path)[0]
        log.info("pretraining %s for %d steps", name, steps)
        params = init_denoiser(self.net, np.random.default_rng([self.cfg.seed, seed, 0]))
        params = fit_denoiser(params, self._sampler(space), self.schedule, steps, self.cfg.pretrain_batch,
                              OptimizerConfig(lr=self.cfg.pretrain_lr), seed=self.cfg.seed * 1000 + seed)
        if path is not None:
            save_denoiser(path, params, self.schedule, {"world": asdict(self.cfg), "name": name})
        return params

    @cached_property
    def base(self) -> DenoiserParams:
        return self._pretrain("base", self.base_space, self.cfg.pretrain_steps, 1)

    @cached_property
    def weak(self) -> DenoiserParams:
        steps = max(1, int(round(self.cfg.weak_fraction * self.cfg.pretrain_steps)))
        return self._pretrain("weak", self.base_space, steps, 2)

    def _oracle(self, seed: int) -> DenoiserParams:
        rng = np.random.default_rng([self.cfg.seed, 5000 + seed])
        x, labels = self.real.sample(rng, self.cfg.oracle_samples)
        return class_gaussian_oracle(x, labels, self.real.cond_dim, self.schedule, self.cfg.oracle_shrink)

    @cached_property
    def curation_scorer(self) -> DenoisingScorer:
        return DenoisingScorer(self._oracle(1), self.schedule, "oracle-curation", seed=self.cfg.seed * 7 + 10)

    @cached_property
    def eval_scorer(self) -> DenoisingScorer:
        return DenoisingScorer(self._oracle(2), self.schedule, "oracle-eval", seed=self.cfg.seed * 7 + 11)

    def corpus(self, n: int | None = None, seed: int = 0):
        from realign.curation import make_corpus

        if self.flat is None:
            raise ValueError("curation needs an image world")
        return make_corpus(self.real, self.flat, n or self.cfg.corpus_size, self.cfg.flat_fraction, seed)

    def real_samples(self, n: int, seed: int, labels=None):
        rng = np.random.default_rng([self.cfg.seed, 77, seed])
        x, lab = self.real.sample(rng, n, labels)
        return x, self.real.conditions(lab)
