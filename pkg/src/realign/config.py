"""Pipeline configuration: dataclass tree, named presets and YAML loading.

A YAML file overrides a preset key by key::

    preset: toy
    seed: 3
    stage1:
      steps: 500
      optimizer: {lr: 2.0e-4}

Unknown keys and wrongly typed values raise :class:`ConfigError`.
"""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field
from pathlib import Path

import dacite
import numpy as np
import yaml

from realign.curation import CurationConfig, CurationResult, PairDataset, run_curation
from realign.evaluation import EvalConfig, Experiment
from realign.objectives import Stage1Config, Stage2Config
from realign.optim import OptimizerConfig
from realign.training import AdapterConfig, TrainConfig
from realign.world import World, WorldConfig, default_cache_dir

SCHEMA_VERSION = 1
PERTURB_MODES = ("inpainting", "inpainting_strong", "text_to_image")


class ConfigError(ValueError):
    pass


@dataclass
class PipelineConfig:
    schema_version: int = SCHEMA_VERSION
    preset: str = "toy"
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    stage1: TrainConfig = field(default_factory=lambda: TrainConfig(stage="stage1"))
    stage2: TrainConfig = field(default_factory=lambda: TrainConfig(stage="stage2"))
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablation_seeds: tuple[int, ...] = (0, 1, 2)
    sweep_sizes: tuple[int, ...] = (64, 128, 256)
    perturb_modes: tuple[str, ...] = PERTURB_MODES
    cache_dir: str | None = None

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version}; this build reads {SCHEMA_VERSION}")
        if self.stage1.stage != "stage1" or self.stage2.stage != "stage2":
            raise ConfigError("stage1/stage2 sections must carry stage: stage1 / stage2")
        bad = set(self.perturb_modes) - set(PERTURB_MODES)
        if bad:
            raise ConfigError(f"unknown perturbation modes {sorted(bad)}")
        self.ablation_seeds = tuple(self.ablation_seeds)
        self.sweep_sizes = tuple(self.sweep_sizes)
        self.perturb_modes = tuple(self.perturb_modes)

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# Presets
# --------------------------------------------------------------------------


def toy_preset() -> PipelineConfig:
    """Desk-scale budgets on the 8x8 shape world; the default."""
    world = WorldConfig(corpus_size=2000)
    return PipelineConfig(
        preset="toy",
        world=world,
        curation=CurationConfig(top_k=512, saliency_fraction=0.5, clip_x0=1.0, image_shape=(8, 8)),
        stage1=TrainConfig(stage="stage1", optimizer=OptimizerConfig(lr=1e-4), steps=300, batch_size=64,
                           prompt_dropout=0.2, stage1=Stage1Config(margin=-0.1, clip_x0=1.0)),
        stage2=TrainConfig(stage="stage2", optimizer=OptimizerConfig(lr=3e-5), steps=400, batch_size=128,
                           prompt_dropout=0.0, stage2=Stage2Config(beta=10.0)),
    )


def points_preset() -> PipelineConfig:
    """Stage-1 distribution alignment on the 2-D Gaussian-mixture world."""
    cfg = toy_preset()
    cfg.preset = "points"
    cfg.world = WorldConfig(kind="points", hidden=128, depth=2, pretrain_steps=3000, pretrain_lr=3e-3, clip_x0=None)
    cfg.stage1 = TrainConfig(stage="stage1", optimizer=OptimizerConfig(lr=1e-2), steps=500, batch_size=512,
                             prompt_dropout=0.2, stage1=Stage1Config(margin=-1.0))
    cfg.eval = EvalConfig(per_condition=1024, generation_seeds=(99,), metrics=("preference", "sliced_wasserstein"))
    return cfg


def paper_preset(variant: str = "sd15") -> PipelineConfig:
    """Published fine-tuning hyperparameters on the toy world (slow: full step budgets)."""
    cfg = toy_preset()
    cfg.preset = "paper" if variant == "sd15" else "paper-sd35m"
    cfg.curation = CurationConfig(top_k=512, clip_x0=1.0, image_shape=(8, 8))
    if variant == "sd15":
        s1 = dict(lr=1e-4, steps=1600, adapter=AdapterConfig(rank=4, alpha=4.0))
        s2 = dict(lr=2.56e-6, steps=1000, warmup=125, beta=Stage2Config.preset("sd15").beta)
    elif variant == "sd35m":
        s1 = dict(lr=2e-4, steps=3200, adapter=AdapterConfig(rank=32, alpha=64.0))
        s2 = dict(lr=2.56e-6, steps=500, warmup=0, beta=Stage2Config.preset("sd35m").beta)
    else:
        raise ConfigError(f"unknown paper variant {variant!r}")
    cfg.stage1 = TrainConfig(stage="stage1", optimizer=OptimizerConfig(lr=s1["lr"]), steps=s1["steps"], batch_size=4,
                             accumulation=64, prompt_dropout=0.2, adapter=s1["adapter"],
                             stage1=Stage1Config(margin=-0.001, sampling_steps=20, guidance_scale=1.0, clip_x0=1.0))
    cfg.stage2 = TrainConfig(stage="stage2", optimizer=OptimizerConfig(lr=s2["lr"], warmup_steps=s2["warmup"]),
                             steps=s2["steps"], batch_size=4, accumulation=64, prompt_dropout=0.0,
                             adapter=s1["adapter"], stage2=Stage2Config(beta=s2["beta"]))
    return cfg


PRESETS = {"toy": toy_preset, "points": points_preset, "paper": paper_preset,
           "paper-sd35m": lambda: paper_preset("sd35m")}


def preset(name: str) -> PipelineConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in out:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _merge(out[key], value, where + ".")
        elif out[key] is None and isinstance(value, dict) and key == "adapter":
            out[key] = _merge(asdict(AdapterConfig()), value, where + ".")
        else:
            out[key] = value
    return out


def from_dict(data: dict, preset_name: str | None = None) -> PipelineConfig:
    """Apply ``data`` on top of a preset (``data['preset']``, then ``preset_name``, then toy)."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a mapping")
    name = preset_name or data.get("preset") or "toy"
    base = preset(name).to_dict()
    merged = _merge(base, {k: v for k, v in data.items() if k != "preset"})
    merged["preset"] = name
    try:
        return dacite.from_dict(PipelineConfig, merged, config=dacite.Config(strict=True, cast=[tuple]))
    except ConfigError:
        raise
    except (dacite.DaciteError, ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err


def load_config(path=None, preset_name: str | None = None, overrides: dict | None = None) -> PipelineConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            data = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: {err}") from err
    if preset_name is not None:
        data = {**data, "preset": preset_name}
    if overrides:
        data = _merge_plain(data, overrides)
    return from_dict(data)


def _merge_plain(a: dict, b: dict) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge_plain(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def dump_config(cfg: PipelineConfig) -> str:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x

    return yaml.safe_dump(plain(cfg.to_dict()), sort_keys=False)


# --------------------------------------------------------------------------
# Pipeline: binds a config to its world
# --------------------------------------------------------------------------


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        cache = cfg.cache_dir if cfg.cache_dir is not None else default_cache_dir()
        self.world = World(cfg.world, cache_dir=cache)

    @property
    def schedule(self):
        return self.world.schedule

    def corpus(self):
        return self.world.corpus(self.cfg.world.corpus_size, seed=self.cfg.seed)

    def curation_config(self, mode: str = "inpainting") -> CurationConfig:
        from dataclasses import replace

        negative = "text_to_image" if mode == "text_to_image" else "inpainting"
        return replace(self.cfg.curation, negative_mode=negative, seed=self.cfg.seed)

    def curate(self, mode: str = "inpainting") -> CurationResult:
        if mode not in PERTURB_MODES:
            raise ConfigError(f"unknown curation mode {mode!r}")
        model = self.world.base if mode == "inpainting_strong" else self.world.weak
        return run_curation(self.corpus(), model, self.world.curation_scorer, self.curation_config(mode),
                            self.schedule)

    def experiment(self, run_dir=None) -> Experiment:
        w = self.world
        conds = w.real.conditions(np.arange(w.real.cond_dim))
        ref = None
        if "sliced_wasserstein" in self.cfg.eval.metrics:
            n = self.cfg.eval.per_condition * w.real.cond_dim
            ref, _ = w.real_samples(n, seed=1000 + self.cfg.seed, labels=np.repeat(np.arange(w.real.cond_dim),
                                                                                  self.cfg.eval.per_condition))
        return Experiment(base=w.base, schedule=w.schedule, scorer=w.eval_scorer, conditions=conds,
                          stage1=self.cfg.stage1, stage2=self.cfg.stage2, eval=self.cfg.eval, clip_x0=w.clip_x0,
                          image_shape=w.image_shape, real_reference=ref,
                          run_dir=Path(run_dir) if run_dir is not None else None)


def dataset_from_result(result: CurationResult) -> PairDataset:
    pairs = result.pairs
    records = [{"row": i, "source_id": p.source_id, "gap": p.gap, "winner_score": p.winner_score,
                "provenance": p.provenance} for i, p in enumerate(pairs)]
    return PairDataset(np.stack([p.winner for p in pairs]), np.stack([p.loser for p in pairs]),
                       np.stack([p.cond for p in pairs]), np.stack([p.mask for p in pairs]), records,
                       {"tau": result.tau, "stage_counts": result.stage_counts})
