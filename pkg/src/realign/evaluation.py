"""Metrics and experiment harnesses.

Every metric is a pure function of its inputs and seed. Harnesses train the
configurations they compare, evaluate all of them on the same generation
seeds and conditions, and return an :class:`EvalReport` whose aggregates are
recomputed from the stored per-seed raw values.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import wasserstein_distance

from realign.curation import PairDataset
from realign.diffusion import DenoiserParams, NoiseSchedule, ancestral_sample
from realign.io import load_arrays, save_arrays, write_json
from realign.scoring import Scorer
from realign.training import TrainConfig, run_stage1, run_stage2

log = logging.getLogger(__name__)

ABLATION_CONFIGS = ("base", "stage1_only", "stage2_only", "both")
METRICS = ("preference", "win_rate_vs_base", "laplacian_variance", "sliced_wasserstein")

# Published full-scale PickScore values for the four ablation rows (SD-1.5).
# Kept as context in report metadata; nothing at toy scale is compared to them.
ABLATION_ANCHOR = {"metric": "PickScore", "base": 20.65, "stage2_only": 20.74, "stage1_only": 20.87, "both": 21.04}
SWEEP_ANCHOR = {"note": "256 -> 512 pairs improves; beyond 512 the curve plateaus"}


# --------------------------------------------------------------------------
# Metrics
# --------------------------------------------------------------------------


def laplacian_variance(sample, shape: tuple[int, int] | None = None) -> float:
    """Variance of the 4-neighbour Laplacian over the interior pixels of an image.

    Only pixels with all four neighbours inside the grid contribute, so affine
    images score exactly 0.
    """
    img = np.asarray(sample, dtype=np.float64)
    if shape is not None:
        img = img.reshape(shape)
    if img.ndim != 2 or min(img.shape) < 3:
        raise ValueError(f"expected a 2-D image of at least 3x3 pixels, got shape {img.shape}")
    lap = img[:-2, 1:-1] + img[2:, 1:-1] + img[1:-1, :-2] + img[1:-1, 2:] - 4.0 * img[1:-1, 1:-1]
    return float(lap.var())


def prefix_contrast_score(scorer: Scorer, sample, cond_a, cond_b) -> np.ndarray | float:
    """``score(sample, cond_a) - score(sample, cond_b)``; a scalar for a single sample."""
    x = np.asarray(sample, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    ca = np.broadcast_to(np.atleast_2d(cond_a), (len(x), np.shape(np.atleast_2d(cond_a))[1]))
    cb = np.broadcast_to(np.atleast_2d(cond_b), (len(x), np.shape(np.atleast_2d(cond_b))[1]))
    diff = np.asarray(scorer.score(x, ca)) - np.asarray(scorer.score(x, cb))
    return float(diff[0]) if single else diff


def random_directions(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    d = rng.standard_normal((n, dim))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def sliced_wasserstein(samples_a, samples_b, projections: int = 64, rng: np.random.Generator | int = 0) -> float:
    """Mean 1-D Wasserstein-1 distance over random unit projections."""
    a = np.atleast_2d(np.asarray(samples_a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(samples_b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("sliced_wasserstein needs non-empty sample sets")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if projections < 1:
        raise ValueError("projections must be >= 1")
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    dirs = random_directions(rng, projections, a.shape[1])
    pa, pb = a @ dirs.T, b @ dirs.T
    if len(a) == len(b):
        return float(np.abs(np.sort(pa, axis=0) - np.sort(pb, axis=0)).mean())
    return float(np.mean([wasserstein_distance(pa[:, k], pb[:, k]) for k in range(projections)]))


def paired_win_fraction(scores_a, scores_b) -> float:
    a, b = np.asarray(scores_a), np.asarray(scores_b)
    if a.shape != b.shape or a.size == 0:
        raise ValueError("win fraction needs equally sized, non-empty score arrays")
    return float(((a > b) + 0.5 * (a == b)).mean())


def _seed_from(rng) -> int:
    if isinstance(rng, np.random.Generator):
        return int(rng.integers(2**63 - 1))
    return int(rng)


def generate(model: DenoiserParams, conds: np.ndarray, schedule: NoiseSchedule, seed: int, steps: int = 20,
             guidance_scale: float = 1.0, clip_x0: float | None = None) -> np.ndarray:
    x, _ = ancestral_sample(model, conds, schedule, steps, guidance_scale, np.random.default_rng(seed),
                            record=False, clip_x0=clip_x0)
    return x


def win_rate(model_a: DenoiserParams, model_b: DenoiserParams, conditions, scorer: Scorer,
             samples_per_condition: int, rng, schedule: NoiseSchedule, steps: int = 20,
             guidance_scale: float = 1.0, clip_x0: float | None = None) -> float:
    """Fraction of condition-paired generations where ``scorer(a) > scorer(b)``; ties count one half.

    Both models are sampled from the same generation seed, so passing the
    same ``rng`` (an int, or a generator in the same state) to
    ``win_rate(A, B)`` and ``win_rate(B, A)`` makes the two sum to exactly 1.
    """
    conds = np.atleast_2d(np.asarray(conditions, dtype=np.float64))
    if len(conditions) == 0:
        raise ValueError("win_rate needs at least one condition")
    if samples_per_condition < 1:
        raise ValueError("samples_per_condition must be >= 1")
    conds = np.repeat(conds, samples_per_condition, axis=0)
    seed = _seed_from(rng)
    xa = generate(model_a, conds, schedule, seed, steps, guidance_scale, clip_x0)
    xb = generate(model_b, conds, schedule, seed, steps, guidance_scale, clip_x0)
    return paired_win_fraction(scorer.score(xa, conds), scorer.score(xb, conds))


# --------------------------------------------------------------------------
# Reports
# --------------------------------------------------------------------------


@dataclass
class EvalReport:
    experiment_id: str
    rows: list[str]
    metrics: list[str]
    seeds: list[int]
    raws: dict[str, dict[str, list[float]]] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)
    timestamps: dict = field(default_factory=dict)

    def record(self, row: str, metric: str, value: float):
        self.raws.setdefault(row, {}).setdefault(metric, []).append(float(value))

    def values(self, row: str, metric: str) -> np.ndarray:
        return np.asarray(self.raws[row][metric], dtype=np.float64)

    def aggregate(self, row: str, metric: str) -> float:
        return float(self.values(row, metric).mean())

    def spread(self, row: str, metric: str) -> float:
        v = self.values(row, metric)
        return float(v.std(ddof=1)) if len(v) > 1 else 0.0

    @property
    def table(self) -> dict[str, dict[str, float]]:
        return {r: {m: self.aggregate(r, m) for m in self.metrics if m in self.raws.get(r, {})} for r in self.rows}

    def check_consistency(self, tol: float = 1e-12, table: dict | None = None) -> bool:
        table = self.table if table is None else table
        return all(abs(table[r][m] - self.aggregate(r, m)) <= tol for r in table for m in table[r])

    def to_dict(self) -> dict:
        return {"experiment_id": self.experiment_id, "rows": self.rows, "metrics": self.metrics,
                "seeds": self.seeds, "table": self.table, "raws": self.raws, "metadata": self.metadata}

    def format_table(self) -> str:
        width = max([len(r) for r in self.rows] + [6])
        lines = [" " * width + "".join(f"{m:>22}" for m in self.metrics)]
        for r in self.rows:
            cells = []
            for m in self.metrics:
                if m in self.raws.get(r, {}):
                    cells.append(f"{self.aggregate(r, m):>14.5f} ±{self.spread(r, m):.4f}")
                else:
                    cells.append(f"{'-':>22}")
            lines.append(f"{r:<{width}}" + "".join(cells))
        return "\n".join(lines)

    def save(self, out_dir, name: str = "report") -> Path:
        """Write ``<name>.json`` and ``<name>.raws.bin`` (deterministic) plus a timestamp sidecar."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        arrays = {f"{r}/{m}": self.values(r, m) for r in self.raws for m in self.raws[r]}
        save_arrays(out_dir / f"{name}.raws.bin", arrays, {"experiment_id": self.experiment_id})
        path = out_dir / f"{name}.json"
        write_json(path, self.to_dict())
        write_json(out_dir / f"{name}.timestamps.json", self.timestamps)
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        import json

        path = Path(path)
        doc = json.loads(path.read_text())
        arrays, _ = load_arrays(path.with_name(path.name.replace(".json", ".raws.bin")))
        raws: dict = {}
        for key, arr in arrays.items():
            row, _, metric = key.rpartition("/")
            raws.setdefault(row, {})[metric] = [float(v) for v in arr]
        stamps = path.with_name(path.name.replace(".json", ".timestamps.json"))
        report = cls(doc["experiment_id"], doc["rows"], doc["metrics"], doc["seeds"], raws, doc["metadata"],
                     json.loads(stamps.read_text()) if stamps.exists() else {})
        if not report.check_consistency(table=doc["table"]):
            raise ValueError(f"{path}: stored aggregates disagree with the raw values")
        return report


def plot_report(report: EvalReport, out_dir, metric: str = "preference", x_values: list | None = None) -> Path:
    """Bar chart of one metric per row, or a line plot when ``x_values`` is given."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [r for r in report.rows if metric in report.raws.get(r, {})]
    means = [report.aggregate(r, metric) for r in rows]
    errs = [report.spread(r, metric) for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    if x_values is None:
        ax.bar(rows, means, yerr=errs, capsize=3, color="tab:blue")
        lo, hi = min(m - e for m, e in zip(means, errs)), max(m + e for m, e in zip(means, errs))
        pad = 0.1 * (hi - lo) + 1e-9
        ax.set_ylim(lo - pad, hi + pad)
    else:
        ax.errorbar(x_values, means, yerr=errs, marker="o", capsize=3)
        ax.set_xscale("log", base=2)
        ax.set_xlabel("preference pairs")
    ax.set_ylabel(metric)
    ax.set_title(report.experiment_id)
    fig.tight_layout()
    path = Path(out_dir) / f"{report.experiment_id}-{metric}.png"
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)
    return path


# --------------------------------------------------------------------------
# Experiment harnesses
# --------------------------------------------------------------------------


@dataclass
class EvalConfig:
    per_condition: int = 100
    generation_seeds: tuple[int, ...] = (99, 100)
    sampling_steps: int = 20
    guidance_scale: float = 1.0
    metrics: tuple[str, ...] = ("preference", "win_rate_vs_base", "laplacian_variance")
    sw_projections: int = 64

    def __post_init__(self):
        self.generation_seeds = tuple(self.generation_seeds)
        self.metrics = tuple(self.metrics)
        unknown = set(self.metrics) - set(METRICS)
        if unknown:
            raise ValueError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
        if self.per_condition < 1 or not self.generation_seeds:
            raise ValueError("evaluation needs per_condition >= 1 and at least one generation seed")


@dataclass
class Experiment:
    """Shared context of one comparison: base model, schedule, training recipes, evaluator."""

    base: DenoiserParams
    schedule: NoiseSchedule
    scorer: Scorer
    conditions: np.ndarray
    stage1: TrainConfig
    stage2: TrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)
    clip_x0: float | None = None
    image_shape: tuple[int, int] | None = None
    real_reference: np.ndarray | None = None
    run_dir: Path | None = None

    def eval_conditions(self) -> np.ndarray:
        return np.repeat(np.atleast_2d(self.conditions), self.eval.per_condition, axis=0)

    def samples(self, model: DenoiserParams) -> list[np.ndarray]:
        conds = self.eval_conditions()
        return [generate(model, conds, self.schedule, s, self.eval.sampling_steps, self.eval.guidance_scale,
                         self.clip_x0) for s in self.eval.generation_seeds]


class ModelEvaluator:
    """Evaluates models on fixed generation seeds, caching the base model's samples."""

    def __init__(self, exp: Experiment):
        self.exp = exp
        self.conds = exp.eval_conditions()
        self._base = None

    def _scored(self, model):
        xs = self.exp.samples(model)
        return xs, [np.asarray(self.exp.scorer.score(x, self.conds)) for x in xs]

    def base_scored(self):
        if self._base is None:
            self._base = self._scored(self.exp.base)
        return self._base

    def __call__(self, model: DenoiserParams, metrics) -> dict[str, float]:
        xs, scores = self._scored(model)
        out = {}
        for m in metrics:
            if m == "preference":
                out[m] = float(np.mean([s.mean() for s in scores]))
            elif m == "win_rate_vs_base":
                _, base_scores = self.base_scored()
                out[m] = paired_win_fraction(np.concatenate(scores), np.concatenate(base_scores))
            elif m == "laplacian_variance":
                if self.exp.image_shape is None:
                    continue
                out[m] = float(np.mean([laplacian_variance(x, self.exp.image_shape) for x in np.concatenate(xs)]))
            elif m == "sliced_wasserstein":
                if self.exp.real_reference is None:
                    continue
                out[m] = float(np.mean([sliced_wasserstein(x, self.exp.real_reference, self.exp.eval.sw_projections, 0)
                                        for x in xs]))
        return out


def train_two_stage(exp: Experiment, pairs: PairDataset, seed: int, stage1: bool, stage2: bool,
                    tag: str = "") -> DenoiserParams:
    model = exp.base
    sub = exp.run_dir / "cells" / f"{tag}seed{seed}" if exp.run_dir is not None and tag else None
    if stage1:
        cfg = replace(exp.stage1, seed=seed)
        model = run_stage1(model, pairs.winners, pairs.conds, cfg, exp.schedule, run_dir=sub).params
    if stage2:
        cfg = replace(exp.stage2, seed=seed)
        model = run_stage2(model, pairs.winners, pairs.losers, pairs.conds, cfg, exp.schedule, run_dir=sub).params
    return model


def _dump_partial(exp: Experiment, report: EvalReport, err: Exception):
    report.metadata["aborted"] = f"{type(err).__name__}: {err}"
    if exp.run_dir is not None:
        report.save(exp.run_dir, name="report.partial")
        log.error("training failed; partial report written to %s", exp.run_dir)


def _run_cells(exp: Experiment, report: EvalReport, cells, seeds, metrics):
    """``cells`` maps row name -> ``fn(seed) -> model`` (or None to reuse the base row)."""
    evaluator = ModelEvaluator(exp)
    base_values = None
    for seed in seeds:
        for row, build in cells.items():
            started = time.time()
            try:
                model = build(seed) if build is not None else None
            except Exception as err:
                _dump_partial(exp, report, err)
                raise
            if model is None:
                if base_values is None:
                    base_values = evaluator(exp.base, metrics)
                values = base_values
            else:
                values = evaluator(model, metrics)
            for m, v in values.items():
                report.record(row, m, v)
            report.timestamps[f"{row}/seed{seed}"] = {"started": started, "seconds": round(time.time() - started, 3)}
            log.info("%s seed %d: %s", row, seed, values)
    report.metrics = [m for m in metrics if any(m in report.raws.get(r, {}) for r in report.rows)]
    return report


@dataclass
class AblationGrid:
    pairs: PairDataset
    seeds: tuple[int, ...] = (0, 1, 2)
    configs: tuple[str, ...] = ABLATION_CONFIGS
    manifest_hash: str | None = None

    def __post_init__(self):
        self.seeds = tuple(self.seeds)
        if tuple(self.configs) != ABLATION_CONFIGS:
            raise ValueError(f"an ablation grid has exactly the configurations {ABLATION_CONFIGS}")
        if not self.seeds:
            raise ValueError("an ablation grid needs at least one seed")
        if len(self.pairs) == 0:
            raise ValueError("an ablation grid needs a non-empty pair dataset")


def ordering_check(report: EvalReport, metric: str = "preference") -> dict:
    """Check ``both >= stage1_only >= base`` and ``both >= stage2_only >= base`` on mean values."""
    m = {r: report.aggregate(r, metric) for r in ABLATION_CONFIGS}
    ordering = m["both"] >= m["stage1_only"] >= m["base"] and m["both"] >= m["stage2_only"] >= m["base"]
    pooled = math.sqrt((report.spread("both", metric) ** 2 + report.spread("base", metric) ** 2) / 2)
    margin = m["both"] - m["base"]
    return {"metric": metric, "expected": "both >= stage1_only >= base and both >= stage2_only >= base",
            "ordering_satisfied": bool(ordering), "both_minus_base": margin, "pooled_sd": pooled,
            "both_beyond_pooled_sd": bool(margin > pooled), "satisfied": bool(ordering and margin > pooled)}


def run_ablation(grid: AblationGrid, exp: Experiment, metrics=None, seeds=None) -> EvalReport:
    metrics = tuple(metrics or exp.eval.metrics)
    seeds = tuple(seeds if seeds is not None else grid.seeds)
    report = EvalReport("ablation", list(ABLATION_CONFIGS), list(metrics), list(seeds))
    report.metadata.update({"anchor": ABLATION_ANCHOR, "pairs": len(grid.pairs), "manifest_hash": grid.manifest_hash,
                            "generation_seeds": list(exp.eval.generation_seeds)})
    cells = {
        "base": None,
        "stage1_only": lambda s: train_two_stage(exp, grid.pairs, s, True, False, "stage1_only-"),
        "stage2_only": lambda s: train_two_stage(exp, grid.pairs, s, False, True, "stage2_only-"),
        "both": lambda s: train_two_stage(exp, grid.pairs, s, True, True, "both-"),
    }
    _run_cells(exp, report, cells, seeds, metrics)
    if "preference" in report.metrics:
        report.metadata["expectation"] = ordering_check(report)
    return report


def data_size_sweep(sizes, exp: Experiment, pairs: PairDataset, seeds=(0, 1, 2), metrics=("preference",)) -> EvalReport:
    sizes = [int(s) for s in sizes]
    if not sizes or any(s < 1 for s in sizes) or any(b <= a for a, b in zip(sizes, sizes[1:])):
        raise ValueError(f"sizes must be positive and strictly ascending, got {sizes}")
    warnings = []
    effective = []
    for s in sizes:
        if s > len(pairs):
            warnings.append(f"size {s} exceeds the {len(pairs)} available pairs; capped")
            log.warning(warnings[-1])
        effective.append(min(s, len(pairs)))
    rows = ["base"] + [f"n={s}" for s in sizes]
    report = EvalReport("data_size_sweep", rows, list(metrics), list(seeds))
    cells = {"base": None}
    for s, n in zip(sizes, effective):
        cells[f"n={s}"] = (lambda n, s: lambda seed: train_two_stage(exp, pairs.head(n), seed, True, True, f"n{s}-"))(n, s)
    _run_cells(exp, report, cells, seeds, metrics)
    metric = metrics[0]
    means = [report.aggregate(f"n={s}", metric) for s in sizes]
    gains = [{"from": a, "to": b, "gain": mb - ma} for (a, ma), (b, mb) in zip(zip(sizes, means), zip(sizes[1:], means[1:]))]
    flag = None if len(gains) < 2 else bool(all(g1["gain"] >= g2["gain"] for g1, g2 in zip(gains, gains[1:])))
    report.metadata.update({
        "sizes": sizes, "effective_sizes": effective, "warnings": warnings, "metric": metric,
        "gain_over_base": means[0] - report.aggregate("base", metric), "gains": gains,
        "expectation": {"expected": "each doubling gains no more than the previous one (diminishing returns)",
                        "satisfied": flag, "fatal": False},
        "anchor": SWEEP_ANCHOR,
    })
    return report


def perturbation_ablation(modes, exp: Experiment, curate: Callable[[str], PairDataset], seeds=(0, 1, 2),
                          metrics=("preference", "win_rate_vs_base")) -> EvalReport:
    """Curate with each negative-construction mode, train both stages, compare against base."""
    modes = list(modes)
    if not modes:
        raise ValueError("perturbation_ablation needs at least one mode")
    report = EvalReport("perturbation_ablation", ["base"] + modes, list(metrics), list(seeds))
    datasets = {}
    for mode in modes:
        datasets[mode] = curate(mode)
    cells = {"base": None}
    for mode in modes:
        cells[mode] = (lambda mode: lambda seed: train_two_stage(exp, datasets[mode], seed, True, True, f"{mode}-"))(mode)
    _run_cells(exp, report, cells, seeds, metrics)
    metric = metrics[0]
    base = report.values("base", metric)
    beats = {mode: bool(np.all(report.values(mode, metric) > base)) for mode in modes}
    report.metadata.update({
        "pairs": {mode: len(ds) for mode, ds in datasets.items()},
        "expectation": {"expected": "every mode beats base on every seed", "per_mode": beats,
                        "satisfied": bool(all(beats.values()))},
    })
    return report


def distribution_alignment(exp: Experiment, x_real: np.ndarray, c_real: np.ndarray, seeds=(0, 1, 2)) -> EvalReport:
    """Sliced-Wasserstein distance to held-out real samples, base versus stage 1, per seed."""
    if exp.real_reference is None:
        raise ValueError("distribution_alignment needs held-out real samples in exp.real_reference")
    report = EvalReport("distribution_alignment", ["base", "stage1"], ["sliced_wasserstein"], list(seeds))

    def stage1(seed):
        cfg = replace(exp.stage1, seed=seed)
        sub = exp.run_dir / "cells" / f"stage1-seed{seed}" if exp.run_dir is not None else None
        return run_stage1(exp.base, x_real, c_real, cfg, exp.schedule, run_dir=sub).params

    _run_cells(exp, report, {"base": None, "stage1": stage1}, seeds, ["sliced_wasserstein"])
    base = report.values("base", "sliced_wasserstein")
    after = report.values("stage1", "sliced_wasserstein")
    drops = (1.0 - after / base).tolist()
    report.metadata.update({"relative_drop": drops, "n_generated": len(exp.eval_conditions()),
                            "n_reference": len(exp.real_reference)})
    return report
