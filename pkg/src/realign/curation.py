"""Label-free preference-pair curation from reference samples.

Pipeline: colorfulness filter (keep strictly above the corpus mean) -> saliency
mask per reference -> negative construction by a weak model (masked inpainting
or full regeneration from the condition) -> strict gap filter -> top-K by
winner score. The result is persisted as a dataset manifest (JSON) plus one
array container; see :func:`write_manifest` for the schema.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from realign.diffusion import DenoiserParams, NoiseSchedule, ancestral_sample, inpaint_sample
from realign.io import load_arrays, save_arrays, sha256_bytes, sha256_file, write_json
from realign.scoring import Scorer

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
NEGATIVE_MODES = ("inpainting", "text_to_image")


class EmptyPipelineError(RuntimeError):
    def __init__(self, message: str, stage_counts: dict):
        super().__init__(f"{message}; stage counts: {stage_counts}")
        self.stage_counts = stage_counts


@dataclass
class ReferenceSample:
    x: np.ndarray
    cond: np.ndarray
    source_id: str
    colorfulness: float | None = None
    quality: float | None = None


@dataclass
class PreferencePair:
    winner: np.ndarray
    loser: np.ndarray
    cond: np.ndarray
    mask: np.ndarray
    provenance: str
    source_id: str
    gap: float = float("nan")
    winner_score: float = float("nan")

    def __post_init__(self):
        if not (self.winner.shape == self.loser.shape == self.mask.shape):
            raise ValueError("winner, loser and mask must share a shape")
        if self.provenance not in NEGATIVE_MODES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


@dataclass
class CurationConfig:
    gap_threshold: float | None = None  # None: calibrate at gap_quantile of the candidate gaps
    gap_quantile: float = 0.4
    top_k: int = 512
    colorfulness_filter: str = "above_average"
    saliency_mode: str = "energy_proxy"
    saliency_fraction: float = 0.25
    negative_mode: str = "inpainting"
    sampling_steps: int = 20
    image_shape: tuple[int, int] = (8, 8)
    clip_x0: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.gap_threshold is not None and self.gap_threshold < 0:
            raise ValueError("gap threshold must be >= 0")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.colorfulness_filter not in ("above_average", "off"):
            raise ValueError(f"bad colorfulness_filter {self.colorfulness_filter!r}")
        if self.saliency_mode not in ("energy_proxy", "fixed_blob"):
            raise ValueError(f"bad saliency_mode {self.saliency_mode!r}")
        if self.negative_mode not in NEGATIVE_MODES:
            raise ValueError(f"bad negative_mode {self.negative_mode!r}")
        self.image_shape = tuple(self.image_shape)


# --------------------------------------------------------------------------
# Image statistics
# --------------------------------------------------------------------------


def _as_image(sample) -> np.ndarray:
    img = np.asarray(sample, dtype=np.float64)
    if img.ndim == 2 or (img.ndim == 3 and img.shape[2] == 3):
        return img
    raise ValueError(f"expected an HxW or HxWx3 image, got shape {img.shape}")


def colorfulness_score(sample) -> float:
    """Opponent-channel colorfulness for RGB, pixel standard deviation for grayscale."""
    img = _as_image(sample)
    if img.ndim == 2:
        return float(img.std())
    R, G, B = img[..., 0], img[..., 1], img[..., 2]
    rg = np.abs(R - G)
    yb = np.abs(0.5 * (R + G) - B)
    std_root = np.hypot(rg.std(), yb.std())
    mean_root = np.hypot(rg.mean(), yb.mean())
    return float(std_root + 0.3 * mean_root)


def filter_above_average(corpus: list[ReferenceSample]) -> list[ReferenceSample]:
    if not corpus:
        raise ValueError("empty corpus")
    if any(r.colorfulness is None for r in corpus):
        raise ValueError("colorfulness must be populated for every reference")
    mean = np.mean([r.colorfulness for r in corpus])
    return [r for r in corpus if r.colorfulness > mean]


def fixed_blob_mask(shape: tuple[int, int], fraction: float = 0.25) -> np.ndarray:
    """Centred disk whose area is about ``fraction`` of the image."""
    H, W = shape
    radius = np.sqrt(fraction * H * W / np.pi)
    yy, xx = np.mgrid[0:H, 0:W]
    cy, cx = (H - 1) / 2, (W - 1) / 2
    return (((yy - cy) ** 2 + (xx - cx) ** 2) <= radius ** 2).astype(np.float64)


def gradient_energy(img: np.ndarray) -> np.ndarray:
    gy, gx = np.gradient(img)
    return np.hypot(gx, gy)


def window_side(shape: tuple[int, int], fraction: float) -> int:
    return int(max(1, min(min(shape), round(np.sqrt(fraction * shape[0] * shape[1])))))


def saliency_mask(sample, mode: str = "energy_proxy", fraction: float = 0.25) -> np.ndarray:
    """Binary mask of the salient region.

    ``energy_proxy`` picks the square window (about ``fraction`` of the pixels)
    with the largest summed gradient magnitude, first in raster order on ties;
    flat images fall back to ``fixed_blob``.
    """
    img = _as_image(sample)
    if img.ndim == 3:
        img = img.mean(axis=2)
    if mode == "fixed_blob":
        return fixed_blob_mask(img.shape, fraction)
    if mode != "energy_proxy":
        raise ValueError(f"unknown saliency mode {mode!r}")
    energy = gradient_energy(img)
    if not np.any(energy > 0):
        return fixed_blob_mask(img.shape, fraction)
    w = window_side(img.shape, fraction)
    integral = np.pad(energy.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    sums = integral[w:, w:] - integral[:-w, w:] - integral[w:, :-w] + integral[:-w, :-w]
    i, j = np.unravel_index(np.argmax(sums), sums.shape)
    mask = np.zeros(img.shape)
    mask[i : i + w, j : j + w] = 1.0
    return mask


# --------------------------------------------------------------------------
# Negative construction
# --------------------------------------------------------------------------


def construct_negatives(refs: list[ReferenceSample], masks: np.ndarray, weak_model: DenoiserParams,
                        cfg: CurationConfig, schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Batched masked regeneration; rows of ``masks`` are flat 0/1 arrays."""
    x = np.stack([r.x for r in refs])
    c = np.stack([r.cond for r in refs])
    return inpaint_sample(weak_model, x, masks, c, schedule, cfg.sampling_steps, rng, clip_x0=cfg.clip_x0)


def construct_negative(ref: ReferenceSample, mask, weak_model: DenoiserParams, cfg: CurationConfig,
                       schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64).reshape(1, -1)
    if mask.shape[1] != ref.x.size:
        raise ValueError("mask shape does not match the reference sample")
    return construct_negatives([ref], mask, weak_model, cfg, schedule, rng)[0]


def construct_negatives_t2i(refs: list[ReferenceSample], weak_model: DenoiserParams, cfg: CurationConfig,
                            schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    c = np.stack([r.cond for r in refs])
    x, _ = ancestral_sample(weak_model, c, schedule, cfg.sampling_steps, 1.0, rng, record=False,
                            clip_x0=cfg.clip_x0)
    return x


def construct_negative_t2i(ref: ReferenceSample, weak_model: DenoiserParams, cfg: CurationConfig,
                           schedule: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    return construct_negatives_t2i([ref], weak_model, cfg, schedule, rng)[0]


# --------------------------------------------------------------------------
# Filters
# --------------------------------------------------------------------------


def score_gaps(pairs: list[PreferencePair], scorer: Scorer) -> np.ndarray:
    if not pairs:
        return np.zeros(0)
    c = np.stack([p.cond for p in pairs])
    w = scorer.score(np.stack([p.winner for p in pairs]), c)
    lo = scorer.score(np.stack([p.loser for p in pairs]), c)
    return w - lo


def quality_gap_filter(pairs: list[PreferencePair], scorer: Scorer, tau: float) -> list[PreferencePair]:
    """Keep pairs whose recomputed gap exceeds ``tau`` strictly; gaps are stored on the kept copies."""
    if tau < 0:
        raise ValueError("tau must be >= 0")
    gaps = score_gaps(pairs, scorer)
    return [replace(p, gap=float(g)) for p, g in zip(pairs, gaps) if g > tau]


def select_top_k(pairs: list[PreferencePair], scorer: Scorer, k: int,
                 warnings: list | None = None) -> list[PreferencePair]:
    """The ``k`` pairs with the highest winner score, descending; ties by source id."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(pairs):
        msg = f"top-k requested {k} pairs but only {len(pairs)} are available"
        log.warning(msg)
        if warnings is not None:
            warnings.append({"stage": "top_k", "message": msg})
    if not pairs:
        return []
    scores = scorer.score(np.stack([p.winner for p in pairs]), np.stack([p.cond for p in pairs]))
    order = sorted(range(len(pairs)), key=lambda i: (-scores[i], pairs[i].source_id))
    return [replace(pairs[i], winner_score=float(scores[i])) for i in order[:k]]


def calibrate_gap_threshold(gaps, quantile: float = 0.4) -> float:
    gaps = np.asarray(gaps, dtype=np.float64)
    if len(gaps) == 0:
        return 0.0
    return float(max(0.0, np.quantile(gaps, quantile)))


# --------------------------------------------------------------------------
# End-to-end
# --------------------------------------------------------------------------


@dataclass
class CurationResult:
    pairs: list[PreferencePair]
    stage_counts: dict[str, int]
    tau: float
    tau_source: str
    warnings: list = field(default_factory=list)


def populate_colorfulness(corpus: list[ReferenceSample], shape: tuple[int, int]) -> list[ReferenceSample]:
    return [replace(r, colorfulness=colorfulness_score(r.x.reshape(shape))) for r in corpus]


def run_curation(corpus: list[ReferenceSample], weak_model: DenoiserParams, scorer: Scorer,
                 cfg: CurationConfig, schedule: NoiseSchedule) -> CurationResult:
    if not corpus:
        raise ValueError("empty corpus")
    ids = [r.source_id for r in corpus]
    if len(set(ids)) != len(ids):
        raise ValueError("source ids must be unique within a corpus")
    counts = {"corpus": len(corpus)}
    refs = populate_colorfulness(corpus, cfg.image_shape)
    if cfg.colorfulness_filter == "above_average":
        refs = filter_above_average(refs)
    counts["colorfulness"] = len(refs)
    if not refs:
        raise EmptyPipelineError("colorfulness filter removed every reference", counts)
    # deterministic merge order
    refs = sorted(refs, key=lambda r: r.source_id)
    rng = np.random.default_rng([cfg.seed, 1])
    if cfg.negative_mode == "inpainting":
        masks = np.stack([saliency_mask(r.x.reshape(cfg.image_shape), cfg.saliency_mode,
                                        cfg.saliency_fraction).ravel() for r in refs])
        losers = construct_negatives(refs, masks, weak_model, cfg, schedule, rng)
    else:
        masks = np.ones((len(refs), refs[0].x.size))
        losers = construct_negatives_t2i(refs, weak_model, cfg, schedule, rng)
    candidates = [PreferencePair(r.x, lo, r.cond, m, cfg.negative_mode, r.source_id)
                  for r, lo, m in zip(refs, losers, masks)]
    counts["constructed"] = len(candidates)
    if cfg.gap_threshold is None:
        tau = calibrate_gap_threshold(score_gaps(candidates, scorer), cfg.gap_quantile)
        tau_source = f"calibrated:q{cfg.gap_quantile:g}"
    else:
        tau, tau_source = float(cfg.gap_threshold), "config"
    kept = quality_gap_filter(candidates, scorer, tau)
    counts["gap_filter"] = len(kept)
    if not kept:
        raise EmptyPipelineError("gap filter removed every candidate pair", counts)
    warnings: list = []
    top = select_top_k(kept, scorer, cfg.top_k, warnings)
    counts["top_k"] = len(top)
    return CurationResult(top, counts, tau, tau_source, warnings)


# --------------------------------------------------------------------------
# Manifest I/O
# --------------------------------------------------------------------------


def write_manifest(out_dir, result: CurationResult, cfg: CurationConfig, scorer_name: str,
                   extra: dict | None = None) -> Path:
    """Write ``manifest.json`` and ``pairs.bin`` into ``out_dir``.

    ``pairs.bin`` holds arrays ``winners``, ``losers``, ``masks`` (N x d) and
    ``conds`` (N x (k+1)); pair record ``i`` refers to row ``i`` of each.
    The manifest records per-stage counts, the gap threshold and how it was
    chosen, the curation config, and the SHA-256 of ``pairs.bin``.
    """
    out_dir = Path(out_dir)
    pairs = result.pairs
    arrays = {
        "winners": np.stack([p.winner for p in pairs]),
        "losers": np.stack([p.loser for p in pairs]),
        "masks": np.stack([p.mask for p in pairs]),
        "conds": np.stack([p.cond for p in pairs]),
    }
    arrays_path = save_arrays(out_dir / "pairs.bin", arrays, {"kind": "pairs"})
    manifest = {
        "schema_version": MANIFEST_SCHEMA,
        "arrays_file": "pairs.bin",
        "arrays_sha256": sha256_file(arrays_path),
        "config": asdict(cfg),
        "scorer": scorer_name,
        "tau": result.tau,
        "tau_source": result.tau_source,
        "stage_counts": result.stage_counts,
        "warnings": result.warnings,
        "pairs": [
            {
                "row": i,
                "source_id": p.source_id,
                "gap": p.gap,
                "winner_score": p.winner_score,
                "provenance": p.provenance,
            }
            for i, p in enumerate(pairs)
        ],
        **(extra or {}),
    }
    return write_json(out_dir / "manifest.json", manifest)


class ManifestError(ValueError):
    pass


@dataclass
class PairDataset:
    winners: np.ndarray
    losers: np.ndarray
    conds: np.ndarray
    masks: np.ndarray
    records: list[dict]
    manifest: dict

    def __len__(self) -> int:
        return len(self.records)

    def head(self, n: int) -> "PairDataset":
        return PairDataset(self.winners[:n], self.losers[:n], self.conds[:n], self.masks[:n],
                           self.records[:n], self.manifest)


def load_manifest(path, scorer: Scorer | None = None) -> PairDataset:
    """Load and validate a manifest; with ``scorer`` the gaps are recomputed and rechecked."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    import json

    manifest = json.loads(path.read_text())
    if manifest.get("schema_version") != MANIFEST_SCHEMA:
        raise ManifestError(f"unsupported manifest schema {manifest.get('schema_version')!r}")
    arrays_path = path.parent / manifest["arrays_file"]
    if sha256_file(arrays_path) != manifest["arrays_sha256"]:
        raise ManifestError("pairs.bin does not match the recorded hash")
    arrays, _ = load_arrays(arrays_path)
    n = len(manifest["pairs"])
    for key in ("winners", "losers", "masks", "conds"):
        if arrays[key].shape[0] != n:
            raise ManifestError(f"{key} has {arrays[key].shape[0]} rows, manifest lists {n} pairs")
    if not (arrays["winners"].shape == arrays["losers"].shape == arrays["masks"].shape):
        raise ManifestError("winner/loser/mask arrays differ in shape")
    tau = manifest["tau"]
    for rec in manifest["pairs"]:
        if not rec["gap"] > tau:
            raise ManifestError(f"pair {rec['source_id']} violates winner dominance (gap {rec['gap']} <= {tau})")
    if scorer is not None and n:
        gaps = scorer.score(arrays["winners"], arrays["conds"]) - scorer.score(arrays["losers"], arrays["conds"])
        if not np.all(gaps > tau):
            raise ManifestError("recomputed gaps violate winner dominance")
    return PairDataset(arrays["winners"], arrays["losers"], arrays["conds"], arrays["masks"],
                       manifest["pairs"], manifest)


def manifest_hash(out_dir) -> str:
    out_dir = Path(out_dir)
    return sha256_bytes((out_dir / "manifest.json").read_bytes() + (out_dir / "pairs.bin").read_bytes())


def make_corpus(preferred, flat, n: int, flat_fraction: float, seed: int) -> list[ReferenceSample]:
    """Reference corpus mixing preferred images with a share of flat, low-contrast ones."""
    rng = np.random.default_rng([seed, 0])
    n_flat = int(round(flat_fraction * n))
    x_p, lab_p = preferred.sample(rng, n - n_flat)
    x_f, lab_f = flat.sample(rng, n_flat)
    x = np.concatenate([x_p, x_f])
    labels = np.concatenate([lab_p, lab_f])
    order = rng.permutation(n)
    conds = preferred.conditions(labels)
    return [ReferenceSample(x[i], conds[i], f"ref-{k:05d}") for k, i in enumerate(order)]
