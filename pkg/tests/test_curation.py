import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from realign.curation import (CurationConfig, EmptyPipelineError, ManifestError, PreferencePair, ReferenceSample,
                              calibrate_gap_threshold, colorfulness_score, construct_negative,
                              construct_negative_t2i, construct_negatives, construct_negatives_t2i,
                              filter_above_average, fixed_blob_mask, gradient_energy, load_manifest, manifest_hash,
                              quality_gap_filter, run_curation, saliency_mask, select_top_k, write_manifest)
from realign.scoring import FunctionScorer

FIRST_COORD = FunctionScorer(lambda x, c: x[:, 0], "first-coordinate")


def pair(score_w, score_l=0.0, sid="p", d=3):
    w, lo = np.zeros(d), np.zeros(d)
    w[0], lo[0] = score_w, score_l
    return PreferencePair(w, lo, np.array([1.0, 0.0]), np.ones(d), "inpainting", sid)


# -- colorfulness -----------------------------------------------------------------


def test_colorfulness_constant_gray_is_zero():
    assert colorfulness_score(np.full((8, 8), 0.3)) == 0.0


def test_colorfulness_pure_red_by_hand():
    img = np.zeros((4, 4, 3))
    img[..., 0] = 255.0
    mu = np.hypot(255.0, 127.5)
    assert colorfulness_score(img) == pytest.approx(0.3 * mu, abs=1e-9)
    assert colorfulness_score(img) == pytest.approx(85.53, abs=5e-3)


def test_colorfulness_checkerboard_is_half():
    board = (np.indices((8, 8)).sum(axis=0) % 2).astype(float)
    assert colorfulness_score(board) == pytest.approx(0.5, abs=1e-15)


def test_colorfulness_rejects_non_images():
    for shape in [(5,), (4, 4, 2), (2, 2, 2, 3)]:
        with pytest.raises(ValueError):
            colorfulness_score(np.zeros(shape))


@given(st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=64))
def test_colorfulness_nonnegative(values):
    img = np.resize(np.array(values), (4, 4, 3))
    assert colorfulness_score(img) >= 0 and colorfulness_score(img[..., 0]) >= 0


# -- above-average filter ------------------------------------------------------------


def refs_with(scores):
    return [ReferenceSample(np.zeros(4), np.zeros(2), f"r{i:03d}", colorfulness=float(s)) for i, s in enumerate(scores)]


def test_filter_strict_at_the_mean():
    out = filter_above_average(refs_with([1, 2, 3]))
    assert [r.colorfulness for r in out] == [3.0]


def test_filter_all_equal_is_empty():
    assert filter_above_average(refs_with([2.5] * 7)) == []


def test_filter_errors():
    with pytest.raises(ValueError):
        filter_above_average([])
    with pytest.raises(ValueError):
        filter_above_average([ReferenceSample(np.zeros(4), np.zeros(2), "a")])


@given(st.lists(st.floats(0, 100), min_size=1, max_size=200))
def test_filter_matches_mean_oracle_and_is_a_stable_subset(scores):
    corpus = refs_with(scores)
    out = filter_above_average(corpus)
    mean = sum(scores) / len(scores)
    expected = [r.source_id for r in corpus if r.colorfulness > mean]
    assert [r.source_id for r in out] == expected
    assert len(out) <= len(corpus) and all(any(r is c for c in corpus) for r in out)


def test_filter_on_synthetic_corpus(toy_pipeline):
    corpus = toy_pipeline.world.corpus(200, seed=0)
    scored = [replace(r, colorfulness=float(np.std(r.x))) for r in corpus]
    mean = sum(r.colorfulness for r in scored) / 200
    assert len(filter_above_average(scored)) == sum(1 for r in scored if r.colorfulness > mean)


# -- saliency ----------------------------------------------------------------------


GOLDEN_BLOB = """
................
................
................
................
.....######.....
....########....
....########....
....########....
....########....
....########....
....########....
.....######.....
................
................
................
................
"""


def test_fixed_blob_golden():
    golden = np.array([[ch == "#" for ch in row] for row in GOLDEN_BLOB.split()], dtype=float)
    assert np.array_equal(fixed_blob_mask((16, 16), 0.25), golden)
    assert np.array_equal(saliency_mask(np.random.default_rng(0).random((16, 16)), "fixed_blob"), golden)


def test_flat_image_falls_back_to_blob():
    assert np.array_equal(saliency_mask(np.full((16, 16), 0.7)), fixed_blob_mask((16, 16)))


def brute_force_window(img, w):
    energy = gradient_energy(img)
    best, where = -1.0, None
    for i in range(img.shape[0] - w + 1):
        for j in range(img.shape[1] - w + 1):
            s = energy[i:i + w, j:j + w].sum()
            if s > best + 1e-12:
                best, where = s, (i, j)
    mask = np.zeros(img.shape)
    mask[where[0]:where[0] + w, where[1]:where[1] + w] = 1
    return mask


@pytest.mark.parametrize("top,left,side", [(2, 3, 4), (9, 9, 5), (0, 0, 3), (10, 1, 6)])
def test_bright_square_matches_window_scan(top, left, side):
    img = np.zeros((16, 16))
    img[top:top + side, left:left + side] = 1.0
    mask = saliency_mask(img)
    assert np.array_equal(mask, brute_force_window(img, 8))
    # the window reaches the square's edges
    assert mask[top:top + side, left:left + side].any()
    assert set(np.unique(mask)) <= {0.0, 1.0} and mask.sum() == 64


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), fraction=st.sampled_from([0.1, 0.25, 0.5]))
def test_saliency_is_binary_deterministic_window(seed, fraction):
    img = np.random.default_rng(seed).random((8, 8))
    m1, m2 = saliency_mask(img, fraction=fraction), saliency_mask(img, fraction=fraction)
    assert np.array_equal(m1, m2)
    side = int(round(np.sqrt(fraction * 64)))
    assert m1.sum() == side * side
    assert np.array_equal(m1, brute_force_window(img, side))


def test_saliency_errors():
    with pytest.raises(ValueError):
        saliency_mask(np.zeros(16))
    with pytest.raises(ValueError):
        saliency_mask(np.ones((4, 4)), mode="unet")


# -- negative construction ---------------------------------------------------------------


@pytest.fixture(scope="module")
def real_refs(toy_pipeline):
    x, c = toy_pipeline.world.real_samples(256, seed=3)
    return x, c, [ReferenceSample(x[i], c[i], f"r{i:03d}") for i in range(256)]


def test_zero_mask_negative_is_the_reference(toy_pipeline, real_refs):
    p = toy_pipeline
    ref = real_refs[2][0]
    out = construct_negative(ref, np.zeros(64), p.world.weak, p.curation_config(), p.schedule, np.random.default_rng(0))
    assert np.array_equal(out, ref.x)
    with pytest.raises(ValueError):
        construct_negative(ref, np.zeros(63), p.world.weak, p.curation_config(), p.schedule, np.random.default_rng(0))


def test_negative_keeps_unmasked_region(toy_pipeline, real_refs):
    p = toy_pipeline
    ref = real_refs[2][1]
    mask = saliency_mask(ref.x.reshape(8, 8), fraction=0.5).ravel()
    out = construct_negative(ref, mask, p.world.weak, p.curation_config(), p.schedule, np.random.default_rng(1))
    assert np.array_equal(out[mask == 0], ref.x[mask == 0])
    assert not np.array_equal(out[mask == 1], ref.x[mask == 1])


@pytest.mark.parametrize("mode", ["inpainting", "text_to_image"])
def test_gap_distribution_oracle_vs_weak(toy_pipeline, real_refs, mode):
    p = toy_pipeline
    x, c, refs = real_refs
    cfg, sc = p.curation_config(), p.world.curation_scorer
    oracle = p.world._oracle(3)

    def gaps(model):
        rng = np.random.default_rng(0)
        if mode == "inpainting":
            losers = construct_negatives(refs, np.ones((256, 64)), model, cfg, p.schedule, rng)
        else:
            losers = construct_negatives_t2i(refs, model, cfg, p.schedule, rng)
        return sc.score(x, c) - sc.score(losers, c)

    g_oracle, g_weak = gaps(oracle), gaps(p.world.weak)
    assert g_weak.mean() > 0
    # the exact denoiser degrades nothing: its gaps sit near zero next to the weak model's
    assert abs(g_oracle.mean()) < 0.1 * g_weak.mean()
    tau = calibrate_gap_threshold(g_weak)
    assert np.mean(g_oracle > tau) < 0.05


def test_t2i_negative_is_deterministic(toy_pipeline, real_refs):
    p = toy_pipeline
    ref = real_refs[2][5]
    a = construct_negative_t2i(ref, p.world.weak, p.curation_config(), p.schedule, np.random.default_rng(4))
    b = construct_negative_t2i(ref, p.world.weak, p.curation_config(), p.schedule, np.random.default_rng(4))
    assert np.array_equal(a, b) and not np.array_equal(a, ref.x)


# -- gap filter and top-k -------------------------------------------------------------------


def test_gap_filter_excludes_boundary():
    pairs = [pair(0.05, sid="a"), pair(0.02, sid="b"), pair(0.01, sid="c")]
    out = quality_gap_filter(pairs, FIRST_COORD, 0.02)
    assert [p.source_id for p in out] == ["a"] and out[0].gap == pytest.approx(0.05)


def test_gap_filter_zero_tau_identity():
    pairs = [pair(g, sid=str(i)) for i, g in enumerate([0.3, 1e-9, 2.0])]
    assert [p.source_id for p in quality_gap_filter(pairs, FIRST_COORD, 0.0)] == ["0", "1", "2"]
    with pytest.raises(ValueError):
        quality_gap_filter(pairs, FIRST_COORD, -0.1)


@given(gaps=st.lists(st.floats(-1, 1), max_size=50), tau=st.floats(0, 1))
def test_gap_filter_matches_oracle(gaps, tau):
    pairs = [pair(g, sid=f"{i:03d}") for i, g in enumerate(gaps)]
    out = quality_gap_filter(pairs, FIRST_COORD, tau)
    assert [p.source_id for p in out] == [f"{i:03d}" for i, g in enumerate(gaps) if g > tau]
    assert all(p.gap > tau for p in out)


def test_top_k_by_winner_score():
    pairs = [pair(0.9, sid="a"), pair(0.5, sid="b"), pair(0.7, sid="c")]
    assert [p.winner_score for p in select_top_k(pairs, FIRST_COORD, 2)] == [0.9, 0.7]
    assert [p.source_id for p in select_top_k(pairs, FIRST_COORD, 3)] == ["a", "c", "b"]


def test_top_k_ties_break_by_source_id_and_overflow_warns():
    pairs = [pair(0.5, sid=s) for s in ["d", "b", "c", "a"]]
    warnings = []
    out = select_top_k(pairs, FIRST_COORD, 10, warnings)
    assert [p.source_id for p in out] == ["a", "b", "c", "d"]
    assert warnings and warnings[0]["stage"] == "top_k"
    with pytest.raises(ValueError):
        select_top_k(pairs, FIRST_COORD, 0)


def test_top_k_matches_sort_and_slice():
    scores = np.random.default_rng(0).random(1000)
    pairs = [pair(s, sid=f"{i:04d}") for i, s in enumerate(scores)]
    out = select_top_k(pairs, FIRST_COORD, 512)
    order = np.argsort(-scores, kind="stable")[:512]
    assert [p.source_id for p in out] == [f"{i:04d}" for i in order]


def test_calibrated_threshold_is_the_quantile():
    gaps = np.arange(11, dtype=float) / 10
    assert calibrate_gap_threshold(gaps, 0.4) == pytest.approx(0.4)
    assert calibrate_gap_threshold(-gaps, 0.4) == 0.0
    assert calibrate_gap_threshold([], 0.4) == 0.0


# -- end to end --------------------------------------------------------------------------------


def test_curation_contract(toy_curation, toy_pipeline):
    res = toy_curation
    counts = list(res.stage_counts.values())
    assert list(res.stage_counts) == ["corpus", "colorfulness", "constructed", "gap_filter", "top_k"]
    assert counts[0] == 200 and all(b <= a for a, b in zip(counts, counts[1:]))
    sc = toy_pipeline.world.curation_scorer
    w = np.stack([p.winner for p in res.pairs])
    lo = np.stack([p.loser for p in res.pairs])
    c = np.stack([p.cond for p in res.pairs])
    assert np.all(sc.score(w, c) - sc.score(lo, c) > res.tau)
    scores = [p.winner_score for p in res.pairs]
    assert scores == sorted(scores, reverse=True)
    for p in res.pairs:
        assert np.array_equal(p.loser[p.mask == 0], p.winner[p.mask == 0])
    assert len({p.source_id for p in res.pairs}) == len(res.pairs)


def test_curation_rerun_and_manifest_hash(toy_curation, toy_pipeline, tmp_path):
    p = toy_pipeline
    cfg = replace(p.curation_config(), top_k=64)
    again = run_curation(p.world.corpus(200, seed=0), p.world.weak, p.world.curation_scorer, cfg, p.schedule)
    assert again.stage_counts == toy_curation.stage_counts
    write_manifest(tmp_path / "a", toy_curation, cfg, "oracle-curation")
    write_manifest(tmp_path / "b", again, cfg, "oracle-curation")
    assert manifest_hash(tmp_path / "a") == manifest_hash(tmp_path / "b")
    ds = load_manifest(tmp_path / "a", scorer=p.world.curation_scorer)
    assert len(ds) == len(toy_curation.pairs)
    np.testing.assert_array_equal(ds.winners, np.stack([q.winner for q in toy_curation.pairs]))


def test_manifest_loader_rejects_tampering(toy_curation, tmp_path):
    cfg = CurationConfig(top_k=64)
    write_manifest(tmp_path, toy_curation, cfg, "oracle-curation")
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    manifest["pairs"][0]["gap"] = manifest["tau"]
    (tmp_path / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ManifestError):
        load_manifest(tmp_path)
    write_manifest(tmp_path, toy_curation, cfg, "oracle-curation")
    with open(tmp_path / "pairs.bin", "ab") as fh:
        fh.write(b"\0")
    with pytest.raises(ManifestError):
        load_manifest(tmp_path)


def test_no_filters_keeps_every_constructed_pair(toy_pipeline):
    p = toy_pipeline
    corpus = p.world.corpus(40, seed=1)
    bank = np.stack([r.x for r in corpus])
    # distance to the nearest corpus image: references score 0, regenerated images below 0
    scorer = FunctionScorer(lambda x, c: -np.min(np.linalg.norm(x[:, None] - bank[None], axis=2), axis=1))
    cfg = replace(p.curation_config(), colorfulness_filter="off", gap_threshold=0.0, top_k=10**9)
    res = run_curation(corpus, p.world.weak, scorer, cfg, p.schedule)
    assert res.stage_counts["constructed"] == 40 == len(res.pairs)


def test_empty_pipeline_reports_stage_counts(toy_pipeline):
    p = toy_pipeline
    cfg = replace(p.curation_config(), gap_threshold=1e6)
    with pytest.raises(EmptyPipelineError) as info:
        run_curation(p.world.corpus(30, seed=2), p.world.weak, p.world.curation_scorer, cfg, p.schedule)
    assert info.value.stage_counts["gap_filter"] == 0
    with pytest.raises(ValueError):
        run_curation([], p.world.weak, p.world.curation_scorer, cfg, p.schedule)
