from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from realign.config import dataset_from_result
from realign.diffusion import init_denoiser
from realign.evaluation import (ABLATION_ANCHOR, ABLATION_CONFIGS, AblationGrid, EvalConfig, EvalReport,
                                data_size_sweep, distribution_alignment, laplacian_variance, ordering_check,
                                perturbation_ablation, plot_report, prefix_contrast_score, random_directions,
                                run_ablation, sliced_wasserstein, train_two_stage, win_rate)
from realign.scoring import FunctionScorer

from conftest import SMALL_NET, conds, perturbed

# -- laplacian variance -------------------------------------------------------------


def test_laplacian_of_constant_and_ramp_is_zero():
    assert laplacian_variance(np.full((6, 6), 3.0)) == 0.0
    yy, xx = np.mgrid[0:8, 0:8]
    assert laplacian_variance(0.5 * yy - 2.0 * xx + 1.0) == pytest.approx(0.0, abs=1e-24)


@pytest.mark.parametrize("size,expected", [(5, 20 / 9), (16, 20 / 196)])
def test_laplacian_of_impulse_by_hand(size, expected):
    # interior responses: -4 at the impulse, +1 at its four neighbours, 0 elsewhere; mean 0
    img = np.zeros((size, size))
    img[size // 2, size // 2] = 1.0
    assert laplacian_variance(img) == pytest.approx(expected, rel=1e-12)


def test_laplacian_accepts_flat_samples_with_shape():
    img = np.random.default_rng(0).random((8, 8))
    assert laplacian_variance(img.ravel(), (8, 8)) == laplacian_variance(img)


def test_laplacian_errors():
    for bad in [np.zeros(9), np.zeros((2, 5)), np.zeros((3, 3, 3))]:
        with pytest.raises(ValueError):
            laplacian_variance(bad)


@given(arrays(np.float64, (6, 7), elements=st.floats(-10, 10)))
def test_laplacian_nonnegative_and_deterministic(img):
    v = laplacian_variance(img)
    assert v >= 0 and v == laplacian_variance(img.copy())


# -- prefix contrast ---------------------------------------------------------------------

SCORER = FunctionScorer(lambda x, c: (x[:, : c.shape[1]] * c).sum(axis=1) - 0.1 * (x ** 2).sum(axis=1), "toy")


@settings(max_examples=30)
@given(seed=st.integers(0, 10_000), a=st.integers(0, 2), b=st.integers(0, 2))
def test_prefix_contrast_antisymmetric_and_compositional(seed, a, b):
    x = np.random.default_rng(seed).standard_normal((5, 4))
    ca, cb = conds([a]), conds([b])
    ab = prefix_contrast_score(SCORER, x, ca, cb)
    np.testing.assert_array_equal(ab, -prefix_contrast_score(SCORER, x, cb, ca))
    np.testing.assert_allclose(ab, SCORER.score(x, np.repeat(ca, 5, 0)) - SCORER.score(x, np.repeat(cb, 5, 0)),
                               rtol=0, atol=1e-15)
    assert np.all(prefix_contrast_score(SCORER, x, ca, ca) == 0)
    assert isinstance(prefix_contrast_score(SCORER, x[0], ca, cb), float)


# -- sliced Wasserstein -------------------------------------------------------------------


def w1_by_cdf(u, v):
    """W1 as the integral of |F_u - F_v| over the merged support."""
    grid = np.sort(np.concatenate([u, v]))
    fu = np.searchsorted(np.sort(u), grid[:-1], side="right") / len(u)
    fv = np.searchsorted(np.sort(v), grid[:-1], side="right") / len(v)
    return float(np.sum(np.abs(fu - fv) * np.diff(grid)))


def sw_oracle(a, b, projections, seed):
    dirs = random_directions(np.random.default_rng(seed), projections, a.shape[1])
    return np.mean([w1_by_cdf(a @ d, b @ d) for d in dirs])


@pytest.mark.parametrize("n_a,n_b", [(300, 300), (300, 170)])
def test_sliced_wasserstein_matches_cdf_oracle(n_a, n_b):
    rng = np.random.default_rng(0)
    a = rng.standard_normal((n_a, 3))
    b = 0.7 * rng.standard_normal((n_b, 3)) + np.array([0.5, -0.2, 1.0])
    assert sliced_wasserstein(a, b, 32, 5) == pytest.approx(sw_oracle(a, b, 32, 5), rel=1e-10)


def test_sliced_wasserstein_of_diracs():
    for c in (-2.5, 0.0, 3.0):
        assert sliced_wasserstein(np.zeros((10, 1)), np.full((10, 1), c), projections=1) == pytest.approx(abs(c))
        assert sliced_wasserstein(np.zeros((4, 1)), np.full((7, 1), c), projections=1) == pytest.approx(abs(c))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 40), m=st.integers(1, 40))
def test_sliced_wasserstein_identity_and_symmetry(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((n, 3)), rng.standard_normal((m, 3))
    assert sliced_wasserstein(a, a, 16, seed) == 0.0
    assert sliced_wasserstein(a, a[::-1], 16, seed) == pytest.approx(0.0, abs=1e-12)
    ab, ba = sliced_wasserstein(a, b, 16, seed), sliced_wasserstein(b, a, 16, seed)
    assert ab >= 0 and ab == pytest.approx(ba, rel=1e-12, abs=1e-15)


def test_sliced_wasserstein_errors():
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((0, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        sliced_wasserstein(np.zeros((3, 2)), np.zeros((3, 3)))


# -- win rate ------------------------------------------------------------------------------

SCHED_SMALL = None


@pytest.fixture(scope="module")
def small_models():
    from realign.diffusion import make_linear_schedule

    base = init_denoiser(SMALL_NET, np.random.default_rng(0))
    return base, perturbed(base, 0.3), make_linear_schedule(SMALL_NET.T, 1e-3, 0.3)


def test_win_rate_self_is_half(small_models):
    base, _, s = small_models
    assert win_rate(base, base, conds([0, 1, 2]), SCORER, 16, 3, s, steps=5) == 0.5


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_win_rate_complementarity(small_models, seed):
    base, other, s = small_models
    ab = win_rate(base, other, conds([0, 1, 2]), SCORER, 8, seed, s, steps=5)
    ba = win_rate(other, base, conds([0, 1, 2]), SCORER, 8, np.random.default_rng(seed), s, steps=5)
    ba_same = win_rate(other, base, conds([0, 1, 2]), SCORER, 8, seed, s, steps=5)
    assert ab + ba_same == 1.0
    assert 0.0 <= ba <= 1.0


def test_win_rate_errors(small_models):
    base, _, s = small_models
    with pytest.raises(ValueError):
        win_rate(base, base, np.zeros((0, 4)), SCORER, 4, 0, s)
    with pytest.raises(ValueError):
        win_rate(base, base, conds([0]), SCORER, 0, 0, s)


def test_oracle_model_beats_base(toy_pipeline):
    w = toy_pipeline.world
    oracle = w._oracle(3)
    c = w.real.conditions(np.arange(3))
    for seed in range(3):
        assert win_rate(oracle, w.base, c, w.eval_scorer, 64, seed, w.schedule, clip_x0=w.clip_x0) > 0.5


# -- reports ---------------------------------------------------------------------------------


def make_report():
    r = EvalReport("demo", ["base", "x"], ["preference"], [0, 1, 2])
    for row, vals in (("base", [1.0, 2.0, 4.0]), ("x", [0.1, 0.2, 0.7])):
        for v in vals:
            r.record(row, "preference", v)
    return r


def test_report_aggregates_are_means_of_raws(tmp_path):
    r = make_report()
    assert r.aggregate("base", "preference") == pytest.approx(7 / 3, abs=1e-12)
    assert r.spread("x", "preference") == pytest.approx(np.std([0.1, 0.2, 0.7], ddof=1))
    assert r.check_consistency()
    path = r.save(tmp_path)
    loaded = EvalReport.load(path)
    assert loaded.table == r.table and loaded.check_consistency()
    assert "base" in r.format_table()


def test_report_consistency_detects_tampering():
    r = make_report()
    table = r.table
    table["x"]["preference"] += 1e-9
    assert not r.check_consistency(table=table)


def test_plot_report_writes_png(tmp_path):
    path = plot_report(make_report(), tmp_path)
    assert path.exists() and path.read_bytes()[:4] == b"\x89PNG"


def test_ordering_check_logic():
    r = EvalReport("ablation", list(ABLATION_CONFIGS), ["preference"], [0, 1])
    for row, v in zip(ABLATION_CONFIGS, (0.0, 1.0, 0.5, 2.0)):
        for d in (-0.01, 0.01):
            r.record(row, "preference", v + d)
    check = ordering_check(r)
    assert check["ordering_satisfied"] and check["both_beyond_pooled_sd"]
    r.raws["stage2_only"]["preference"] = [-1.0, -1.0]
    assert not ordering_check(r)["ordering_satisfied"]


# -- harnesses --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_experiment(toy_pipeline):
    exp = toy_pipeline.experiment()
    return replace(exp, eval=EvalConfig(per_condition=16, generation_seeds=(5,)))


@pytest.fixture(scope="module")
def pairs(toy_curation):
    return dataset_from_result(toy_curation)


def test_zero_step_ablation_rows_are_identical(tiny_experiment, pairs):
    exp = replace(tiny_experiment, stage1=replace(tiny_experiment.stage1, steps=0),
                  stage2=replace(tiny_experiment.stage2, steps=0))
    report = run_ablation(AblationGrid(pairs, seeds=(0, 1)), exp)
    rows = [report.table[r] for r in ABLATION_CONFIGS]
    assert all(row == rows[0] for row in rows)
    assert report.table["base"]["win_rate_vs_base"] == 0.5
    assert report.metadata["anchor"] == ABLATION_ANCHOR
    assert report.check_consistency()


def test_ablation_grid_validation(pairs):
    with pytest.raises(ValueError):
        AblationGrid(pairs, seeds=())
    with pytest.raises(ValueError):
        AblationGrid(pairs, configs=("base", "both"))
    with pytest.raises(ValueError):
        AblationGrid(pairs.head(0))


def test_sweep_single_size_and_capping(tiny_experiment, pairs):
    exp = replace(tiny_experiment, stage1=replace(tiny_experiment.stage1, steps=1),
                  stage2=replace(tiny_experiment.stage2, steps=1))
    one = data_size_sweep([16], exp, pairs, seeds=(0,))
    assert one.rows == ["base", "n=16"] and one.metadata["gains"] == []
    assert one.metadata["expectation"]["satisfied"] is None
    capped = data_size_sweep([16, 10_000], exp, pairs, seeds=(0,))
    assert capped.metadata["effective_sizes"] == [16, len(pairs)] and capped.metadata["warnings"]
    assert len(capped.metadata["gains"]) == 1
    for bad in ([], [64, 32], [16, 16]):
        with pytest.raises(ValueError):
            data_size_sweep(bad, exp, pairs)


def test_single_mode_perturbation_is_a_standard_run(tiny_experiment, pairs):
    exp = replace(tiny_experiment, stage1=replace(tiny_experiment.stage1, steps=2),
                  stage2=replace(tiny_experiment.stage2, steps=2))
    report = perturbation_ablation(["inpainting"], exp, lambda mode: pairs, seeds=(0,), metrics=("preference",))
    model = train_two_stage(exp, pairs, 0, True, True)
    conds_ = exp.eval_conditions()
    direct = np.mean([exp.scorer.score(x, conds_).mean() for x in exp.samples(model)])
    assert report.values("inpainting", "preference")[0] == pytest.approx(direct, rel=1e-12)
    with pytest.raises(ValueError):
        perturbation_ablation([], exp, lambda mode: pairs)


def test_distribution_alignment_needs_reference(tiny_experiment, pairs):
    with pytest.raises(ValueError):
        distribution_alignment(replace(tiny_experiment, real_reference=None), pairs.winners, pairs.conds)


def test_metrics_are_deterministic(tiny_experiment):
    a = tiny_experiment.samples(tiny_experiment.base)
    b = tiny_experiment.samples(tiny_experiment.base)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
