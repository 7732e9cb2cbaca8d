import numpy as np
import pytest
import torch

from realign.diffusion import NetConfig, init_denoiser, make_linear_schedule
from realign.toydata import one_hot_conditions

SMALL_NET = NetConfig(data_dim=4, cond_dim=3, hidden=16, depth=2, time_features=6, T=30)


@pytest.fixture
def schedule():
    return make_linear_schedule(SMALL_NET.T, 1e-3, 0.3)


@pytest.fixture
def net():
    return SMALL_NET


@pytest.fixture
def model():
    return init_denoiser(SMALL_NET, np.random.default_rng(0), out_scale=1.0)


def conds(labels, n=SMALL_NET.cond_dim):
    return one_hot_conditions(np.asarray(labels), n)


def perturbed(params, scale=0.2, seed=1):
    """Trainable copy of ``params`` with every weight jittered."""
    rng = np.random.default_rng(seed)
    out = params.clone(role="trainable")
    for v in out.weights.values():
        v += torch.as_tensor(scale * rng.standard_normal(tuple(v.shape)))
    return out


@pytest.fixture(scope="session")
def toy_pipeline():
    from realign.config import Pipeline, preset

    return Pipeline(preset("toy"))


@pytest.fixture(scope="session")
def toy_curation(toy_pipeline):
    """Small curation run on a 200-reference corpus, shared by the tests that need pairs."""
    from dataclasses import replace

    from realign.curation import run_curation

    p = toy_pipeline
    corpus = p.world.corpus(200, seed=0)
    cfg = replace(p.curation_config(), top_k=64)
    return run_curation(corpus, p.world.weak, p.world.curation_scorer, cfg, p.schedule)


# -- acceptance summary -------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, passed: bool, detail: str, seconds: float, budget: float) -> bool:
    """Print and keep one pass/fail line; the runtime budget is part of the verdict."""
    ok = bool(passed) and seconds <= budget
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail} ({seconds:.1f}s / budget {budget:.0f}s)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
