import functools

import pytest

from tanszoo.contrastive import TrainConfig, meta_train
from tanszoo.retrieval import baseline_retrievers, build_index, ranking_metrics
from tanszoo.synth import SynthConfig, build_full_zoo

SMALL = SynthConfig(n_datasets=5, networks_per_dataset=4, rng_seed=3)


@functools.lru_cache(maxsize=None)
def standard_zoo(seed: int = 0):
    return build_full_zoo(SynthConfig(rng_seed=seed))


@functools.lru_cache(maxsize=None)
def trained(seed: int = 0, **overrides):
    """(zoo, TrainResult, index) for the standard zoo, cached across tests."""
    zoo = standard_zoo(seed)
    cfg = TrainConfig(rng_seed=seed, **overrides)
    result = meta_train(zoo, cfg)
    return zoo, result, build_index(zoo, result.model, cfg)


@functools.lru_cache(maxsize=None)
def baseline_r1(seed: int = 0) -> dict:
    """R@1 of the random and cosine-regression baselines on the standard zoo."""
    zoo, _, index = trained(seed)
    fns = baseline_retrievers(zoo, index, seed, TrainConfig(rng_seed=seed))
    return {name: ranking_metrics(fn, index, zoo)["R@1"] for name, fn in fns.items()}


@pytest.fixture(scope="session")
def small_zoo():
    return build_full_zoo(SMALL)


@pytest.fixture(scope="session")
def small_trained(small_zoo):
    cfg = TrainConfig(rng_seed=1, epochs=40)
    result = meta_train(small_zoo, cfg)
    return small_zoo, result, build_index(small_zoo, result.model, cfg)


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
