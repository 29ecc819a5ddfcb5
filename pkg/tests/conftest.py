"""Shared fixtures: variants are expensive to train, so train each at most once."""

import time

import pytest

import saltrack.harness as hz

TRAIN_STEPS = 2000


@pytest.fixture(scope="session")
def trained_models():
    """Lazy per-variant training cache: get(variant) -> (cfg, params, history, seconds)."""
    cache = {}

    def get(variant):
        if variant not in cache:
            cfg = hz.TrackerConfig(variant=variant)
            t0 = time.time()
            params, history = hz.train_toy(
                hz.TrainConfig(steps=TRAIN_STEPS, batch=2, seed=0), cfg
            )
            cache[variant] = (cfg, params, history, time.time() - t0)
        return cache[variant]

    return get


@pytest.fixture(scope="session")
def tracking_suites(trained_models, tmp_path_factory):
    """Lazy 20-seed evaluation cache: get(variant, kind) -> [Metrics]."""
    cache = {}

    def get(variant, kind):
        key = (variant, kind)
        if key not in cache:
            cfg, params, _, _ = trained_models(variant)
            work = tmp_path_factory.mktemp(f"suite_{variant}_{kind}")
            cache[key] = hz.run_suite(cfg, params, kind, range(20), str(work))
        return cache[key]

    return get
