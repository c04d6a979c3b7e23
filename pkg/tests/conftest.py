import functools
import time
from importlib.resources import files

import pytest
import torch

from hypalign.adversary import PerturbationSpec
from hypalign.dataio import RunConfig, generate_synthetic, stack
from hypalign.hierarchy import load_forest, parse_forest
from hypalign.trainer import evaluate, train

torch.set_num_threads(1)

REFERENCE_SEEDS = (0, 1, 2, 3)

MINIMAL_TREE = "cat\tanimal\ndog\tanimal\n"

# 2 roots, 3 mid classes, 5 leaves
SMALL_TREE = "a1\tA\na2\tA\nb1\tB\nb2\tB\nb3\tB\nA\tR\nB\tR\n"


def data_file(name):
    return files("hypalign") / "data" / name


@functools.lru_cache(maxsize=None)
def reference_forest():
    return load_forest(data_file("reference_2_4_8.tsv"))


@functools.lru_cache(maxsize=None)
def reference_data(split):
    cfg = RunConfig()
    n = cfg.samples_per_leaf if split == 0 else cfg.test_samples_per_leaf
    forest = reference_forest()
    records = generate_synthetic(forest, n, cfg.feature_dim, cfg.level_spread, cfg.leaf_noise, cfg.data_seed, split)
    return stack(records, forest)


class ReferenceRun:
    def __init__(self, cfg):
        self.config = cfg
        x, y = reference_data(0)
        start = time.perf_counter()
        self.state = train(cfg, reference_forest(), x, y)
        self.train_seconds = time.perf_counter() - start
        xt, yt = reference_data(1)
        spec = PerturbationSpec.for_evaluation(cfg, cfg.seed)
        self.report = evaluate(self.state.model, xt, yt, spec, transfer=True)

    @property
    def model(self):
        return self.state.model


@functools.lru_cache(maxsize=None)
def _reference_run(items):
    return ReferenceRun(RunConfig(**dict(items)))


def reference_run(**overrides) -> ReferenceRun:
    """Train (once per process) on the reference synthetic tree with config overrides."""
    return _reference_run(tuple(sorted(overrides.items())))


@pytest.fixture
def small_forest():
    return parse_forest(SMALL_TREE)


@pytest.fixture
def minimal_forest():
    return parse_forest(MINIMAL_TREE)


@pytest.fixture(scope="session")
def trained_reference():
    return reference_run(seed=0)
