from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import pytest

from ecovnet.data import generate_toy_dataset, load_imageset, split_dataset
from ecovnet.model import build_model, micro_arch
from ecovnet.train import ImageSet, SnapshotBundle, TrainConfig, train_with_snapshots

TOY_TRAIN_SEED = 0
TOY_TEST_SEED = 1
TOY_PER_CLASS = 50

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@dataclass
class ToyRun:
    bundle: SnapshotBundle
    train: ImageSet
    val: ImageSet
    test: ImageSet
    seconds: float


@pytest.fixture(scope="session")
def toy_corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    train_m = generate_toy_dataset(root / "train", TOY_PER_CLASS, 48, seed=TOY_TRAIN_SEED)
    test_m = generate_toy_dataset(root / "test", TOY_PER_CLASS, 48, seed=TOY_TEST_SEED)
    return root, train_m, test_m


def run_toy(train_manifest, test_manifest, seed: int = 0) -> ToyRun:
    """Default-config micro run: 90/10 split of the training corpus, fresh test corpus."""
    start = time.perf_counter()
    spec = micro_arch()
    tr, va = split_dataset(train_manifest, 0.1, seed)
    train = load_imageset(tr, spec.resolution)
    val = load_imageset(va, spec.resolution)
    test = load_imageset(test_manifest, spec.resolution)
    model = build_model(spec, seed=seed)
    bundle = train_with_snapshots(model, train, val, TrainConfig(seed=seed))
    return ToyRun(bundle, train, val, test, time.perf_counter() - start)


@pytest.fixture(scope="session")
def toy_run(toy_corpus) -> ToyRun:
    _, train_m, test_m = toy_corpus
    return run_toy(train_m, test_m)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
