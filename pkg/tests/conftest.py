"""Shared fixtures: synthetic C-MAPSS files, prepared traces and tiny models."""

import os
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence

import numpy as np
import pytest

from cmapss import TimeWindow, prepare
from data_generator import CmapssDataGenerator
from diffcore import Network, ParameterSet
from models import ModelSpec, build


@dataclass
class BareNetwork:
    """Bare network plus parameters, enough for the diffcore entry points."""
    network: Network
    params: ParameterSet


def make_network(layers, input_shape, seed: int = 0) -> BareNetwork:
    network = Network(layers, input_shape)
    return BareNetwork(network, network.init_parameters(seed))


def tiny_spec(architecture: str = "GRU", sequence_length: int = 6, hidden: Sequence[int] = (4,),
              n_features: int = 14, **overrides) -> ModelSpec:
    values = dict(batch_size=16, epochs=2, learning_rate=0.01, seed=0, kernel_size=3)
    values.update(overrides)
    return ModelSpec(architecture, tuple(hidden), sequence_length, n_features=n_features, **values)


def random_windows(count: int, length: int, features: int = 14, seed: int = 0) -> List[TimeWindow]:
    rng = np.random.default_rng(seed)
    return [
        TimeWindow(values=rng.uniform(0.0, 1.0, size=(length, features)),
                   label=float(rng.uniform(0.0, 130.0)), engine_id=k + 1, end_cycle=length)
        for k in range(count)
    ]


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory) -> Path:
    out_dir = tmp_path_factory.mktemp("cmapss")
    CmapssDataGenerator(seed=3, min_life=60, max_life=80).generate(out_dir, train_engines=8, test_engines=6)
    return out_dir


@pytest.fixture(scope="session")
def prepared(synthetic_dir):
    return prepare(synthetic_dir / "train_FD001.txt", synthetic_dir / "test_FD001.txt",
                   synthetic_dir / "RUL_FD001.txt")


@pytest.fixture
def gru_model():
    return build(tiny_spec("GRU"))


@pytest.fixture
def windows():
    return random_windows(12, 6)


@pytest.fixture(scope="session")
def real_data_dir() -> Path:
    """FD001 directory from CMAPSS_DATA_DIR; skips when the files are absent."""
    directory = os.getenv("CMAPSS_DATA_DIR")
    names = ("train_FD001.txt", "test_FD001.txt", "RUL_FD001.txt")
    if not directory or not all((Path(directory) / name).exists() for name in names):
        pytest.skip("FD001 files not available (set CMAPSS_DATA_DIR)")
    return Path(directory)
