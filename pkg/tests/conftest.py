"""
Shared fixtures: bundled maps, their topologies and corpora, scenes and
small SEM settings so the numeric tests stay quick.
"""
from importlib import resources
from pathlib import Path

import pytest

from scenariofuzz.corpus import CorpusParams, build_corpus, save_corpus
from scenariofuzz.map_model import build_topology, load_map
from scenariofuzz.sem import SemConfig
from scenariofuzz.sim import Scene

FIXTURE_MAPS = ("straight", "cross_small", "tee_small", "curved", "mini_town")
DATA_DIR = Path(__file__).parent / "data"


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("scenariofuzz") / "fixtures" / f"{name}.xodr"))


@pytest.fixture(scope="session")
def maps():
    return {name: load_map(fixture_path(name)) for name in FIXTURE_MAPS}


@pytest.fixture(scope="session")
def topologies(maps):
    return {name: build_topology(net, 5.0) for name, net in maps.items()}


@pytest.fixture(scope="session")
def corpora(maps, topologies):
    return {name: build_corpus(maps[name], topologies[name], CorpusParams()) for name in FIXTURE_MAPS}


@pytest.fixture(scope="session")
def scenes(maps, topologies):
    return {name: Scene(maps[name], topologies[name]) for name in FIXTURE_MAPS}


@pytest.fixture(scope="session")
def cross_seed(corpora):
    return next(s for s in corpora["cross_small"].seeds if s.road_type == "CrossRoad")


@pytest.fixture(scope="session")
def straight_seed(corpora):
    return corpora["straight"].seeds[0]


@pytest.fixture
def tiny_sem():
    return SemConfig(hidden=8, heads=2, dropout=0.0, lr=0.01, epochs=50, seed=0)


@pytest.fixture
def state_dir(tmp_path, corpora):
    """A state directory holding the cross_small corpus and its map copy."""
    path = tmp_path / "state"
    saved = save_corpus(corpora["cross_small"], path / "corpus")
    saved.with_suffix(".xodr").write_text(fixture_path("cross_small").read_text(encoding="utf-8"), encoding="utf-8")
    return path
