"""Shared fixtures. Training fixtures are session-scoped: the toy schedule is
the expensive part of the suite, and every consumer only reads the results."""

import sys
from pathlib import Path

import pytest

from cdface.corpus import Corpus, generate_corpus
from cdface.trainer import TrainConfig, train_prior, train_query

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(Path(__file__).parent))

TOY_CONFIG = ROOT / "configs" / "toy.json"


def toy_config(**changes) -> TrainConfig:
    cfg = TrainConfig.load(TOY_CONFIG)
    d = cfg.to_dict()
    d.update(changes)
    return TrainConfig.from_dict(d)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> Corpus:
    return generate_corpus(tmp_path_factory.mktemp("corpus") / "toy", seed=0)


@pytest.fixture(scope="session")
def priors(corpus):
    cfg = toy_config(stage="prior")
    return {r: train_prior(cfg, corpus, r) for r in ("lip", "upper")}


@pytest.fixture(scope="session")
def query_ckpt(corpus, priors):
    cfg = toy_config(stage="query")
    return train_query(cfg, corpus, priors["lip"], priors["upper"])
