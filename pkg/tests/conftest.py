"""Shared tiny fixtures: a nine-item catalog and a model small enough for
finite-difference checks."""

from dataclasses import replace

import numpy as np
import pytest

from sessrec.datagen import GenConfig, generate_catalog, generate_corpus, generate_entries
from sessrec.model import FeatureEncoder, ModelConfig, encode_entries, init_params
from sessrec.pipeline.config import RunConfig

TINY_VOCAB = (3, 5, 4, 4, 5, 4, 3, 4, 2, 5)


def tiny_model(**overrides) -> ModelConfig:
    base = dict(d_model=8, layers=1, heads=2, d_qkv=4, mlp_width=8, max_clicks=5,
                mlp_emb=4, mlp_hidden=(6, 5), user_vocab=TINY_VOCAB)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_entries(n: int, seed: int, session_sizes=(4, 5, 6)):
    cfg = GenConfig(session_sizes=session_sizes, mean_clicks=4.0, click_dispersion=3.0, max_clicks=9, seed=seed)
    catalog = generate_catalog(cfg)
    entries = generate_entries(cfg, catalog, 0, n, labeled=True)
    entries = [replace(e, portrait=tuple(c % v for c, v in zip(e.portrait, TINY_VOCAB)))
               for e in entries]
    return catalog, entries


class TinySetup:
    def __init__(self, seed: int, letter: str = "F", n: int = 4, dtype=np.float64, **model):
        self.catalog, self.entries = tiny_entries(n, seed)
        self.run = RunConfig(letter=letter, model=tiny_model(**model))
        self.cfg = self.run.model
        self.encoder = FeatureEncoder.fit(self.catalog, n_bins=4)
        self.params = init_params(self.cfg, self.encoder, seed=seed, dtype=dtype)
        self.batch = encode_entries(self.entries, self.cfg.max_clicks, self.cfg.user_vocab)


@pytest.fixture
def tiny():
    return TinySetup(0)


@pytest.fixture(scope="session")
def desk_corpus():
    corpus, truth = generate_corpus(GenConfig(n_train=1200, n_test=150, seed=7))
    return corpus, truth


# Acceptance criteria append (criterion, passed, detail) here; the summary hook prints them.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in sorted(ACCEPTANCE, key=lambda r: r[0]):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {criterion}  {detail}")
