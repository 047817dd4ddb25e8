"""Shared fixtures and numerical helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from amber_mini.corpus import LanguageSpec, SentencePair, Vocabulary, make_parallel
from amber_mini.encoder import Encoder, ModelConfig


# one-line verdicts collected by the release acceptance tests; replayed
# after the run because pytest's fd capture swallows in-test printing
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def tiny_model(vocab_size: int = 20, layers: int = 2, heads: int = 2,
               hidden: int = 32, seed: int = 0,
               precision: str = "test64") -> Encoder:
    """Small 64-bit model for gradient and equivalence checks."""
    cfg = ModelConfig(vocab_size=vocab_size, layers=layers, heads=heads,
                      hidden=hidden, ffn_dim=hidden * 2, max_positions=40,
                      precision=precision)
    return Encoder(cfg, seed=seed)


def finite_difference_grads(model: Encoder, loss_fn, names, h: float = 1e-5):
    """Central finite differences of loss_fn() w.r.t. the named parameters."""
    grads = {}
    for name in names:
        base = np.array(model.params[name].data, copy=True)
        g = np.zeros_like(base)
        it = np.nditer(base, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            bumped = base.copy()
            bumped[idx] = base[idx] + h
            model.set_param(name, bumped)
            up = loss_fn().item()
            bumped[idx] = base[idx] - h
            model.set_param(name, bumped)
            down = loss_fn().item()
            g[idx] = (up - down) / (2.0 * h)
        model.set_param(name, base)
        grads[name] = g
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))


def toy_languages(n_concepts: int = 8):
    """Two tiny identity-cipher languages plus one adjacent-swap language."""
    ident = list(range(n_concepts))
    l0 = LanguageSpec(id="l0", index=0, cipher=ident, reorder="identity")
    l1 = LanguageSpec(id="l1", index=1, cipher=ident[::-1], reorder="identity")
    l2 = LanguageSpec(id="l2", index=2, cipher=ident, reorder="adjacent-swap")
    return [l0, l1, l2]


@pytest.fixture
def toy_vocab():
    langs = toy_languages()
    return langs, Vocabulary(langs, 8)


@pytest.fixture
def toy_parallel_pair(toy_vocab) -> SentencePair:
    langs, vocab = toy_vocab
    base = np.array([0, 3, 1, 5])
    return make_parallel(base, langs[0], langs[1], vocab)
