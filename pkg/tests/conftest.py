import sys

import numpy as np
import pytest

from resofilter import dataio as D
from resofilter import model as M


@pytest.fixture(scope="session")
def corpus():
    return D.synth_corpus(12, 4, seed=3)


@pytest.fixture(scope="session")
def vocab(corpus):
    return D.Vocab.from_samples(corpus)


@pytest.fixture(scope="session")
def tiny_config(vocab):
    return M.ModelConfig(vocab_size=len(vocab), d_model=16, n_heads=2, n_layers=2, d_ff=32,
                         max_seq_len=96, seed=11)


@pytest.fixture(scope="session")
def tiny_params(tiny_config):
    return M.init(tiny_config)


@pytest.fixture(scope="session")
def tokenized(corpus, vocab):
    return D.tokenize_dataset(corpus, vocab, max_seq_len=96)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("tests.test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(acceptance.RESULTS):
        terminalreporter.write_line(acceptance.RESULTS[number])
