import numpy as np
import pytest
from hypothesis import settings

from unienc.encoder import Encoder, EncoderConfig
from unienc.inputs import Dialogue, Utterance, Vocab

settings.register_profile("unienc", max_examples=40, deadline=None)
settings.load_profile("unienc")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_vocab():
    return Vocab([f"w{i}" for i in range(20)])


def tiny_config(vocab_size, **kw):
    base = dict(layers=2, heads=2, model_dim=8, ff_dim=16, max_len=64, vocab_size=vocab_size,
                dropout=0.0)
    base.update(kw)
    return EncoderConfig(**base)


@pytest.fixture
def tiny_encoder(small_vocab):
    return Encoder(tiny_config(len(small_vocab), init_std=0.5), rng=np.random.default_rng(7))


def random_dialogue(rng, n_words=20, m=3, turns=2):
    def text(n):
        return " ".join(f"w{i}" for i in rng.integers(0, n_words, size=n))
    ctx = [Utterance(text(int(rng.integers(1, 5)))) for _ in range(turns)]
    return Dialogue(ctx, [text(int(rng.integers(1, 4))) for _ in range(m)], 0)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
