"""Shared fixtures: one small trained pipeline reused across test modules.

The corpus and models are deliberately small but real: files stay under
the candidate size limit for a 2048-byte input window, benign files carry
enough motif mass per section for training to separate the classes, and
two models trained from different initializations share one architecture
so transfer can be exercised.
"""

import pytest

from malconvlab.corpus import SynthConfig, generate_corpus
from malconvlab.model import Hyperparams, MalConvModel, TrainConfig, train
from malconvlab.store import load_sample, load_split

# Filled by the acceptance tests; echoed after the run so the per-criterion
# verdict lines are visible regardless of output capture.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY_HYPER = Hyperparams(
    max_len=2048, embed_dim=8, kernel_size=50, num_filters=32, hidden_units=32, seed=0
)
TINY_SYNTH = SynthConfig(
    num_sections=(1, 1),
    file_alignment=16,
    section_payload_size=(400, 600),
    malicious_density=0.0,
    benign_density=0.8,
    seed=11,
)
TINY_TRAIN = TrainConfig(learning_rate=0.01, epochs=30, seed=1)
TINY_COUNT = 400


def train_tiny_model(corpus, init_seed: int) -> MalConvModel:
    root, entries, _ = corpus
    x, y, _ = load_split(root, entries, "train")
    model = MalConvModel(
        Hyperparams(
            max_len=TINY_HYPER.max_len,
            embed_dim=TINY_HYPER.embed_dim,
            kernel_size=TINY_HYPER.kernel_size,
            num_filters=TINY_HYPER.num_filters,
            hidden_units=TINY_HYPER.hidden_units,
            seed=init_seed,
        )
    )
    train(model, x, y, TINY_TRAIN)
    return model


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """(root, entries, samples): samples aligned with manifest order."""
    root = tmp_path_factory.mktemp("tiny_corpus")
    entries = generate_corpus(
        TINY_SYNTH, root, count=TINY_COUNT, malware_frac=0.5, test_frac=0.25
    )
    samples = [load_sample(root, e) for e in entries]
    return root, entries, samples


@pytest.fixture(scope="session")
def tiny_model(tiny_corpus) -> MalConvModel:
    return train_tiny_model(tiny_corpus, init_seed=0)


@pytest.fixture(scope="session")
def tiny_model_b(tiny_corpus) -> MalConvModel:
    """Same architecture as tiny_model, different initialization."""
    return train_tiny_model(tiny_corpus, init_seed=3)
