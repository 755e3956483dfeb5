import numpy as np
import pytest
import torch

from shubert.config import RunConfig
from shubert.config import tiny_config as base_tiny_config
from shubert.numerics import configure_threads

configure_threads()


def tiny_config(**sections) -> RunConfig:
    """2-layer, D=16, K=8 model on short utterances."""
    cfg = base_tiny_config()
    for name, values in sections.items():
        for k, v in values.items():
            setattr(getattr(cfg, name), k, v)
    return cfg


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def tiny_corpus():
    """A dozen tiny examples with stage-0 labels from a tiny model."""
    from shubert.mixsim import make_dataset
    from shubert.model import build_model
    from shubert.quantizer import build_labels

    cfg = tiny_config()
    cfg.mix.n_train = 12
    examples = make_dataset(cfg.mix, 0, 12, "train", cfg.frontend)
    store, cb = build_labels(examples, build_model(cfg, 0), cfg.quantizer.layer_index, cfg.quantizer.k, seed=0)
    return cfg, examples, store, cb


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture(scope="session")
def record_criterion():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(number: int, title: str, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES[number] = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        print(ACCEPTANCE_LINES[number])
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
