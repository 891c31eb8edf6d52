import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from corpus import synthetic_corpus  # noqa: E402
from efficio import ModelConfig, TrainConfig  # noqa: E402

# 232-parameter reference model used across the suite
TOY = ModelConfig(vocab_size=10, embedding_size=2, hidden_size=4, num_layers=2, num_heads=2,
                  d_ff=8, max_seq_len=6, sharing_mode="grouped", group_count=1,
                  factorize_embedding=True, tie_output_head=True, activation="gelu")

SMALL = ModelConfig(vocab_size=256, embedding_size=8, hidden_size=16, num_layers=4, num_heads=2,
                    d_ff=32, max_seq_len=16, sharing_mode="grouped", group_count=2)

SMALL_TRAIN = TrainConfig(lr_max=3e-3, lr_min=3e-4, warmup_steps=3, max_steps=12, batch_size=4,
                          seq_len=16, eval_interval=4, eval_windows=4, seed=0)


@pytest.fixture(scope="session")
def corpus_text():
    return synthetic_corpus(120_000)


@pytest.fixture(scope="session")
def corpus_file(tmp_path_factory, corpus_text):
    p = tmp_path_factory.mktemp("corpus") / "corpus.txt"
    p.write_text(corpus_text, encoding="utf-8")
    return p


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(0))


# --- acceptance summary: one line per criterion ------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        n = int(report.nodeid.split("test_criterion_")[1].split("_")[0])
        detail = dict(report.user_properties).get("detail", "")
        _CRITERIA[n] = (report.outcome, detail)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        outcome, detail = _CRITERIA[n]
        status = "PASS" if outcome == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}  {detail}")
