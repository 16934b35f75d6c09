import os

# single-threaded BLAS so timing criteria reflect one CPU core
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from xmtc.dataset import ingest
from xmtc.synthetic import SyntheticSpec, write_synthetic


@pytest.fixture(scope="session")
def synth_paths(tmp_path_factory):
    return write_synthetic(tmp_path_factory.mktemp("synthetic"), SyntheticSpec())


@pytest.fixture(scope="session")
def synth_dataset(synth_paths):
    p = synth_paths
    return ingest({"train": p.train, "test": p.test}, p.embeddings, p.hierarchy, p.descriptions,
                  SyntheticSpec().num_labels, 500, 4, "synthetic")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def cli_workspace(tmp_path_factory, synth_paths):
    """Synthetic inputs ingested and given teacher caches through the command line."""
    from xmtc.cli import main

    root = tmp_path_factory.mktemp("cli")
    p = synth_paths
    assert main(["ingest", "--train", str(p.train), "--test", str(p.test), "--hierarchy", str(p.hierarchy),
                 "--descriptions", str(p.descriptions), "--embeddings", str(p.embeddings), "--num-labels", "20",
                 "--out", str(root / "ds")]) == 0
    assert main(["teacher", "--dataset", str(root / "ds"), "--out", str(root / "tk"), "--threads", "1"]) == 0
    return root


@pytest.fixture(scope="session")
def memorized_run(cli_workspace):
    """Config 6 trained to memorization with a tuned learning rate and init gain."""
    from xmtc.cli import main

    out = cli_workspace / "memorized"
    assert main(["train", "--dataset", str(cli_workspace / "ds"), "--teacher", str(cli_workspace / "tk"),
                 "--out", str(out), "--epochs", "150", "--lr", "1e-2", "--init-gain", "1.7320508075688772",
                 "--threads", "1"]) == 0
    return out


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
