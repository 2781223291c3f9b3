import json
import time

import pytest
import torch

from mfsod.backbone import SHUFFLE_WIDTHS, BackboneConfig
from mfsod.cli import main
from mfsod.model import ModelConfig, build_model

# desk-scale overfitting run shared by the CLI and acceptance tests
DESK_DATA = ["--synthetic", "8", "--synthetic-size", "64", "--synthetic-seed", "0"]
DESK_TRAIN = ["--input-size", "64", "--batch-size", "8", "--epochs", "200", "--max-iters", "200"]


@pytest.fixture(scope="session")
def default_model():
    model = build_model(ModelConfig(seed=0))
    model.eval()
    return model


@pytest.fixture(scope="session")
def narrow_config():
    """Cheapest shuffle width, for tests that only need structure."""
    return BackboneConfig(level_channels=SHUFFLE_WIDTHS["0.5x"], input_size=(64, 64))


@pytest.fixture
def rng():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Train once through the CLI; returns the run directory, history and wall time."""
    out = tmp_path_factory.mktemp("desk_run")
    t0 = time.perf_counter()
    code = main(["train", *DESK_DATA, *DESK_TRAIN, "--seed", "0", "--out-dir", str(out)])
    elapsed = time.perf_counter() - t0
    assert code == 0
    history = [json.loads(line) for line in (out / "history.jsonl").read_text(encoding="utf-8").splitlines()]
    return {"dir": out, "history": history, "seconds": elapsed}


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        ok, title, note = RESULTS[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  AC{number:02d}  {title}  {note}")
