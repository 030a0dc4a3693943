import time

import numpy as np
import pytest
import torch

from fsr import synthdata
from fsr.trainer import TrainConfig


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture(scope="session")
def tiny_data_config():
    return synthdata.DatasetConfig(num_train=16, num_val=8, seed=3)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, tiny_data_config):
    root = tmp_path_factory.mktemp("data")
    synthdata.generate_dataset(tiny_data_config, root)
    return root


def tiny_train_config(**overrides) -> TrainConfig:
    kw = dict(
        iterations=6, warmup_iters=2, batch_size=2, lr=1e-3, dim=16, depth=2, heads=2, ff_dim=32,
        proj_out_dim=16, proj_hidden=16, proj_bottleneck=8, decoder_hidden=8, log_every=0,
    )
    kw.update(overrides)
    return TrainConfig(**kw)


@pytest.fixture
def tiny_config():
    return tiny_train_config()


# ---------------------------------------------------------------------------
# acceptance report: one pass/fail line per criterion, printed after the run

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record the outcome of one acceptance criterion.

    Usage: ``with criterion(3, "gradient check") as rec: ...; rec["detail"] = "..."``
    """
    results = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    class _Recorder:
        def __init__(self, number, title):
            self.number, self.title, self.info = number, title, {"detail": ""}

        def __enter__(self):
            self.started = time.perf_counter()
            return self.info

        def __exit__(self, exc_type, exc, tb):
            elapsed = time.perf_counter() - self.started
            detail = self.info["detail"]
            if exc is not None and not detail:
                detail = str(exc).splitlines()[0] if str(exc) else exc_type.__name__
            results[self.number] = ("PASS" if exc is None else "FAIL", self.title, detail, elapsed)
            return False

    return _Recorder


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        status, title, detail, elapsed = results[number]
        terminalreporter.write_line(f"[{status}] #{number} {title} ({elapsed:.1f}s) {detail}".rstrip())
