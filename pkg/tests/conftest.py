import os
from pathlib import Path

import numpy as np
import pytest
import torch

DATA = Path(__file__).parent / "data"

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _isolated_cache(tmp_path, monkeypatch):
    # keep compressed-split caches out of the user's data dir
    if "CDRE_KEEP_CACHE" not in os.environ:
        monkeypatch.setenv("CDRE_DATA_DIR", str(tmp_path / "cache"))


def pyramid(seed, batch=None, channels=(8, 16, 24), size=16, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    lead = () if batch is None else (batch,)
    return [
        torch.randn(*lead, c, size // 2**i, size // 2**i, generator=g, dtype=dtype) for i, c in enumerate(channels)
    ]


# name -> (passed, detail); filled by the acceptance suite, printed at the end
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, (ok, detail) in ACCEPTANCE.items():
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
