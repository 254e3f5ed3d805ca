import json
import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from flagdit.model import FlagDiT, FlagDiTConfig  # noqa: E402

FIXTURES = Path(__file__).parent / "fixtures"


def tiny_config(**kw):
    base = dict(train_height=8, train_width=8)
    base.update(kw)
    return FlagDiTConfig(**base)


def randomized(model: FlagDiT, seed: int, scale: float = 0.3) -> FlagDiT:
    """Perturb every parameter, including the zero-initialised ones, so that
    all paths carry signal."""
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)
    return model


@pytest.fixture
def tiny():
    return FlagDiT(tiny_config())


@pytest.fixture
def oracle_runs():
    return json.loads((FIXTURES / "oracle_runs.json").read_text())


def pytest_terminal_summary(terminalreporter):
    acc = sys.modules.get("test_acceptance")
    if acc is not None and acc.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(acc.RESULTS, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
