import numpy as np
import pytest

from byomkit.checkpoint_store import Checkpoint


def random_checkpoint(rng, shapes=None, scale=1.0):
    shapes = shapes or {"w": (4, 3), "b": (4,), "head": (2, 4)}
    return Checkpoint({k: (scale * rng.standard_normal(s)).astype(np.float32) for k, s in shapes.items()})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_ckpt():
    return random_checkpoint


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = next((m for name, m in sys.modules.items() if name.endswith("test_acceptance")), None)
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
