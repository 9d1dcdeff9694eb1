import numpy as np
import pytest

from w2bary.icnn import DenseICNNConfig, PotentialNetwork
from w2bary.solver import BarycenterModel


def toy_model(dim=2, weights=(0.3, 0.7), hidden=(4, 3), seed=0):
    cfg = DenseICNNConfig(dim, hidden, 2)
    n = len(weights)
    nets = [PotentialNetwork.init(cfg, seed + i) for i in range(2 * n)]
    return BarycenterModel(nets[:n], nets[n:], np.array(weights))


@pytest.fixture
def toy_model_batches():
    model = toy_model()
    rng = np.random.default_rng(3)
    batches = [rng.standard_normal((8, 2)) for _ in range(model.n)]
    y0 = rng.standard_normal((8, 2))
    return model, batches, y0


# filled by test_acceptance; echoed at the end of the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
