import numpy as np
import pytest

from miplab import nets


def constant_net(value, obs_dim=2, hidden=16, depth=3):
    """A net whose output is ``value`` for every input."""
    value = np.asarray(value, dtype=np.float64)
    net = nets.init(nets.NetConfig(hidden=hidden, depth=depth), obs_dim, value.size)
    ws = [np.zeros_like(w) for w in net.weights]
    bs = [np.zeros_like(b) for b in net.biases]
    bs[-1] = value.copy()
    return nets.PolicyNet(net.config, obs_dim, value.size, ws, bs)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
