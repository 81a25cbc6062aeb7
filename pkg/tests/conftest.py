import numpy as np
import pytest

from neurogen import metrics as mt
from neurogen import network as nw


def finite_difference_grads(net, X, y, h=1e-5):
    """Central differences of the mean cross-entropy w.r.t. every weight."""
    grads = []
    for W in net.weights:
        g = np.zeros_like(W)
        for idx in np.ndindex(W.shape):
            old = W[idx]
            W[idx] = old + h
            up = nw.cross_entropy(nw.forward(net, X).logits, y)
            W[idx] = old - h
            down = nw.cross_entropy(nw.forward(net, X).logits, y)
            W[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def random_problem(rng, widths, max_widths=None, n=40):
    net = nw.init_network(widths, max_widths or [w * 4 for w in widths[1:-1]], seed=rng)
    X = rng.standard_normal((widths[0], n))
    y = rng.integers(0, widths[-1], n)
    return net, X, y


def rank_buffer(M, k, n=None, cap=None, seed=0):
    """A one-hidden-layer net and full buffer whose layer-1 effective dimension is exactly k/M."""
    n = n or 2 * M + 4
    rng = np.random.default_rng(seed)
    net = nw.init_network([3, M, 2], [cap or M], seed=seed)
    Q, _ = np.linalg.qr(rng.standard_normal((n, max(k, 1))))
    H = np.zeros((M, n))
    H[:k] = Q[:, :k].T * np.sqrt(n)
    buf = mt.ActivationBuffer.for_net(net, n)
    Z = [None, H.copy(), np.zeros((2, n))]
    buf.push(nw.ForwardTrace(Z, [rng.standard_normal((3, n)), H, np.zeros((2, n))]))
    return net, buf


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
