import numpy as np
import pytest

from pfsam import diffengine as de
from pfsam.model import ModelConfig, init
from pfsam.objectives import LossKind
from pfsam.perturb import Task

# criterion number -> (passed, description); filled by tests/test_acceptance.py
ACCEPTANCE: dict = {}


def central_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` at flat ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def graph_value(builder, x):
    graph = de.Graph()
    leaf = graph.leaf(np.asarray(x, dtype=np.float64))
    return float(builder(graph, leaf).value)


def random_task(rng, max_layers=3, max_units=64, loss=None, num_classes=None, activation=None):
    in_dim = int(rng.integers(1, 6))
    C = int(num_classes or rng.integers(2, 5))
    hidden = [int(rng.integers(1, max_units + 1)) for _ in range(int(rng.integers(0, max_layers)))]
    act = activation or ("relu" if rng.random() < 0.5 else "sigmoid")
    cfg = ModelConfig(in_dim, C, tuple(hidden), act, float(rng.normal()))
    return Task(cfg, loss or LossKind())


class QuadraticTask:
    """L(theta) = 0.5 theta^T A theta + b^T theta, independent of the batch.

    Stands in for a :class:`Task` wherever only ``grad`` is needed.
    """

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    def grad(self, theta, X, y):
        def build(graph, t):
            col = de.reshape(t, (t.shape[0], 1))
            quad = de.sum_(de.mul(col, de.matmul(graph.constant(self.A), col)))
            return de.add(de.scale(quad, 0.5), de.sum_(de.mul(t, graph.constant(self.b))))

        return de.value_and_grad(build, np.asarray(theta, dtype=np.float64))[1]


def linear_ce_grad(theta, X, y, in_dim, C):
    """Closed-form mean-CE gradient of a linear softmax model in the flat layout."""
    W = theta[: in_dim * C].reshape(in_dim, C)
    z = X @ W + theta[in_dim * C:]
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    r = (p - np.eye(C)[y]) / len(y)
    return np.concatenate([(X.T @ r).ravel(), r.sum(axis=0)])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear_task():
    return Task(ModelConfig(3, 2), LossKind())


@pytest.fixture
def small_params(linear_task):
    return init(linear_task.model, 0)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(ACCEPTANCE):
        passed, desc = ACCEPTANCE[num]
        terminalreporter.write_line(f"criterion {num:2d}: {'PASS' if passed else 'FAIL'}  {desc}")
