import numpy as np
import pytest

from fedmeta.nn import Batch, MLP, ModelConfig

ACCEPTANCE_LINES: list[str] = []


def record(criterion: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def rel_err(a, b) -> float:
    """max |a - b| scaled by the largest reference magnitude."""
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def central_diff(f, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        out[i] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def generic_params(cfg, rng):
    """Initial params plus a small jitter so no ReLU input sits exactly on its kink."""
    from fedmeta.nn import init_params
    return init_params(cfg, rng) + 0.1 * rng.normal(size=cfg.num_params)


def random_batch(rng, n, input_dim, num_classes):
    return Batch(rng.normal(size=(n, input_dim)), rng.integers(0, num_classes, size=n))


class QuadraticToy:
    """loss = 0.5 * |theta|^2 on any batch; grad = theta, Hessian = I."""

    def loss(self, params, batch):
        return 0.5 * float(params @ params)

    def grad(self, params, batch):
        return params.copy()

    def hvp(self, params, batch, v):
        return np.asarray(v, dtype=np.float64).copy()


@pytest.fixture
def toy():
    return QuadraticToy()


@pytest.fixture
def small_mlp():
    return MLP(ModelConfig(input_dim=4, num_classes=2, hidden_dims=(5, 3), batchnorm_enabled=False))
