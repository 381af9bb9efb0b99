import numpy as np
import pytest

from ardistill.models import VelocityNet, context_from_units
from ardistill.worlds import WorldSpec, sample_sequences


def randomize(net: VelocityNet, rng: np.random.Generator, scale: float = 0.5) -> VelocityNet:
    # zero-init output layer would hide every upstream gradient
    for _, p in net.params.items():
        p.data[...] = rng.standard_normal(p.shape) * scale
    return net


def fd_check(loss_fn, params, rng, per_param: int = 4, h: float = 1e-6, numeric_fn=None) -> float:
    """Relative error between tape gradients and central differences on sampled coordinates.

    ``numeric_fn`` (default ``loss_fn``) is the function differenced numerically,
    for surrogates whose value is not the quantity whose gradient they carry.
    """
    numeric_fn = numeric_fn or loss_fn
    params.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic, numeric = [], []
    for _, p in params.items():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        for j in rng.choice(flat.size, size=min(per_param, flat.size), replace=False):
            old = flat[j]
            flat[j] = old + h
            up = numeric_fn().item()
            flat[j] = old - h
            down = numeric_fn().item()
            flat[j] = old
            analytic.append(grad[j])
            numeric.append((up - down) / (2 * h))
    a, n = np.array(analytic), np.array(numeric)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


@pytest.fixture
def gauss():
    return WorldSpec.gaussian_ar()


@pytest.fixture
def branch():
    return WorldSpec.branching_gmm()


@pytest.fixture
def small_net():
    return VelocityNet(2, 8, hidden=16, depth=2, seed=0)


def gt_batch(spec, B, seed, k=4):
    units = sample_sequences(spec, B, seed).units()
    rng = np.random.default_rng(seed + 1)
    i = rng.integers(0, spec.N, B)
    return units, i, context_from_units(units, i, k)


ACCEPTANCE_LINES: list[str] = []


def record(line: str) -> None:
    print(line)
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
