import numpy as np
import pytest

from ianet.data import SynthSpec, synthesize
from ianet.model import IANet, ModelConfig
from ianet.numerics import Graph, Tensor, sum_all, mul


TINY = ModelConfig(d_in_video=6, d_in_query=5, D=8, H=2, K=2, L=2, widths=(2, 3, 4), stride=0.5, alpha=1.0, seed=3)
TINY_SPEC = SynthSpec(num_samples=4, T_min=5, T_max=5, N_min=4, N_max=4, d_in_video=6, d_in_query=5,
                      d_latent=3, seg_min=2, seg_max=3, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_sample():
    return synthesize(TINY_SPEC).samples[0]


@pytest.fixture
def tiny_net64():
    return IANet(TINY).astype(np.float64)


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. every entry of ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * h)
    return g


def weighted_readout(out: Tensor, weights: np.ndarray) -> Tensor:
    """Scalar sum(out * weights); random weights exercise every output entry."""
    return sum_all(mul(out, Tensor(weights)))


def backprop(build):
    """Run ``build()`` under a graph and backpropagate its scalar output."""
    with Graph() as g:
        out = build()
        g.backward(out)
    return out


# one (criterion, passed, detail) entry per acceptance check, echoed after the run
VERDICTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for name, ok, detail in VERDICTS:
            terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
