import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=40)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Gradient of scalar f at x (float64) by central differences."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gf[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-8))


# -- shared trained toy model ------------------------------------------------------

@pytest.fixture(scope="session")
def toy_run():
    """The 3k-step toy forecaster on 200 KernelSynth series, trained once per session."""
    import time
    from types import SimpleNamespace

    from sundial.experiments import toy_corpora, train_toy

    train, test = toy_corpora(0)
    t0 = time.perf_counter()
    model, history = train_toy("toy", 3000, train, seed=0)
    return SimpleNamespace(model=model, train=train, test=test, history=history,
                           train_seconds=time.perf_counter() - t0)


# -- acceptance summary --------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
