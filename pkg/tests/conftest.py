import numpy as np
import pytest

from sgd_influence._backend import available_backends
from sgd_influence.dataset import gen_blobs, inject_label_noise, split
from sgd_influence.model import ModelSpec

BACKENDS = available_backends()
ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """``criterion(k, ok, detail)`` records a PASS/FAIL line and asserts ``ok``."""
    def check(k: int, ok: bool, detail: str):
        line = f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE_LINES].append(line)
        print(line)
        assert ok, line
    return check


@pytest.fixture(params=sorted(BACKENDS))
def kernels(request, monkeypatch):
    """Run a test once per available kernel backend."""
    mod = BACKENDS[request.param]
    import sgd_influence.influence as influence
    import sgd_influence.model as model
    import sgd_influence.trainer as trainer

    for m in (model, trainer, influence):
        monkeypatch.setattr(m, "kernels", mod)
    return mod


def random_case(rng, hidden=None, activation=None, batch=None):
    d = int(rng.integers(1, 6))
    c = int(rng.integers(2, 5))
    if hidden is None:
        hidden = tuple(int(h) for h in rng.integers(1, 6, size=rng.integers(0, 3)))
    spec = ModelSpec(d, hidden, c, activation or ("relu", "tanh")[int(rng.integers(2))])
    theta = rng.normal(size=spec.n_params)
    n = int(batch or rng.integers(1, 7))
    x = rng.normal(size=(n, d))
    y = rng.integers(0, c, size=n)
    return spec, theta, x, y


@pytest.fixture
def small_problem():
    """N=64 two-class blobs with 10% flipped labels plus a clean validation set."""
    pool = gen_blobs(48, 2, 2, 2.0, 3)
    tr, va = split(pool, 32, 3)
    tr, report = inject_label_noise(tr, 0.1, 3)
    return tr, va, report
