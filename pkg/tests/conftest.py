import numpy as np
import pytest

from envpredict import autodiff as ad

FD_STEP = 1e-5


def numeric_grad(f, arrays, step=FD_STEP):
    """Central differences of scalar f() with respect to each array (perturbed in place)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + step
            hi = f()
            a[i] = old - step
            lo = f()
            a[i] = old
            g[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_error(analytic, numeric):
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)


def check_gradients(build, tensors, seed=0):
    """Compare backprop against finite differences for scalar loss sum(w * build()).

    Returns the worst relative error over all ``tensors``.
    """
    rng = np.random.default_rng(seed)
    with ad.no_grad():
        probe = rng.normal(size=ad.as_tensor(build()).shape)

    def value():
        with ad.no_grad():
            return float(np.sum(probe * ad.as_tensor(build()).data))

    for t in tensors:
        t.grad = None
    out = ad.as_tensor(build())
    out.backward(probe)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]
    numeric = numeric_grad(value, [t.data for t in tensors])
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the terminal summary, then assert."""

    def record(number, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}"
        request.config.stash[ACCEPTANCE_KEY].append(line)
        print(line)
        assert ok, line

    return record
