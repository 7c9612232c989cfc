import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def central_diff(f, x, h=1e-5):
    """Central finite-difference gradient of scalar ``f`` w.r.t. array ``x`` (in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.abs(a - b).max() / max(1e-12, np.abs(a).max(), np.abs(b).max()))


def randomize(module, rng, scale=0.5):
    """float64 params drawn at random so no gradient path is trivially zero."""
    module.astype(np.float64)
    for _, (mod, key) in module._slots():
        mod.params[key][...] = rng.normal(0.0, scale, mod.params[key].shape)
    return module


def module_grad_error(module, x, rng, forward=None, n_per_param=4, h=1e-5):
    """Max relative error between ``module``'s analytic gradients and central
    differences of ``sum(g * forward(x))`` on sampled parameter and input entries."""
    forward = forward or module.forward
    g = rng.normal(size=forward(x).shape)

    def loss():
        return float((forward(x) * g).sum())

    module.zero_grad()
    forward(x)
    dx = module.backward(g)
    worst = 0.0
    targets = [(name, mod.params[key], mod.grads[key]) for name, (mod, key) in module._slots()]
    targets.append(("input", x, dx))
    for name, arr, grad in targets:
        flat_idx = rng.choice(arr.size, size=min(n_per_param, arr.size), replace=False)
        an, fd = [], []
        for fi in flat_idx:
            i = np.unravel_index(fi, arr.shape)
            old = arr[i]
            arr[i] = old + h
            fp = loss()
            arr[i] = old - h
            fm = loss()
            arr[i] = old
            fd.append((fp - fm) / (2 * h))
            an.append(grad[i])
        an, fd = np.array(an), np.array(fd)
        scale = max(np.abs(fd).max(), np.abs(an).max(), 1e-6)
        worst = max(worst, float(np.abs(an - fd).max() / scale))
    return worst


ACCEPTANCE_LINES: dict[int, str] = {}


def report(n: int, ok: bool, label: str, detail: str) -> None:
    """Record one acceptance line; the full table is printed at the end of the run."""
    ACCEPTANCE_LINES[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {label}  ({detail})"
    print(ACCEPTANCE_LINES[n])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
