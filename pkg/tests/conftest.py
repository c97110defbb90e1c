import numpy as np
import pytest

from latentdialog.tensor import Tensor


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar ``f()`` with respect to array ``x`` (modified in place)."""
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
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)


def check_op(fn, *arrays, tol=1e-6, h=1e-6):
    """Compare autograd and finite-difference gradients of ``sum(fn(*tensors) * w)``."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = np.random.default_rng(123).standard_normal(out.shape)
    (out * Tensor(w)).sum().backward()

    def f():
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * w))

    for a, t in zip(arrays, tensors):
        num = numeric_grad(f, a, h)
        assert t.grad is not None
        assert rel_err(t.grad, num) < tol, (t.grad, num)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    """Print and remember one pass/fail line for an acceptance criterion."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
