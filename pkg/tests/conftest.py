import numpy as np
import pytest

from vsharp.autodiff import Tape, Tensor, backward


def numeric_grad(f, arrays, index, eps=1e-6, points=None, rng=None):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``.

    Returns ``(flat positions, estimates)``; only ``points`` random entries
    are probed when given.
    """
    base = arrays[index]
    flat = base.reshape(-1)
    if points is None or points >= flat.size:
        pos = np.arange(flat.size)
    else:
        pos = (rng or np.random.default_rng(0)).choice(flat.size, points, replace=False)
    est = np.empty(len(pos))
    for k, i in enumerate(pos):
        old = flat[i]
        flat[i] = old + eps
        hi = f(*arrays)
        flat[i] = old - eps
        lo = f(*arrays)
        flat[i] = old
        est[k] = (hi - lo) / (2 * eps)
    return pos, est


def tape_grads(build, arrays):
    """Analytic gradients of ``build(*tensors)`` for every input array."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build(*leaves)
    backward(tape, loss)
    return [np.zeros_like(a) if t.grad is None else t.grad for a, t in zip(arrays, leaves)]


def check_grad(build, arrays, points=12, eps=1e-6, rtol=1e-4, seed=0, floor=1e-3):
    """Compare tape gradients with central differences at ``points`` entries per input.

    Returns the worst relative error (normalized by the larger of the
    gradient magnitudes and ``floor``, so entries with near-zero gradient
    compare absolutely against finite-difference round-off).
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    analytic = tape_grads(build, arrays)
    f = lambda *arrs: float(build(*[Tensor(a) for a in arrs]).data)  # noqa: E731
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(len(arrays)):
        pos, est = numeric_grad(f, arrays, i, eps, points, rng)
        got = analytic[i].reshape(-1)[pos]
        scale = np.maximum(np.maximum(np.abs(est), np.abs(got)), floor)
        worst = max(worst, float(np.max(np.abs(est - got) / scale)))
    assert worst < rtol, f"relative gradient error {worst:.3e} >= {rtol}"
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary -------------------------------------------------------

ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion():
    """``record_criterion(n, passed, detail)`` stores one line for the terminal summary."""

    def record(n: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[n] = (bool(passed), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
