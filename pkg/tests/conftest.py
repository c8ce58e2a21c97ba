import numpy as np
import pytest

from diffguide import tensor as T
from diffguide.tensor import Tensor


def numeric_grad(fn, arrays, index, eps=1e-6):
    """Central-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + eps
        hi = fn(*arrays)
        x[i] = orig - eps
        lo = fn(*arrays)
        x[i] = orig
        grad[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_op_grad(op, *arrays, eps=1e-6, tol=1e-4, seed=0):
    """Compare autodiff and central differences for ``sum(op(*tensors) * R)``.

    All inputs are float64 arrays and every one of them is checked
    element by element.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    probe = {}

    def value(*arrs):
        with T.no_grad():
            out = op(*[Tensor(a) for a in arrs])
        if "r" not in probe:
            probe["r"] = rng.standard_normal(out.shape)
        return float(np.sum(out.data * probe["r"]))

    value(*arrays)
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*tensors)
    T.backward(T.reduce("sum", out * Tensor(probe["r"])))
    errs = []
    for k, t in enumerate(tensors):
        num = numeric_grad(value, arrays, k, eps)
        ana = t.grad if t.grad is not None else np.zeros_like(num)
        errs.append(rel_err(ana, num))
    assert max(errs) < tol, f"relative gradient errors {errs}"
    return errs


def check_directional(loss_fn, params, eps=1e-6, tol=1e-4, n_dirs=3, seed=0):
    """Directional-derivative check over a set of parameter tensors.

    ``loss_fn()`` returns a scalar Tensor computed from ``params`` (which are
    mutated in place). For random unit directions v the analytic
    ``<grad, v>`` must match ``(L(p + eps v) - L(p - eps v)) / 2 eps``.
    """
    rng = np.random.default_rng(seed)
    for p in params:
        p.grad = None
    T.backward(loss_fn())
    grads = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params]
    errs = []
    for _ in range(n_dirs):
        dirs = [rng.standard_normal(p.shape) for p in params]
        norm = np.sqrt(sum(np.sum(d * d) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(np.sum(g * d) for g, d in zip(grads, dirs))
        base = [p.data.copy() for p in params]
        vals = []
        for sign in (1, -1):
            for p, b, d in zip(params, base, dirs):
                p.data = b + sign * eps * d
            with T.no_grad():
                vals.append(float(loss_fn().data))
        for p, b in zip(params, base):
            p.data = b
        numeric = (vals[0] - vals[1]) / (2 * eps)
        errs.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12))
    assert max(errs) < tol, f"directional derivative errors {errs}"
    return errs


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured numbers."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for report in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or report.when not in ("call", "setup"):
                continue
            if report.when == "setup" and outcome == "passed":
                continue
            name = nodeid.split("::test_criterion_")[1]
            number, _, label = name.partition("_")
            detail = dict(report.user_properties).get("detail", "")
            lines.append((int(number), f"criterion {number} {label.replace('_', ' ')}: "
                                       f"{'PASS' if outcome == 'passed' else 'FAIL'}  {detail}".rstrip()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
