import numpy as np
import pytest

from fireyolo.tensor import Tape, Tensor, backward, sum_all


def central_difference(f, arrays, step=1e-3):
    """Numerical gradient of scalar f() w.r.t. each array (perturbed in place)."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr, dtype=np.float64)
        it = np.nditer(arr, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = arr[i]
            arr[i] = old + step
            hi = f()
            arr[i] = old - step
            lo = f()
            arr[i] = old
            g[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def max_rel_error(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def check_op_gradient(build, shapes, seed=0, step=1e-3, margin=0.0):
    """Max relative error between tape and finite-difference gradients.

    build(*tensors, tape) -> output Tensor; the loss is a fixed random
    projection of the output. ``margin`` keeps inputs away from zero (kinks).
    """
    rng = np.random.default_rng(seed)
    arrays = []
    for s in shapes:
        a = rng.normal(size=s)
        arrays.append(np.sign(a) * (np.abs(a) + margin))
    probe = {}

    def loss_value():
        out = build(*[Tensor(a, dtype=np.float64) for a in arrays], None)
        if "w" not in probe:
            probe["w"] = rng.normal(size=out.shape)
        return float(np.sum(out.data * probe["w"]))

    loss_value()
    tape = Tape()
    tensors = [Tensor(a.copy(), requires_grad=True, dtype=np.float64) for a in arrays]
    out = build(*tensors, tape)
    weight = Tensor(probe["w"], dtype=np.float64)
    loss = sum_all(_mul(out, weight, tape), tape)
    backward(loss, tape)
    numeric = central_difference(loss_value, arrays, step)
    return max(max_rel_error(t.grad, n) for t, n in zip(tensors, numeric)) if tensors else 0.0


def _mul(a, w, tape):
    """Elementwise product with a constant, recorded on the tape."""
    out = Tensor(a.data * w.data, dtype=a.dtype)
    if tape is not None and a.requires_grad:
        out.requires_grad = True
        tape.record((a,), out, lambda g: (g * w.data,))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
