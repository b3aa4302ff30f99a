import numpy as np
import pytest

from tshamo import diffcore as dc
from tshamo.datakit import SyntheticSpec, generate_synthetic_dataset


def numeric_grad(f, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f() w.r.t. every entry of arr (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)) + np.max(np.abs(b))))


def check_grads(build, inputs: dict, h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and finite differences.

    ``build(tensors) -> scalar Tensor`` is evaluated on Tensors wrapping the
    arrays in ``inputs``.
    """
    tensors = {k: dc.Tensor(v, requires_grad=True) for k, v in inputs.items()}
    with dc.Tape() as tape:
        loss = build(tensors)
    grads = tape.backward(loss)
    worst = 0.0
    for k, t in tensors.items():
        def f():
            return build({kk: dc.Tensor(tt.data) for kk, tt in tensors.items()}).item()
        num = numeric_grad(f, t.data, h)
        ana = grads[t].data if t in grads else np.zeros_like(t.data)
        worst = max(worst, rel_err(ana, num))
    return worst


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(SyntheticSpec(num_classes=3, seqs_per_class=10, min_len=6, max_len=14,
                                                    max_frames=16), seed=3)


ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
