import numpy as np

from seqpool import tensorcore as tc
from seqpool.gradcheck import numerical_gradient, relative_error


def check_gradients(loss_fn, arrays, tol=1e-4):
    """Compare reverse-mode gradients of ``loss_fn(nodes)`` to central differences.

    ``arrays`` maps names to float arrays; ``loss_fn`` receives a dict of leaf
    nodes sharing memory with them and returns a scalar node.
    """
    nodes = {k: tc.parameter(v) for k, v in arrays.items()}
    out = loss_fn(nodes)
    tc.backward(out)
    worst = 0.0
    for name, arr in arrays.items():
        num = numerical_gradient(lambda: loss_fn({k: tc.constant(v) for k, v in arrays.items()}).value, arr)
        got = nodes[name].grad if nodes[name].grad is not None else np.zeros_like(arr)
        err = relative_error(got, num)
        assert err < tol, f"{name}: relative error {err:.3e}"
        worst = max(worst, err)
    return worst


# acceptance verdicts, printed by the terminal-summary hook in conftest
VERDICTS: list[str] = []


def verdict(number: int, title: str, ok: bool, detail: str = "") -> None:
    VERDICTS.append(f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d}: {title}" + (f" ({detail})" if detail else ""))
    assert ok, f"criterion {number} failed: {detail}"
