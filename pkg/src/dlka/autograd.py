"""Tape traversal, finite differences, and the gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, ValidationError


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse-accumulate d(loss)/d(leaf) for every reachable parameter leaf.

    The loss must be scalar. Each leaf with requires_grad receives exactly one
    accumulated array in ``leaf.grad`` (summed over all paths, in a fixed
    deterministic order), and the map {id(leaf): grad} is returned.
    """
    if loss.shape != ():
        raise ValidationError(f"backward needs a scalar loss, got shape {loss.shape}")

    # deterministic topo order: DFS with an explicit stack, children in
    # recorded parent order
    topo: list[Tensor] = []
    state: dict[int, int] = {}  # 0 = entered, 1 = done
    stack: list[Tensor] = [loss]
    while stack:
        node = stack[-1]
        st = state.get(id(node))
        if st is None:
            state[id(node)] = 0
            for p in node._parents:
                if id(p) not in state:
                    stack.append(p)
        else:
            stack.pop()
            if st == 0:
                state[id(node)] = 1
                topo.append(node)

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    leaf_grads: dict[int, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward_fn is None:
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
                leaf_grads[id(node)] = node.grad
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not (p.requires_grad or p._parents):
                continue
            pg = np.asarray(pg)
            if pg.shape != p.shape:
                raise ValidationError(
                    f"gradient shape {pg.shape} != parent shape {p.shape}"
                )
            acc = grads.get(id(p))
            grads[id(p)] = pg if acc is None else acc + pg
    return leaf_grads


def finite_diff(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at x, one element at a time."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


@dataclass
class GradReport:
    """Outcome of one gradient check: worst relative error and its location."""

    max_rel_err: float
    worst_input: str
    worst_index: tuple[int, ...]
    analytic: float
    numeric: float
    passed: bool
    per_input: dict[str, float] = field(default_factory=dict)


def gradcheck(
    build: Callable[[dict[str, Tensor]], Tensor],
    inputs: dict[str, Tensor],
    h: float = 1e-5,
    threshold: float = 1e-4,
) -> GradReport:
    """Compare tape gradients of ``build(inputs)`` against central differences.

    ``inputs`` maps names to the live leaf tensors to check (module parameters
    may appear directly); ``build`` must rebuild a scalar loss from the leaves'
    current ``.data`` on every call.  Relative error is
    |a - n| / (|a| + |n| + 1e-8) per element; the check passes when the max
    over every element of every input stays below ``threshold``.
    """
    for t in inputs.values():
        t.requires_grad = True
        t.zero_grad()
    loss = build(inputs)
    backward(loss)
    analytic = {
        k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for k, t in inputs.items()
    }
    del loss

    worst = GradReport(0.0, "", (), 0.0, 0.0, True)
    for k, t in inputs.items():
        original = t.data

        def f(arr, t=t):
            t.data = arr
            return build(inputs).item()

        num = finite_diff(f, original.copy(), h)
        t.data = original
        a = analytic[k]
        rel = np.abs(a - num) / (np.abs(a) + np.abs(num) + 1e-8)
        idx = np.unravel_index(np.argmax(rel), rel.shape) if rel.size else ()
        m = float(rel.max()) if rel.size else 0.0
        worst.per_input[k] = m
        if m > worst.max_rel_err:
            worst.max_rel_err = m
            worst.worst_input = k
            worst.worst_index = tuple(int(i) for i in idx)
            worst.analytic = float(a[idx]) if rel.size else 0.0
            worst.numeric = float(num[idx]) if rel.size else 0.0
    worst.passed = worst.max_rel_err < threshold
    return worst
