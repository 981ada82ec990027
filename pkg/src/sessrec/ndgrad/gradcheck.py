"""Central finite-difference gradient checks, run in float64."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, backward


def numeric_grad(fn: Callable[[], float], arr: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """d fn / d arr by central differences, perturbing ``arr`` in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = fn()
        flat[i] = orig - h
        down = fn()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    rtol: float = 1e-4,
    atol: float = 1e-3,
    h: float = 1e-6,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> dict[str, float]:
    """Compare autodiff gradients of ``loss_fn()`` against finite differences.

    ``params`` must hold float64 leaf tensors with ``requires_grad``. A
    coordinate passes when ``|auto - numeric| <= max(atol, rtol * |numeric|)``.
    With ``max_entries`` only a random subset of coordinates per parameter is
    probed. Returns the worst absolute error per parameter; raises
    ``AssertionError`` on the first failing parameter.
    """
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError("gradient checks must run in float64")
        p.grad = None
    with Tape():
        root = loss_fn()
    backward(root)
    auto = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}

    def value() -> float:
        return float(loss_fn().data.reshape(-1)[0])

    worst: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = (rng or np.random.default_rng(0)).choice(flat.size, max_entries, replace=False)
        a = auto[name].reshape(-1)
        err = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = value()
            flat[i] = orig - h
            down = value()
            flat[i] = orig
            num = (up - down) / (2 * h)
            diff = abs(a[i] - num)
            tol = max(atol, rtol * abs(num))
            if diff > tol:
                raise AssertionError(
                    f"{name}[{i}]: autodiff {a[i]:.6g} vs numeric {num:.6g} (|diff| {diff:.3g} > {tol:.3g})"
                )
            err = max(err, diff)
        worst[name] = err
    return worst
