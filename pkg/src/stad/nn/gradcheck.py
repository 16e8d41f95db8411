"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .layers import Layer, Parameter


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Largest entry-wise discrepancy, relative to the tensor's gradient scale.

    Dividing each entry by its own magnitude would make near-zero entries
    report finite-difference round-off (about eps * |loss| / h) as error.
    """
    if not analytic.size:
        return 0.0
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def numeric_grad(f: Callable[[], float], array: np.ndarray, h: float = 1e-4) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    flat = array.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(loss_and_backward: Callable[[], float], loss_only: Callable[[], float],
                    params: Sequence[Parameter], extra: Sequence[tuple[np.ndarray, np.ndarray]] = (),
                    h: float = 1e-4) -> float:
    """Max relative error between analytic and numeric gradients.

    ``loss_and_backward`` must zero and then populate every ``Parameter.grad``
    (and the analytic arrays in ``extra``, given as ``(value, grad)`` pairs);
    ``loss_only`` evaluates the loss without touching gradients.
    """
    for p in params:
        p.zero_grad()
    loss_and_backward()
    analytic = [p.grad.copy() for p in params] + [g.copy() for _, g in extra]
    targets = [p.value for p in params] + [v for v, _ in extra]
    worst = 0.0
    for a, arr in zip(analytic, targets):
        worst = max(worst, relative_error(a, numeric_grad(loss_only, arr, h)))
    return worst


def grad_check(layer: Layer, input_shape: Sequence[int], seed: int = 0, h: float = 1e-4) -> float:
    """Gradient check of one layer under a random linear read-out loss.

    Checks every parameter and the input gradient. ``input_shape`` includes the
    batch dimension.
    """
    rng = np.random.default_rng(seed)
    x = rng.normal(size=tuple(input_shape))
    # replace zero-initialized biases so their gradients are exercised non-trivially
    for p in layer.parameters():
        p.value[...] = rng.normal(scale=0.5, size=p.shape)
    out_shape = (input_shape[0],) + tuple(layer.output_shape(input_shape[1:]))
    readout = rng.normal(size=out_shape)
    gx = np.zeros_like(x)

    def loss_only() -> float:
        y = layer.forward(x)
        layer._cache = None
        return float(np.sum(y * readout))

    def loss_and_backward() -> float:
        y = layer.forward(x)
        gx[...] = layer.backward(readout)
        return float(np.sum(y * readout))

    return check_gradients(loss_and_backward, loss_only, layer.parameters(), [(x, gx)], h)
