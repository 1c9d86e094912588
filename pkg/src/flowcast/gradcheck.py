"""Central-difference verification of tape gradients.

Works on any ``fn(params) -> scalar Tensor`` where ``params`` is a list of
float64 leaf tensors. Analytic gradients come from one taped backward pass;
numeric ones from two untaped forward evaluations per coordinate.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .tensor import Tape, Tensor, backward


def relative_error(analytic: float, numeric: float,
                   floor: float = 1e-8) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps tiny grads comparable."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(fn: Callable[[Sequence[Tensor]], Tensor],
                    params: Sequence[Tensor],
                    step: float = 1e-5) -> float:
    """Return the worst relative error between tape and central-difference grads.

    ``params`` must be float64 and require gradients; every coordinate of
    every parameter is perturbed, so keep the models tiny.
    """
    for p in params:
        if p.data.dtype != np.float64:
            raise ContractError(f"gradcheck needs float64 params, got {p.data.dtype}")
        if not p.requires_grad:
            raise ContractError("gradcheck params must require gradients")
        p.grad = None

    with Tape():
        loss = fn(params)
    backward(loss)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = fn(params).item()
            flat[i] = keep - step
            lo = fn(params).item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * step)
            err = relative_error(float(gflat[i]), numeric)
            if err > worst:
                worst = err
    return worst


def check_gradients_named(fn: Callable[[], Tensor],
                          params: dict[str, Tensor],
                          step: float = 1e-5,
                          floor: float = 1e-8) -> dict[str, float]:
    """Per-parameter max relative error between tape and central differences.

    ``fn`` takes no arguments and recomputes the scalar loss from the
    current parameter values. A floor above 1e-8 absorbs finite-difference
    rounding noise on coordinates whose true gradient is near zero.
    """
    for name, p in params.items():
        if p.data.dtype != np.float64:
            raise ContractError(
                f"gradcheck needs float64 params, {name!r} is {p.data.dtype}")
        if not p.requires_grad:
            raise ContractError(f"gradcheck param {name!r} must require gradients")
        p.grad = None

    with Tape():
        loss = fn()
    backward(loss)
    analytic = {name: np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for name, p in params.items()}

    report: dict[str, float] = {}
    for name, p in params.items():
        flat = p.data.reshape(-1)
        gflat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + step
            hi = fn().item()
            flat[i] = keep - step
            lo = fn().item()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * step)
            err = relative_error(float(gflat[i]), numeric, floor)
            if err > worst:
                worst = err
        report[name] = worst
    return report
