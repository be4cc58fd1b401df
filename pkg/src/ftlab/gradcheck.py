"""Central finite-difference checks for autodiff gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor

# relative errors are measured against max(|analytic|, |numeric|, floor)
FLOOR = 1e-8
# check_gradients raises the floor to this multiple of the difference quotient's
# roundoff, so structurally zero gradients (e.g. key biases under softmax shift
# invariance) are not scored on noise alone
NOISE_MARGIN = 1e4


def roundoff_floor(loss_value: float, eps: float) -> float:
    noise = np.finfo(np.float64).eps * max(abs(loss_value), 1.0) / eps
    return max(FLOOR, NOISE_MARGIN * noise)


def relative_error(analytic: float, numeric: float, floor: float = FLOOR) -> float:
    return float(abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor))


def numeric_grad(loss_fn: Callable[[], float], param: Tensor, index: tuple, eps: float = 1e-4) -> float:
    """(f(x + eps) - f(x - eps)) / (2 eps) at one coordinate; restores the value."""
    orig = param.data[index]
    param.data[index] = orig + eps
    plus = loss_fn()
    param.data[index] = orig - eps
    minus = loss_fn()
    param.data[index] = orig
    return (plus - minus) / (2 * eps)


def richardson_grad(loss_fn: Callable[[], float], param: Tensor, index: tuple, eps: float = 1e-4) -> float:
    """Central differences at eps and eps/2 combined to cancel the O(eps^2) term."""
    coarse = numeric_grad(loss_fn, param, index, eps)
    fine = numeric_grad(loss_fn, param, index, eps / 2)
    return (4 * fine - coarse) / 3


def sample_coordinates(
    params: Sequence[tuple[str, Tensor]], n: int, rng: np.random.Generator, per_tensor: bool = False
) -> list[tuple[str, tuple]]:
    """Draw ``n`` (name, index) pairs.

    Uniform over all entries by default. ``per_tensor`` cycles through the
    tensors so small ones (biases, norms) are probed as often as embeddings.
    """
    if per_tensor:
        out = []
        for i in range(n):
            name, p = params[i % len(params)]
            out.append((name, np.unravel_index(int(rng.integers(p.size)), p.shape)))
        return out
    sizes = np.array([p.size for _, p in params])
    flat = rng.choice(sizes.sum(), size=n, replace=False)
    bounds = np.cumsum(sizes)
    out = []
    for f in flat:
        k = int(np.searchsorted(bounds, f, side="right"))
        offset = int(f - (bounds[k - 1] if k else 0))
        name, p = params[k]
        out.append((name, np.unravel_index(offset, p.shape)))
    return out


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[tuple[str, Tensor]],
    n_coords: int,
    rng: np.random.Generator,
    eps: float = 1e-4,
    per_tensor: bool = False,
    richardson: bool = False,
) -> tuple[float, list[dict]]:
    """Compare backprop against central differences at random coordinates.

    ``loss_fn`` must be deterministic (fixed dropout seed or eval mode).
    ``richardson`` removes the truncation error of the difference quotient,
    which otherwise dominates at coordinates with small gradients.
    Returns the max relative error and per-coordinate details.
    """
    for _, p in params:
        p.grad = None
    loss = loss_fn()
    floor = roundoff_floor(loss.item(), eps)
    loss.backward()
    analytic = {name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params}
    del loss
    lookup = dict(params)

    def value() -> float:
        return loss_fn().item()

    oracle = richardson_grad if richardson else numeric_grad
    rows = []
    for name, idx in sample_coordinates(params, n_coords, rng, per_tensor):
        a = float(analytic[name][idx])
        num = oracle(value, lookup[name], idx, eps)
        rows.append({"param": name, "index": tuple(int(i) for i in idx), "analytic": a, "numeric": num, "rel_err": relative_error(a, num, floor)})
    return max(r["rel_err"] for r in rows), rows
