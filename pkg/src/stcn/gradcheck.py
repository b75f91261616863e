"""Central-difference verification of reverse-mode gradients."""
from __future__ import annotations

from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, NumericError
from .tensor import Tensor


def grad_check(
    f: Callable[..., Tensor],
    x: Union[Tensor, Sequence[Tensor]],
    h: float = 1e-6,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Max relative error between the backward-pass gradient of ``f`` and
    ``(f(x+h) - f(x-h)) / 2h``, element-wise over every tensor in ``x``.

    ``f`` receives the tensors in ``x`` as positional arguments and must
    return a scalar. The relative error of one element is
    ``|a - b| / max(|a|, |b|, 1e-8)``. ``max_elements`` checks a random
    subset per tensor instead of every element.
    """
    if not 1e-7 <= h <= 1e-4:
        raise ConfigError(f"step h={h} outside [1e-7, 1e-4]")
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.grad = None

    out = f(*xs)
    if out.data.size != 1:
        raise ConfigError(f"grad_check needs a scalar function, got shape {out.shape}")
    if not np.isfinite(out.data).all():
        raise NumericError("function value is not finite")
    out.backward()

    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in xs:
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_elements is not None and flat.size > max_elements:
            idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = f(*xs).item()
            flat[i] = orig - h
            fm = f(*xs).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"non-finite function value while perturbing element {i}")
            numeric = (fp - fm) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
