"""SGD with classical momentum and decoupled-from-nothing weight decay.

v <- momentum * v + grad + weight_decay * param
param <- param - lr * v

Weight decay folds into the velocity, i.e. L2 regularization rather than
decoupled decay. State is keyed by parameter name and is created lazily.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractError, ShapeError
from .tensor import Array, Tensor


def sgd_momentum_step(
    params: dict[str, Tensor],
    grads: dict[str, Array],
    state: dict[str, Array],
    lr: float,
    momentum: float = 0.9,
    weight_decay: float = 0.0,
) -> None:
    """Update `params` in place from `grads`; velocity lives in `state`."""
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ContractError(f"momentum must be in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ContractError(f"weight decay must be non-negative, got {weight_decay}")
    missing = set(params) - set(grads)
    if missing:
        raise ContractError(f"gradients missing for parameters: {sorted(missing)}")

    lr32 = np.float32(lr)
    mom32 = np.float32(momentum)
    wd32 = np.float32(weight_decay)
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float32)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {g.shape}, expected {p.shape}")
        v = state.get(name)
        if v is None:
            v = np.zeros_like(p.data)
            state[name] = v
        if weight_decay:
            g = g + wd32 * p.data
        v *= mom32
        v += g
        p.data -= lr32 * v
