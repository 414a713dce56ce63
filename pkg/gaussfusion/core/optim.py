"""AdamW with decoupled weight decay and the cosine learning-rate schedule."""
import math
from typing import Mapping, Tuple

import numpy as np

from gaussfusion.core.errors import ContractError
from gaussfusion.core.params import ParameterStore


def adamw_step(store: ParameterStore, grads: Mapping[str, np.ndarray], lr: float,
               weight_decay: float = 1e-4, betas: Tuple[float, float] = (0.9, 0.999),
               eps: float = 1e-8) -> ParameterStore:
    """Apply one AdamW update in place and return the store.

    Args:
        store: Parameters plus persisted first/second moments.
        grads: One gradient per parameter path, same shapes.
        lr: Step size for this update.
        weight_decay: Decoupled decay coefficient (scaled by ``lr``).
        betas: Moment decay rates.
        eps: Denominator stabilizer.

    Raises:
        ContractError: If a gradient is missing, extra or misshaped.
    """
    missing = sorted(set(store.params) - set(grads))
    extra = sorted(set(grads) - set(store.params))
    if missing or extra:
        raise ContractError(f"gradient set does not match parameters (missing={missing}, extra={extra})")

    beta1, beta2 = betas
    store.step += 1
    bias1 = 1.0 - beta1 ** store.step
    bias2 = 1.0 - beta2 ** store.step
    for path, p in store.params.items():
        g = np.asarray(grads[path], dtype=p.values.dtype)
        if g.shape != p.shape:
            raise ContractError(f"gradient for '{path}' has shape {g.shape}, parameter has {p.shape}")
        m, v = store.moments.get(path, (np.zeros_like(p.values), np.zeros_like(p.values)))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        store.moments[path] = (m, v)
        decayed = p.values * (1.0 - lr * weight_decay)
        p.values = decayed - lr * (m / bias1) / (np.sqrt(v / bias2) + eps)
    return store


def cosine_lr(step: int, max_steps: int, lr_max: float = 6e-4, lr_min: float = 0.0) -> float:
    if max_steps <= 0:
        return lr_max
    progress = min(max(step, 0), max_steps) / max_steps
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * progress))
