#adam optimizer over named float64 parameter arrays
#keeps first/second moment estimates per parameter name with bias correction
from dataclasses import dataclass, field

import numpy as np

from infrastructure.errors import DimensionError


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update. Returns (new params, new state); the inputs are left untouched."""
    step = state.step + 1
    #bias corrections computed once per step
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step

    new_params, new_m, new_v = {}, {}, {}
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise DimensionError(f"Gradient for '{name}' has shape {g.shape}, parameter {value.shape}")
        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        if m.shape != value.shape:
            raise DimensionError(f"Adam state for '{name}' has shape {m.shape}, parameter {value.shape}")

        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        #param -= lr * m_hat / (sqrt(v_hat) + eps)
        new_params[name] = value - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        new_m[name], new_v[name] = m, v

    return new_params, AdamState(step, new_m, new_v)
