"""Adam with bias correction, applied per parameter group.

Each group (the shared encoder, each task decoder) owns its own AdamState,
so a group's step counter advances only on iterations that update it and
bias correction stays right for rarely-sampled decoders.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float
    beta2: float
    eps: float
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_init(params: dict[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    """Fresh state with zero moments and step counter for one parameter group."""
    if not (0.0 <= beta1 < 1.0) or not (0.0 <= beta2 < 1.0):
        raise ValueError(f"betas must lie in [0, 1), got beta1={beta1}, beta2={beta2}")
    if lr <= 0.0 or eps <= 0.0:
        raise ValueError(f"lr and eps must be positive, got lr={lr}, eps={eps}")
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    for name, p in params.items():
        state.m[name] = np.zeros(p.shape)
        state.v[name] = np.zeros(p.shape)
    return state


def adam_step(state: AdamState, params: dict[str, Tensor], grads: dict[str, Tensor]) -> None:
    """One Adam update in place on `params` and `state`.

    Only parameters named in `grads` move; everything else, including its
    moments, is left bit-identical. The group's step counter always
    advances by one.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} shape {params[name].shape}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in sorted(grads):
        g = grads[name].data
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        params[name] = Tensor._wrap(params[name].data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
