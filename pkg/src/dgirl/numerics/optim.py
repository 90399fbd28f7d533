"""Adam and global-norm gradient clipping."""

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractViolation

DEFAULT_LR = 0.001


@dataclass
class AdamState:
    lr: float = DEFAULT_LR
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params, **kwargs):
        state = cls(**kwargs)
        for name, p in params.items():
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        return state


def adam_step(params, state):
    """Apply one bias-corrected Adam update in place using ``params``' grads."""
    names = params.names()
    if sorted(state.m) != names:
        raise ContractViolation("Adam state does not cover the same parameters")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name in names:
        p = params[name]
        m, v = state.m[name], state.v[name]
        if m.shape != p.value.shape:
            raise ContractViolation(f"Adam moment shape drift for {name!r}")
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params


# relative slack so a freshly clipped store (whose recomputed norm may exceed
# max_norm by an ulp) is left alone on a second pass
_CLIP_SLACK = 1e-12


def clip_gradients(params, max_norm):
    """Scale all grads so the global L2 norm is at most ``max_norm``; returns the factor."""
    if max_norm <= 0:
        raise ContractViolation("max_norm must be positive")
    norm = params.grad_norm()
    if norm <= max_norm * (1.0 + _CLIP_SLACK):
        return 1.0
    factor = max_norm / norm
    for _, p in params.items():
        p.grad *= factor
    return factor
