"""Central finite-difference verification of recorded gradients."""

import numpy as np

from ..errors import ContractViolation, NondeterministicLossError
from .tensor import Tensor, backward


def _scalar(x):
    return float(x.value) if isinstance(x, Tensor) else float(x)


def finite_diff_check(loss_fn, params, eps=1e-5, coords_per_param=6, seed=0,
                      details=False):
    """Max relative error between backprop grads and central differences.

    ``loss_fn()`` must rebuild the loss from the current values in ``params``.
    For each parameter tensor up to ``coords_per_param`` coordinates are
    sampled (seeded), and the error at a coordinate is
    ``|a - n| / max(|a|, |n|, 1e-8)``.

    With ``details=True`` returns ``(max_error, {name: max_error})``.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    params.zero_grad()
    loss = loss_fn()
    base = _scalar(loss)
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params.items()}
    again = _scalar(loss_fn())
    if again != base:
        raise NondeterministicLossError(
            f"loss changed between identical evaluations: {base!r} vs {again!r}")

    rng = np.random.default_rng(seed)
    per_param = {}
    for name, p in params.items():
        flat = p.value.reshape(-1)
        k = min(coords_per_param, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = _scalar(loss_fn())
            flat[i] = orig - eps
            down = _scalar(loss_fn())
            flat[i] = orig
            num = (up - down) / (2.0 * eps)
            a = analytic[name].reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
        per_param[name] = worst
    worst = max(per_param.values(), default=0.0)
    return (worst, per_param) if details else worst


def well_conditioned_point(params, scale=0.5, seed=0):
    """Overwrite every parameter with seeded uniform(-scale, scale) values.

    At the default small initialisation many recurrent-weight gradients are
    ~1e-8, where central differences are dominated by roundoff; checking at
    a spread-out point makes the relative error meaningful.
    """
    if scale <= 0:
        raise ContractViolation("scale must be positive")
    rng = np.random.default_rng(seed)
    for _, p in params.items():
        p.value[...] = rng.uniform(-scale, scale, size=p.value.shape)
