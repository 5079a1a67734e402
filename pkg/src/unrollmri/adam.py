"""Adam optimizer over named parameter dicts.

Parameters and gradients are ``dict[str, ndarray]`` with matching keys.
``adam_step`` is pure: it returns fresh parameter arrays and a fresh state,
so two identical calls from identical states give identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError


@dataclass
class AdamState:
    """First/second moment accumulators plus hyperparameters.

    ``skipped`` counts updates that were dropped because a gradient was
    non-finite (the parameters and moments are left untouched in that case).
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ParameterError("beta1 and beta2 must lie in (0, 1)")
        if self.step < 0:
            raise ParameterError("step must be >= 0")

    @classmethod
    def init(cls, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def adam_step(params: dict, grads: dict, state: AdamState):
    """One Adam update with bias correction.

    Returns ``(new_params, new_state)``. If any gradient entry is
    non-finite the update is skipped and flagged (``state.skipped`` grows,
    ``step`` does not advance).
    """
    if set(params) != set(grads):
        missing = set(params) ^ set(grads)
        raise ParameterError(f"gradient keys do not match parameters: {sorted(missing)}")

    if any(not np.isfinite(g).all() for g in grads.values()):
        new_state = AdamState(
            lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
            step=state.step, skipped=state.skipped + 1,
            m={k: m.copy() for k, m in state.m.items()},
            v={k: v.copy() for k, v in state.v.items()},
        )
        return {k: p.copy() for k, p in params.items()}, new_state

    t = state.step + 1
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = {}, {}, {}
    for key, p in params.items():
        g = np.asarray(grads[key], dtype=p.dtype)
        m = state.beta1 * state.m[key] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[key] + (1.0 - state.beta2) * g * g
        update = state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        new_params[key] = p - update
        new_m[key] = m
        new_v[key] = v
    new_state = AdamState(
        lr=state.lr, beta1=state.beta1, beta2=state.beta2, eps=state.eps,
        step=t, skipped=state.skipped, m=new_m, v=new_v,
    )
    return new_params, new_state
