"""Nesterov momentum in the lookahead form.

The update is v <- mu*v - lr*grad(theta + mu*v); theta <- theta + v, so the
gradient must be evaluated at the lookahead point. `lookahead` shifts the
live parameter tensors there and `nesterov_step` completes the update from
the remembered base point. Calling `nesterov_step` without a preceding
`lookahead` treats the current values as the base (plain momentum-at-theta),
which the training loop never does but keeps the op usable standalone.
"""

from __future__ import annotations

import numpy as np


class OptimizerState:
    """Named velocity slots plus the learning-rate schedule."""

    def __init__(self, learning_rate: float, momentum: float, lr_decay: float = 1.0):
        self.learning_rate = float(learning_rate)
        self.momentum = float(momentum)
        self.lr_decay = float(lr_decay)
        self.velocity: dict[str, np.ndarray] = {}
        self._base: dict[str, np.ndarray] | None = None

    def state_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "lr_decay": self.lr_decay,
            "velocity": dict(self.velocity),
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "OptimizerState":
        st = cls(d["learning_rate"], d["momentum"], d["lr_decay"])
        st.velocity = dict(d["velocity"])
        return st


def lookahead(params: dict, state: OptimizerState) -> None:
    """Move parameters to theta + mu*v so the caller can evaluate gradients there."""
    if state._base is not None:
        raise RuntimeError("lookahead called twice without nesterov_step")
    state._base = {}
    mu = state.momentum
    for name, p in params.items():
        state._base[name] = p.data
        v = state.velocity.get(name)
        if v is not None and mu != 0.0:
            p.data = p.data + mu * v


def nesterov_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """v <- mu*v - lr*g; theta <- theta + v. Restores tensors to the new theta."""
    mu = state.momentum
    lr = state.learning_rate
    base = state._base
    for name, p in params.items():
        g = grads[name]
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        v = mu * v - lr * g
        state.velocity[name] = v
        theta = base[name] if base is not None else p.data
        p.data = theta + v
    state._base = None


def abort_lookahead(params: dict, state: OptimizerState) -> None:
    """Restore base parameters without stepping (used when a batch fails)."""
    if state._base is None:
        return
    for name, p in params.items():
        p.data = state._base[name]
    state._base = None


def decay_learning_rate(state: OptimizerState) -> None:
    state.learning_rate *= state.lr_decay
