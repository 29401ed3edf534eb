"""Adam over named parameter arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DivergenceError(RuntimeError):
    """Raised when a gradient or loss stops being finite."""


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "step": self.step,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AdamState":
        return cls(
            beta1=d["beta1"],
            beta2=d["beta2"],
            eps=d["eps"],
            step=d["step"],
            m={k: np.asarray(v, dtype=np.float64) for k, v in d["m"].items()},
            v={k: np.asarray(v, dtype=np.float64) for k, v in d["v"].items()},
        )


def adam_step(
    state: AdamState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
) -> tuple[AdamState, dict[str, np.ndarray]]:
    """One bias-corrected Adam update. Inputs are not modified."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient for parameter {name!r} at step {state.step + 1}")
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_params = {}, {}, {}
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {w.shape} for {name!r}")
        m = b1 * state.m.get(name, np.zeros_like(w)) + (1 - b1) * g
        v = b2 * state.v.get(name, np.zeros_like(w)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_m[name], new_v[name] = m, v
        new_params[name] = w - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return AdamState(b1, b2, state.eps, t, new_m, new_v), new_params
