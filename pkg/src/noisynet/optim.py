"""Parameter updates: Adam (optionally with absolute-value projection) and SGD.

The projected variant keeps noise levels non-negative by taking the
absolute value of the parameter after each step, which lets a level bounce
off zero instead of crossing it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError


class NonFiniteGradientError(ValueError):
    """Raised when an optimizer receives NaN or Inf gradients."""


_PROJECTIONS = ("none", "abs")


@dataclass
class AdamState:
    """Moment estimates for one parameter tensor.

    ``h`` and ``v`` are the exponential moving averages of the gradient and
    its square; ``step`` counts completed updates starting at 1.
    """

    h: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    lr: float = 1e-3

    @classmethod
    def for_param(cls, param: np.ndarray, **kwargs) -> "AdamState":
        return cls(h=np.zeros_like(param), v=np.zeros_like(param), **kwargs)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              project: str = "none") -> np.ndarray:
    """One Adam update; returns the new parameter tensor.

    Moments are updated first, then bias-corrected with the step count, and
    the parameter moves against the rescaled gradient.  With
    ``project="abs"`` the result is mapped through absolute value, which is
    how noise levels stay >= 0.
    """
    if project not in _PROJECTIONS:
        raise ValueError(f"unknown projection {project!r}")
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise DimensionError(
            f"parameter shape {params.shape} does not match gradient shape {grads.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError("adam_step received non-finite gradients")

    state.step += 1
    state.h = state.beta1 * state.h + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    if state.step == 1:
        # h/(1-beta1) == g algebraically at step 1; computing it directly
        # keeps the first bias-corrected moments exact in floating point.
        h_hat = grads.copy()
        v_hat = grads * grads
    else:
        h_hat = state.h / (1.0 - state.beta1 ** state.step)
        v_hat = state.v / (1.0 - state.beta2 ** state.step)
    out = params - state.lr * h_hat / (np.sqrt(v_hat) + state.eps)
    if project == "abs":
        out = np.abs(out)
    return out


def sgd_step(params: np.ndarray, grads: np.ndarray, velocity: np.ndarray,
             lr: float, momentum: float = 0.0, weight_decay: float = 0.0):
    """Classical momentum SGD with L2 decay folded into the gradient.

    Returns (new params, new velocity).
    """
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape:
        raise DimensionError(
            f"parameter shape {params.shape} does not match gradient shape {grads.shape}"
        )
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradientError("sgd_step received non-finite gradients")
    g = grads + weight_decay * params if weight_decay else grads
    velocity = momentum * velocity + g
    return params - lr * velocity, velocity


def step_decay(lr0: float, factor: float, every: int, epoch: int) -> float:
    """Step-decay schedule: lr0 * factor^(epoch // every)."""
    if every <= 0:
        return lr0
    return lr0 * factor ** (epoch // every)


@dataclass
class Adam:
    """Adam over a list of parameter tensors, with optional L2 decay.

    Weight decay is added to the gradient (classical L2), and is meant for
    synaptic weights only; the noise-level optimizer runs with decay 0 and
    ``project="abs"``.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    project: str = "none"
    states: list = field(default_factory=list)

    def step(self, params: list, grads: list) -> list:
        if not self.states:
            self.states = [
                AdamState.for_param(p, beta1=self.beta1, beta2=self.beta2,
                                    eps=self.eps, lr=self.lr)
                for p in params
            ]
        if len(params) != len(self.states):
            raise DimensionError(
                f"optimizer tracks {len(self.states)} tensors, got {len(params)}"
            )
        out = []
        for state, p, g in zip(self.states, params, grads):
            state.lr = self.lr
            if self.weight_decay:
                g = g + self.weight_decay * p
            out.append(adam_step(state, p, g, project=self.project))
        return out

    def state_arrays(self, prefix: str) -> dict:
        """Flatten moment estimates for checkpoint serialization."""
        arrays = {}
        for i, s in enumerate(self.states):
            arrays[f"{prefix}{i}_h"] = s.h
            arrays[f"{prefix}{i}_v"] = s.v
            arrays[f"{prefix}{i}_step"] = np.array(s.step, dtype=np.int64)
        return arrays

    def load_state_arrays(self, prefix: str, arrays: dict, params: list) -> None:
        self.states = []
        for i, p in enumerate(params):
            self.states.append(AdamState(
                h=arrays[f"{prefix}{i}_h"], v=arrays[f"{prefix}{i}_v"],
                step=int(arrays[f"{prefix}{i}_step"]),
                beta1=self.beta1, beta2=self.beta2, eps=self.eps, lr=self.lr,
            ))
