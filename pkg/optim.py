"""
Optimizer
Bias-corrected Adam over named tensors and the cosine learning-rate schedule.
"""

from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np

from errors import NumericAbortError, ShapeError


@dataclass
class OptimizerState:
    """Adam moments per tensor, shaped like the tensors and held in 64-bit."""

    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, tensors: Dict[str, np.ndarray], **hyper) -> 'OptimizerState':
        def zeros(value):
            return np.zeros(value.shape, dtype=np.complex128 if np.iscomplexobj(value) else np.float64)

        return cls(
            m={name: zeros(value) for name, value in tensors.items()},
            v={name: zeros(value) for name, value in tensors.items()},
            **hyper,
        )


def _real_view(value: np.ndarray) -> np.ndarray:
    """Complex arrays as interleaved real/imaginary components; each component is its own coordinate."""
    value = np.ascontiguousarray(value)
    if np.iscomplexobj(value):
        return value.view(value.real.dtype)
    return value


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * step / total)) / 2."""
    if total_steps <= 0:
        return lr_max
    step = min(max(step, 0), total_steps)
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + np.cos(np.pi * step / total_steps))


def adam_step(
    tensors: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
    state: OptimizerState,
    lr: float,
) -> Tuple[Dict[str, np.ndarray], OptimizerState]:
    """
    One Adam update.

    Args:
        tensors: Parameters by name
        grads: Gradients by name, same shapes
        state: Moments and step counter
        lr: Learning rate of this step

    Returns:
        Tuple of (updated tensors, updated state)

    Raises:
        NumericAbortError: A gradient holds NaN or infinity
    """
    for name, grad in grads.items():
        if not np.all(np.isfinite(grad)):
            raise NumericAbortError(
                f"non-finite gradient in '{name}'", diagnostics={'tensor': name, 'step': state.step}
            )

    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1 ** step
    correction2 = 1.0 - b2 ** step

    updated, new_m, new_v = {}, {}, {}
    for name, value in tensors.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise ShapeError(f"gradient of '{name}' has shape {grad.shape}, tensor has {value.shape}")
        g = _real_view(grad.astype(np.complex128 if np.iscomplexobj(value) else np.float64))
        m = b1 * _real_view(state.m[name]) + (1.0 - b1) * g
        v = b2 * _real_view(state.v[name]) + (1.0 - b2) * g * g
        p = _real_view(value.astype(np.complex128 if np.iscomplexobj(value) else np.float64))
        p = p - lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)

        if np.iscomplexobj(value):
            new_m[name] = m.view(np.complex128)
            new_v[name] = v.view(np.complex128)
            updated[name] = p.view(np.complex128).astype(value.dtype)
        else:
            new_m[name], new_v[name] = m, v
            updated[name] = p.astype(value.dtype)

    return updated, OptimizerState(m=new_m, v=new_v, step=step, beta1=b1, beta2=b2, eps=state.eps)
