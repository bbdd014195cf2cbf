"""Dense numeric primitives: seeded RNG, AdamW, and a finite-difference gradient oracle.

Arrays are plain numpy ndarrays in float32 (training, generation) or float64
(gradient checks). All public operations reject non-finite results so NaNs
cannot propagate silently through the pipeline.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class NumericsError(ValueError):
    """Shape mismatch or non-finite value in a numeric operation."""


def require_finite(x: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericsError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product of two 2-d arrays with shape validation."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise NumericsError(f"matmul expects 2-d operands, got {a.shape} x {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise NumericsError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return require_finite(a @ b, "matmul result")


class Rng:
    """Counter-based deterministic RNG (Philox keyed by seed and stream id).

    Identical (seed, stream) plus an identical call sequence reproduces the
    same values on every platform. Independent streams derived from one seed
    stay statistically independent, which keeps parallel evaluation loops
    reproducible regardless of scheduling.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        self._gen = np.random.Generator(np.random.Philox(key=[self.seed, self.stream]))

    def derive(self, stream: int) -> "Rng":
        """Independent stream under the same seed."""
        return Rng(self.seed, stream)

    def normal(self, shape: Sequence[int] | int, dtype=np.float32) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=dtype)

    def uniform(self, shape: Sequence[int] | int | None = None) -> np.ndarray | float:
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape: Sequence[int] | int | None = None):
        """Uniform integers in [low, high] inclusive."""
        return self._gen.integers(low, high, size=shape, endpoint=True)

    def shuffle(self, x: np.ndarray) -> None:
        self._gen.shuffle(x)

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"


def gaussian(rng: Rng, shape: Sequence[int] | int, dtype=np.float32) -> np.ndarray:
    """i.i.d. standard normal tensor, deterministic given the rng state."""
    if np.prod(shape) <= 0:
        raise NumericsError(f"empty shape {shape}")
    return rng.normal(shape, dtype=dtype)


@dataclass
class AdamWState:
    """Per-parameter AdamW state with decoupled weight decay.

    Defaults (lr 1e-2, betas 0.9/0.999, eps 1e-8, no decay) are the shipped
    training configuration and are echoed into every run config.
    """

    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adamw_step(param: np.ndarray, grad: np.ndarray, state: AdamWState) -> np.ndarray:
    """One AdamW update with bias correction; advances ``state`` in place."""
    if param.shape != grad.shape:
        raise NumericsError(f"param/grad shapes disagree: {param.shape} vs {grad.shape}")
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    if state.m.shape != param.shape:
        raise NumericsError(f"state/param shapes disagree: {state.m.shape} vs {param.shape}")
    require_finite(grad, "gradient")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    update = m_hat / (np.sqrt(v_hat) + state.eps)
    new_param = param - state.lr * update - state.lr * state.weight_decay * param
    return require_finite(new_param.astype(param.dtype, copy=False), "adamw update")


def finite_diff_grad(
    f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-4
) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time.

    This is the independent oracle used to validate every hand-written
    backward pass; it never shares code with the analytic paths it checks.
    """
    if h <= 0:
        raise NumericsError("step size h must be positive")
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericsError(f"non-finite function value at coordinate {i}")
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
