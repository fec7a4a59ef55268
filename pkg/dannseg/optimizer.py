import logging
from typing import Dict, List, Optional, Tuple

import numpy as np

from dannseg.error import DannSegError, ErrorCode
from dannseg.tensor import Tensor

logger = logging.getLogger(__name__)

NamedTensors = List[Tuple[str, Tensor]]


class OptimizerState:
    """First/second moment estimates keyed by parameter name, plus the step counter."""

    def __init__(
        self,
        step: int = 0,
        m: Optional[Dict[str, np.ndarray]] = None,
        v: Optional[Dict[str, np.ndarray]] = None,
    ):
        self.step = step
        self.m: Dict[str, np.ndarray] = m or {}
        self.v: Dict[str, np.ndarray] = v or {}

    def copy(self) -> "OptimizerState":
        return OptimizerState(
            self.step,
            {k: a.copy() for k, a in self.m.items()},
            {k: a.copy() for k, a in self.v.items()},
        )

    def __eq__(self, other):
        if not isinstance(other, OptimizerState):
            return False
        return (
            self.step == other.step
            and self.m.keys() == other.m.keys()
            and self.v.keys() == other.v.keys()
            and all(np.array_equal(self.m[k], other.m[k]) for k in self.m)
            and all(np.array_equal(self.v[k], other.v[k]) for k in self.v)
        )


def _gradient(tensor: Tensor) -> np.ndarray:
    return tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)


class SGD:
    """theta <- theta - lr * grad (or + when maximising)."""

    kind = "sgd"

    def __init__(self, state: Optional[OptimizerState] = None):
        self.state = state or OptimizerState()

    def step(self, params: NamedTensors, lr: float, maximize: bool = False) -> None:
        if lr <= 0:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"learning rate must be positive, got {lr}")
        sign = 1.0 if maximize else -1.0
        self.state.step += 1
        for _, tensor in params:
            tensor.data = tensor.data + sign * lr * _gradient(tensor)


class Adam:
    """
    Adam with bias-corrected moments.

    Args:
        beta1: decay rate of the first-moment estimate
        beta2: decay rate of the second-moment estimate
        eps: added to sqrt(v_hat) in the denominator
    """

    kind = "adam"

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 state: Optional[OptimizerState] = None):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state = state or OptimizerState()

    def step(self, params: NamedTensors, lr: float, maximize: bool = False) -> None:
        if lr <= 0:
            raise DannSegError(ErrorCode.INVALID_CONFIG, f"learning rate must be positive, got {lr}")
        sign = 1.0 if maximize else -1.0
        state = self.state
        state.step += 1
        correction1 = 1 - self.beta1 ** state.step
        correction2 = 1 - self.beta2 ** state.step
        for name, tensor in params:
            grad = _gradient(tensor)
            m = state.m.get(name, np.zeros_like(tensor.data))
            v = state.v.get(name, np.zeros_like(tensor.data))
            if m.shape != tensor.shape:
                raise DannSegError(ErrorCode.SHAPE_MISMATCH, f"moment shape {m.shape} does not match {name} {tensor.shape}")
            m = self.beta1 * m + (1 - self.beta1) * grad
            v = self.beta2 * v + (1 - self.beta2) * grad ** 2
            state.m[name], state.v[name] = m, v
            m_hat = m / correction1
            v_hat = v / correction2
            tensor.data = (tensor.data + sign * lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(tensor.dtype)


def build_optimizer(kind: str, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                    state: Optional[OptimizerState] = None):
    if kind == "adam":
        return Adam(beta1, beta2, eps, state=state)
    if kind == "sgd":
        return SGD(state=state)
    raise DannSegError(ErrorCode.INVALID_CONFIG, f"unknown optimizer {kind!r}")
