import logging
import threading
from abc import abstractmethod
from typing import Any, List, Optional, Sequence, Tuple, Union

import numpy as np

from dannseg.error import DannSegError, ErrorCode

logger = logging.getLogger(__name__)

DEFAULT_DTYPE = np.float32

_thread_state = threading.local()


def _tape_stack() -> List["Tape"]:
    if not hasattr(_thread_state, "stack"):
        _thread_state.stack = []
    return _thread_state.stack


def active_tape() -> Optional["Tape"]:
    """The innermost tape opened on this thread, or None when no gradients are recorded."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward` on raw arrays (caching whatever the backward pass needs
    on `self`) and `backward`, which maps dL/d[output] to one dL/d[input] per input tensor
    (None for inputs that are not differentiable).
    """

    def __init__(self, *tensors: "Tensor"):
        self.tensors = tensors

    @abstractmethod
    def forward(self, *arrays: np.ndarray, **kwargs: Any) -> np.ndarray:
        raise NotImplementedError("Forward pass not implemented for this function")

    @abstractmethod
    def backward(self, grad: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Backward pass not implemented for this function")

    @classmethod
    def apply(cls, *tensors: "Tensor", **kwargs: Any) -> "Tensor":
        """
        Run the forward pass and, when a tape is active and any input requires a gradient,
        record the operation on that tape.
        """
        func = cls(*tensors)
        out_data = func.forward(*(t.data for t in tensors), **kwargs)

        tape = active_tape()
        requires_grad = tape is not None and any(t.requires_grad for t in tensors)
        out = Tensor(out_data, requires_grad=requires_grad, dtype=out_data.dtype)
        if requires_grad:
            out.creator = func
            out.tape = tape
            tape.record(func, tensors, out)
        return out

    @staticmethod
    def unbroadcast(grad: np.ndarray, to_shape: Tuple[int, ...]) -> np.ndarray:
        """Sum out broadcast dimensions so that grad matches to_shape."""
        if grad.shape == to_shape:
            return grad
        while grad.ndim > len(to_shape):
            grad = grad.sum(axis=0)
        for dim, size in enumerate(to_shape):
            if size == 1 and grad.shape[dim] != 1:
                grad = grad.sum(axis=dim, keepdims=True)
        return grad


class _Record:
    __slots__ = ("function", "inputs", "output")

    def __init__(self, function: Function, inputs: Sequence["Tensor"], output: "Tensor"):
        self.function = function
        self.inputs = inputs
        self.output = output


class Tape:
    """
    Ordered record of executed operations.

    Used as a context manager; operations executed inside the block are recorded and
    `backward` replays them in exact reverse order. A tape belongs to the thread that opened it.
    """

    def __init__(self):
        self.records: List[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self) -> int:
        return len(self.records)

    def record(self, function: Function, inputs: Sequence["Tensor"], output: "Tensor") -> None:
        self.records.append(_Record(function, inputs, output))

    def backward(self, loss: "Tensor") -> None:
        if not self.records:
            raise DannSegError(ErrorCode.EMPTY_TAPE, "backward called on an empty tape")
        if loss.size != 1:
            raise DannSegError(ErrorCode.NON_SCALAR_LOSS, f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape is not self:
            raise DannSegError(ErrorCode.EMPTY_TAPE, "loss was not recorded on this tape")

        pending = {id(loss): np.ones_like(loss.data)}
        for record in reversed(self.records):
            grad = pending.pop(id(record.output), None)
            if grad is None:
                continue
            input_grads = record.function.backward(grad)
            for tensor, tensor_grad in zip(record.inputs, input_grads):
                if tensor_grad is None or not tensor.requires_grad:
                    continue
                tensor_grad = np.asarray(tensor_grad, dtype=tensor.dtype)
                if tensor.creator is None:
                    tensor.grad = tensor_grad.copy() if tensor.grad is None else tensor.grad + tensor_grad
                else:
                    key = id(tensor)
                    pending[key] = pending[key] + tensor_grad if key in pending else tensor_grad

        # leaves on the tape the loss does not reach
        for record in self.records:
            for tensor in record.inputs:
                if tensor.requires_grad and tensor.creator is None and tensor.grad is None:
                    tensor.grad = np.zeros_like(tensor.data)


def backward(loss: "Tensor") -> None:
    """Populate `.grad` on every leaf reachable from `loss` through the tape that produced it."""
    if loss.tape is None:
        raise DannSegError(ErrorCode.EMPTY_TAPE, "loss was computed outside any tape")
    loss.tape.backward(loss)


class Tensor:
    """Dense n-dimensional array that can take part in reverse-mode differentiation."""

    def __init__(
        self,
        data: Union[np.ndarray, float, int, Sequence[float]],
        requires_grad: bool = False,
        dtype: Optional[np.dtype] = None,
    ):
        if dtype is None:
            array = np.asarray(data)
            dtype = array.dtype if np.issubdtype(array.dtype, np.floating) else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.creator: Optional[Function] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut from the tape: gradients do not flow back through the result."""
        return Tensor(self.data, requires_grad=False, dtype=self.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def _wrap(self, other: Union["Tensor", float, int]) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype), dtype=self.dtype)

    def __add__(self, other):
        return Add.apply(self, self._wrap(other))

    def __radd__(self, other):
        return Add.apply(self._wrap(other), self)

    def __sub__(self, other):
        return Add.apply(self, Neg.apply(self._wrap(other)))

    def __rsub__(self, other):
        return Add.apply(self._wrap(other), Neg.apply(self))

    def __mul__(self, other):
        return Mul.apply(self, self._wrap(other))

    def __rmul__(self, other):
        return Mul.apply(self._wrap(other), self)

    def __neg__(self):
        return Neg.apply(self)

    def __pow__(self, exponent: float):
        return Pow.apply(self, exponent=float(exponent))

    def sum(self) -> "Tensor":
        return Sum.apply(self)

    def mean(self) -> "Tensor":
        return Mean.apply(self)

    def reshape(self, *shape: int) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return Reshape.apply(self, shape=shape)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Add(Function):
    def forward(self, a, b):
        self.a_shape, self.b_shape = a.shape, b.shape
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.a_shape), self.unbroadcast(grad, self.b_shape)


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Neg(Function):
    def forward(self, a):
        return -a

    def backward(self, grad):
        return (-grad,)


class Pow(Function):
    def forward(self, a, exponent):
        self.a, self.exponent = a, exponent
        return a ** exponent

    def backward(self, grad):
        return (grad * self.exponent * self.a ** (self.exponent - 1),)


class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.shape).copy(),)


class Mean(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.mean(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad / np.prod(self.shape), self.shape).copy(),)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        return a.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)
