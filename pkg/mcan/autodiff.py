"""
    This script contains a minimal reverse-mode automatic differentiation engine.

    Tensors hold float64 numpy arrays. Every differentiable operation that is
    executed while a `Tape` is active (see `recording`) appends an entry with a
    backward rule to the tape, and `backward` replays the tape in reverse.
    Operations executed without an active tape only compute values, which is
    how inference and finite-difference checks run.
"""

from __future__ import annotations
from contextlib import contextmanager
from itertools import count
from typing import Callable, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union
import numpy as np
from numba import jit
from mcan.utils import sigmoid, ContractError, ShapeError, ValidationError

ArrayLike = Union["Tensor", np.ndarray, float, int, Sequence[float]]

_node_ids = count()
_TAPES: List["Tape"] = []
_ACTIVATIONS: List[list] = []


class Tensor:
    """
        Dense n-dimensional float64 value grid with a gradient accumulation slot
    """

    # Make numpy arrays defer to the reflected operators (ndarray * Tensor -> Tensor)
    __array_ufunc__ = None

    def __init__(self, values: ArrayLike, requires_grad: bool = False):
        """Create a tensor (the values are copied)

        Args:
            values (ArrayLike): the values
            requires_grad (bool, optional): should gradients be accumulated for this tensor. Defaults to False.
        """
        self.values = np.array(values, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)

    @classmethod
    def _wrap(cls, values: np.ndarray, requires_grad: bool) -> Tensor:
        # Internal constructor that takes ownership of the array
        out = cls.__new__(cls)
        out.values = np.asarray(values, dtype=np.float64)
        out.grad = None
        out.requires_grad = requires_grad
        out.node_id = next(_node_ids)
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() requires a single element, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self):
        self.grad = np.zeros_like(self.values)

    def __add__(self, other: ArrayLike) -> Tensor:
        return elementwise("add", self, other)

    def __radd__(self, other: ArrayLike) -> Tensor:
        return elementwise("add", other, self)

    def __sub__(self, other: ArrayLike) -> Tensor:
        return elementwise("sub", self, other)

    def __rsub__(self, other: ArrayLike) -> Tensor:
        return elementwise("sub", other, self)

    def __mul__(self, other: ArrayLike) -> Tensor:
        return elementwise("mul", self, other)

    def __rmul__(self, other: ArrayLike) -> Tensor:
        return elementwise("mul", other, self)

    def __neg__(self) -> Tensor:
        return elementwise("mul", self, -1.0)

    def __matmul__(self, other: ArrayLike) -> Tensor:
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class TapeEntry(NamedTuple):
    # One recorded operation
    inputs: Tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """
        Ordered record of the differentiable operations of one forward pass
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []

    def record(self, entry: TapeEntry):
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def produced(self, tensor: Tensor) -> bool:
        """
            Check if the tensor is the output of a recorded operation
        """
        return any(e.output.node_id == tensor.node_id for e in reversed(self.entries))


@contextmanager
def recording(tape: Tape) -> Iterator[Tape]:
    """
        Record all differentiable operations in the block onto the tape
    """
    _TAPES.append(tape)
    try:
        yield tape
    finally:
        _TAPES.pop()


def current_tape() -> Optional[Tape]:
    return _TAPES[-1] if _TAPES else None


@contextmanager
def activation_patterns() -> Iterator[List[np.ndarray]]:
    """
        Collect the boolean activity masks of every relu evaluated in the block
    """
    patterns: List[np.ndarray] = []
    _ACTIVATIONS.append(patterns)
    try:
        yield patterns
    finally:
        _ACTIVATIONS.pop()


def as_tensor(x: ArrayLike) -> Tensor:
    """
        Wrap constants as tensors that do not require gradients
    """
    if isinstance(x, Tensor):
        return x
    return Tensor._wrap(np.asarray(x, dtype=np.float64), False)


def _result(
    values: np.ndarray,
    inputs: Sequence[Tensor],
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]],
) -> Tensor:
    requires_grad = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(values, requires_grad)
    tape = current_tape()
    if requires_grad and tape is not None:
        tape.record(TapeEntry(tuple(inputs), out, backward))
    return out


def unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum out broadcasted dimensions so that the gradient matches the operand shape

    Args:
        grad (np.ndarray): gradient with the broadcast shape
        shape (Tuple[int, ...]): shape of the operand

    Returns:
        np.ndarray: gradient with the operand shape
    """
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(0)
    for dim, size in enumerate(shape):
        if size == 1 and grad.shape[dim] != 1:
            grad = grad.sum(dim, keepdims=True)
    return grad


def elementwise(op_kind: str, a: ArrayLike, b: ArrayLike) -> Tensor:
    """Elementwise binary operation with numpy broadcasting

    Args:
        op_kind (str): one of "add", "sub", "mul"
        a (ArrayLike): first operand
        b (ArrayLike): second operand

    Raises:
        ShapeError: if the shapes cannot be broadcast together
        ValidationError: if the op_kind is unknown

    Returns:
        Tensor: the result, with the broadcast shape
    """
    a = as_tensor(a)
    b = as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"Cannot {op_kind} tensors of shapes {a.shape} and {b.shape}")
    if op_kind == "add":
        values = a.values + b.values
        backward = lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape))
    elif op_kind == "sub":
        values = a.values - b.values
        backward = lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape))
    elif op_kind == "mul":
        values = a.values * b.values
        backward = lambda g: (
            unbroadcast(g * b.values, a.shape),
            unbroadcast(g * a.values, b.shape),
        )
    else:
        raise ValidationError(f"Unknown elementwise operation '{op_kind}'")
    return _result(values, (a, b), backward)


def add(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise("add", a, b)


def sub(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: ArrayLike, b: ArrayLike) -> Tensor:
    return elementwise("mul", a, b)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    """
        Matrix product of [M,K] and [K,N] tensors
    """
    a = as_tensor(a)
    b = as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot matmul tensors of shapes {a.shape} and {b.shape}")
    backward = lambda g: (g @ b.values.T, a.values.T @ g)
    return _result(a.values @ b.values, (a, b), backward)


def conv_output_size(size: int, kernel: int, stride: int, dilation: int, padding: int) -> int:
    """
        Spatial output size of a convolution
    """
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


@jit(nopython=True, cache=True)
def _conv2d_direct(
    xpad: np.ndarray, kernel: np.ndarray, stride: int, dilation: int, ho: int, wo: int
) -> np.ndarray:
    """
        Direct (loop-based) cross-correlation of an already padded input.
        This function is sped up with numba.
    """
    B, C, _, _ = xpad.shape
    O, _, kh, kw = kernel.shape
    out = np.zeros((B, O, ho, wo))
    for b in range(B):
        for o in range(O):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(C):
                        for p in range(kh):
                            for q in range(kw):
                                acc += (
                                    xpad[b, c, i * stride + p * dilation, j * stride + q * dilation]
                                    * kernel[o, c, p, q]
                                )
                    out[b, o, i, j] = acc
    return out


def _windows(
    xpad: np.ndarray, kh: int, kw: int, ho: int, wo: int, stride: int, dilation: int
) -> np.ndarray:
    # Read-only [B, C, ho, wo, kh, kw] view of the receptive fields
    sB, sC, sH, sW = xpad.strides
    return np.lib.stride_tricks.as_strided(
        xpad,
        shape=(xpad.shape[0], xpad.shape[1], ho, wo, kh, kw),
        strides=(sB, sC, sH * stride, sW * stride, sH * dilation, sW * dilation),
        writeable=False,
    )


def conv2d(
    input: Tensor,
    kernel: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    dilation: int = 1,
    padding: int = 0,
    method: str = "fast",
) -> Tensor:
    """2D convolution (cross-correlation orientation) with stride, dilation and zero padding

    Args:
        input (Tensor): [B, Cin, H, W] input
        kernel (Tensor): [Cout, Cin, kh, kw] kernel
        bias (Optional[Tensor], optional): [Cout] bias. Defaults to None.
        stride (int, optional): positive stride. Defaults to 1.
        dilation (int, optional): positive dilation. Defaults to 1.
        padding (int, optional): non-negative zero padding. Defaults to 0.
        method (str, optional): "fast" (strided windows and tensordot) or "direct" (numba loops). Defaults to "fast".

    Raises:
        ShapeError: if the shapes are incompatible or the padded input is smaller than the dilated kernel

    Returns:
        Tensor: [B, Cout, H', W'] output
    """
    input = as_tensor(input)
    kernel = as_tensor(kernel)
    if input.ndim != 4 or kernel.ndim != 4 or input.shape[1] != kernel.shape[1]:
        raise ShapeError(f"Cannot convolve input {input.shape} with kernel {kernel.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ShapeError(
            f"Invalid convolution geometry: stride={stride}, dilation={dilation}, padding={padding}"
        )
    B, C, H, W = input.shape
    O, _, kh, kw = kernel.shape
    if H + 2 * padding < dilation * (kh - 1) + 1 or W + 2 * padding < dilation * (kw - 1) + 1:
        raise ShapeError(
            f"Input {input.shape} with padding {padding} is smaller than kernel {kernel.shape} at dilation {dilation}"
        )
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (O,):
            raise ShapeError(f"Bias shape {bias.shape} does not match kernel {kernel.shape}")
    ho = conv_output_size(H, kh, stride, dilation, padding)
    wo = conv_output_size(W, kw, stride, dilation, padding)
    if padding > 0:
        xpad = np.pad(input.values, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xpad = np.ascontiguousarray(input.values)
    win = _windows(xpad, kh, kw, ho, wo, stride, dilation)
    if method == "direct":
        out = _conv2d_direct(xpad, np.ascontiguousarray(kernel.values), stride, dilation, ho, wo)
    elif method == "fast":
        out = np.tensordot(win, kernel.values, axes=([1, 4, 5], [1, 2, 3]))
        out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    else:
        raise ValidationError(f"Unknown convolution method '{method}'")
    if bias is not None:
        out += bias.values[None, :, None, None]

    def backward(g: np.ndarray):
        gk = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g, kernel.values, axes=([1], [0]))
        gx = np.zeros(xpad.shape)
        for p in range(kh):
            for q in range(kw):
                r0 = p * dilation
                c0 = q * dilation
                gx[
                    :,
                    :,
                    r0 : r0 + stride * (ho - 1) + 1 : stride,
                    c0 : c0 + stride * (wo - 1) + 1 : stride,
                ] += cols[:, :, :, :, p, q].transpose(0, 3, 1, 2)
        gx = gx[:, :, padding : padding + H, padding : padding + W]
        if bias is None:
            return gx, gk
        return gx, gk, g.sum((0, 2, 3))

    inputs = (input, kernel) if bias is None else (input, kernel, bias)
    return _result(out, inputs, backward)


def sigmoid_(t: ArrayLike) -> Tensor:
    """
        Logistic sigmoid, values in (0, 1)
    """
    t = as_tensor(t)
    s = sigmoid(t.values)
    return _result(s, (t,), lambda g: (g * s * (1.0 - s),))


def relu(t: ArrayLike) -> Tensor:
    """
        max(0, x), with the subgradient at 0 defined as 0
    """
    t = as_tensor(t)
    active = t.values > 0
    if _ACTIVATIONS:
        _ACTIVATIONS[-1].append(active)
    return _result(np.where(active, t.values, 0.0), (t,), lambda g: (g * active,))


def log(t: ArrayLike) -> Tensor:
    """
        Natural logarithm (the input should be positive)
    """
    t = as_tensor(t)
    return _result(np.log(t.values), (t,), lambda g: (g / t.values,))


def clamp(t: ArrayLike, low: float, high: float) -> Tensor:
    """
        Clip values to [low, high], the gradient is zero outside the interval
    """
    t = as_tensor(t)
    inside = (t.values >= low) & (t.values <= high)
    return _result(np.clip(t.values, low, high), (t,), lambda g: (g * inside,))


def _normalise_axes(axes: Union[None, int, Sequence[int]], ndim: int) -> Tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, (int, np.integer)):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"Invalid axis {ax} for a tensor with {ndim} dimensions")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"Repeated axes {tuple(axes)}")
    return tuple(sorted(out))


def reduce(
    op_kind: str, t: ArrayLike, axes: Union[None, int, Sequence[int]] = None, keepdims: bool = False
) -> Tensor:
    """Sum or mean over some (or all) axes

    Args:
        op_kind (str): "sum" or "mean"
        t (ArrayLike): the tensor
        axes (Union[None, int, Sequence[int]], optional): axes to reduce, None for all. Defaults to None.
        keepdims (bool, optional): keep the reduced axes as singletons. Defaults to False.

    Raises:
        ShapeError: if an axis is invalid

    Returns:
        Tensor: the reduced tensor
    """
    t = as_tensor(t)
    axes = _normalise_axes(axes, t.ndim)
    if op_kind == "sum":
        factor = 1.0
    elif op_kind == "mean":
        reduced = int(np.prod([t.shape[a] for a in axes]))
        factor = 1.0 / reduced if reduced > 0 else 0.0
    else:
        raise ValidationError(f"Unknown reduction '{op_kind}'")
    values = t.values.sum(axis=axes, keepdims=keepdims)
    if op_kind == "mean":
        values = values * factor
    kept = tuple(1 if i in axes else s for i, s in enumerate(t.shape))

    def backward(g: np.ndarray):
        g = np.broadcast_to(np.reshape(g, kept), t.shape)
        return (g * factor if op_kind == "mean" else g.copy(),)

    return _result(values, (t,), backward)


def tsum(t: ArrayLike, axes: Union[None, int, Sequence[int]] = None, keepdims: bool = False) -> Tensor:
    return reduce("sum", t, axes, keepdims)


def mean(t: ArrayLike, axes: Union[None, int, Sequence[int]] = None, keepdims: bool = False) -> Tensor:
    return reduce("mean", t, axes, keepdims)


def reshape(t: ArrayLike, shape: Sequence[int]) -> Tensor:
    t = as_tensor(t)
    try:
        values = t.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"Cannot reshape {t.shape} to {tuple(shape)}")
    return _result(values, (t,), lambda g: (g.reshape(t.shape),))


def stack(tensors: Sequence[ArrayLike], axis: int = 0) -> Tensor:
    """
        Join equally shaped tensors along a new axis
    """
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("Cannot stack an empty list of tensors")
    if any(t.shape != tensors[0].shape for t in tensors):
        raise ShapeError(f"Cannot stack shapes {[t.shape for t in tensors]}")
    values = np.stack([t.values for t in tensors], axis)
    axis = axis % values.ndim

    def backward(g: np.ndarray):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _result(values, tensors, backward)


def upsample_nearest(t: ArrayLike, factor: int) -> Tensor:
    """
        Nearest-neighbour upsampling of the two last axes of a [B, C, H, W] tensor
    """
    t = as_tensor(t)
    if t.ndim != 4 or factor < 1:
        raise ShapeError(f"Cannot upsample shape {t.shape} by {factor}")
    B, C, H, W = t.shape
    values = t.values.repeat(factor, 2).repeat(factor, 3)
    backward = lambda g: (g.reshape(B, C, H, factor, W, factor).sum((3, 5)),)
    return _result(values, (t,), backward)


def zero_grad(params: Iterable[Tensor]):
    """
        Reset the gradients of the parameters to zeros
    """
    for p in params:
        p.zero_grad()


def backward(loss: Tensor, tape: Optional[Tape] = None):
    """Backpropagate from a scalar loss, accumulating (+=) into the .grad of every
        tensor that requires gradients and is reachable from the loss.

    Args:
        loss (Tensor): scalar loss
        tape (Optional[Tape], optional): the tape the loss was recorded on, or None for the active tape. Defaults to None.

    Raises:
        ContractError: if the loss is not a scalar or there is no tape
    """
    if tape is None:
        tape = current_tape()
    if tape is None:
        raise ContractError("backward requires a tape (pass one or use `recording`)")
    if loss.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    grads = {loss.node_id: np.ones(loss.shape)}
    tensors = {loss.node_id: loss}
    for entry in reversed(tape.entries):
        g = grads.pop(entry.output.node_id, None)
        if g is None:
            continue
        for inp, gi in zip(entry.inputs, entry.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            prev = grads.get(inp.node_id)
            grads[inp.node_id] = gi if prev is None else prev + gi
            tensors.setdefault(inp.node_id, inp)
    # Whatever is left was not produced on the tape, i.e. leaves
    for node_id, g in grads.items():
        t = tensors[node_id]
        if not t.requires_grad:
            continue
        g = np.array(g, dtype=np.float64).reshape(t.shape)
        t.grad = g if t.grad is None else t.grad + g


def _scalar(x: Union[Tensor, float]) -> float:
    if isinstance(x, Tensor):
        return x.item()
    return float(x)


def finite_diff_grad(
    f: Callable[[Tensor], Union[Tensor, float]], t: Tensor, eps: float = 1e-4
) -> Tensor:
    """Central finite differences (f(t + eps e_i) - f(t - eps e_i)) / (2 eps) for every element of t

    Args:
        f (Callable[[Tensor], Union[Tensor, float]]): scalar function of the tensor
        t (Tensor): the point (its values are perturbed in place and restored)
        eps (float, optional): step size. Defaults to 1e-4.

    Raises:
        ValidationError: if eps is not positive

    Returns:
        Tensor: the numerical gradient
    """
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    t.values = np.ascontiguousarray(t.values)
    flat = t.values.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = _scalar(f(t))
        flat[i] = orig - eps
        fm = _scalar(f(t))
        flat[i] = orig
        grad[i] = (fp - fm) / (2 * eps)
    return Tensor(grad.reshape(t.shape))
