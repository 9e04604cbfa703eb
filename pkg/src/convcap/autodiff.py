"""
Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation is a :class:`Function` subclass.  Calling
``SomeOp.apply(*tensors)`` runs the forward pass on the underlying numpy
arrays and, when gradients are being tracked, appends the function instance
to the calling thread's :class:`Tape`.  ``Tensor.backward()`` replays that
tape in reverse and then clears it.

Forward matrix products go through :func:`stable_matmul`, which produces the
same bits for a given row no matter how many other rows are in the operand.
BLAS does not guarantee that, and the decoder relies on it: a prefix of a
sentence must produce exactly the logits the full sentence produces at the
same positions.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NumericError, TokenIndexError

_state = threading.local()
_default_dtype = np.float32


def get_default_dtype():
    return _default_dtype


def set_default_dtype(dtype) -> None:
    global _default_dtype
    _default_dtype = np.dtype(dtype).type


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the dtype used for newly created tensors."""
    previous = _default_dtype
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


def grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    previous = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


class Tape:
    """Ordered record of the differentiable operations executed by one thread."""

    def __init__(self):
        self.nodes: list[Function] = []
        self.last_visit_order: list[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, fn: "Function") -> None:
        fn.index = len(self.nodes)
        self.nodes.append(fn)

    def clear(self) -> None:
        self.nodes = []

    def backward(self, root: "Tensor") -> None:
        if root.data.size != 1:
            raise DimensionError(f"backward() needs a scalar, got shape {root.shape}")
        self.last_visit_order = []
        if root._fn is None:
            if root.requires_grad:
                root.grad += 1.0
            self.clear()
            return
        pending = {id(root): np.ones_like(root.data)}
        for fn in reversed(self.nodes):
            self.last_visit_order.append(fn.index)
            g = pending.pop(id(fn.output), None)
            if g is None:
                continue
            in_grads = fn.backward(g)
            for t, gi in zip(fn.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._fn is None:
                    t.grad += gi
                elif id(t) in pending:
                    pending[id(t)] = pending[id(t)] + gi
                else:
                    pending[id(t)] = gi
        self.clear()


def current_tape() -> Tape:
    tape = getattr(_state, "tape", None)
    if tape is None:
        tape = _state.tape = Tape()
    return tape


@contextlib.contextmanager
def private_tape():
    """Give the calling thread a fresh tape for the duration of the block."""
    previous = getattr(_state, "tape", None)
    _state.tape = Tape()
    try:
        yield _state.tape
    finally:
        _state.tape = previous


class Tensor:
    """A numpy array plus an optional gradient accumulator."""

    __slots__ = ("data", "requires_grad", "grad", "_fn", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=dtype or _default_dtype)
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(self.data) if requires_grad else None
        self._fn: Function | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def backward(self) -> None:
        tape = self._fn.tape if self._fn is not None else current_tape()
        tape.backward(self)

    # arithmetic sugar
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """A differentiable operation: numpy forward plus a matching backward rule."""

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs
        self.output: Tensor | None = None
        self.tape: Tape | None = None
        self.index = -1

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> Sequence[np.ndarray | None]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        result = np.asarray(fn.forward(*(t.data for t in inputs), **kwargs))
        out = Tensor(result, dtype=result.dtype)
        if grad_enabled() and any(t.requires_grad for t in inputs):
            out.requires_grad = True
            out._fn = fn
            fn.output = out
            fn.tape = current_tape()
            fn.tape.record(fn)
        return out


def stable_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """2-D product whose row ``i`` depends only on ``a[i]`` and ``b``."""
    return np.einsum("ij,jk->ik", np.ascontiguousarray(a), np.ascontiguousarray(b))


def _same_shape(op: str, a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


class Add(Function):
    def forward(self, a, b):
        _same_shape("add", a, b)
        return a + b

    def backward(self, grad):
        return grad, grad


class Mul(Function):
    def forward(self, a, b):
        _same_shape("elementwise_mul", a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return grad * self.b, grad * self.a


class Scale(Function):
    def forward(self, a, factor):
        self.factor = factor
        return a * factor

    def backward(self, grad):
        return (grad * self.factor,)


class AddBias(Function):
    """``x[..., c] + b[c]``: the only broadcast the library allows."""

    def forward(self, x, b):
        if b.ndim != 1 or x.shape[-1] != b.shape[0]:
            raise DimensionError(f"bias {b.shape} does not match last axis of {x.shape}")
        return x + b

    def backward(self, grad):
        return grad, grad.reshape(-1, grad.shape[-1]).sum(axis=0)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
        self.a, self.b = a, b
        return stable_matmul(a, b)

    def backward(self, grad):
        return grad @ self.b.T, self.a.T @ grad


class BatchMatMul(Function):
    """(B, m, k) x (B, k, n) -> (B, m, n), one stable 2-D product per batch entry."""

    def forward(self, a, b):
        if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise DimensionError(f"batch matmul: shapes {a.shape} and {b.shape} are incompatible")
        self.a, self.b = a, b
        return np.stack([stable_matmul(a[i], b[i]) for i in range(a.shape[0])])

    def backward(self, grad):
        return grad @ self.b.transpose(0, 2, 1), self.a.transpose(0, 2, 1) @ grad


class Transpose(Function):
    """Swap the last two axes."""

    def forward(self, a):
        if a.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 axes, got {a.shape}")
        return np.ascontiguousarray(np.swapaxes(a, -1, -2))

    def backward(self, grad):
        return (np.swapaxes(grad, -1, -2),)


class Reshape(Function):
    def forward(self, a, shape):
        self.in_shape = a.shape
        try:
            return a.reshape(shape)
        except ValueError as exc:
            raise DimensionError(f"cannot reshape {a.shape} to {shape}") from exc

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Sigmoid(Function):
    def forward(self, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        e = np.exp(x[~pos])
        out[~pos] = e / (1.0 + e)
        self.out = out
        return out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


LEAKY_SLOPE = 0.1


class LeakyReLU(Function):
    def forward(self, x):
        self.pos = x > 0
        return np.where(self.pos, x, LEAKY_SLOPE * x)

    def backward(self, grad):
        return (np.where(self.pos, grad, LEAKY_SLOPE * grad),)


class SoftmaxLastDim(Function):
    def forward(self, x):
        z = np.exp(x - x.max(axis=-1, keepdims=True))
        self.out = z / z.sum(axis=-1, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=-1, keepdims=True)),)


class GatherRows(Function):
    def forward(self, table, ids):
        ids = np.asarray(ids, dtype=np.int64)
        if table.ndim != 2:
            raise DimensionError(f"gather_rows needs a 2-D table, got {table.shape}")
        n_rows = table.shape[0]
        bad = ids[(ids < 0) | (ids >= n_rows)]
        if bad.size:
            raise TokenIndexError(f"id {int(bad[0])} out of range for table with V={n_rows} rows")
        self.ids, self.n_rows = ids, n_rows
        return table[ids]

    def backward(self, grad):
        g = np.zeros((self.n_rows, grad.shape[-1]), dtype=grad.dtype)
        np.add.at(g, self.ids.reshape(-1), grad.reshape(-1, grad.shape[-1]))
        return (g,)


class CausalConv1d(Function):
    """
    Left-zero-padded 1-D convolution over the position axis.

    ``x`` is (L, C_in) or (B, L, C_in); ``kernel`` is (k, C_in, C_out).
    Output row j is ``bias + sum_t x_pad[j + t] @ kernel[t]`` where
    ``x_pad`` has k-1 zero rows prepended.
    """

    def forward(self, x, kernel, bias):
        if kernel.ndim != 3 or kernel.shape[0] < 1:
            raise DimensionError(f"kernel must be (k, C_in, C_out) with k >= 1, got {kernel.shape}")
        if x.ndim not in (2, 3) or x.shape[-2] < 1:
            raise DimensionError(f"causal_conv1d input must be non-empty (L, C) or (B, L, C), got {x.shape}")
        k, c_in, c_out = kernel.shape
        if x.shape[-1] != c_in or bias.shape != (c_out,):
            raise DimensionError(
                f"causal_conv1d: input {x.shape}, kernel {kernel.shape}, bias {bias.shape} disagree")
        self.squeeze = x.ndim == 2
        xb = x[None] if self.squeeze else x
        b, length, _ = xb.shape
        padded = np.concatenate([np.zeros((b, k - 1, c_in), dtype=x.dtype), xb], axis=1)
        cols = np.concatenate([padded[:, t:t + length] for t in range(k)], axis=-1)
        self.cols = cols.reshape(b * length, k * c_in)
        self.kernel = kernel
        self.dims = (b, length, k, c_in, c_out)
        out = stable_matmul(self.cols, kernel.reshape(k * c_in, c_out)) + bias
        out = out.reshape(b, length, c_out)
        return out[0] if self.squeeze else out

    def backward(self, grad):
        b, length, k, c_in, c_out = self.dims
        g = grad.reshape(b * length, c_out)
        g_kernel = (self.cols.T @ g).reshape(k, c_in, c_out)
        g_cols = (g @ self.kernel.reshape(k * c_in, c_out).T).reshape(b, length, k, c_in)
        g_pad = np.zeros((b, length + k - 1, c_in), dtype=grad.dtype)
        for t in range(k):
            g_pad[:, t:t + length] += g_cols[:, :, t]
        g_x = g_pad[:, k - 1:]
        return (g_x[0] if self.squeeze else g_x), g_kernel, g.sum(axis=0)


class Conv2d(Function):
    """
    Channels-last 2-D convolution with symmetric zero padding.

    ``x`` is (B, H, W, C_in); ``kernel`` is (kh, kw, C_in, C_out).
    """

    def forward(self, x, kernel, bias, stride=1, padding=0):
        if x.ndim != 4 or kernel.ndim != 4 or x.shape[-1] != kernel.shape[2] \
                or bias.shape != (kernel.shape[3],):
            raise DimensionError(
                f"conv2d: input {x.shape}, kernel {kernel.shape}, bias {bias.shape} disagree")
        b, h, w, c_in = x.shape
        kh, kw, _, c_out = kernel.shape
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (w + 2 * padding - kw) // stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"conv2d: input {x.shape} too small for kernel {kernel.shape}")
        xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
        patches = [xp[:, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride]
                   for dy in range(kh) for dx in range(kw)]
        self.cols = np.concatenate(patches, axis=-1).reshape(b * ho * wo, kh * kw * c_in)
        self.kernel = kernel
        self.geom = (b, h, w, c_in, kh, kw, c_out, ho, wo, stride, padding)
        out = stable_matmul(self.cols, kernel.reshape(-1, c_out)) + bias
        return out.reshape(b, ho, wo, c_out)

    def backward(self, grad):
        b, h, w, c_in, kh, kw, c_out, ho, wo, stride, padding = self.geom
        g = grad.reshape(-1, c_out)
        g_kernel = (self.cols.T @ g).reshape(kh, kw, c_in, c_out)
        g_cols = (g @ self.kernel.reshape(-1, c_out).T).reshape(b, ho, wo, kh * kw, c_in)
        g_xp = np.zeros((b, h + 2 * padding, w + 2 * padding, c_in), dtype=grad.dtype)
        for i, (dy, dx) in enumerate((dy, dx) for dy in range(kh) for dx in range(kw)):
            g_xp[:, dy:dy + stride * (ho - 1) + 1:stride, dx:dx + stride * (wo - 1) + 1:stride] += g_cols[:, :, :, i]
        g_x = g_xp[:, padding:padding + h, padding:padding + w]
        return g_x, g_kernel, g.sum(axis=0)


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.asarray(x.sum())

    def backward(self, grad):
        return (np.broadcast_to(grad, self.shape).copy(),)


class SumSquares(Function):
    def forward(self, x):
        self.x = x
        return np.asarray((x * x).sum())

    def backward(self, grad):
        return (2.0 * grad * self.x,)


PROB_FLOOR = 1e-12


class MaskedNLL(Function):
    """``-sum(mask * log(max(P[target], 1e-12)))`` over every position."""

    def forward(self, probs, targets, mask):
        targets = np.asarray(targets, dtype=np.int64)
        mask = np.asarray(mask, dtype=probs.dtype)
        if probs.shape[:-1] != targets.shape or targets.shape != mask.shape:
            raise DimensionError(
                f"nll: probs {probs.shape}, targets {targets.shape}, mask {mask.shape} disagree")
        picked = np.take_along_axis(probs, targets[..., None], axis=-1)[..., 0]
        self.picked, self.targets, self.mask, self.shape = picked, targets, mask, probs.shape
        return np.asarray(-(mask * np.log(np.maximum(picked, PROB_FLOOR))).sum())

    def backward(self, grad):
        g = np.zeros(self.shape, dtype=self.picked.dtype)
        local = np.where(self.picked > PROB_FLOOR, -self.mask / np.maximum(self.picked, PROB_FLOOR), 0.0)
        np.put_along_axis(g, self.targets[..., None], (grad * local)[..., None], axis=-1)
        return (g,)


# functional front-ends

def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


elementwise_mul = mul


def scale(a: Tensor, factor: float) -> Tensor:
    return Scale.apply(a, factor=factor)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    return AddBias.apply(x, b)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(a, b)


def bmm(a: Tensor, b: Tensor) -> Tensor:
    return BatchMatMul.apply(a, b)


def transpose(a: Tensor) -> Tensor:
    return Transpose.apply(a)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(a, shape=tuple(shape))


def linear(x: Tensor, weight: Tensor) -> Tensor:
    """Apply ``weight`` (out x in) to every row of ``x`` (..., in)."""
    lead = x.shape[:-1]
    flat = reshape(x, (-1, x.shape[-1])) if x.data.ndim != 2 else x
    out = matmul(flat, transpose(weight))
    return reshape(out, lead + (weight.shape[0],)) if x.data.ndim != 2 else out


def sigmoid(x: Tensor) -> Tensor:
    return Sigmoid.apply(x)


def leaky_relu(x: Tensor) -> Tensor:
    return LeakyReLU.apply(x)


def softmax_lastdim(x: Tensor) -> Tensor:
    return SoftmaxLastDim.apply(x)


def gather_rows(table: Tensor, ids) -> Tensor:
    return GatherRows.apply(table, ids=ids)


def causal_conv1d(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    return CausalConv1d.apply(x, kernel, bias)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


def tsum(x: Tensor) -> Tensor:
    return Sum.apply(x)


def sum_squares(x: Tensor) -> Tensor:
    return SumSquares.apply(x)


def masked_nll(probs: Tensor, targets, mask) -> Tensor:
    return MaskedNLL.apply(probs, targets=targets, mask=mask)


# gradient checking

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    checked: int
    worst: str = ""
    per_param: dict[str, float] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (f"max relative error {self.max_rel_error:.3e} over {self.checked} entries "
                f"(worst: {self.worst}) -> {verdict} at tol {self.tol:g}")


def grad_check(f: Callable[[], Tensor], params: dict[str, Tensor] | Iterable[Tensor],
               h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
               max_entries: int | None = None, seed: int = 0) -> GradCheckReport:
    """
    Compare analytic gradients of ``f()`` with central differences.

    The relative error of one entry is ``|a - n| / max(|a|, |n|, floor)``; the
    floor keeps entries whose true gradient is ~0 from dominating through
    round-off.  ``max_entries`` caps the number of entries probed per tensor
    (chosen uniformly at random with ``seed``).
    """
    if not isinstance(params, dict):
        params = {f"param{i}": p for i, p in enumerate(params)}
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: objective is not finite")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst, worst_name, checked = 0.0, "", 0
    per_param = {}
    for name, p in params.items():
        analytic = p.grad.copy()
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        param_worst = 0.0
        for i in idx:
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"grad_check: non-finite objective perturbing {name}[{i}]")
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            param_worst = max(param_worst, rel)
            if rel > worst or not worst_name:
                worst, worst_name = rel, f"{name}[{int(i)}]"
        per_param[name] = param_worst
    return GradCheckReport(float(worst), tol, checked, worst_name, per_param)
