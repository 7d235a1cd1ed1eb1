"""Dense float64 tensors with reverse-mode gradients.

Small, deterministic substrate for everything else in the package: elementwise
algebra, matmul, shape ops, a numerically stabilized (and maskable) softmax,
scalar backward, and a central-difference gradient checker. All arithmetic is
64-bit; every op validates its output for NaN/inf so silent poisoning cannot
propagate (the only sanctioned non-finite value is -inf introduced by additive
attention masks).
"""

from __future__ import annotations

import hashlib
import struct
from typing import Callable, Iterable, Sequence

import numpy as np

NEG_INF = float("-inf")


class TensorError(Exception):
    """Base class for tensor contract violations."""


class DimensionError(TensorError):
    pass


class AxisError(TensorError):
    pass


class DegenerateSliceError(TensorError):
    """A softmax slice was fully masked."""


class ContractError(TensorError):
    pass


class ProbeError(TensorError):
    """Gradient-check probe produced a non-finite objective."""


def _check_finite(arr: np.ndarray, op: str, allow_neginf: bool = False) -> None:
    if allow_neginf:
        bad = np.isnan(arr) | (arr == np.inf)
    else:
        bad = ~np.isfinite(arr)
    if bad.any():
        raise TensorError(f"non-finite values produced by op '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """Row-major float64 array with an optional gradient tape entry.

    Values are treated as immutable after construction; gradient accumulation
    happens only through `backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "_backward", "_prev", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, "init")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._backward: Callable[[], None] | None = None
        self._prev: tuple = ()
        self._op = "leaf"

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, prev: Sequence["Tensor"], op: str,
              backward: Callable[[], None] | None, allow_neginf: bool = False) -> "Tensor":
        _check_finite(data, op, allow_neginf=allow_neginf)
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in prev)
        out.grad = None
        out._prev = tuple(prev) if out.requires_grad else ()
        out._backward = backward if out.requires_grad else None
        out._op = op
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def copy(self, requires_grad: bool | None = None) -> "Tensor":
        rg = self.requires_grad if requires_grad is None else requires_grad
        return Tensor(self.data.copy(), requires_grad=rg)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op})"

    # -- elementwise algebra --------------------------------------------------

    @staticmethod
    def _coerce(x) -> "Tensor":
        return x if isinstance(x, Tensor) else Tensor(x)

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = Tensor._make(self.data + other.data, (self, other), "add", None,
                           allow_neginf=True)

        def backward():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad, other.shape))

        out._backward = backward if out.requires_grad else None
        return out

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        out = Tensor._make(-self.data, (self,), "neg", None)

        def backward():
            self._accum(-out.grad)

        out._backward = backward if out.requires_grad else None
        return out

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = Tensor._make(self.data - other.data, (self, other), "sub", None)

        def backward():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-out.grad, other.shape))

        out._backward = backward if out.requires_grad else None
        return out

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = Tensor._make(self.data * other.data, (self, other), "mul", None)

        def backward():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad * other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(out.grad * self.data, other.shape))

        out._backward = backward if out.requires_grad else None
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = Tensor._make(self.data / other.data, (self, other), "div", None)

        def backward():
            if self.requires_grad:
                self._accum(_unbroadcast(out.grad / other.data, self.shape))
            if other.requires_grad:
                other._accum(_unbroadcast(-out.grad * self.data / other.data ** 2,
                                          other.shape))

        out._backward = backward if out.requires_grad else None
        return out

    def abs(self) -> "Tensor":
        out = Tensor._make(np.abs(self.data), (self,), "abs", None)

        def backward():
            self._accum(out.grad * np.sign(self.data))

        out._backward = backward if out.requires_grad else None
        return out

    def pow(self, p: float) -> "Tensor":
        out = Tensor._make(self.data ** p, (self,), f"pow{p}", None)

        def backward():
            self._accum(out.grad * p * self.data ** (p - 1))

        out._backward = backward if out.requires_grad else None
        return out

    def exp(self) -> "Tensor":
        out = Tensor._make(np.exp(self.data), (self,), "exp", None)

        def backward():
            self._accum(out.grad * out.data)

        out._backward = backward if out.requires_grad else None
        return out

    def log(self) -> "Tensor":
        out = Tensor._make(np.log(self.data), (self,), "log", None)

        def backward():
            self._accum(out.grad / self.data)

        out._backward = backward if out.requires_grad else None
        return out

    def sigmoid(self) -> "Tensor":
        s = 1.0 / (1.0 + np.exp(-self.data))
        out = Tensor._make(s, (self,), "sigmoid", None)

        def backward():
            self._accum(out.grad * out.data * (1.0 - out.data))

        out._backward = backward if out.requires_grad else None
        return out

    def relu(self) -> "Tensor":
        out = Tensor._make(np.maximum(self.data, 0.0), (self,), "relu", None)

        def backward():
            self._accum(out.grad * (self.data > 0))

        out._backward = backward if out.requires_grad else None
        return out

    # -- contractions and shape ops ------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        other = self._coerce(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise DimensionError(
                f"matmul expects 2-D operands, got {self.shape} @ {other.shape}")
        if self.shape[1] != other.shape[0]:
            raise DimensionError(
                f"matmul shape mismatch: {self.shape} @ {other.shape}")
        out = Tensor._make(self.data @ other.data, (self, other), "matmul", None)

        def backward():
            if self.requires_grad:
                self._accum(out.grad @ other.data.T)
            if other.requires_grad:
                other._accum(self.data.T @ out.grad)

        out._backward = backward if out.requires_grad else None
        return out

    __matmul__ = matmul

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out_data = self.data.sum(axis=axis, keepdims=keepdims)
        out = Tensor._make(np.asarray(out_data), (self,), "sum", None)

        def backward():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accum(np.broadcast_to(g, self.shape).copy())

        out._backward = backward if out.requires_grad else None
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = Tensor._make(self.data.reshape(shape), (self,), "reshape", None)

        def backward():
            self._accum(out.grad.reshape(self.shape))

        out._backward = backward if out.requires_grad else None
        return out

    def transpose(self, axes: Sequence[int] | None = None) -> "Tensor":
        out = Tensor._make(np.transpose(self.data, axes), (self,), "transpose", None)
        if axes is None:
            inv = None
        else:
            inv = np.argsort(axes)

        def backward():
            self._accum(np.transpose(out.grad, inv))

        out._backward = backward if out.requires_grad else None
        return out

    def broadcast_to(self, shape) -> "Tensor":
        out = Tensor._make(np.broadcast_to(self.data, shape).copy(), (self,),
                           "broadcast", None)

        def backward():
            self._accum(_unbroadcast(out.grad, self.shape))

        out._backward = backward if out.requires_grad else None
        return out

    def __getitem__(self, idx) -> "Tensor":
        out = Tensor._make(np.array(self.data[idx]), (self,), "getitem", None)

        def backward():
            g = np.zeros_like(self.data)
            np.add.at(g, idx, out.grad)
            self._accum(g)

        out._backward = backward if out.requires_grad else None
        return out

    @staticmethod
    def concat(tensors: Sequence["Tensor"], axis: int = 0) -> "Tensor":
        tensors = [Tensor._coerce(t) for t in tensors]
        rank = tensors[0].data.ndim
        ax = axis + rank if axis < 0 else axis
        if ax >= rank:
            raise AxisError(f"concat axis {axis} out of range for rank {rank}")
        out = Tensor._make(np.concatenate([t.data for t in tensors], axis=ax),
                           tensors, "concat", None)
        sizes = [t.shape[ax] for t in tensors]
        offsets = np.cumsum([0] + sizes)

        def backward():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    sl = [slice(None)] * rank
                    sl[ax] = slice(lo, hi)
                    t._accum(out.grad[tuple(sl)])

        out._backward = backward if out.requires_grad else None
        return out

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() on tensor of size {self.size}")
        return float(self.data.reshape(()))


def softmax(t: Tensor, axis: int = -1, additive_mask: Tensor | np.ndarray | None = None) -> Tensor:
    """Max-stabilized softmax along `axis`, with an optional {0, -inf} mask.

    Entries under a -inf mask come out exactly 0. A fully masked slice is a
    hard error rather than a silent NaN.
    """
    rank = t.data.ndim
    ax = axis + rank if axis < 0 else axis
    if ax >= rank:
        raise AxisError(f"softmax axis {axis} out of range for rank {rank}")
    x = t.data
    if additive_mask is not None:
        m = additive_mask.data if isinstance(additive_mask, Tensor) else np.asarray(
            additive_mask, dtype=np.float64)
        if not np.all((m == 0.0) | (m == NEG_INF)):
            raise ContractError("additive_mask entries must be 0 or -inf")
        x = x + np.broadcast_to(m, x.shape)
    masked = x == NEG_INF
    if masked.all(axis=ax).any():
        raise DegenerateSliceError("softmax slice is fully masked")
    xmax = np.max(np.where(masked, -np.inf, x), axis=ax, keepdims=True)
    e = np.exp(x - xmax)
    e[masked] = 0.0
    y = e / e.sum(axis=ax, keepdims=True)
    out = Tensor._make(y, (t,), "softmax", None)

    def backward():
        g = out.grad
        dot = (g * y).sum(axis=ax, keepdims=True)
        t._accum(y * (g - dot))

    out._backward = backward if out.requires_grad else None
    return out


def backward(root: Tensor) -> None:
    """Reverse-mode pass from a scalar-shaped root; accumulates leaf grads."""
    if root.size != 1:
        raise ContractError(f"backward root must be scalar-shaped, got {root.shape}")
    # Iterative topological sort: graphs can be thousands of nodes deep.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if id(child) not in visited:
                stack.append((child, False))
    root._accum(np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward()
        if node is not root and node._op != "leaf":
            node.grad = None  # free intermediate buffers


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


def grad_check(f: Callable[[Sequence[Tensor]], Tensor], params: Sequence[Tensor],
               eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must be deterministic. Error per element is
    |analytic - cd| / max(1, |cd|); the max over all parameters is returned.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ContractError(f"eps {eps} outside [1e-7, 1e-3]")
    for p in params:
        p.requires_grad = True
    zero_grads(params)
    out = f(params)
    backward(out)
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    worst = 0.0
    for pi, p in enumerate(params):
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(params).data.reshape(())
            flat[i] = orig - eps
            fm = f(params).data.reshape(())
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ProbeError(f"non-finite probe at parameter {pi}, element {i}")
            cd = (fp - fm) / (2 * eps)
            err = abs(analytic[pi].reshape(-1)[i] - cd) / max(1.0, abs(cd))
            worst = max(worst, err)
    zero_grads(params)
    return worst


# -- deterministic seeding ----------------------------------------------------

def derive_seed(seed: int, *tags) -> int:
    """Derive a child seed from a parent seed and a tag path (stable hash)."""
    h = hashlib.sha256(repr((int(seed),) + tuple(tags)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def make_rng(seed: int, *tags) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a derived seed."""
    return np.random.Generator(np.random.Philox(key=derive_seed(seed, *tags)))


def uniform_init(rng: np.random.Generator, shape, scale: float,
                 requires_grad: bool = True) -> Tensor:
    return Tensor(rng.uniform(-scale, scale, size=shape), requires_grad=requires_grad)


# -- binary dump/load ---------------------------------------------------------

def dump_tensor(t: Tensor) -> bytes:
    """rank byte, little-endian int32 extents, little-endian float64 data."""
    rank = t.data.ndim
    header = struct.pack("<B", rank) + struct.pack(f"<{rank}i", *t.shape)
    return header + t.data.astype("<f8").tobytes()


def load_tensor(blob: bytes) -> Tensor:
    rank = struct.unpack_from("<B", blob, 0)[0]
    shape = struct.unpack_from(f"<{rank}i", blob, 1)
    offset = 1 + 4 * rank
    n = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(blob, dtype="<f8", count=n, offset=offset)
    return Tensor(data.reshape(shape).copy())
