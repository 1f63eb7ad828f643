"""Dense float64 tensors with reverse-mode automatic differentiation.

Every network layer in :mod:`mdfce.model` is built from the primitives here.
Storage is a row-major numpy array; shapes are carried by the array itself.
Each operation that produces a tensor from inputs requiring gradients records
a backward closure and a creation index. :func:`backward` replays the reachable
part of that record in reverse creation order, so every node is visited once.

Broadcasting follows numpy rules for the elementwise ops and batched
``matmul``; gradients are summed back to the input shape.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationGraph",
    "ShapeError",
    "RoutingError",
    "GradientError",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "relu",
    "softmax_rows",
    "layer_norm",
    "take_rows",
    "index_add",
    "backward",
    "grad_check",
    "serialize_params",
    "deserialize_params",
    "save_params",
    "load_params",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class RoutingError(ValueError):
    """A softmax row has no unmasked entry, i.e. a token routed to no expert."""


class GradientError(ValueError):
    """Misuse of backward or a non-finite value in a gradient check."""


_state = threading.local()
_counter = itertools.count()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread (inference mode)."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndim_extra = grad.ndim - len(shape)
    if ndim_extra > 0:
        grad = grad.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A float64 array that may participate in the autodiff graph.

    Args:
        data: anything ``np.asarray`` accepts; converted to float64.
        requires_grad: mark as a leaf whose gradient should be accumulated.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = "leaf"
        self._id = next(_counter)

    # -- construction helpers -------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], op: str,
              backward_fn: Callable[[np.ndarray], Iterable[np.ndarray | None]]) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        out._id = next(_counter)
        needs = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- arithmetic -----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(self.data + other.data, (self, other), "add",
                            lambda g: (_unbroadcast(g, a_shape), _unbroadcast(g, b_shape)))

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a_shape, b_shape = self.shape, other.shape
        return Tensor._make(self.data - other.data, (self, other), "sub",
                            lambda g: (_unbroadcast(g, a_shape), -_unbroadcast(g, b_shape)))

    def __rsub__(self, other) -> "Tensor":
        return _as_tensor(other) - self

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), "neg", lambda g: (-g,))

    def __mul__(self, other) -> "Tensor":
        other = _as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), "mul",
                            lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return self * other.pow(-1.0)
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def pow(self, exponent: float) -> "Tensor":
        a = self.data
        return Tensor._make(a ** exponent, (self,), "pow",
                            lambda g: (g * exponent * a ** (exponent - 1),))

    def __pow__(self, exponent: float) -> "Tensor":
        return self.pow(exponent)

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return Tensor._make(self.data.reshape(shape), (self,), "reshape",
                            lambda g: (g.reshape(src),))

    def permute(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._make(self.data.transpose(axes), (self,), "permute",
                            lambda g: (g.transpose(inv),))

    @property
    def T(self) -> "Tensor":
        """Swap the last two axes."""
        return Tensor._make(np.swapaxes(self.data, -1, -2), (self,), "transpose",
                            lambda g: (np.swapaxes(g, -1, -2),))

    def __getitem__(self, key) -> "Tensor":
        src_shape = self.shape

        def _bw(g):
            out = np.zeros(src_shape)
            np.add.at(out, key, g)
            return (out,)

        return Tensor._make(self.data[key], (self,), "getitem", _bw)

    # -- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        src_shape = self.shape

        def _bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, src_shape).copy(),)

        return Tensor._make(np.asarray(self.data.sum(axis=axis, keepdims=keepdims)),
                            (self,), "sum", _bw)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        axes = np.atleast_1d(axis) if axis is not None else None
        n = self.data.size if axes is None else np.prod([self.shape[a] for a in axes])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- primitive operations -------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes, batched over leading axes.

    Raises:
        ShapeError: if the inner dimensions disagree.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    A, B = a.data, b.data

    def _bw(g):
        ga = g @ np.swapaxes(B, -1, -2)
        gb = np.swapaxes(A, -1, -2) @ g
        return _unbroadcast(ga, A.shape), _unbroadcast(gb, B.shape)

    return Tensor._make(A @ B, (a, b), "matmul", _bw)


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is taken as 0."""
    active = x.data > 0
    return Tensor._make(np.where(active, x.data, 0.0), (x,), "relu",
                        lambda g: (g * active,))


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis, optionally restricted to ``mask``.

    Masked-out logits are treated as ``-inf``, so their outputs are exactly
    zero and the remaining entries of the row sum to one.

    Raises:
        RoutingError: if some row of ``mask`` has no True entry.
    """
    z = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != z.shape:
            raise ShapeError(f"mask shape {mask.shape} does not match logits {z.shape}")
        if not mask.any(axis=-1).all():
            raise RoutingError("softmax row is fully masked; no expert selected")
        z = np.where(mask, z, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return Tensor._make(y, (x,), "softmax", _bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize each row over the last axis, then apply ``gain`` and ``bias``."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    X = x.data
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    G = gain.data
    n = X.shape[-1]

    def _bw(g):
        gx = g * G
        dx = inv * (gx - gx.mean(axis=-1, keepdims=True)
                    - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        flat = (-1, n)
        dgain = (g * xhat).reshape(flat).sum(axis=0)
        dbias = g.reshape(flat).sum(axis=0)
        return dx, dgain.reshape(gain.shape), dbias.reshape(bias.shape)

    return Tensor._make(xhat * G + bias.data, (x, gain, bias), "layer_norm", _bw)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``x[idx]`` of a 2-D tensor."""
    idx = np.asarray(idx, dtype=np.intp)
    n_rows = x.shape[0]

    def _bw(g):
        out = np.zeros((n_rows,) + g.shape[1:])
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(x.data[idx], (x,), "take_rows", _bw)


def index_add(n_rows: int, idx: np.ndarray, src: Tensor) -> Tensor:
    """Scatter ``src`` rows into a zero tensor of ``n_rows`` rows, summing duplicates."""
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_rows,) + src.shape[1:])
    np.add.at(out, idx, src.data)
    return Tensor._make(out, (src,), "index_add", lambda g: (g[idx],))


# -- graph and backward ---------------------------------------------------------


class ComputationGraph:
    """The recorded operations reachable from an output, in creation order.

    Nodes are appended as operations execute, so inputs always precede
    outputs and the order is a valid topological order.
    """

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_output(cls, out: Tensor) -> "ComputationGraph":
        seen: dict[int, Tensor] = {}
        stack = [out]
        while stack:
            t = stack.pop()
            if t._id in seen:
                continue
            seen[t._id] = t
            stack.extend(p for p in t._parents if p.requires_grad)
        return cls(sorted(seen.values(), key=lambda t: t._id))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Gradients accumulate into existing ``.grad`` buffers, so call
    ``zero_grad`` on parameters between steps.

    Raises:
        GradientError: if ``loss`` is not a scalar.
    """
    if loss.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    graph = ComputationGraph.from_output(loss)
    grads: dict[int, np.ndarray] = {loss._id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        g = grads.pop(node._id, None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent._id in grads:
                grads[parent._id] = grads[parent._id] + pg
            else:
                grads[parent._id] = pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-6) -> float:
    """Compare the autodiff gradient of scalar ``f`` at ``x`` with central differences.

    Returns the maximum over coordinates of
    ``|analytic - numeric| / max(|analytic|, |numeric|, 1e-12)``.
    ``x.data`` is restored before returning.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    was = x.requires_grad
    x.requires_grad = True
    x.grad = None
    out = f(x)
    backward(out)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    x.grad = None
    x.requires_grad = was

    numeric = np.empty_like(x.data)
    flat = x.data.reshape(-1)
    num_flat = numeric.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradientError(f"non-finite function value at coordinate {i}")
            num_flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x.size else 0.0


# -- parameter serialization ---------------------------------------------------


def serialize_params(params: dict[str, Tensor]) -> tuple[str, bytes]:
    """Pack named tensors as little-endian float64 plus a text manifest.

    Manifest lines read ``name<TAB>d0,d1,...<TAB>byte_offset<TAB>byte_length``.
    """
    lines, chunks, offset = [], [], 0
    for name, t in params.items():
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name may not contain whitespace: {name!r}")
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        dims = ",".join(str(d) for d in t.shape)
        lines.append(f"{name}\t{dims}\t{offset}\t{len(raw)}")
        chunks.append(raw)
        offset += len(raw)
    return "\n".join(lines) + "\n", b"".join(chunks)


def deserialize_params(manifest: str, payload: bytes) -> dict[str, np.ndarray]:
    out = {}
    for line in manifest.splitlines():
        if not line.strip():
            continue
        name, dims, offset, length = line.split("\t")
        shape = tuple(int(d) for d in dims.split(",")) if dims else ()
        offset, length = int(offset), int(length)
        if offset + length > len(payload):
            raise ValueError(f"parameter {name} runs past end of payload at byte {offset}")
        arr = np.frombuffer(payload, dtype="<f8", count=length // 8, offset=offset)
        out[name] = arr.reshape(shape).astype(np.float64)
    return out


def save_params(params: dict[str, Tensor], path) -> None:
    """Write ``<path>`` (binary payload) and ``<path>.manifest`` (text)."""
    manifest, payload = serialize_params(params)
    with open(path, "wb") as fh:
        fh.write(payload)
    with open(f"{path}.manifest", "w") as fh:
        fh.write(manifest)


def load_params(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        payload = fh.read()
    with open(f"{path}.manifest") as fh:
        manifest = fh.read()
    return deserialize_params(manifest, payload)
