"""Dense-tensor math with reverse-mode gradients and an Adam optimizer.

Every differentiable operation wraps float64 numpy arrays in a `Tensor` and
records a vector-Jacobian closure, so calling `Tensor.backward()` on a scalar
output accumulates gradients into every reachable `Parameter`. Accumulation is
additive: running backward twice doubles the gradients. Operations validate
that their outputs are finite and raise `NumericalError` otherwise.

Checkpoints are NumPy ``.npz`` archives (little-endian float64, row-major),
one entry per parameter keyed ``section/name``, plus a JSON metadata entry.
"""

from __future__ import annotations

import json
from contextlib import contextmanager
from typing import Callable, Iterable, Sequence

import numpy as np

DEFAULT_DTYPE = np.float64

EPS_NORM = 1e-12  # vectors with smaller l2 norm cannot be normalized

# Debug hook for negative-control gradient checks: scales the ReLU adjoint.
_ADJOINT_SCALE = 1.0


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericalError(ArithmeticError):
    """An operation produced (or was fed) a non-finite value."""


class ZeroVectorError(NumericalError):
    """Normalization was asked for a vector with (near-)zero norm."""


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values in {what}")


class Tensor:
    """A dense array plus an optional backward closure on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DEFAULT_DTYPE)
        _check_finite(arr, "tensor input")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None

    # -- introspection ---------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return elementwise_mul(other, self)

    def __neg__(self):
        return elementwise_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- autodiff ----------------------------------------------------------

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.size != 1:
                raise ShapeError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=DEFAULT_DTYPE)
            if grad.shape != self.shape:
                raise ShapeError("seed gradient shape mismatch")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: accumulate
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            for parent, pg in zip(node._parents, node._vjp(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in pending:
                    pending[id(parent)] = pending[id(parent)] + pg
                else:
                    pending[id(parent)] = pg


class Parameter(Tensor):
    """A named leaf tensor whose gradient buffer always exists."""

    __slots__ = ("name",)

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _from_op(data: np.ndarray, parents: tuple[Tensor, ...], vjp, what: str) -> Tensor:
    _check_finite(data, what)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise and linear primitives -------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _from_op(data, (a, b), vjp, "add output")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data - b.data
    except ValueError as exc:
        raise ShapeError(f"sub: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _from_op(data, (a, b), vjp, "sub output")


def elementwise_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from exc

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _from_op(data, (a, b), vjp, "mul output")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _from_op(data, (a, b), vjp, "matmul output")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a matrix")

    def vjp(g):
        return (g.T,)

    return _from_op(a.data.T, (a,), vjp, "transpose output")


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    data = a.data.reshape(shape)

    def vjp(g):
        return (g.reshape(a.shape),)

    return _from_op(data, (a,), vjp, "reshape output")


def affine(x, w, b) -> Tensor:
    """y = x @ w.T + b for row-major inputs; w has shape (out, in)."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"affine: x {x.shape} with w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"affine: bias {b.shape} for w {w.shape}")
    return add(matmul(x, transpose(w)), b)


def relu(a) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, 0.0)
    mask = a.data > 0.0  # subgradient at 0 is 0

    def vjp(g):
        return (g * mask * _ADJOINT_SCALE,)

    return _from_op(data, (a,), vjp, "relu output")


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    data = np.maximum(a.data, slope * a.data)
    factor = np.where(a.data > 0.0, 1.0, slope)

    def vjp(g):
        return (g * factor,)

    return _from_op(data, (a,), vjp, "leaky_relu output")


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)  # sign(0) = 0, matching the ReLU convention

    def vjp(g):
        return (g * sign,)

    return _from_op(np.abs(a.data), (a,), vjp, "abs output")


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    data = a.data.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _from_op(np.asarray(data, dtype=DEFAULT_DTYPE), (a,), vjp, "reduce_sum output")


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    data = a.data.mean(axis=axis)
    count = a.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / count, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis) / count, a.shape).copy(),)

    return _from_op(np.asarray(data, dtype=DEFAULT_DTYPE), (a,), vjp, "reduce_mean output")


def concat_columns(*tensors) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts or any(t.ndim != 2 for t in ts):
        raise ShapeError("concat_columns expects matrices")
    rows = ts[0].shape[0]
    if any(t.shape[0] != rows for t in ts):
        raise ShapeError("concat_columns: row counts differ")
    data = np.concatenate([t.data for t in ts], axis=1)
    widths = [t.shape[1] for t in ts]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=1))

    return _from_op(data, tuple(ts), vjp, "concat_columns output")


def concat_rows(tensors: Iterable) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts or any(t.ndim != 2 for t in ts):
        raise ShapeError("concat_rows expects matrices")
    cols = ts[0].shape[1]
    if any(t.shape[1] != cols for t in ts):
        raise ShapeError("concat_rows: column counts differ")
    data = np.concatenate([t.data for t in ts], axis=0)
    heights = [t.shape[0] for t in ts]
    splits = np.cumsum(heights)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=0))

    return _from_op(data, tuple(ts), vjp, "concat_rows output")


def masked_softmax(scores, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over the entries where `mask` is 1; the rest are 0.

    `mask` is a constant 0/1 array, not a differentiable input. Every row
    must have at least one unmasked entry.
    """
    scores = as_tensor(scores)
    mask = np.asarray(mask)
    if mask.shape != scores.shape:
        raise ShapeError(f"masked_softmax: mask {mask.shape} vs scores {scores.shape}")
    on = mask != 0
    if not on.any(axis=1).all():
        raise ValueError("masked_softmax: a row is fully masked")
    work = np.where(on, scores.data, -np.inf)
    work = work - work.max(axis=1, keepdims=True)
    z = np.where(on, np.exp(work), 0.0)
    data = z / z.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * data).sum(axis=1, keepdims=True)
        return (data * (g - inner),)

    return _from_op(data, (scores,), vjp, "masked_softmax output")


def l2_normalize(a) -> Tensor:
    """Normalize a vector to unit l2 norm, with the full quotient-rule Jacobian."""
    a = as_tensor(a)
    if a.ndim != 1:
        raise ShapeError("l2_normalize expects a vector; see l2_normalize_rows")
    norm = float(np.linalg.norm(a.data))
    if norm <= EPS_NORM:
        raise ZeroVectorError("cannot normalize a (near-)zero vector")
    y = a.data / norm

    def vjp(g):
        return ((g - y * float(y @ g)) / norm,)

    return _from_op(y, (a,), vjp, "l2_normalize output")


def l2_normalize_rows(a) -> Tensor:
    """Normalize each row of a matrix to unit l2 norm."""
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError("l2_normalize_rows expects a matrix")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if (norms <= EPS_NORM).any():
        raise ZeroVectorError("cannot normalize a (near-)zero row")
    y = a.data / norms

    def vjp(g):
        inner = (y * g).sum(axis=1, keepdims=True)
        return ((g - y * inner) / norms,)

    return _from_op(y, (a,), vjp, "l2_normalize_rows output")


# -- validation --------------------------------------------------------------


@contextmanager
def corrupt_adjoints(scale: float = 1.5):
    """Deliberately mis-scale the ReLU adjoint (negative control for gradcheck)."""
    global _ADJOINT_SCALE
    prev = _ADJOINT_SCALE
    _ADJOINT_SCALE = scale
    try:
        yield
    finally:
        _ADJOINT_SCALE = prev


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Parameter],
    eps: float = 1e-4,
) -> float:
    """Compare analytic gradients of the scalar `f()` against central differences.

    Returns the max over all parameter entries of
    |analytic - central| / max(1e-8, |central|). The callable must rebuild its
    graph from the live parameter values on every invocation.
    """
    for p in params:
        p.zero_grad()
    out = f()
    if out.size != 1:
        raise ShapeError("finite_diff_check needs a scalar-valued function")
    out.backward()

    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            central = (f_plus - f_minus) / (2.0 * eps)
            err = abs(gflat[i] - central) / max(1e-8, abs(central))
            worst = max(worst, err)
    return worst


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam with bias correction; state lives with the optimizer instance."""

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        for p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericalError(f"non-finite gradient for parameter {p.name!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1**t
        bc2 = 1.0 - self.beta2**t
        for i, p in enumerate(self.params):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# -- checkpoints ---------------------------------------------------------------

_META_KEY = "__meta__"


def save_checkpoint(
    path,
    sections: dict[str, dict[str, np.ndarray]],
    meta: dict | None = None,
) -> None:
    """Write named parameter sections to an ``.npz`` archive.

    Keys are ``section/name``; values are stored row-major as little-endian
    float64. `meta` is serialized as JSON under a reserved key.
    """
    payload: dict[str, np.ndarray] = {}
    for section, entries in sections.items():
        for name, arr in entries.items():
            payload[f"{section}/{name}"] = np.ascontiguousarray(arr, dtype="<f8")
    payload[_META_KEY] = np.array(json.dumps(meta or {}, sort_keys=True))
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, dict[str, np.ndarray]], dict]:
    """Read back sections and metadata written by `save_checkpoint`."""
    sections: dict[str, dict[str, np.ndarray]] = {}
    with np.load(path, allow_pickle=False) as archive:
        meta = json.loads(str(archive[_META_KEY]))
        for key in archive.files:
            if key == _META_KEY:
                continue
            section, _, name = key.partition("/")
            if not name:
                raise ValueError(f"malformed checkpoint key {key!r}")
            sections.setdefault(section, {})[name] = np.asarray(
                archive[key], dtype=DEFAULT_DTYPE
            )
    return sections, meta


def take_section(
    sections: dict[str, dict[str, np.ndarray]],
    section: str,
    expected_shapes: dict[str, tuple[int, ...]],
) -> dict[str, np.ndarray]:
    """Extract one checkpoint section, rejecting missing names or shape drift."""
    if section not in sections:
        raise ValueError(f"checkpoint is missing section {section!r}")
    entries = sections[section]
    out: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes.items():
        if name not in entries:
            raise ValueError(f"checkpoint section {section!r} is missing {name!r}")
        arr = entries[name]
        if arr.shape != shape:
            raise ValueError(
                f"checkpoint shape mismatch for {section}/{name}: "
                f"stored {arr.shape}, expected {shape}"
            )
        out[name] = arr
    return out
