"""Dense float64 tensors with a reverse-mode tape, AdamW, and checkpoints.

Every tensor wraps a C-contiguous ``float64`` numpy array.  Operations on
tensors that require gradients record their parents and a local backward
closure; :func:`backward` replays the tape in reverse topological order.

Only elementwise ops (with trailing-axis broadcasting of biases), matrix
multiply, reductions, column slicing and concatenation are provided.
"""
from __future__ import annotations

import contextlib
import json
import math
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

_GRAD_ENABLED = True


class NumericError(FloatingPointError):
    """A non-finite value was produced by a named operation."""


@contextlib.contextmanager
def no_grad():
    """Run operations without recording them on the tape."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite value produced by '{op}'")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # sum out axes that numpy broadcasting added or stretched
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "_parents", "_backward", "_op")
    # make ``ndarray <op> Tensor`` dispatch to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, copy=True, ndmin=0)
        if any(n <= 0 for n in arr.shape):
            raise ValueError(f"tensor extents must be positive, got {arr.shape}")
        self.data = np.ascontiguousarray(arr)
        _check_finite(self.data, "tensor")
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]] | None = None
        self._op = "leaf"

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str,
                structural: bool = False) -> "Tensor":
        out = cls.__new__(cls)
        if structural:
            # slices and transposes of finite data: skip the scan and keep the view
            out.data = data
        else:
            out.data = np.ascontiguousarray(_check_finite(np.asarray(data, dtype=np.float64), op))
        out.name = None
        out._op = op
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- introspection -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError("item() needs a single-element tensor")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    # -- elementwise ---------------------------------------------------
    def __add__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._result(
            self.data + other.data, (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)), "add")

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = as_tensor(other)
        a, b = self.shape, other.shape
        return Tensor._result(
            self.data - other.data, (self, other),
            lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)), "sub")

    def __rsub__(self, other) -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._result(
            x * y, (self, other),
            lambda g: (_unbroadcast(g * y, x.shape), _unbroadcast(g * x, y.shape)), "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        return Tensor._result(
            x / y, (self, other),
            lambda g: (_unbroadcast(g / y, x.shape), _unbroadcast(-g * x / (y * y), y.shape)),
            "div")

    def __rtruediv__(self, other) -> "Tensor":
        return as_tensor(other) / self

    def __neg__(self) -> "Tensor":
        return Tensor._result(-self.data, (self,), lambda g: (-g,), "neg")

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._result(x * x, (self,), lambda g: (2.0 * x * g,), "square")

    def sqrt(self) -> "Tensor":
        if np.any(self.data < 0):
            raise NumericError("sqrt of a negative value")
        out = np.sqrt(self.data)
        return Tensor._result(out, (self,), lambda g: (0.5 * g / out,), "sqrt")

    def exp(self) -> "Tensor":
        with np.errstate(over="ignore"):
            out = np.exp(self.data)
        return Tensor._result(out, (self,), lambda g: (g * out,), "exp")

    def log(self) -> "Tensor":
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        return Tensor._result(out, (self,), lambda g: (g / x,), "log")

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._result(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def silu(self) -> "Tensor":
        x = self.data
        sig = 0.5 * (1.0 + np.tanh(0.5 * x))
        out = x * sig
        return Tensor._result(
            out, (self,), lambda g: (g * sig * (1.0 + x * (1.0 - sig)),), "silu")

    def relu(self) -> "Tensor":
        x = self.data
        return Tensor._result(np.maximum(x, 0.0), (self,), lambda g: (g * (x > 0),), "relu")

    def clip(self, lo: float, hi: float) -> "Tensor":
        x = self.data
        inside = (x >= lo) & (x <= hi)
        return Tensor._result(np.clip(x, lo, hi), (self,), lambda g: (g * inside,), "clip")

    # -- linear algebra / shape ---------------------------------------
    def __matmul__(self, other) -> "Tensor":
        other = as_tensor(other)
        x, y = self.data, other.data
        if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[0]:
            raise ValueError(f"matmul shape mismatch {x.shape} @ {y.shape}")
        need_x, need_y = self.requires_grad, other.requires_grad

        def back(g):
            return (g @ y.T if need_x else None, x.T @ g if need_y else None)

        return Tensor._result(x @ y, (self, other), back, "matmul")

    @property
    def T(self) -> "Tensor":
        if self.data.ndim != 2:
            raise ValueError("transpose needs a 2-D tensor")
        return Tensor._result(self.data.T, (self,), lambda g: (g.T,), "transpose", True)

    def reshape(self, *shape: int) -> "Tensor":
        old = self.shape
        return Tensor._result(self.data.reshape(*shape), (self,),
                              lambda g: (g.reshape(old),), "reshape", True)

    def columns(self, start: int, stop: int) -> "Tensor":
        """Columns ``start:stop`` of a 2-D tensor."""
        if self.data.ndim != 2:
            raise ValueError("columns() needs a 2-D tensor")
        old = self.shape

        def back(g):
            full = np.zeros(old)
            full[:, start:stop] = g
            return (full,)

        return Tensor._result(self.data[:, start:stop], (self,), back, "columns", True)

    def rows(self, start: int, stop: int) -> "Tensor":
        old = self.shape

        def back(g):
            full = np.zeros(old)
            full[start:stop] = g
            return (full,)

        return Tensor._result(self.data[start:stop], (self,), back, "rows", True)

    # -- reductions ----------------------------------------------------
    def sum(self, axis: int | None = None) -> "Tensor":
        x = self.data
        if axis is None:
            return Tensor._result(np.array(x.sum()), (self,),
                                  lambda g: (np.full(x.shape, np.asarray(g).reshape(-1)[0]),), "sum")
        ax = axis % x.ndim

        def back(g):
            return (np.broadcast_to(np.expand_dims(g, ax), x.shape).copy(),)

        return Tensor._result(x.sum(axis=ax), (self,), back, "sum")

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis) / float(n)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    edges = np.cumsum([0] + sizes)

    def back(g):
        return tuple(
            np.take(g, range(edges[k], edges[k + 1]), axis=axis) for k in range(len(parts)))

    return Tensor._result(np.concatenate([p.data for p in parts], axis=axis),
                          parts, back, "concat")


def stack(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors along a new leading axis."""
    parts = [as_tensor(p) for p in parts]
    return Tensor._result(np.stack([p.data for p in parts]), parts,
                          lambda g: tuple(g[k] for k in range(len(parts))), "stack")


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.data <= b.data
    return Tensor._result(
        np.where(take_a, a.data, b.data), (a, b),
        lambda g: (_unbroadcast(g * take_a, a.shape), _unbroadcast(g * ~take_a, b.shape)),
        "minimum")


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(root: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``root`` with respect to tracked leaves.

    If ``params`` is given the returned map holds exactly those tensors,
    with zero arrays for parameters the root does not depend on.
    """
    if root.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    leaves: dict[int, Tensor] = {}
    if root.requires_grad:
        grads[id(root)] = np.ones(root.shape)
        for node in reversed(_topological(root)):
            g = grads.pop(id(node), None) if node._parents else grads.get(id(node))
            if g is None:
                continue
            if not node._parents:
                leaves[id(node)] = node
                continue
            parts = node._backward(g)
            for parent, pg in zip(node._parents, parts):
                if pg is None or not parent.requires_grad:
                    continue
                if not np.all(np.isfinite(pg)):
                    raise NumericError(f"non-finite gradient in backward of '{node._op}'")
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = np.asarray(pg, dtype=np.float64).reshape(parent.shape)
    if params is None:
        return {leaves[k]: grads[k] for k in leaves}
    return {p: grads.get(id(p), np.zeros(p.shape)).copy() for p in params}


def gradient_check(f: Callable[[Tensor], Tensor], p: Tensor, h: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` receives ``p`` (a tracked tensor) and must return a scalar tensor.
    The error per coordinate is ``|analytic - numeric| / (|analytic| + 1e-8)``.
    """
    if h <= 0:
        raise ValueError("step h must be positive")
    if not p.requires_grad:
        p = parameter(p.data)
    analytic = backward(f(p), [p])[p].reshape(-1)
    base = p.data.copy()
    numeric = np.empty(base.size)
    flat = p.data.reshape(-1)
    with no_grad():
        for k in range(base.size):
            flat[k] = base.reshape(-1)[k] + h
            up = f(p).item()
            flat[k] = base.reshape(-1)[k] - h
            down = f(p).item()
            flat[k] = base.reshape(-1)[k]
            if not (math.isfinite(up) and math.isfinite(down)):
                raise NumericError(f"function is non-finite near coordinate {k}")
            numeric[k] = (up - down) / (2.0 * h)
    return float(np.max(np.abs(analytic - numeric) / (np.abs(analytic) + 1e-8)))


def global_norm(grads: Iterable[np.ndarray]) -> float:
    total = 0.0
    for g in grads:
        flat = np.ravel(g)
        total += float(np.dot(flat, flat))
    return math.sqrt(total)


def clip_by_global_norm(grads: Mapping[Tensor, np.ndarray], max_norm: float) -> dict[Tensor, np.ndarray]:
    norm = global_norm(grads.values())
    scale = max_norm / norm if norm > max_norm else 1.0
    return {p: g * scale for p, g in grads.items()}


@dataclass
class AdamW:
    """AdamW with global-norm gradient clipping applied before the update."""

    params: list[Tensor]
    lr: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0
    max_grad_norm: float | None = 1.0
    step_count: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.m:
            self.m = [np.zeros(p.shape) for p in self.params]
            self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: Mapping[Tensor, np.ndarray]) -> float:
        """Apply one update in place; returns the pre-clip global norm."""
        gs = []
        for p in self.params:
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape)
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {p.name!r}")
            gs.append(g)
        norm = global_norm(gs)
        clip = 1.0
        if self.max_grad_norm is not None and norm > self.max_grad_norm:
            clip = self.max_grad_norm / norm
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, g, m, v in zip(self.params, gs, self.m, self.v):
            tmp = np.multiply(g, clip)
            m *= b1
            m += (1.0 - b1) * tmp
            np.multiply(tmp, tmp, out=tmp)
            v *= b2
            tmp *= 1.0 - b2
            v += tmp
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / math.sqrt(c2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            p.data -= tmp
        return norm

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"optim.m.{p.name}"] = m
            out[f"optim.v.{p.name}"] = v
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step_count: int) -> None:
        for k, p in enumerate(self.params):
            self.m[k] = np.array(arrays[f"optim.m.{p.name}"], dtype=np.float64)
            self.v[k] = np.array(arrays[f"optim.v.{p.name}"], dtype=np.float64)
        self.step_count = step_count


CHECKPOINT_MAGIC = "layerlab-checkpoint"


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray],
                    counters: Mapping[str, int] | None = None,
                    meta: Mapping | None = None) -> None:
    """Write a JSON header line followed by little-endian float64 blobs in header order."""
    entries = [{"name": k, "shape": list(np.shape(a))} for k, a in arrays.items()]
    header = {"format": CHECKPOINT_MAGIC, "version": 1, "params": entries,
              "counters": dict(counters or {}), "meta": dict(meta or {})}
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for a in arrays.values():
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict, dict]:
    """Returns ``(arrays, counters, meta)``."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a {CHECKPOINT_MAGIC} file")
        arrays = {}
        for entry in header["params"]:
            shape = tuple(entry["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * n)
            if len(raw) != 8 * n:
                raise ValueError(f"{path}: truncated data for {entry['name']}")
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after last parameter")
    return arrays, header["counters"], header["meta"]
