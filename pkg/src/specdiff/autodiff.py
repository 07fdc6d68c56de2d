"""Dense-tensor arithmetic with tape-based reverse-mode differentiation.

Design notes
------------
* Every tensor is float64.  Gradient-check headroom matters more than speed
  at the sizes this package trains.
* A thread-local tape records operations whose inputs require gradients; the
  tape is rebuilt on every training step and cleared by :func:`backward`.
* Implicit broadcasting in ``add``/``sub``/``mul`` is restricted to
  leading-axis expansion (the smaller operand's shape must be a suffix of the
  larger's).  Anything else goes through the explicit :func:`broadcast_to`.
* Forward ops fail fast on non-finite values while recording; a silently
  diverging training run is much harder to debug than an early exception.

No operation mutates its input arrays.
"""

from __future__ import annotations

import json
import struct
import threading
from collections.abc import Callable, Iterable
from typing import Any

import numpy as np
from scipy.special import expit

from .errors import DataFormatError, NumericError, ShapeError, UsageError

_MAGIC = b"SDT1"
_state = threading.local()


def _tape() -> list:
    if not hasattr(_state, "tape"):
        _state.tape = []
    return _state.tape


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self) -> "no_grad":
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc: object) -> None:
        _state.grad_enabled = self._prev


class Tensor:
    """A float64 array plus optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data: Any, requires_grad: bool = False, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not np.all(np.isfinite(arr)):
            raise NumericError("tensor holds non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

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

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def param(data: Any) -> Tensor:
    """Shorthand for a learnable tensor."""
    return Tensor(data, requires_grad=True)


def _record(
    out_data: np.ndarray,
    inputs: tuple[Tensor, ...],
    backward_fn: Callable[[np.ndarray], tuple[np.ndarray | None, ...]],
) -> Tensor:
    recording = _grad_enabled() and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=recording, _check=recording)
    if recording:
        _tape().append((out, inputs, backward_fn))
    return out


def _broadcast_shapes(a: tuple[int, ...], b: tuple[int, ...]) -> tuple[int, ...]:
    """Validate leading-axis broadcast and return the output shape."""
    if a == b:
        return a
    small, big = (a, b) if len(a) < len(b) else (b, a)
    if len(small) == len(big) or big[len(big) - len(small):] != small:
        raise ShapeError(f"shapes {a} and {b} do not broadcast over leading axes")
    return big


def _reduce_to(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum the leading axes a broadcast introduced."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(extra)))


def add(x: Tensor, y: Tensor) -> Tensor:
    _broadcast_shapes(x.shape, y.shape)

    def bw(g: np.ndarray):
        return _reduce_to(g, x.shape), _reduce_to(g, y.shape)

    return _record(x.data + y.data, (x, y), bw)


def sub(x: Tensor, y: Tensor) -> Tensor:
    _broadcast_shapes(x.shape, y.shape)

    def bw(g: np.ndarray):
        return _reduce_to(g, x.shape), _reduce_to(-g, y.shape)

    return _record(x.data - y.data, (x, y), bw)


def mul(x: Tensor, y: Tensor) -> Tensor:
    _broadcast_shapes(x.shape, y.shape)
    xd, yd = x.data, y.data

    def bw(g: np.ndarray):
        return _reduce_to(g * yd, x.shape), _reduce_to(g * xd, y.shape)

    return _record(xd * yd, (x, y), bw)


def scale(x: Tensor, alpha: float) -> Tensor:
    alpha = float(alpha)

    def bw(g: np.ndarray):
        return (g * alpha,)

    return _record(x.data * alpha, (x,), bw)


def matmul(x: Tensor, w: Tensor) -> Tensor:
    """Stacked matrix product ``(..., m, k) @ (k, n)``; ``w`` must be 2-D."""
    if w.ndim != 2:
        raise ShapeError(f"matmul weight must be 2-D, got shape {w.shape}")
    if x.ndim < 2:
        raise ShapeError(f"matmul input must be at least 2-D, got shape {x.shape}")
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {x.shape} @ {w.shape}")
    xd, wd = x.data, w.data

    def bw(g: np.ndarray):
        dx = g @ wd.T
        k, n = wd.shape
        dw = xd.reshape(-1, k).T @ g.reshape(-1, n)
        return dx, dw

    return _record(xd @ wd, (x, w), bw)


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def bw(g: np.ndarray):
        return (g * out * (1.0 - out),)

    return _record(out, (x,), bw)


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def bw(g: np.ndarray):
        return (g * (1.0 - out * out),)

    return _record(out, (x,), bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0

    def bw(g: np.ndarray):
        return (g * mask,)

    return _record(np.where(mask, x.data, 0.0), (x,), bw)


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    nd = tensors[0].ndim
    ax = axis % nd
    sizes = [t.shape[ax] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def bw(g: np.ndarray):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, offsets, axis=ax))

    return _record(np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), bw)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx_t = tuple(idx)
    shape = x.shape

    def bw(g: np.ndarray):
        full = np.zeros(shape)
        full[idx_t] = g
        return (full,)

    return _record(np.ascontiguousarray(x.data[idx_t]), (x,), bw)


def row_scale(x: Tensor, s: np.ndarray) -> Tensor:
    """Scale axis -2 (the node axis) by the constant vector ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if x.ndim < 2 or s.ndim != 1 or s.shape[0] != x.shape[-2]:
        raise ShapeError(f"row_scale mismatch: signal {x.shape}, scales {s.shape}")
    col = s[:, None]

    def bw(g: np.ndarray):
        return (g * col,)

    return _record(x.data * col, (x,), bw)


def broadcast_to(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        out = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError as exc:
        raise ShapeError(f"cannot broadcast {x.shape} to {shape}") from exc
    in_shape = x.shape

    def bw(g: np.ndarray):
        extra = g.ndim - len(in_shape)
        summed = g.sum(axis=tuple(range(extra))) if extra else g
        keep = tuple(i for i, d in enumerate(in_shape) if d == 1 and summed.shape[i] != 1)
        if keep:
            summed = summed.sum(axis=keep, keepdims=True)
        return (summed,)

    return _record(out, (x,), bw)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    in_shape = x.shape

    def bw(g: np.ndarray):
        return (g.reshape(in_shape),)

    return _record(x.data.reshape(shape), (x,), bw)


def tsum(x: Tensor) -> Tensor:
    """Full reduction to a scalar tensor."""
    shape = x.shape

    def bw(g: np.ndarray):
        return (np.full(shape, float(g)),)

    return _record(np.asarray(x.data.sum()), (x,), bw)


def tmean(x: Tensor) -> Tensor:
    shape, size = x.shape, x.size

    def bw(g: np.ndarray):
        return (np.full(shape, float(g) / size),)

    return _record(np.asarray(x.data.mean()), (x,), bw)


def mse_loss(pred: Tensor, target: Tensor, reduction: str = "mean") -> Tensor:
    """Squared-error loss; ``reduction`` is ``"mean"`` or ``"sum"``."""
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss shapes differ: {pred.shape} vs {target.shape}")
    if reduction not in ("mean", "sum"):
        raise UsageError(f"unknown reduction {reduction!r}")
    diff = pred.data - target.data
    denom = pred.size if reduction == "mean" else 1

    def bw(g: np.ndarray):
        d = (2.0 * float(g) / denom) * diff
        return d, -d

    return _record(np.asarray((diff * diff).sum() / denom), (pred, target), bw)


def backward(loss: Tensor) -> None:
    """Reverse sweep: populate ``.grad`` of every requires-grad tensor.

    Gradients accumulate (two backward passes add up); the tape is cleared
    afterwards even if the sweep raises.
    """
    if loss.size != 1:
        raise UsageError(f"backward expects a scalar loss, got shape {loss.shape}")
    tape = _tape()
    if not loss.requires_grad or not tape:
        raise UsageError("loss is not connected to any recorded operation")
    try:
        loss.grad = np.ones_like(loss.data)
        for i in range(len(tape) - 1, -1, -1):
            out, inputs, fn = tape[i]
            tape[i] = None
            g = out.grad
            out.grad = None
            if g is None:
                continue
            partials = fn(g)
            for inp, p in zip(inputs, partials):
                if p is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = p.copy() if p is g else p
                else:
                    inp.grad = inp.grad + p
    finally:
        tape.clear()


class Adam:
    """Adam with bias correction over a named parameter collection."""

    def __init__(
        self,
        params: dict[str, Tensor] | Iterable[tuple[str, Tensor]],
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        items = params.items() if isinstance(params, dict) else params
        self.params: list[tuple[str, Tensor]] = [(n, t) for n, t in items]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = [np.zeros_like(t.data) for _, t in self.params]
        self._v = [np.zeros_like(t.data) for _, t in self.params]

    def step(self, lr: float) -> None:
        """One update; gradients are consumed and zeroed."""
        for name, p in self.params:
            if p.grad is None:
                raise UsageError(f"parameter {name!r} has no gradient")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for (name, p), m, v in zip(self.params, self._m, self._v):
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for parameter {name!r}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.grad = None


def adam_step(optimizer: Adam, lr: float) -> None:
    """Functional alias for :meth:`Adam.step`."""
    optimizer.step(lr)


# ---------------------------------------------------------------------------
# Checkpoint container: versioned binary archive of named arrays.
#
# Layout: 4-byte magic "SDT1" | uint64-le header length | UTF-8 JSON header
# | raw C-order payload.  The header records {"version", "meta", "arrays":
# [{"name", "dtype", "shape", "offset", "nbytes"}, ...]} with arrays sorted
# by name, so identical contents give identical bytes.
# ---------------------------------------------------------------------------

_DTYPES = {"float64": np.float64, "int64": np.int64}


def save_tensor_archive(path: str, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.name not in _DTYPES:
            raise DataFormatError(f"array {name!r} has unsupported dtype {arr.dtype}")
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload += arr.tobytes()
    header = json.dumps(
        {"version": 1, "meta": meta or {}, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        fh.write(bytes(payload))


def load_tensor_archive(path: str) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise DataFormatError(f"{path}: not a specdiff tensor archive")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("version") != 1:
            raise DataFormatError(f"{path}: unsupported archive version {header.get('version')}")
        payload = fh.read()
    arrays: dict[str, np.ndarray] = {}
    for ent in header["arrays"]:
        dtype = _DTYPES.get(ent["dtype"])
        if dtype is None:
            raise DataFormatError(f"{path}: unsupported dtype {ent['dtype']}")
        start, nbytes = ent["offset"], ent["nbytes"]
        arr = np.frombuffer(payload[start : start + nbytes], dtype=dtype).reshape(ent["shape"])
        arrays[ent["name"]] = arr.copy()
    return arrays, header["meta"]


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: list[tuple[str, Tensor]],
    rng: np.random.Generator,
    max_components: int = 200,
    h: float = 1e-5,
) -> list[tuple[str, float]]:
    """Compare analytic gradients against central finite differences.

    ``loss_fn`` must be deterministic (freeze any random draws in the
    closure).  For each parameter a random subset of at most
    ``max_components`` entries is probed.  Returns ``(name, max_rel_err)``
    per parameter, with ``rel_err = |a - n| / max(|a|, |n|, 1e-6)``.
    """
    for _, p in params:
        p.data = np.ascontiguousarray(p.data)
        p.grad = None
    loss = loss_fn()
    backward(loss)
    analytic = {name: p.grad.copy() for name, p in params}
    for _, p in params:
        p.grad = None

    report: list[tuple[str, float]] = []
    with no_grad():
        for name, p in params:
            flat = p.data.reshape(-1)
            n = flat.shape[0]
            k = min(n, max_components)
            idx = rng.choice(n, size=k, replace=False) if k < n else np.arange(n)
            worst = 0.0
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                up = loss_fn().item()
                flat[i] = orig - h
                down = loss_fn().item()
                flat[i] = orig
                numeric = (up - down) / (2.0 * h)
                a = float(analytic[name].reshape(-1)[i])
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
                worst = max(worst, rel)
            report.append((name, worst))
    return report
