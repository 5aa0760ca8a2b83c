"""Small dense-tensor kernel with tape-based reverse-mode differentiation.

Only the operations the tracker needs are provided: direct convolution,
depthwise cross-correlation, max pooling, border cropping, a handful of
pointwise ops and full reductions.  Every spatial op accepts either an
unbatched ``[C, H, W]`` tensor or a batched ``[B, C, H, W]`` one.

Usage::

    with GradTape() as tape:
        y = sum_all(relu(conv2d(x, w, stride=1, pad=1)))
    grads = backward(tape, y)
    grads[w]   # ndarray, same shape as w
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_state = threading.local()


def default_dtype() -> np.dtype:
    return getattr(_state, "dtype", np.dtype(np.float32))


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype new tensors are created with."""
    old = default_dtype()
    _state.dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _state.dtype = old


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{op}: non-finite value in output of shape {arr.shape}")
    return arr


class Tensor:
    """Dense real array plus a flag saying whether gradients are wanted.

    The payload is treated as immutable by every op; only the optimizer
    writes into parameter tensors in place.
    """

    __slots__ = ("data", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str = "", dtype=None):
        arr = np.asarray(data, dtype=dtype or default_dtype())
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    def __add__(self, other):
        return add(self, _as_tensor(other, self))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -_as_tensor(other, self))


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


@dataclass
class _Record:
    out: Tensor
    inputs: Tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    op: str


class GradTape:
    """Ordered log of the differentiable ops executed while it is active.

    A tape is single-use: :func:`backward` consumes it.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self._produced: Dict[int, int] = {}
        self.consumed = False

    def __enter__(self) -> "GradTape":
        stack = _tape_stack()
        stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def _record(self, rec: _Record) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward()")
        self._produced[id(rec.out)] = len(self.records)
        self.records.append(rec)

    def watched(self, t: Tensor) -> bool:
        return id(t) in self._produced

    def gradient(self, loss: Tensor, wrt: Optional[Sequence[Tensor]] = None):
        grads = backward(self, loss)
        if wrt is None:
            return grads
        return [grads.get(t, np.zeros_like(t.data)) for t in wrt]


def _tape_stack() -> List[GradTape]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def record_op(out_data: np.ndarray, inputs: Sequence[Tensor], vjp, op: str) -> Tensor:
    """Wrap ``out_data`` in a tensor and log it on the active tape.

    ``vjp(grad_out)`` must return one gradient (or None) per input.
    Custom fused ops (the losses) are built with this.
    """
    _check_finite(out_data, op)
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs, dtype=out_data.dtype)
    stack = _tape_stack()
    if needs and stack:
        stack[-1]._record(_Record(out, tuple(inputs), vjp, op))
    return out


def backward(tape: GradTape, loss: Tensor) -> Dict[Tensor, np.ndarray]:
    """Reverse sweep over ``tape``; returns gradients of every leaf that wants one."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if tape.consumed:
        raise TapeError("tape already consumed by backward()")
    if not tape.watched(loss):
        raise TapeError("loss tensor was not produced by an op on this tape")

    grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: Dict[int, Tensor] = {}
    last = tape._produced[id(loss)]
    for rec in reversed(tape.records[: last + 1]):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        for inp, gi in zip(rec.inputs, rec.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if gi.shape != inp.shape:
                raise ShapeError(f"{rec.op}: gradient shape {gi.shape} != input shape {inp.shape}")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if not tape.watched(inp):
                leaves[key] = inp
    tape.consumed = True
    tape.records.clear()
    return {t: grads[k] for k, t in leaves.items() if k in grads}


# ---------------------------------------------------------------- pointwise


def _same_or_scalar(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "add")
    return record_op(
        a.data + b.data, (a, b),
        lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_or_scalar(a, b, "mul")
    return record_op(
        a.data * b.data, (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    return record_op(a.data * a.data.dtype.type(c), (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return record_op(np.where(mask, a.data, 0).astype(a.data.dtype), (a,),
                     lambda g: (g * mask,), "relu")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,), "exp")


def sum_all(a: Tensor) -> Tensor:
    return record_op(np.asarray(a.data.sum(), dtype=a.data.dtype), (a,),
                     lambda g: (np.broadcast_to(g, a.shape).astype(a.data.dtype),), "sum")


def reshape(a: Tensor, shape: Tuple[int, ...]) -> Tensor:
    out = a.data.reshape(shape)
    return record_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def elementwise(kind: str, *operands, **kw) -> Tensor:
    """Dispatch by name: relu, add, mul, exp, scale."""
    table = {"relu": relu, "add": add, "mul": mul, "exp": exp}
    if kind == "scale":
        a, c = operands
        return scale(a, float(c))
    if kind not in table:
        raise ValueError(f"unknown elementwise op {kind!r}")
    return table[kind](*operands, **kw)


# ---------------------------------------------------------------- spatial


def _batched(x: np.ndarray, op: str, rank: int = 3) -> Tuple[np.ndarray, bool]:
    if x.ndim == rank:
        return x[None], True
    if x.ndim == rank + 1:
        return x, False
    raise ShapeError(f"{op}: expected {rank}-d or {rank + 1}-d input, got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [(B,)Cin,H,W] with ``w`` [Cout,Cin,kh,kw]."""
    if stride < 1 or pad < 0:
        raise ShapeError(f"conv2d: bad stride={stride} / pad={pad}")
    xb, squeeze = _batched(x.data, "conv2d")
    if w.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d, got {w.shape}")
    cout, cin, kh, kw = w.shape
    if xb.shape[1] != cin:
        raise ShapeError(f"conv2d: input has {xb.shape[1]} channels, kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
    H, W = xb.shape[2:]
    ho, wo = conv_output_size(H, kh, stride, pad), conv_output_size(W, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {H}x{W} with pad {pad}")

    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else xb
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # win: [B, Cin, ho, wo, kh, kw]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # [B, ho, wo, Cout]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if b is not None:
        out += b.data[None, :, None, None]

    def vjp(g):
        gb = g[None] if squeeze else g
        gw = np.tensordot(gb, win, axes=([0, 2, 3], [0, 2, 3])) if w.requires_grad else None
        gbias = gb.sum(axis=(0, 2, 3)) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            cols = np.tensordot(gb, w.data, axes=([1], [0]))  # [B, ho, wo, Cin, kh, kw]
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
            gx = gx[0] if squeeze else gx
        return (gx, gw, gbias) if b is not None else (gx, gw)

    inputs = (x, w, b) if b is not None else (x, w)
    return record_op(out[0] if squeeze else out, inputs, vjp, "conv2d")


def xcorr_depthwise(template: Tensor, search: Tensor) -> Tensor:
    """Per-channel valid cross-correlation, template acting as the kernel."""
    tb, squeeze = _batched(template.data, "xcorr_depthwise")
    sb, squeeze_s = _batched(search.data, "xcorr_depthwise")
    if squeeze != squeeze_s or tb.shape[:2] != sb.shape[:2]:
        raise ShapeError(f"xcorr_depthwise: template {template.shape} vs search {search.shape}")
    ht, wt = tb.shape[2:]
    hs, ws = sb.shape[2:]
    if ht > hs or wt > ws:
        raise ShapeError(f"xcorr_depthwise: template {ht}x{wt} larger than search {hs}x{ws}")
    win = sliding_window_view(sb, (ht, wt), axis=(2, 3))  # [B, C, ho, wo, ht, wt]
    out = np.einsum("bcijhw,bchw->bcij", win, tb, optimize=True)
    ho, wo = out.shape[2:]

    def vjp(g):
        gb = g[None] if squeeze else g
        gt = gs = None
        if template.requires_grad:
            gt = np.einsum("bcij,bcijhw->bchw", gb, win, optimize=True)
            gt = gt[0] if squeeze else gt
        if search.requires_grad:
            gs = np.zeros_like(sb)
            for i in range(ht):
                for j in range(wt):
                    gs[:, :, i:i + ho, j:j + wo] += gb * tb[:, :, i:i + 1, j:j + 1]
            gs = gs[0] if squeeze else gs
        return gt, gs

    return record_op(out[0] if squeeze else out, (template, search), vjp, "xcorr_depthwise")


def max_pool2d(x: Tensor, k: int = 2, stride: int = 2) -> Tensor:
    xb, squeeze = _batched(x.data, "max_pool2d")
    B, C, H, W = xb.shape
    ho, wo = conv_output_size(H, k, stride, 0), conv_output_size(W, k, stride, 0)
    if ho < 1 or wo < 1:
        raise ShapeError(f"max_pool2d: window {k} larger than input {H}x{W}")
    win = sliding_window_view(xb, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(B, C, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = g[None] if squeeze else g
        gx = np.zeros_like(xb)
        di, dj = np.divmod(arg, k)
        rows = np.arange(ho)[None, None, :, None] * stride + di
        cols = np.arange(wo)[None, None, None, :] * stride + dj
        bi = np.arange(B)[:, None, None, None]
        ci = np.arange(C)[None, :, None, None]
        if stride >= k:
            gx[bi, ci, rows, cols] = gb
        else:
            np.add.at(gx, (bi, ci, rows, cols), gb)
        return (gx[0] if squeeze else gx,)

    return record_op(out[0] if squeeze else out, (x,), vjp, "max_pool2d")


def crop_border(x: Tensor, width: int) -> Tensor:
    """Drop ``width`` rows/cols from every spatial edge."""
    if width == 0:
        return x
    H, W = x.shape[-2:]
    if 2 * width >= min(H, W):
        raise ShapeError(f"crop_border: width {width} leaves nothing of {H}x{W}")
    out = x.data[..., width:H - width, width:W - width]

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[..., width:H - width, width:W - width] = g
        return (gx,)

    return record_op(np.ascontiguousarray(out), (x,), vjp, "crop_border")


# ---------------------------------------------------------------- checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    max_abs_err: float
    passed: bool
    n_checked: int

    def __str__(self) -> str:
        verdict = "pass" if self.passed else "FAIL"
        return f"{verdict} max_rel_err={self.max_rel_err:.3e} max_abs_err={self.max_abs_err:.3e} n={self.n_checked}"


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    xt = Tensor(x, requires_grad=True)
    with GradTape() as tape:
        y = f(xt)
    if not tape.watched(y):
        return np.zeros_like(x)
    return backward(tape, y).get(xt, np.zeros_like(x))


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps=1e-5,
    tol: float = 1e-4,
    analytic: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` at ``x`` with central differences.

    Runs in float64.  The relative error of each entry is
    ``|a - n| / max(|a|, |n|, floor)``.  ``analytic`` overrides the tape
    gradient, which is how negative controls are built.

    ``eps`` may be a sequence of steps; each entry then keeps its smallest
    error over the steps.  Piecewise-linear functions (relu, max) can put a
    kink inside one step while a smaller step stays clear of it, and a wrong
    gradient disagrees at every step.
    """
    steps = tuple(np.atleast_1d(np.asarray(eps, dtype=np.float64)))
    with precision(np.float64):
        x = np.array(x, dtype=np.float64)
        a = analytic(x) if analytic is not None else analytic_grad(f, x)
        best_rel = np.full(x.shape, np.inf)
        best_abs = np.full(x.shape, np.inf)
        flat = x.reshape(-1)
        for h in steps:
            n = np.zeros_like(x)
            nflat = n.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = f(Tensor(x)).item()
                flat[i] = orig - h
                fm = f(Tensor(x)).item()
                flat[i] = orig
                nflat[i] = (fp - fm) / (2 * h)
            diff = np.abs(a - n)
            rel = diff / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
            better = rel < best_rel
            best_rel = np.where(better, rel, best_rel)
            best_abs = np.where(better, diff, best_abs)
    max_rel = float(best_rel.max()) if best_rel.size else 0.0
    max_abs = float(best_abs.max()) if best_abs.size else 0.0
    return GradCheckReport(max_rel, max_abs, max_rel <= tol, int(x.size))
