"""Dense tensors with reverse-mode differentiation, Adam, and checkpoint I/O.

Images are stored channels-last, ``(batch, height, width, channels)``.  That
layout lets a 3x3 convolution run as nine shifted matrix products, which is
the fastest formulation numpy offers on a single core.

Every op records its parents and a closure that maps the output cotangent to
parent cotangents.  ``backward`` walks the recorded graph in reverse
topological order.  Working precision is float32; float64 inputs are carried
through unchanged so that finite-difference oracles can run at higher
precision than the path they check.
"""
from __future__ import annotations

import itertools
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError

_ids = itertools.count()
_check_finite = True


def set_finite_checks(enabled: bool) -> None:
    """Toggle the per-node NaN/Inf check (on by default)."""
    global _check_finite
    _check_finite = enabled


def _as_float(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == np.float64:
        return a
    return a.astype(np.float32, copy=False)


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "node_id")

    def __init__(self, data, requires_grad: bool = False, *, _parents=(), _op: str = "leaf",
                 _backward=None):
        self.data = _as_float(data)
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = _parents
        self.backward_fn = _backward
        self.op = _op
        self.node_id = f"{_op}#{next(_ids)}"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor({self.node_id}, shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def _make(data: np.ndarray, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    need = any(p.requires_grad for p in parents)
    out = Tensor(data, need, _parents=tuple(parents) if need else (), _op=op,
                 _backward=backward if need else None)
    if _check_finite and not np.isfinite(out.data).all():
        raise NumericError("non-finite value in op output", out.node_id)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}#{next(_ids)}", f"shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _same_shape("add", a, b)
    return _make(a.data + b.data, (a, b), "add", lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    _same_shape("sub", a, b)
    return _make(a.data - b.data, (a, b), "sub", lambda g: (g, -g))


def mul(a, b) -> Tensor:
    if not isinstance(b, (Tensor, np.ndarray)):
        return scale(a, float(b))
    a, b = tensor(a), tensor(b)
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), "mul", lambda g: (g * bd, g * ad))


def scale(a, c: float) -> Tensor:
    a = tensor(a)
    return _make(a.data * c, (a,), "scale", lambda g: (g * c,))


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = tensor(a)
    old = a.shape
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"reshape#{next(_ids)}", f"cannot reshape {old} to {shape}")
    return _make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def add_scalar(a, c: float) -> Tensor:
    a = tensor(a)
    return _make(a.data + c, (a,), "add_scalar", lambda g: (g,))


def silu(x) -> Tensor:
    x = tensor(x)
    s = 1.0 / (1.0 + np.exp(-x.data))
    return _make(x.data * s, (x,), "silu", lambda g: (g * (s * (1.0 + x.data * (1.0 - s))),))


def relu(x) -> Tensor:
    x = tensor(x)
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.data.dtype), (x,), "relu",
                 lambda g: (g * pos,))


# ---------------------------------------------------------------------------
# reductions


def sum_all(x) -> Tensor:
    x = tensor(x)
    shape = x.shape
    return _make(np.asarray(x.data.sum(dtype=np.float64), x.data.dtype), (x,), "sum",
                 lambda g: (np.broadcast_to(g, shape).astype(g.dtype),))


def sum_squares(x) -> Tensor:
    x = tensor(x)
    d = x.data
    val = np.asarray(np.dot(d.ravel().astype(np.float64), d.ravel().astype(np.float64)), d.dtype)
    return _make(val, (x,), "sum_squares", lambda g: (2.0 * g * d,))


def mean_squares(x) -> Tensor:
    x = tensor(x)
    return scale(sum_squares(x), 1.0 / x.data.size)


def batch_sum_squares(x) -> Tensor:
    """Per-sample sum of squares: ``(B, ...) -> (B,)``."""
    x = tensor(x)
    d = x.data
    axes = tuple(range(1, d.ndim))
    flat = d.reshape(d.shape[0], -1)
    val = np.einsum("ij,ij->i", flat, flat)
    return _make(val, (x,), "batch_sum_squares",
                 lambda g: (2.0 * g.reshape((-1,) + (1,) * len(axes)) * d,))


# ---------------------------------------------------------------------------
# linear algebra and layout


def matmul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul#{next(_ids)}", f"cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad @ bd, (a, b), "matmul", lambda g: (g @ bd.T, ad.T @ g))


def add_channel_bias(x, b) -> Tensor:
    """Add a bias over the last axis: ``(C,)`` for any input, or ``(B, C)`` per sample."""
    x, b = tensor(x), tensor(b)
    B, C = x.shape[0], x.shape[-1]
    lead = tuple(range(x.data.ndim - 1))
    if b.shape == (C,):
        bd = b.data
        back = lambda g: (g, g.sum(axis=lead))
    elif b.shape == (B, C) and x.data.ndim > 2:
        bd = b.data.reshape((B,) + (1,) * (x.data.ndim - 2) + (C,))
        back = lambda g: (g, g.sum(axis=lead[1:]))
    else:
        raise ShapeError(f"add_channel_bias#{next(_ids)}", f"bias {b.shape} vs input {x.shape}")
    return _make(x.data + bd, (x, b), "add_channel_bias", back)


def concat_channels(xs: Sequence) -> Tensor:
    xs = [tensor(x) for x in xs]
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat#{next(_ids)}", f"cannot concat {x.shape} with {xs[0].shape}")
    splits = np.cumsum([x.shape[-1] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=-1), xs, "concat",
                 lambda g: tuple(np.split(g, splits, axis=-1)))


def tile_spatial(v, H: int, W: int) -> Tensor:
    """Broadcast ``(B, E)`` features to a ``(B, H, W, E)`` map."""
    v = tensor(v)
    if v.data.ndim != 2:
        raise ShapeError(f"tile#{next(_ids)}", f"expected (B, E), got {v.shape}")
    out = np.broadcast_to(v.data[:, None, None, :], (v.shape[0], H, W, v.shape[1])).copy()
    return _make(out, (v,), "tile", lambda g: (g.sum(axis=(1, 2)),))


def downsample2(x) -> Tensor:
    """2x2 box downsampling of an NHWC map."""
    x = tensor(x)
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"down#{next(_ids)}", f"odd spatial size {x.shape}")
    out = x.data.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def back(g):
        g4 = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (g4.astype(g.dtype),)

    return _make(out, (x,), "down", back)


def upsample2(x) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NHWC map."""
    x = tensor(x)
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)
    return _make(out, (x,), "up",
                 lambda g: (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),))


# ---------------------------------------------------------------------------
# convolution and normalisation


def conv2d(x, w, b=None) -> Tensor:
    """'Same' convolution. ``x``: (B, H, W, Cin); ``w``: (k, k, Cin, Cout), k odd."""
    x, w = tensor(x), tensor(w)
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[2] != x.shape[3] or w.shape[0] != w.shape[1] \
            or w.shape[0] % 2 == 0:
        raise ShapeError(f"conv#{next(_ids)}", f"input {x.shape} incompatible with kernel {w.shape}")
    B, H, W, Cin = x.shape
    k, Cout = w.shape[0], w.shape[3]
    wd = w.data
    if k == 1:
        out = (x.data.reshape(-1, Cin) @ wd[0, 0]).reshape(B, H, W, Cout)

        def back(g):
            g2 = g.reshape(-1, Cout)
            gx = (g2 @ wd[0, 0].T).reshape(B, H, W, Cin)
            gw = (x.data.reshape(-1, Cin).T @ g2)[None, None]
            return gx, gw
    else:
        p = k // 2
        xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (0, 0)))
        out = np.zeros((B, H, W, Cout), dtype=np.result_type(x.data, wd))
        for i in range(k):
            for j in range(k):
                out += xp[:, i:i + H, j:j + W, :] @ wd[i, j]

        def back(g):
            g2 = g.reshape(-1, Cout)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            gw = np.empty(wd.shape, dtype=np.result_type(g, wd))
            for i in range(k):
                for j in range(k):
                    gxp[:, i:i + H, j:j + W, :] += g @ wd[i, j].T
                    gw[i, j] = xp[:, i:i + H, j:j + W, :].reshape(-1, Cin).T @ g2
            return gxp[:, p:p + H, p:p + W, :], gw
    y = _make(out, (x, w), "conv", back)
    return y if b is None else add_channel_bias(y, b)


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = tensor(x), tensor(gamma), tensor(beta)
    B, H, W, C = x.shape
    if C % groups or gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"group_norm#{next(_ids)}", f"{C} channels, {groups} groups, "
                                                     f"gamma {gamma.shape}")
    cg, n = C // groups, H * W * (C // groups)

    def group_mean(v):
        # per-channel sums are a fast contiguous reduction; fold channels into groups after
        m = v.sum(axis=1).reshape(B, groups, cg).sum(axis=2) / n
        return np.repeat(m, cg, axis=1)[:, None, :]

    xr = x.data.reshape(B, H * W, C)
    xc = xr - group_mean(xr)
    inv = 1.0 / np.sqrt(group_mean(xc * xc) + eps)
    xhat = (xc * inv).reshape(B, H, W, C)
    out = xhat * gamma.data + beta.data

    def back(g):
        dxhat = (g * gamma.data).reshape(B, H * W, C)
        xh = xhat.reshape(B, H * W, C)
        gx = (inv * (dxhat - group_mean(dxhat) - xh * group_mean(dxhat * xh))).reshape(B, H, W, C)
        return gx, (g * xhat).sum(axis=(0, 1, 2)), g.sum(axis=(0, 1, 2))

    return _make(out, (x, gamma, beta), "group_norm", back)


# ---------------------------------------------------------------------------
# graph traversal and differentiation


@dataclass
class ComputeGraph:
    """The recorded sub-graph feeding one output, in topological order."""

    nodes: list[Tensor]
    leaves: list[Tensor] = field(default_factory=list)

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(p.node_id, n.node_id) for n in self.nodes for p in n.parents]


def trace(output: Tensor) -> ComputeGraph:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(output, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    leaves = [n for n in order if not n.parents]
    return ComputeGraph(order, leaves)


def backward(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of the scalar ``output`` with respect to each tensor in ``wrt``."""
    if output.data.shape != ():
        raise UsageError(f"backward needs a scalar output, got shape {output.shape}")
    grads: dict[int, np.ndarray] = {}
    keep = {id(t) for t in wrt}
    if output.requires_grad:
        grads[id(output)] = np.ones((), dtype=output.data.dtype)
        for node in reversed(trace(output).nodes):
            g = grads.get(id(node)) if id(node) in keep else grads.pop(id(node), None)
            if g is None or node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg
    return [np.asarray(grads.get(id(t), np.zeros(t.shape, t.data.dtype)), t.data.dtype)
            .reshape(t.shape) for t in wrt]


def finite_diff_grad(fn: Callable[..., Tensor | float], inputs: Mapping[str, np.ndarray],
                     wrt: str, h: float = 1e-3, indices: Iterable[tuple[int, ...]] | None = None,
                     dtype=np.float64) -> np.ndarray:
    """Central differences ``(f(x+h) - f(x-h)) / 2h`` for the coordinates of ``inputs[wrt]``.

    ``indices`` restricts evaluation to a subset (others are left as NaN).
    Inputs are cast to ``dtype`` (float64 by default) before evaluation.
    """
    if h <= 0:
        raise UsageError("finite-difference step must be positive")
    args = {k: np.array(v, dtype=dtype) for k, v in inputs.items()}
    x = args[wrt]
    out = np.full(x.shape, np.nan) if indices is not None else np.zeros(x.shape)
    idx_iter = indices if indices is not None else np.ndindex(x.shape)

    def value() -> float:
        r = fn(**args)
        return float(r.data) if isinstance(r, Tensor) else float(r)

    for idx in idx_iter:
        orig = x[idx]
        x[idx] = orig + h
        fp = value()
        x[idx] = orig - h
        fm = value()
        x[idx] = orig
        out[idx] = (fp - fm) / (2 * h)
    return out


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class AdamState:
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: dict[str, np.ndarray], grads: Mapping[str, np.ndarray],
                   state: AdamState) -> None:
    """One bias-corrected Adam update, applied to ``params`` in place."""
    if state.lr <= 0:
        raise UsageError("learning rate must be positive")
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise UsageError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)


# ---------------------------------------------------------------------------
# DGCKPT1 checkpoint files

MAGIC = b"DGCKPT1\0"


def save_tensors(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write named float32 tensors in the DGCKPT1 little-endian format."""
    chunks = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise UsageError(f"{path}: not a DGCKPT1 file")
    (count,) = struct.unpack_from("<I", buf, 8)
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<B", buf, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(shape, dtype=np.int64))
        out[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape) \
            .astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise UsageError(f"{path}: trailing bytes after {count} tensors")
    return out
