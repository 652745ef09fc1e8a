"""A small reverse-mode autodiff substrate for convolutional networks.

Arrays flowing through the networks are channels-last (N, H, W, C); the
public network entry points accept and return N, C, H, W and transpose once.
Convolution weights are stored as (k, k, C_in, C_out).

Every op takes ``Var`` inputs, computes its value eagerly with numpy and
records a closure that maps the output gradient to input gradients.
``backward`` walks the recorded graph in reverse topological order.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None):
        self.value = value
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, dtype={self.value.dtype})"


class ParamTensor(Var):
    __slots__ = ("name",)

    def __init__(self, name: str, value: np.ndarray):
        super().__init__(value, requires_grad=True)
        self.name = name

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"ParamTensor({self.name!r}, shape={self.value.shape})"


def const(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x), requires_grad=False)


def backward(out: Var, grad=None) -> None:
    """Accumulate d(out)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if grad is None:
        grad = np.ones_like(out.value)
    order: list[Var] = []
    seen: set[int] = set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(out): grad}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------------------
# ops


def _im2col(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, H, W, C) -> (N*Ho*Wo, k*k*C) patches of the zero-padded input."""
    n, h, w, c = x.shape
    if k == 1:
        xs = x[:, ::stride, ::stride, :] if stride == 2 else x
        return np.ascontiguousarray(xs).reshape(-1, c)
    p = k // 2
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=x.dtype)
    xp[:, p:p + h, p:p + w, :] = x
    ho, wo = -(-h // stride), -(-w // stride)
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp, (n, ho, wo, k, k, c), (s0, stride * s1, stride * s2, s1, s2, s3), writeable=False
    )
    return win.reshape(-1, k * k * c)


def conv2d(x: Var, w: Var, b: Var | None = None, stride: int = 1) -> Var:
    """Same-padded (zero) 2-D convolution, channels-last, odd square kernel.

    With stride 2 the output has ceil(H/2) x ceil(W/2) positions, sampled at
    even input coordinates.
    """
    xv, wv = x.value, w.value
    k, k2, cin, cout = wv.shape
    if k != k2 or k % 2 == 0:
        raise ValueError(f"kernel must be odd and square, got {k}x{k2}")
    if xv.shape[-1] != cin:
        raise ValueError(f"channel mismatch: input has {xv.shape[-1]}, weights expect {cin}")
    if stride not in (1, 2):
        raise ValueError("stride must be 1 or 2")
    n, h, wd, _ = xv.shape
    ho, wo = -(-h // stride), -(-wd // stride)

    cols = _im2col(xv, k, stride)
    wmat = wv.reshape(k * k * cin, cout)
    out = cols @ wmat
    if b is not None:
        out += b.value
    out = out.reshape(n, ho, wo, cout)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols.T @ g2).reshape(wv.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if (b is not None and b.requires_grad) else None
        gx = None
        if x.requires_grad:
            if stride == 2:
                # scatter g back onto the even input coordinates it was sampled at
                gd = np.zeros((n, h, wd, cout), dtype=g.dtype)
                gd[:, ::2, ::2, :] = g
                g = gd
            # correlation with the spatially flipped, in/out-swapped kernel
            wflip = wv[::-1, ::-1].transpose(0, 1, 3, 2).reshape(k * k * cout, cin)
            gx = (_im2col(g, k, 1) @ wflip).reshape(n, h, wd, cin)
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return Var(out, parents, bw)


def upsample_nearest(x: Var, factor: int = 2) -> Var:
    if factor != 2:
        raise ValueError("only factor 2 is supported")
    n, h, w, c = x.value.shape
    out = np.broadcast_to(x.value[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def bw(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return Var(out, (x,), bw)


def avg_pool2(x: Var) -> Var:
    """2x2 average with stride 2; spatial dims must be even."""
    n, h, w, c = x.value.shape
    if h % 2 or w % 2:
        raise ValueError(f"avg_pool2 needs even spatial dims, got {h}x{w}")
    out = x.value.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def bw(g):
        g4 = np.broadcast_to(g[:, :, None, :, None, :] / 4.0, (n, h // 2, 2, w // 2, 2, c))
        return (g4.reshape(n, h, w, c),)

    return Var(out, (x,), bw)


def silu(x: Var) -> Var:
    xv = x.value
    s = expit(xv)
    out = xv * s

    def bw(g):
        return (g * (s * (1.0 + xv * (1.0 - s))),)

    return Var(out, (x,), bw)


def leaky_relu(x: Var, slope: float = 0.2) -> Var:
    xv = x.value
    scale = np.where(xv >= 0, 1.0, slope).astype(xv.dtype)
    out = xv * scale

    def bw(g):
        return (g * scale,)

    return Var(out, (x,), bw)


def add(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Var(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    if a.value.shape != b.value.shape:
        raise ValueError(f"shape mismatch: {a.value.shape} vs {b.value.shape}")
    return Var(a.value - b.value, (a, b), lambda g: (g, -g))


def scale(x: Var, s) -> Var:
    """Multiply by a constant (scalar or broadcastable array, no gradient)."""
    s = np.asarray(s, dtype=x.value.dtype)
    return Var(x.value * s, (x,), lambda g: (g * s,))


def concat(xs: list[Var], axis: int = -1) -> Var:
    sizes = [v.value.shape[axis] for v in xs]
    out = np.concatenate([v.value for v in xs], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Var(out, tuple(xs), bw)


def reflect_pad(x: Var, pad_h: int, pad_w: int) -> Var:
    """Reflect-pad at the bottom/right edge of a channels-last tensor."""
    n, h, w, c = x.value.shape
    if pad_h == 0 and pad_w == 0:
        return x
    ih = np.pad(np.arange(h), (0, pad_h), mode="reflect") if h > 1 else np.zeros(h + pad_h, dtype=int)
    iw = np.pad(np.arange(w), (0, pad_w), mode="reflect") if w > 1 else np.zeros(w + pad_w, dtype=int)
    out = x.value[:, ih][:, :, iw]

    def bw(g):
        gw_ = np.zeros((n, h + pad_h, w, c), dtype=g.dtype)
        np.add.at(gw_, (slice(None), slice(None), iw), g)
        gh = np.zeros((n, h, w, c), dtype=g.dtype)
        np.add.at(gh, (slice(None), ih), gw_)
        return (gh,)

    return Var(out, (x,), bw)


def crop(x: Var, h: int, w: int) -> Var:
    n, hh, ww, c = x.value.shape
    if (hh, ww) == (h, w):
        return x

    def bw(g):
        out = np.zeros((n, hh, ww, c), dtype=g.dtype)
        out[:, :h, :w, :] = g
        return (out,)

    return Var(x.value[:, :h, :w, :], (x,), bw)


def l1_mean(a: Var, target: np.ndarray) -> Var:
    """mean |target - a| as a scalar Var."""
    diff = target - a.value
    n = diff.size

    def bw(g):
        return (-np.sign(diff) * (g / n),)

    return Var(np.asarray(np.mean(np.abs(diff))), (a,), bw)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class ParamStore:
    params: "OrderedDict[str, ParamTensor]" = field(default_factory=OrderedDict)
    ema: "OrderedDict[str, np.ndarray] | None" = None

    def add(self, name: str, value: np.ndarray) -> ParamTensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = ParamTensor(name, value)
        self.params[name] = p
        return p

    def __getitem__(self, name: str) -> ParamTensor:
        return self.params[name]

    def __iter__(self):
        return iter(self.params.values())

    def __len__(self):
        return len(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def count(self) -> int:
        return int(sum(p.value.size for p in self))

    def zero_grad(self) -> None:
        for p in self:
            p.grad = None

    def init_ema(self) -> None:
        self.ema = OrderedDict((n, p.value.copy()) for n, p in self.params.items())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.value) for n, p in self.params.items())

    def load_state(self, values: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            if values[n].shape != p.value.shape:
                raise ValueError(f"shape mismatch for {n}: {values[n].shape} vs {p.value.shape}")
            p.value = np.array(values[n], dtype=p.value.dtype)

    def astype(self, dtype) -> None:
        for p in self:
            p.value = p.value.astype(dtype)
        if self.ema is not None:
            for n in self.ema:
                self.ema[n] = self.ema[n].astype(dtype)

    def swap_ema(self) -> None:
        """Exchange raw and EMA values in place (call twice to undo)."""
        if self.ema is None:
            raise RuntimeError("no EMA shadow to swap in")
        for n, p in self.params.items():
            p.value, self.ema[n] = self.ema[n], p.value


def conv_init(rng: np.random.Generator, k: int, cin: int, cout: int, dtype=np.float32) -> np.ndarray:
    # variance scaling on fan-in, uniform
    limit = np.sqrt(3.0 / (k * k * cin))
    return rng.uniform(-limit, limit, size=(k, k, cin, cout)).astype(dtype)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def ok(self) -> bool:
        return all(e < self.tolerance for e in self.errors.values())

    def failures(self) -> list[str]:
        return [n for n, e in self.errors.items() if not e < self.tolerance]

    def __str__(self):
        lines = [f"{'PASS' if e < self.tolerance else 'FAIL'} {n}: max rel err {e:.3e}"
                 for n, e in self.errors.items()]
        return "\n".join(lines)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max abs difference scaled by the larger of the two gradients' max magnitude."""
    scale_ = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0))
    if scale_ == 0.0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale_)


def gradcheck(
    fn: Callable[[], Var],
    wrt: dict[str, Var],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_entries: int | None = 48,
    seed: int = 0,
) -> GradReport:
    """Compare analytic gradients of ``sum(fn() * probe)`` with central differences.

    ``wrt`` maps names to leaves (inputs or ``ParamTensor``) that ``fn``
    reads; they are perturbed in place, so they should hold float64 values.
    A fixed random probe makes the scalar objective depend on every output
    element. With ``max_entries`` set, each tensor is checked on a random
    subset of its coordinates.
    """
    rng = np.random.default_rng(seed)
    for v in wrt.values():
        v.grad = None
        v.requires_grad = True
    out = fn()
    probe = rng.standard_normal(out.value.shape)
    backward(out, probe)
    analytic = {n: (v.grad if v.grad is not None else np.zeros_like(v.value)) for n, v in wrt.items()}

    errors = {}
    for name, v in wrt.items():
        flat = v.value.reshape(-1)
        if not np.shares_memory(flat, v.value):
            raise ValueError(f"{name} must be contiguous to perturb in place")
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        numeric = np.empty(len(idx))
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(np.sum(fn().value * probe))
            flat[i] = orig - h
            fm = float(np.sum(fn().value * probe))
            flat[i] = orig
            numeric[j] = (fp - fm) / (2 * h)
        errors[name] = rel_error(analytic[name].reshape(-1)[idx], numeric)
    return GradReport(errors, tolerance)


def leaf(x, dtype=np.float64) -> Var:
    """A gradient-requiring leaf holding a contiguous copy of ``x``."""
    return Var(np.array(x, dtype=dtype), requires_grad=True)
