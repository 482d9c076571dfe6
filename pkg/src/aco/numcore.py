"""Dense f64 tensors with tape-based reverse-mode differentiation.

Only the handful of ops the ACO networks need are provided. Shapes are
checked explicitly; the only implicit broadcast is scalar-tensor.
``bias_add`` and ``row_scale`` are the explicit per-feature exceptions.

Usage::

    with Tape() as tape:
        loss = mean(square(matmul(x, w)))
    grads = tape.gradient(loss, {"w": w})
"""
from __future__ import annotations

import math
from collections.abc import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-12


class ShapeError(ValueError):
    """Raised when an op receives operands of incompatible shape."""

    def __init__(self, op: str, *shapes):
        shown = ", ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")
        self.op = op
        self.shapes = shapes


class Tensor:
    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of executed ops; nodes are appended in execution order,
    which is a topological order by construction."""

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self) -> int:
        return len(self.nodes)

    def gradient(self, loss: Tensor, leaves):
        """Gradients of scalar ``loss`` w.r.t. ``leaves``.

        ``leaves`` may be a mapping name -> Tensor (a dict of arrays is
        returned) or a sequence of tensors (a list is returned). Leaves the
        loss does not depend on get zeros.
        """
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi
        if isinstance(leaves, Mapping):
            return {
                name: _leaf_grad(grads, t, loss) for name, t in leaves.items()
            }
        return [_leaf_grad(grads, t, loss) for t in leaves]


def _leaf_grad(grads, t: Tensor, loss: Tensor) -> np.ndarray:
    if t is loss:
        return np.ones_like(t.data)
    g = grads.get(id(t))
    return np.zeros_like(t.data) if g is None else g


def backward(tape: Tape, loss: Tensor, params) -> dict | list:
    return tape.gradient(loss, params)


def _record(out_data: np.ndarray, inputs: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=req)
    if req and _ACTIVE:
        _ACTIVE[-1].nodes.append(_Node(out, inputs, vjp))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


# --- elementwise -----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 0:
        return _record(a.data + b.data, (a, b), lambda g: (g, g.sum()))
    if a.data.ndim == 0:
        return _record(a.data + b.data, (a, b), lambda g: (g.sum(), g))
    raise ShapeError("add", a.shape, b.shape)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape == b.shape:
        return _record(a.data - b.data, (a, b), lambda g: (g, -g))
    if b.data.ndim == 0:
        return _record(a.data - b.data, (a, b), lambda g: (g, -g.sum()))
    if a.data.ndim == 0:
        return _record(a.data - b.data, (a, b), lambda g: (g.sum(), -g))
    raise ShapeError("sub", a.shape, b.shape)


def scale(a, c: float) -> Tensor:
    """Scalar multiplication by a python constant."""
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and a.data.ndim and b.data.ndim:
        raise ShapeError("mul", a.shape, b.shape)
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g * bd
        gb = g * ad
        if ad.ndim == 0 and bd.ndim:
            ga = ga.sum()
        if bd.ndim == 0 and ad.ndim:
            gb = gb.sum()
        return ga, gb

    return _record(ad * bd, (a, b), vjp)


def bias_add(x, b) -> Tensor:
    """Add a per-feature vector ``b`` of shape ``x.shape[-1:]``."""
    x, b = as_tensor(x), as_tensor(b)
    if b.data.ndim != 1 or x.data.ndim < 1 or x.shape[-1] != b.shape[0]:
        raise ShapeError("bias_add", x.shape, b.shape)
    axes = tuple(range(x.data.ndim - 1))
    return _record(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=axes)))


def row_scale(x, s) -> Tensor:
    """Multiply every row of ``x`` elementwise by the per-feature vector ``s``."""
    x, s = as_tensor(x), as_tensor(s)
    if s.data.ndim != 1 or x.data.ndim < 1 or x.shape[-1] != s.shape[0]:
        raise ShapeError("row_scale", x.shape, s.shape)
    xd, sd = x.data, s.data
    axes = tuple(range(xd.ndim - 1))
    return _record(xd * sd, (x, s), lambda g: (g * sd, (g * xd).sum(axis=axes)))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(y, (x,), lambda g: (g * y * (1.0 - y),))


def abs_(x) -> Tensor:
    x = as_tensor(x)
    sgn = np.sign(x.data)
    return _record(np.abs(x.data), (x,), lambda g: (g * sgn,))


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,))


# --- reductions ------------------------------------------------------------

def _expand(g: np.ndarray, shape, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    return np.broadcast_to(np.expand_dims(g, axis), shape)


def sum_(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return _record(x.data.sum(axis=axis), (x,), lambda g: (_expand(g, shape, axis).copy(),))


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    n = x.data.size if axis is None else shape[axis]
    return _record(
        x.data.mean(axis=axis), (x,), lambda g: (_expand(g, shape, axis) / n,)
    )


def dot(a, b) -> Tensor:
    """Full inner product of two same-shape tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("dot", a, b)
    ad, bd = a.data, b.data
    return _record(np.asarray(np.sum(ad * bd)), (a, b), lambda g: (g * bd, g * ad))


def l2_normalize(x, axis: int = -1) -> Tensor:
    """x / max(||x||, eps): exactly unit norm unless the vector is ~0."""
    x = as_tensor(x)
    xd = x.data
    raw = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))
    small = raw < NORM_EPS
    norm = np.where(small, NORM_EPS, raw)
    y = xd / norm

    def vjp(g):
        proj = np.where(small, 0.0, np.sum(g * y, axis=axis, keepdims=True))
        return ((g - y * proj) / norm,)

    return _record(y, (x,), vjp)


def log_sum_exp(x, axis: int = -1, mask=None) -> Tensor:
    """Stable log(sum(exp(x))) along ``axis``.

    With a boolean ``mask`` of x's shape only masked-in entries take part.
    A slice with no masked-in entry yields -inf with zero gradient.
    """
    x = as_tensor(x)
    xd = x.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != xd.shape:
            raise ShapeError("log_sum_exp", xd.shape, mask.shape)
        xm = np.where(mask, xd, -np.inf)
    else:
        xm = xd
    m = np.max(xm, axis=axis, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(xm - m_safe)
    s = np.sum(e, axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out = np.log(s) + m_safe
    w = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def vjp(g):
        return (np.expand_dims(g, axis) * w,)

    return _record(np.squeeze(out, axis=axis), (x,), vjp)


# --- structure -------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        y = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError("reshape", old, tuple(shape)) from None
    return _record(y, (x,), lambda g: (g.reshape(old),))


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose", x.shape)
    return _record(x.data.T.copy(), (x,), lambda g: (g.T,))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    if not ts:
        raise ValueError("concat needs at least one tensor")
    ref = ts[0].shape
    nd = len(ref)
    ax = axis % nd if nd else 0
    for t in ts[1:]:
        s = t.shape
        if len(s) != nd or any(s[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError("concat", *(t.shape for t in ts))
    sizes = [t.shape[ax] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in ts], axis=ax),
        ts,
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def take_rows(x, idx) -> Tensor:
    """Select rows of ``x`` (first axis) by integer index."""
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def vjp(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _record(x.data[idx], (x,), vjp)


def batch_standardize(x, eps: float = 1e-5) -> Tensor:
    """Per-feature (x - mean) / sqrt(var + eps) using statistics of the batch (axis 0)."""
    x = as_tensor(x)
    xd = x.data
    if xd.ndim != 2:
        raise ShapeError("batch_standardize", x.shape)
    n = xd.shape[0]
    mu = xd.mean(axis=0)
    xc = xd - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv

    def vjp(g):
        return (inv / n * (n * g - g.sum(axis=0) - y * (g * y).sum(axis=0)),)

    return _record(y, (x,), vjp)


# --- convolution -------------------------------------------------------------

def _conv_out(size: int, stride: int) -> int:
    return (size + 2 - 3) // stride + 1


def conv2d(x, w, b=None, stride: int = 1) -> Tensor:
    """3x3 convolution, zero padding 1, NHWC input, weights (3, 3, C_in, C_out)."""
    x, w = as_tensor(x), as_tensor(w)
    if stride not in (1, 2):
        raise ShapeError("conv2d", x.shape, w.shape)
    if x.data.ndim != 4 or w.data.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError("conv2d", x.shape, w.shape)
    B, H, W, C = x.shape
    O = w.shape[3]
    Ho, Wo = _conv_out(H, stride), _conv_out(W, stride)
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    span_h, span_w = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
    cols = np.empty((B, Ho, Wo, 9, C))
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, :, :, k, :] = xp[:, i:i + span_h:stride, j:j + span_w:stride, :]
    cols = cols.reshape(B * Ho * Wo, 9 * C)
    wm = w.data.reshape(9 * C, O)
    out = (cols @ wm).reshape(B, Ho, Wo, O)
    inputs: tuple[Tensor, ...] = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ShapeError("conv2d", x.shape, w.shape, b.shape)
        out = out + b.data
        inputs = (x, w, b)

    def vjp(g):
        gm = g.reshape(B * Ho * Wo, O)
        gw = (cols.T @ gm).reshape(w.shape)
        gx = None
        if x.requires_grad:  # input images need no gradient
            gcols = (gm @ wm.T).reshape(B, Ho, Wo, 9, C)
            gxp = np.zeros_like(xp)
            for k in range(9):
                i, j = divmod(k, 3)
                gxp[:, i:i + span_h:stride, j:j + span_w:stride, :] += gcols[:, :, :, k, :]
            gx = gxp[:, 1:H + 1, 1:W + 1, :]
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=0)

    return _record(out, inputs, vjp)


def upsample2x(x) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NHWC tensor."""
    x = as_tensor(x)
    if x.data.ndim != 4:
        raise ShapeError("upsample2x", x.shape)
    B, H, W, C = x.shape
    y = x.data.repeat(2, axis=1).repeat(2, axis=2)
    return _record(
        y, (x,), lambda g: (g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4)),)
    )


# --- parameters and optimisation -------------------------------------------

class ParamSet(dict):
    """Ordered name -> Tensor map. Iteration order is insertion order."""

    def clone(self, requires_grad: bool | None = None) -> "ParamSet":
        out = ParamSet()
        for k, t in self.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[k] = Tensor(t.data.copy(), requires_grad=rg)
        return out

    def aligned(self, other: Mapping[str, Tensor]) -> bool:
        return list(self.keys()) == list(other.keys()) and all(
            self[k].shape == other[k].shape for k in self
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.items()}

    def subset(self, prefix: str) -> "ParamSet":
        return ParamSet((k, t) for k, t in self.items() if k.startswith(prefix))


def kaiming_normal(shape: Sequence[int], fan_in: int, rng: np.random.Generator,
                   requires_grad: bool = True) -> Tensor:
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    std = math.sqrt(2.0 / fan_in)
    return Tensor(rng.normal(0.0, std, size=tuple(shape)), requires_grad=requires_grad)


def constant(shape: Sequence[int], value: float, requires_grad: bool = True) -> Tensor:
    return Tensor(np.full(tuple(shape), float(value)), requires_grad=requires_grad)


def sgd_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], lr: float,
             weight_decay: float = 0.0, momentum: float = 0.0,
             buffers: dict[str, np.ndarray] | None = None) -> Mapping[str, Tensor]:
    """SGD with a heavy-ball momentum buffer; weight decay is added to the
    gradient before accumulation. Parameters are updated in place."""
    for name, p in params.items():
        g = grads.get(name)
        d = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=DTYPE)
        if weight_decay:
            d = d + weight_decay * p.data
        if momentum:
            if buffers is None:
                raise ValueError("momentum > 0 needs a buffers dict")
            buf = buffers.get(name)
            buf = d.copy() if buf is None else momentum * buf + d
            buffers[name] = buf
            d = buf
        p.data = p.data - lr * d
    return params


class SGD:
    def __init__(self, params: Mapping[str, Tensor], lr: float, momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: dict[str, np.ndarray] = {}

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        sgd_step(self.params, grads, self.lr if lr is None else lr,
                 self.weight_decay, self.momentum, self.buffers)


class Adam:
    """Adam with L2 weight decay folded into the gradient (torch.optim.Adam semantics)."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: Mapping[str, np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            g = np.zeros_like(p.data) if g is None else g
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data = p.data - lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    if total_steps <= 1:
        return base_lr
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * step / total_steps))


# --- gradient checking -------------------------------------------------------

def finite_diff_check(fn: Callable[[Tensor], Tensor], point, step: float = 1e-6) -> float:
    """Max relative error between tape gradient and central differences.

    ``fn`` maps a Tensor to a scalar Tensor.
    """
    x0 = np.array(point, dtype=DTYPE)
    x = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        y = fn(x)
    analytic = tape.gradient(y, [x])[0]
    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += step
        xm[i] -= step
        fp = fn(Tensor(xp.reshape(x0.shape))).item()
        fm = fn(Tensor(xm.reshape(x0.shape))).item()
        numeric[i] = (fp - fm) / (2.0 * step)
    err = np.abs(analytic.reshape(-1) - numeric) / (np.abs(numeric) + 1e-12)
    return float(err.max()) if err.size else 0.0


def iter_params(*sets: Mapping[str, Tensor]) -> Iterable[Tensor]:
    for s in sets:
        yield from s.values()
