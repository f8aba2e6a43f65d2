"""Small reverse-mode autodiff over numpy arrays, plus Adam.

Only the operations the codec needs are provided. Every op builds a node that
holds its output array, its parents and a closure mapping the output gradient
to parent gradients. ``Tensor.backward`` walks the graph once in reverse
topological order.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op="leaf"):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if not node._parents:
                node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward, op):
    req = any(p.requires_grad for p in parents)
    if not req:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, _parents=tuple(parents), _backward=backward, op=op)


def parameter(data, dtype=np.float32):
    return Tensor(np.array(data, dtype=dtype), requires_grad=True)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise sum. Shapes must agree exactly."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"sub: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def add_constant(a, const):
    """a + const where const is a plain array; gradient passes straight through."""
    a = _as_tensor(a)
    const = np.asarray(const, dtype=a.dtype)
    if const.shape != a.shape:
        raise DimensionError(f"add_constant: {a.shape} vs {const.shape}")
    return _make(a.data + const, (a,), lambda g: (g,), "add_constant")


def half_tanh(x):
    x = _as_tensor(x)
    t = np.tanh(x.data)
    return _make(0.5 * t, (x,), lambda g: (g * 0.5 * (1.0 - t * t),), "half_tanh")


_GELU_C = float(np.sqrt(2.0 / np.pi))


def gelu(x):
    # tanh approximation
    x = _as_tensor(x)
    d = x.data
    d2 = d * d
    t = np.tanh(_GELU_C * d * (1.0 + 0.044715 * d2))
    out = 0.5 * d * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d2)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make(out, (x,), backward, "gelu")


def activation(x, kind):
    if kind == "half-tanh":
        return half_tanh(x)
    if kind == "gelu":
        return gelu(x)
    raise ValueError(f"unknown activation {kind!r}")


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def sum_all(x):
    x = _as_tensor(x)
    return _make(np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),), "sum")


def mean_all(x):
    x = _as_tensor(x)
    n = x.data.size
    return _make(np.array(x.data.mean()), (x,),
                 lambda g: (np.full(x.shape, g / n, dtype=x.dtype),), "mean")


def mse(pred, target):
    """Mean squared error against a constant target array."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise DimensionError(f"mse: {pred.shape} vs {target.shape}")
    diff = pred.data - target
    n = diff.size
    return _make(np.array(np.mean(diff * diff)), (pred,), lambda g: (g * 2.0 / n * diff,), "mse")


# ---------------------------------------------------------------------------
# structural
# ---------------------------------------------------------------------------

def concat(tensors, axis=-1):
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tensors, backward, "concat")


def avg_pool2d(x, k):
    """Non-overlapping k x k average pooling on a c x H x W tensor."""
    x = _as_tensor(x)
    c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    out = x.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))

    def backward(g):
        up = np.repeat(np.repeat(g, k, axis=1), k, axis=2)
        return (up / (k * k),)

    return _make(out, (x,), backward, "avg_pool2d")


# ---------------------------------------------------------------------------
# dense layers
# ---------------------------------------------------------------------------

def linear(x, weight, bias):
    """x @ weight.T + bias for x of shape (batch, n_in)."""
    x, weight, bias = _as_tensor(x), _as_tensor(weight), _as_tensor(bias)
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError("linear expects 2-d input and weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(f"linear: bias {bias.shape} vs {weight.shape[0]} outputs")
    out = x.data @ weight.data.T + bias.data

    def backward(g):
        return (g @ weight.data, g.T @ x.data, g.sum(axis=0))

    return _make(out, (x, weight, bias), backward, "linear")


def _windows(xp, k, stride, oh, ow):
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    return win[:, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Zero-padded 2-D cross-correlation of a c_in x H x W tensor."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.data.ndim != 3 or kernel.data.ndim != 4:
        raise DimensionError("conv2d expects c x H x W input and c_out x c_in x k x k kernel")
    c_in, h, w = x.shape
    c_out, kc, k, k2 = kernel.shape
    if kc != c_in:
        raise DimensionError(f"conv2d: input has {c_in} channels, kernel expects {kc}")
    if k != k2:
        raise DimensionError("conv2d: kernel must be square")
    if h + 2 * padding < k or w + 2 * padding < k:
        raise DimensionError(f"conv2d: {h}x{w} input too small for k={k}, padding={padding}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    oh = (h + 2 * padding - k) // stride + 1
    ow = (w + 2 * padding - k) // stride + 1
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding))) if padding else x.data
    win = _windows(xp, k, stride, oh, ow)  # c_in, oh, ow, k, k
    out = np.tensordot(kernel.data, win, axes=([1, 2, 3], [0, 3, 4]))
    parents = [x, kernel]
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d: bias {bias.shape} vs {c_out} outputs")
        out = out + bias.data[:, None, None]
        parents.append(bias)

    def backward(g):
        gk = np.tensordot(g, win, axes=([1, 2], [1, 2])) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            span_h = (oh - 1) * stride + 1
            span_w = (ow - 1) * stride + 1
            for i in range(k):
                for j in range(k):
                    contrib = np.tensordot(kernel.data[:, :, i, j], g, axes=([0], [0]))
                    gxp[:, i : i + span_h : stride, j : j + span_w : stride] += contrib
            gx = gxp[:, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gk]
        if bias is not None:
            grads.append(g.sum(axis=(1, 2)))
        return tuple(grads)

    return _make(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------
# lattice gathers
# ---------------------------------------------------------------------------

def gather_corners(plane, r0, r1, c0, c1):
    """Concatenate the features at four lattice corners for a batch of points.

    ``plane`` is c x H x W; index arrays have length N. Output is N x 4c in
    corner order top-left, top-right, bottom-left, bottom-right.
    """
    plane = _as_tensor(plane)
    corners = ((r0, c0), (r0, c1), (r1, c0), (r1, c1))
    out = np.concatenate([plane.data[:, r, c].T for r, c in corners], axis=1)
    nc = plane.shape[0]

    def backward(g):
        gp = np.zeros_like(plane.data)
        for idx, (r, c) in enumerate(corners):
            np.add.at(gp, (slice(None), r, c), g[:, idx * nc : (idx + 1) * nc].T)
        return (gp,)

    return _make(out, (plane,), backward, "gather_corners")


def bilinear_weights(fu, fv):
    """Corner weights (tl, tr, bl, br) for fractional row offset fu and column offset fv."""
    return ((1.0 - fu) * (1.0 - fv), (1.0 - fu) * fv, fu * (1.0 - fv), fu * fv)


def gather_bilinear(plane, r0, r1, c0, c1, fu, fv):
    """Bilinear blend of the four lattice corners for a batch of points -> N x c."""
    plane = _as_tensor(plane)
    dt = plane.dtype
    weights = [np.asarray(wt, dtype=dt)[:, None] for wt in bilinear_weights(np.asarray(fu), np.asarray(fv))]
    corners = ((r0, c0), (r0, c1), (r1, c0), (r1, c1))
    out = None
    for wt, (r, c) in zip(weights, corners):
        term = wt * plane.data[:, r, c].T
        out = term if out is None else out + term

    def backward(g):
        gp = np.zeros_like(plane.data)
        for wt, (r, c) in zip(weights, corners):
            np.add.at(gp, (slice(None), r, c), (wt * g).T)
        return (gp,)

    return _make(out, (plane,), backward, "gather_bilinear")


def bilinear_sample(plane, u, v):
    """Bilinear sample of a c x H x W plane at row ``u``, column ``v``; returns a length-c tensor."""
    plane = _as_tensor(plane)
    _, h, w = plane.shape
    if not (0 <= u <= h - 1 and 0 <= v <= w - 1):
        raise ValueError(f"({u}, {v}) outside lattice {h}x{w}; clamp before sampling")
    r0 = min(int(np.floor(u)), max(h - 2, 0))
    c0 = min(int(np.floor(v)), max(w - 2, 0))
    r1, c1 = min(r0 + 1, h - 1), min(c0 + 1, w - 1)
    out = gather_bilinear(plane, np.array([r0]), np.array([r1]), np.array([c0]), np.array([c1]),
                          np.array([u - r0]), np.array([v - c0]))
    return reshape(out, (plane.shape[0],))


def reshape(x, shape):
    x = _as_tensor(x)
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params, grads, state, lr):
    """One bias-corrected Adam update, in place on ``params`` (dict name -> Tensor).

    Parameters missing from ``grads`` (or with a None gradient) are treated as
    having zero gradient.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise DimensionError(f"adam: gradient {g.shape} vs parameter {name} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if m.shape != p.shape:
            raise DimensionError(f"adam: moment shape {m.shape} vs parameter {name} {p.shape}")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.state = AdamState(beta1=beta1, beta2=beta2, eps=eps)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        grads = {k: p.grad for k, p in self.params.items()}
        adam_step(self.params, grads, self.state, self.lr)


def crop2d(x, row, col, h, w):
    """Window rows row:row+h, cols col:col+w of a c x H x W tensor."""
    x = _as_tensor(x)
    _, H, W = x.shape
    if row < 0 or col < 0 or row + h > H or col + w > W:
        raise DimensionError(f"crop2d: window ({row}, {col}, {h}, {w}) outside {H}x{W}")

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, row : row + h, col : col + w] = g
        return (gx,)

    return _make(x.data[:, row : row + h, col : col + w], (x,), backward, "crop2d")
