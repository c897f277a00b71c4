"""Reverse-mode differentiation over float64 numpy arrays.

Every op builds a node that remembers its parents and a closure mapping the
output gradient to parent gradients. ``backward`` walks the graph once in
reverse topological order and then releases it.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

_local = threading.local()


def grad_enabled() -> bool:
    return getattr(_local, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad = False
    try:
        yield
    finally:
        _local.grad = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_released", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = ()
        self._backward = None
        self._released = False
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def backward(self):
        backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __neg__ = lambda self: scale(self, -1.0)
    __matmul__ = lambda self, o: matmul(self, o)
    __getitem__ = lambda self, idx: slice_(self, idx)

    def __truediv__(self, o):
        if isinstance(o, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / o)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op) -> Tensor:
    out = Tensor(data)
    out.op = op
    if grad_enabled() and any(p.requires_grad for p in parents):
        for p in parents:
            if p._released:
                raise RuntimeError("tensor belongs to a graph that was already differentiated")
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
    # size-1 axes only (scalars, per-channel biases, per-item coefficients)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data
    return _node(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return _node(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _node(ad * ad, (a,), lambda g: (2.0 * ad * g,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return _node(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = 0.5 * (1.0 + np.tanh(0.5 * x))
    return _node(x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),), "silu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    shape = a.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def back(g):
        return (np.broadcast_to(np.reshape(g, kept), shape).copy(),)
    return _node(a.data.sum(axis=axes), (a,), back, "sum")


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scale(sum_(a, axis=axes), 1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))
    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def slice_(a, index) -> Tensor:
    """Basic (non-fancy) indexing."""
    a = as_tensor(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)
    return _node(a.data[index], (a,), back, "slice")


def pad2d(a, pad_h: tuple[int, int], pad_w: tuple[int, int]) -> Tensor:
    """Zero pad the last two axes."""
    a = as_tensor(a)
    widths = [(0, 0)] * (a.ndim - 2) + [tuple(pad_h), tuple(pad_w)]
    h, w = a.shape[-2:]
    sl = (..., slice(pad_h[0], pad_h[0] + h), slice(pad_w[0], pad_w[0] + w))
    return _node(np.pad(a.data, widths), (a,), lambda g: (g[sl],), "pad2d")


def conv2d(x, w, b=None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation on ``(N, C, H, W)`` inputs with ``(O, C, kh, kw)`` kernels.

    ``padding`` defaults to ``kh // 2`` (same-size output at stride 1).
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ValueError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    if stride not in (1, 2):
        raise ValueError("conv2d supports stride 1 or 2")
    O, C, kh, kw = w.shape
    N, _, H, W = x.shape
    pad = kh // 2 if padding is None else padding
    Hp, Wp = H + 2 * pad, W + 2 * pad
    Ho, Wo = (Hp - kh) // stride + 1, (Wp - kw) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ValueError("conv2d: kernel larger than padded input")
    # channel-major padded copy; columns laid out (C, kh, kw, N, Ho, Wo) for one GEMM
    xp = np.zeros((C, N, Hp, Wp))
    xp[:, :, pad:pad + H, pad:pad + W] = x.data.transpose(1, 0, 2, 3)
    cols = np.empty((C, kh, kw, N, Ho, Wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    cols = cols.reshape(C * kh * kw, N * Ho * Wo)
    wd = w.data
    out = (wd.reshape(O, -1) @ cols).reshape(O, N, Ho, Wo)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ValueError(f"conv2d: bias shape {b.shape} != ({O},)")
        out += b.data[:, None, None, None]
        parents = (x, w, b)
    out = np.ascontiguousarray(out.transpose(1, 0, 2, 3))

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, -1)
        gw = (g2 @ cols.T).reshape(wd.shape)
        gx = None
        if x.requires_grad:
            gcols = (wd.reshape(O, -1).T @ g2).reshape(C, kh, kw, N, Ho, Wo)
            gxp = np.zeros((C, N, Hp, Wp))
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, i, j]
            gx = gxp[:, :, pad:pad + H, pad:pad + W].transpose(1, 0, 2, 3)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g2.sum(axis=1),)
        return grads
    return _node(out, parents, back, "conv2d")


def conv_transpose2x2(x, w, b=None) -> Tensor:
    """Stride-2, kernel-2 transposed convolution: ``(N, C, H, W) -> (N, O, 2H, 2W)``.

    ``w`` has shape ``(C, O, 2, 2)``; every output pixel sees exactly one input pixel.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[2:] != (2, 2) or x.shape[1] != w.shape[0]:
        raise ValueError(f"conv_transpose2x2: incompatible shapes {x.shape} and {w.shape}")
    N, C, H, W = x.shape
    O = w.shape[1]
    x2 = np.ascontiguousarray(x.data.transpose(1, 0, 2, 3)).reshape(C, -1)
    w2 = w.data.reshape(C, O * 4)
    y = (w2.T @ x2).reshape(O, 2, 2, N, H, W)
    parents = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.shape != (O,):
            raise ValueError(f"conv_transpose2x2: bias shape {b.shape} != ({O},)")
        y += b.data[:, None, None, None, None, None]
        parents = (x, w, b)
    out = np.ascontiguousarray(y.transpose(3, 0, 4, 1, 5, 2)).reshape(N, O, 2 * H, 2 * W)

    def back(g):
        g2 = np.ascontiguousarray(
            g.reshape(N, O, H, 2, W, 2).transpose(1, 3, 5, 0, 2, 4)).reshape(O * 4, -1)
        gw = (x2 @ g2.T).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gx = (w2 @ g2).reshape(C, N, H, W).transpose(1, 0, 2, 3)
        grads = (gx, gw)
        if b is not None:
            grads = grads + (g2.reshape(O, 4, -1).sum(axis=(1, 2)),)
        return grads
    return _node(out, parents, back, "conv_transpose2x2")


def upsample2x(a) -> Tensor:
    """Nearest-neighbour 2x upsampling of the last two axes."""
    a = as_tensor(a)
    out = a.data.repeat(2, axis=-2).repeat(2, axis=-1)
    h, w = a.shape[-2:]

    def back(g):
        g = g.reshape(g.shape[:-2] + (h, 2, w, 2))
        return (g.sum(axis=(-3, -1)),)
    return _node(out, (a,), back, "upsample2x")


class _StopGradTape:
    """Records stop_gradient outputs so finite differences can replay them as constants."""

    def __init__(self):
        self.values = []
        self.replay = False
        self.cursor = 0


def stop_gradient(t) -> Tensor:
    t = as_tensor(t)
    tape = getattr(_local, "sg_tape", None)
    value = t.data
    if tape is not None:
        if tape.replay:
            value = tape.values[tape.cursor]
            tape.cursor += 1
        else:
            tape.values.append(value.copy())
    out = Tensor(value)
    out.op = "stop_gradient"
    return out


def backward(loss: Tensor):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError("backward needs a scalar loss")
    if loss._released:
        raise RuntimeError("backward already called on this graph")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor requiring grad")

    order, seen, stack = [], set(), [(loss, False)]
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

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            grads[key] = pg if key not in grads else grads[key] + pg

    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._released = True


def finite_diff_check(f, inputs, eps: float = 1e-6, max_coords: int | None = None,
                      seed: int = 0, atol: float = 1e-8, order: int = 2) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``f`` maps the tensors in ``inputs`` to a scalar tensor. Outputs of
    ``stop_gradient`` are frozen at their unperturbed values, so they act as
    constants for the numerical derivative too. ``order=4`` uses the five-point
    central stencil, which tolerates a larger ``eps`` and so less roundoff.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps outside [1e-6, 1e-3]")
    inputs = list(inputs)
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    tape = _StopGradTape()
    _local.sg_tape = tape
    try:
        loss = f(*inputs)
        backward(loss)
        analytic = [np.zeros(t.shape) if t.grad is None else t.grad.copy() for t in inputs]
        tape.replay = True

        def value():
            tape.cursor = 0
            with no_grad():
                return float(f(*inputs).data)

        rng = np.random.default_rng(seed)
        worst = 0.0
        for t, ga in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = rng.choice(flat.size, size=max_coords, replace=False)
            for i in coords:
                orig = flat[i]

                def at(h):
                    flat[i] = orig + h
                    return value()

                if order == 2:
                    num = (at(eps) - at(-eps)) / (2.0 * eps)
                else:
                    num = (8.0 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12.0 * eps)
                flat[i] = orig
                a = ga.reshape(-1)[i]
                worst = max(worst, abs(a - num) / max(abs(a), abs(num), atol))
        return worst
    finally:
        _local.sg_tape = None
        for t in inputs:
            t.grad = None
