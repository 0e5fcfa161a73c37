"""Minimal reverse-mode autodiff over dense numpy arrays.

Every differentiable operation records its inputs and a backward closure on
the output tensor; ``Tensor.backward`` replays that tape in reverse
topological order.  The op set is intentionally small: exactly what a
dual-branch detection/fusion network and its losses need.  Row-major float64
throughout; no GPU, no graph rewriting.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when an operation receives dimensionally inconsistent inputs."""


class GraphError(RuntimeError):
    """Raised when backward is requested on a tensor with no recorded graph."""


class Tensor:
    """A dense array plus optional gradient and tape bookkeeping.

    ``requires_grad`` marks leaves (parameters) whose ``grad`` should be
    populated by backward.  Interior nodes carry ``_parents`` and a
    ``_backward`` closure recorded by the op that produced them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self):
        """Reset grad to zeros; backward then accumulates into it.

        Parameters that never participate in a recorded forward keep the
        zero gradient, which is the documented contract for optimizers.
        """
        self.grad = np.zeros_like(self.data)

    def backward(self):
        """Accumulate dself/dparam into every reachable leaf's ``grad``."""
        if self._backward is None:
            raise GraphError(
                "backward called on a tensor that is not the output of a "
                "recorded computation"
            )
        if self.data.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {self.data.shape}")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                if node.grad is None:
                    node.grad = g.copy()
                else:
                    node.grad += g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None:
                    continue
                acc = grads.get(id(parent))
                if acc is None:
                    # identity-passing ops hand back g itself or a view of it;
                    # copy before storing so later accumulation cannot alias
                    if pg is g or not pg.flags.owndata:
                        pg = pg.copy()
                    grads[id(parent)] = pg
                else:
                    acc += pg

    # -- operator sugar -------------------------------------------------

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return mul(self, _as_tensor(-1.0))

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 else shape[0])

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents, backward) -> Tensor:
    out = Tensor(data)
    out._parents = tuple(parents)
    out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient over axes that were broadcast in the forward pass."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(data, (a, b), backward)


def sub(a: Tensor, b: Tensor) -> Tensor:
    data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(data, (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    data = a.data * b.data

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        )

    return _make(data, (a, b), backward)


def div(a: Tensor, b: Tensor) -> Tensor:
    data = a.data / b.data

    def backward(g):
        return (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        )

    return _make(data, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; batched when operands carry leading axes."""
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul needs >=2-D operands, got {a.data.shape} @ {b.data.shape}")
    data = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(data, (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise a**exponent for a constant exponent."""
    data = a.data**exponent

    def backward(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _make(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _make(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _make(data, (a,), backward)


def absolute(a: Tensor) -> Tensor:
    """|a|, with subgradient 0 at the origin."""
    data = np.abs(a.data)

    def backward(g):
        return (g * np.sign(a.data),)

    return _make(data, (a,), backward)


# -- reductions / shape -------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g
        if not keepdims:
            gg = np.expand_dims(gg, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(data, (a,), backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    elif isinstance(axis, tuple):
        n = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        n = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), _as_tensor(1.0 / n))


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward(g):
        return (g.reshape(a.data.shape),)

    return _make(data, (a,), backward)


def transpose(a: Tensor, axes) -> Tensor:
    data = a.data.transpose(axes)
    inv = np.argsort(axes)

    def backward(g):
        return (g.transpose(inv),)

    return _make(data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate along ``axis``; gradient splits back at the seams."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat of an empty tensor list")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        slc = [slice(None)] * g.ndim
        outs = []
        for i in range(len(sizes)):
            slc[axis] = slice(offsets[i], offsets[i + 1])
            outs.append(g[tuple(slc)])
        return tuple(outs)

    return _make(data, tuple(tensors), backward)


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """Select rows of a 2-D (or higher) tensor along axis 0."""
    index = np.asarray(index, dtype=np.intp)
    data = a.data[index]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(data, (a,), backward)


# -- activations --------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _make(data, (a,), backward)


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    # never exponentiates a positive argument
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    data = _sigmoid_stable(a.data)

    def backward(g):
        return (g * data * (1.0 - data),)

    return _make(data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """log(1 + exp(a)) without overflow; used by the stable loss forms."""
    x = a.data
    data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def backward(g):
        return (g * _sigmoid_stable(x),)

    return _make(data, (a,), backward)


def hardswish(a: Tensor) -> Tensor:
    """x * clip(x + 3, 0, 6) / 6, the MobileNetV3 activation."""
    x = a.data
    inner = np.clip(x + 3.0, 0.0, 6.0)
    data = x * inner / 6.0

    def backward(g):
        d = np.where(x <= -3.0, 0.0, np.where(x >= 3.0, 1.0, (2.0 * x + 3.0) / 6.0))
        return (g * d,)

    return _make(data, (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    if a.data.shape[axis] == 0:
        raise ShapeError(f"softmax over an empty axis {axis} of shape {a.data.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        s = data
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _make(data, (a,), backward)


# -- convolutions -------------------------------------------------------


def _conv2d_check(x: np.ndarray, w: np.ndarray, stride, padding, groups):
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape} and {w.shape}")
    b, c_in, h, wd = x.shape
    c_out, c_in_g, kh, kw = w.shape
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"invalid stride {stride} / padding {padding}")
    if c_in_g * groups != c_in or c_out % groups != 0:
        raise ShapeError(
            f"channel mismatch: input has {c_in} channels, weight expects "
            f"{c_in_g}*groups={c_in_g * groups} (groups={groups}, c_out={c_out})"
        )
    if h + 2 * ph < kh or wd + 2 * pw < kw:
        raise ShapeError(f"kernel ({kh},{kw}) larger than padded input ({h + 2 * ph},{wd + 2 * pw})")


def _pad2d(x, ph, pw):
    if ph == 0 and pw == 0:
        return x
    b, c, h, w = x.shape
    out = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    out[:, :, ph : ph + h, pw : pw + w] = x
    return out


def _im2col(xp, kh, kw, sh, sw):
    b, c, hp, wp = xp.shape
    ho = (hp - kh) // sh + 1
    wo = (wp - kw) // sw + 1
    sb, sc, s_h, s_w = xp.strides
    cols = np.lib.stride_tricks.as_strided(
        xp, (b, c, kh, kw, ho, wo), (sb, sc, s_h, s_w, sh * s_h, sw * s_w), writeable=False
    )
    return cols, ho, wo


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride=(1, 1), padding=(0, 0), groups: int = 1) -> Tensor:
    """2-D convolution (cross-correlation) with symmetric zero padding.

    ``groups == in_channels`` gives the depthwise case.  Output extent per
    axis is floor((in + 2*pad - kernel)/stride) + 1.
    """
    stride = (stride, stride) if isinstance(stride, int) else tuple(stride)
    padding = (padding, padding) if isinstance(padding, int) else tuple(padding)
    _conv2d_check(x.data, w.data, stride, padding, groups)
    bsz, c_in, _, _ = x.data.shape
    c_out, c_in_g, kh, kw = w.data.shape
    sh, sw = stride
    ph, pw = padding

    xp = _pad2d(x.data, ph, pw)
    cols, ho, wo = _im2col(xp, kh, kw, sh, sw)
    # (B, g, Cin/g*kh*kw, Ho*Wo)
    cols_m = cols.reshape(bsz, groups, c_in_g * kh * kw, ho * wo)
    w_m = w.data.reshape(groups, c_out // groups, c_in_g * kh * kw)
    out = np.matmul(w_m[None], cols_m).reshape(bsz, c_out, ho, wo)
    if b is not None:
        out = out + b.data.reshape(1, c_out, 1, 1)

    def backward(g):
        gm = g.reshape(bsz, groups, c_out // groups, ho * wo)
        gw = np.matmul(gm, cols_m.transpose(0, 1, 3, 2)).sum(axis=0).reshape(w.data.shape)
        gcols = np.matmul(w_m.transpose(0, 2, 1)[None], gm)
        gcols = gcols.reshape(bsz, c_in, kh, kw, ho, wo)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + sh * ho : sh, j : j + sw * wo : sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph : ph + x.data.shape[2], pw : pw + x.data.shape[3]]
        if b is not None:
            gb = g.sum(axis=(0, 2, 3))
            return gx, gw, gb
        return gx, gw

    parents = (x, w) if b is None else (x, w, b)
    return _make(out, parents, backward)


def conv1d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """1-D convolution over NCT input; the time axis is treated as width."""
    if x.data.ndim != 3 or w.data.ndim != 3:
        raise ShapeError(f"conv1d expects NCT input and OIK weight, got {x.data.shape} and {w.data.shape}")
    if w.data.shape[1] * groups != x.data.shape[1]:
        raise ShapeError(
            f"channel mismatch: input has {x.data.shape[1]} channels, weight expects "
            f"{w.data.shape[1]}*groups={w.data.shape[1] * groups}"
        )
    x4 = reshape(x, (x.data.shape[0], x.data.shape[1], 1, x.data.shape[2]))
    w4 = reshape(w, (w.data.shape[0], w.data.shape[1], 1, w.data.shape[2]))
    out = conv2d(x4, w4, b, stride=(1, stride), padding=(0, padding), groups=groups)
    return reshape(out, (out.data.shape[0], out.data.shape[1], out.data.shape[3]))


# -- pooling ------------------------------------------------------------


def global_avg_pool2d(x: Tensor) -> Tensor:
    """NCHW -> NC mean over the spatial axes."""
    return tmean(x, axis=(2, 3))


def global_avg_pool1d(x: Tensor) -> Tensor:
    """NCT -> NC mean over time."""
    return tmean(x, axis=(2,))
