"""Dense tensors with reverse-mode automatic differentiation on numpy arrays.

The engine is deliberately small. A :class:`Tensor` wraps a contiguous
ndarray; when an operation involves at least one tensor that requires
gradients, the result remembers its parent tensors and a backward closure.
:func:`backward` walks the recorded graph once in reverse topological order
and accumulates gradients into ``.grad``.

Conventions
-----------
* float32 is the working precision. Ops preserve the dtype of their inputs,
  so float64 parameters/inputs give a float64 graph end to end (this is what
  makes finite-difference checks meaningful).
* Gradients accumulate across ``backward()`` calls on leaf tensors; training
  loops zero them explicitly with :func:`zero_grads`. Gradients of derived
  (non-leaf) tensors are reset at the start of every backward pass.
* Convolution is computed by patch-unrolling (``im2col``) into a matrix
  product so the same matmul kernel family serves dense, masked, and
  compressed execution.
* Masked ``conv2d``/``linear`` follow the straight-through convention: the
  forward uses ``weight * mask`` but the weight gradient is *not* multiplied
  by the mask, so pruned positions keep receiving the task gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, MaskError, ShapeError

DEFAULT_DTYPE = np.float32


def _as_array(x, ref_dtype=None):
    if isinstance(x, Tensor):
        return x.data
    a = np.asarray(x)
    if a.dtype.kind not in "fiu":
        raise ContractError(f"unsupported dtype {a.dtype}")
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(ref_dtype if ref_dtype is not None else DEFAULT_DTYPE)
    return a


class Tensor:
    """A dense n-dimensional array with an optional gradient.

    ``data`` is always C-contiguous; ``grad`` (once populated) has the same
    shape and dtype as ``data``.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        a = np.asarray(data)
        if dtype is not None:
            a = a.astype(dtype, copy=False)
        elif a.dtype not in (np.float32, np.float64):
            a = a.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(a)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents: tuple = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """A view of the same data cut off from the graph."""
        return Tensor(self.data, requires_grad=False)

    def is_leaf(self) -> bool:
        return not self._parents

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    # -- operators -----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _wrap(other, self))

    def __rsub__(self, other):
        return sub(_wrap(other, self), self)

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __rtruediv__(self, other):
        return div(_wrap(other, self), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _wrap(other, self))

    def backward(self):
        backward(self)


def _wrap(x, ref: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=ref.data.dtype))


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.ascontiguousarray(g, dtype=t.data.dtype)
    else:
        t.grad = t.grad + g.astype(t.data.dtype, copy=False)


def _make(data, parents, backward_fn) -> Tensor:
    """Build an op result; the graph is only recorded if a parent needs it."""
    rg = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# graph traversal and backward
# ---------------------------------------------------------------------------


def graph_nodes(root: Tensor) -> list:
    """Topologically ordered node list of the compute graph below ``root``.

    Parents always appear before the nodes that consume them; ``backward``
    visits the exact reverse of this order.
    """
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Reverse-mode gradient accumulation from a scalar loss.

    Leaf gradients accumulate across calls (training loops zero them
    explicitly); gradients of derived nodes are reset per call.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    order = graph_nodes(loss)
    for node in order:
        if node._parents:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


# ---------------------------------------------------------------------------
# elementwise and reduction ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _make(a.data + b.data, (a, b), bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _make(a.data - b.data, (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g * b.data, a.shape))
        _accum(b, _unbroadcast(g * a.data, b.shape))

    return _make(a.data * b.data, (a, b), bw)


def div(a: Tensor, b: Tensor) -> Tensor:
    def bw(g):
        _accum(a, _unbroadcast(g / b.data, a.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(a.data / b.data, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: _accum(a, -g))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0

    def bw(g):
        _accum(a, g * keep)

    return _make(np.maximum(a.data, 0), (a,), bw)


def absolute(a: Tensor) -> Tensor:
    sign = np.sign(a.data)

    def bw(g):
        _accum(a, g * sign)

    return _make(np.abs(a.data), (a,), bw)


def log(a: Tensor) -> Tensor:
    def bw(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bw)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    keep = a.data > lo

    def bw(g):
        _accum(a, g * keep)

    return _make(np.maximum(a.data, lo), (a,), bw)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.shape))
            return
        if not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            shape = list(a.shape)
            for ax in sorted(ax % a.ndim for ax in axes):
                shape[ax] = 1
            g = g.reshape(shape)
        _accum(a, np.broadcast_to(g, a.shape))

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax % a.ndim]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    def bw(g):
        _accum(a, g.reshape(a.shape))

    return _make(a.data.reshape(shape), (a,), bw)


def transpose(a: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)

    def bw(g):
        _accum(a, g.transpose(inv))

    return _make(a.data.transpose(axes), (a,), bw)


def column(a: Tensor, j: int) -> Tensor:
    """Select column ``j`` of a 2-D tensor; returns shape ``(rows,)``."""
    if a.ndim != 2:
        raise ShapeError(f"column() expects a 2-D tensor, got {a.shape}")

    def bw(g):
        z = np.zeros_like(a.data)
        z[:, j] = g
        _accum(a, z)

    return _make(np.ascontiguousarray(a.data[:, j]), (a,), bw)


def pick(a: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather ``a[rows[k], cols[k]]`` for a 2-D tensor; rows must be unique."""
    if a.ndim != 2:
        raise ShapeError(f"pick() expects a 2-D tensor, got {a.shape}")
    rows = np.asarray(rows)
    cols = np.asarray(cols)

    def bw(g):
        z = np.zeros_like(a.data)
        z[rows, cols] = g
        _accum(a, z)

    return _make(np.ascontiguousarray(a.data[rows, cols]), (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")

    def bw(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), bw)


def softmax(a: Tensor, axis: int = 1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        _accum(a, s * (g - dot))

    return _make(s, (a,), bw)


def log_softmax(a: Tensor, axis: int = 1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    lp = shifted - lse

    def bw(g):
        sm = np.exp(lp)
        _accum(a, g - sm * g.sum(axis=axis, keepdims=True))

    return _make(lp, (a,), bw)


def global_avg_pool(a: Tensor) -> Tensor:
    """Mean over the spatial axes of a (B, C, H, W) tensor -> (B, C)."""
    if a.ndim != 4:
        raise ShapeError(f"global_avg_pool expects (B,C,H,W), got {a.shape}")
    return tmean(a, axis=(2, 3))


# ---------------------------------------------------------------------------
# im2col convolution
# ---------------------------------------------------------------------------


def im2col(x: np.ndarray, k: int, stride: int = 1, padding: int = 0):
    """Unroll (B, C, H, W) patches into a (C*k*k, B*Ho*Wo) matrix.

    Row order matches a (Cout, C, k, k) weight reshaped to (Cout, C*k*k), so
    the convolution is exactly ``w2d @ cols``.
    """
    B, C, H, W = x.shape
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ShapeError(f"conv input {H}x{W} too small for kernel {k} (pad {padding})")
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = np.empty((C, k, k, B, Ho, Wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            cols[:, i, j] = x[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride].transpose(1, 0, 2, 3)
    return cols.reshape(C * k * k, B * Ho * Wo), (Ho, Wo)


def col2im(cols: np.ndarray, x_shape, k: int, stride: int, padding: int, Ho: int, Wo: int) -> np.ndarray:
    """Scatter-add inverse of :func:`im2col`."""
    B, C, H, W = x_shape
    xp = np.zeros((B, C, H + 2 * padding, W + 2 * padding), dtype=cols.dtype)
    c6 = cols.reshape(C, k, k, B, Ho, Wo)
    for i in range(k):
        for j in range(k):
            xp[:, :, i : i + Ho * stride : stride, j : j + Wo * stride : stride] += c6[:, i, j].transpose(1, 0, 2, 3)
    if padding:
        return np.ascontiguousarray(xp[:, :, padding : padding + H, padding : padding + W])
    return xp


def _mask_bits(mask):
    return getattr(mask, "bits", mask)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, padding: int = 0, stride: int = 1, mask=None) -> Tensor:
    """2-D cross-correlation with zero padding; optional N:M weight mask.

    With a mask, the effective weight is ``weight * mask``; the backward pass
    gives the input its true gradient but routes the weight gradient to all
    positions (straight-through), so pruned weights stay trainable.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/weight, got {x.shape} / {weight.shape}")
    Cout, Cin, k, k2 = weight.shape
    if k != k2:
        raise ShapeError(f"conv2d expects square kernels, got {weight.shape}")
    if x.shape[1] != Cin:
        raise ShapeError(f"channel mismatch: input {x.shape[1]} vs weight {Cin}")
    if bias is not None and bias.shape != (Cout,):
        raise ShapeError(f"bias shape {bias.shape} != ({Cout},)")
    w_eff = weight.data
    if mask is not None:
        bits = _mask_bits(mask)
        if bits.shape != weight.shape:
            raise MaskError(f"mask shape {bits.shape} != weight shape {weight.shape}")
        w_eff = weight.data * bits.astype(weight.data.dtype)

    cols, (Ho, Wo) = im2col(x.data, k, stride, padding)
    B = x.shape[0]
    w2d = w_eff.reshape(Cout, -1)
    out = w2d @ cols
    if bias is not None:
        out = out + bias.data[:, None]
    out = out.reshape(Cout, B, Ho, Wo).transpose(1, 0, 2, 3)

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        gmat = g.transpose(1, 0, 2, 3).reshape(Cout, -1)
        cols_b, _ = im2col(x.data, k, stride, padding)
        # straight-through: weight grad is never masked
        _accum(weight, (gmat @ cols_b.T).reshape(weight.shape))
        if bias is not None:
            _accum(bias, gmat.sum(axis=1))
        dcols = w2d.T @ gmat
        _accum(x, col2im(dcols, x.shape, k, stride, padding, Ho, Wo))

    return _make(out, parents, bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None, mask=None) -> Tensor:
    """Affine map ``x @ (weight*mask).T + bias`` with the same STE convention."""
    if x.ndim != 2 or weight.ndim != 2:
        raise ShapeError(f"linear expects 2-D input/weight, got {x.shape} / {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"feature mismatch: input {x.shape} vs weight {weight.shape}")
    w_eff = weight.data
    if mask is not None:
        bits = _mask_bits(mask)
        if bits.shape != weight.shape:
            raise MaskError(f"mask shape {bits.shape} != weight shape {weight.shape}")
        w_eff = weight.data * bits.astype(weight.data.dtype)
    out = x.data @ w_eff.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
        out = out + bias.data

    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        _accum(weight, g.T @ x.data)  # straight-through: unmasked
        if bias is not None:
            _accum(bias, g.sum(axis=0))
        _accum(x, g @ w_eff)

    return _make(out, parents, bw)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


@dataclass
class BnBank:
    """Learnable affine plus running statistics for one BatchNorm layer."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.9  # running = momentum*running + (1-momentum)*batch

    @classmethod
    def create(cls, channels: int, dtype=np.float32, eps: float = 1e-5, momentum: float = 0.9) -> "BnBank":
        return cls(
            gamma=Tensor(np.ones(channels, dtype=dtype), requires_grad=True),
            beta=Tensor(np.zeros(channels, dtype=dtype), requires_grad=True),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    def copy(self) -> "BnBank":
        return BnBank(
            gamma=Tensor(self.gamma.data.copy(), requires_grad=True),
            beta=Tensor(self.beta.data.copy(), requires_grad=True),
            running_mean=self.running_mean.copy(),
            running_var=self.running_var.copy(),
            eps=self.eps,
            momentum=self.momentum,
        )


def batchnorm2d(x: Tensor, bank: BnBank, mode: str) -> Tensor:
    """Per-channel batch normalization over (B, H, W).

    Train mode normalizes by biased batch statistics and updates the bank's
    running stats (unbiased variance) with momentum; eval mode normalizes by
    the running stats. Only the given bank is ever touched.
    """
    if mode not in ("train", "eval"):
        raise ContractError(f"mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"batchnorm2d expects (B,C,H,W), got {x.shape}")
    C = x.shape[1]
    if bank.gamma.shape != (C,):
        raise ShapeError(f"bank has {bank.gamma.shape[0]} channels, input has {C}")

    gamma, beta = bank.gamma, bank.beta
    gg = gamma.data.reshape(1, C, 1, 1)

    if mode == "train":
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))  # biased
        inv_std = 1.0 / np.sqrt(var + bank.eps)
        xhat = (x.data - mu.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
        m = bank.momentum
        unbias = count / max(count - 1, 1)
        bank.running_mean[...] = m * bank.running_mean + (1.0 - m) * mu
        bank.running_var[...] = m * bank.running_var + (1.0 - m) * (var * unbias)
        out = gg * xhat + beta.data.reshape(1, C, 1, 1)

        def bw(g):
            _accum(beta, g.sum(axis=(0, 2, 3)))
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            dxhat = g * gg
            s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            dx = inv_std.reshape(1, C, 1, 1) * (dxhat - s1 / count - xhat * s2 / count)
            _accum(x, dx)

    else:
        inv_std = 1.0 / np.sqrt(bank.running_var + bank.eps)
        xhat = (x.data - bank.running_mean.reshape(1, C, 1, 1)) * inv_std.reshape(1, C, 1, 1)
        out = gg * xhat + beta.data.reshape(1, C, 1, 1)

        def bw(g):
            _accum(beta, g.sum(axis=(0, 2, 3)))
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
            _accum(x, g * gg * inv_std.reshape(1, C, 1, 1))

    return _make(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------


def gradcheck(f, inputs, h: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients.

    ``f`` maps the given tensors to a scalar Tensor and is re-evaluated for
    every perturbed coordinate, so keep shapes small. Use float64 inputs for
    the comparison to be meaningful.
    """
    for t in inputs:
        t.grad = None
    out = f(*inputs)
    if out.data.size != 1:
        raise ContractError("gradcheck requires a scalar-valued function")
    backward(out)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(*inputs).data)
            flat[i] = orig - h
            fm = float(f(*inputs).data)
            flat[i] = orig
            num = (fp - fm) / (2.0 * h)
            an = float(aflat[i])
            rel = abs(an - num) / max(abs(an), abs(num), 1e-8)
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# parameter initialization helpers
# ---------------------------------------------------------------------------


def he_conv(rng: np.random.Generator, cout: int, cin: int, k: int, dtype=np.float32) -> Tensor:
    std = math.sqrt(2.0 / (cin * k * k))
    return Tensor((rng.standard_normal((cout, cin, k, k)) * std).astype(dtype), requires_grad=True)


def he_linear(rng: np.random.Generator, out_f: int, in_f: int, dtype=np.float32) -> Tensor:
    std = math.sqrt(1.0 / in_f)
    return Tensor((rng.standard_normal((out_f, in_f)) * std).astype(dtype), requires_grad=True)


def zeros_param(shape, dtype=np.float32) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
