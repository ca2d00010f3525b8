"""Dense NCHW tensor core with reverse-mode automatic differentiation.

Everything the dehazing networks need lives here: convolution (im2col backed
by BLAS matmul), pooling, activations, group normalization, channel
concatenation/slicing, bilinear upsampling, elementwise arithmetic, reductions,
an Adam optimizer, and a finite-difference gradient checker.

Design notes:
  * The graph is a dynamic tape rebuilt on every forward pass, so parameter
    sharing across loop iterations (the recurrent dehazer reuses its weights
    at every time step) needs no special casing: gradients simply accumulate.
  * Tensors are immutable after construction except for gradient accumulation
    and explicit in-place parameter updates by the optimizer.
  * dtype follows the data (float64 for tests/gradient checks, float32 for
    training speed); no op changes precision behind your back.
  * Elementwise ops require exact shape agreement (or a python scalar);
    arbitrary numpy-style broadcasting is deliberately unsupported.  The only
    shape-changing "broadcast" is the explicit `broadcast_spatial`.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, ParameterError, ShapeError

DEFAULT_DTYPE = np.float64

_GRAD_ENABLED = True

_KINK_TRACKER = None


class KinkTracker:
    """Hashes the activation pattern (relu/clamp masks, pool argmaxes) of a forward pass.

    Central differences only estimate a derivative where the function is
    smooth over the probed interval.  Comparing this digest between f(x-eps),
    f(x), and f(x+eps) tells the gradient checker whether the interval crossed
    a kink of relu / prelu / |.| / clamp / max-pool, so it can perturb a
    different coordinate instead of reporting finite-difference garbage.
    """

    def __init__(self):
        self._h = hashlib.blake2b(digest_size=16)

    def add_mask(self, mask: np.ndarray):
        self._h.update(np.packbits(mask.reshape(-1)).tobytes())

    def add_indices(self, idx: np.ndarray):
        self._h.update(np.ascontiguousarray(idx).tobytes())

    def digest(self) -> bytes:
        return self._h.digest()


class track_kinks:
    """Context manager installing a fresh KinkTracker for the enclosed forwards."""

    def __enter__(self) -> KinkTracker:
        global _KINK_TRACKER
        self._prev = _KINK_TRACKER
        _KINK_TRACKER = KinkTracker()
        return _KINK_TRACKER

    def __exit__(self, *exc):
        global _KINK_TRACKER
        _KINK_TRACKER = self._prev
        return False


class no_grad:
    """Context manager that disables tape construction (inference / FD evals)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """N-D array plus an optional gradient accumulator and tape linkage."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.asarray(data, dtype=dtype if dtype is not None else None)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._op = ""

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}, op={self._op or 'leaf'})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def copy(self) -> "Tensor":
        t = Tensor(self.data.copy(), requires_grad=self.requires_grad)
        return t

    def item(self) -> float:
        return float(self.data)

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return pow_(self, exponent)

    def sum(self):
        return sum_(self)

    def mean(self):
        return mean(self)

    # -- autodiff -----------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar loss.

        Populates ``grad`` on every reachable tensor with ``requires_grad``.
        Accumulation is additive, so a tensor used several times (shared
        weights across time steps) collects contributions from every use.
        """
        if self.data.ndim != 0:
            raise ContractError(f"backward() requires a scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            raise ContractError("backward() on a tensor that does not require grad")

        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self.grad = np.ones((), dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad += g


def _node(out_data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    out = Tensor(out_data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
        out._op = op
    return out


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad: bool = False, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def _check_same_shape(a: Tensor, b: Tensor, op: str):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else Tensor(a)
        s = float(b)
        out_data = a.data + s

        def bwd(g):
            _accum(a, g)

        return _node(out_data, (a,), bwd, "add_s")
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same_shape(a, b, "add")

    def bwd(g):
        _accum(a, g)
        _accum(b, g)

    return _node(a.data + b.data, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    if isinstance(b, Tensor) and isinstance(a, Tensor):
        _check_same_shape(a, b, "sub")

        def bwd(g):
            _accum(a, g)
            _accum(b, -g)

        return _node(a.data - b.data, (a, b), bwd, "sub")
    return add(a, -b if not isinstance(b, Tensor) else mul(b, -1.0))


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = a if isinstance(a, Tensor) else Tensor(a)
        s = float(b)

        def bwd(g):
            _accum(a, g * s)

        return _node(a.data * s, (a,), bwd, "mul_s")
    if not isinstance(a, Tensor):
        return mul(b, a)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def bwd(g):
        _accum(a, g * bd)
        _accum(b, g * ad)

    return _node(ad * bd, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return mul(a, 1.0 / float(b))
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
        if a.data.shape != b.data.shape:
            a = Tensor(np.full(b.data.shape, float(a.data), dtype=b.dtype))
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out_data = ad / bd

    def bwd(g):
        _accum(a, g / bd)
        _accum(b, -g * out_data / bd)

    return _node(out_data, (a, b), bwd, "div")


def pow_(a: Tensor, exponent: float) -> Tensor:
    e = float(exponent)
    ad = a.data
    out_data = ad**e

    def bwd(g):
        _accum(a, g * e * ad ** (e - 1.0))

    return _node(out_data, (a,), bwd, "pow")


def absolute(a: Tensor) -> Tensor:
    """|a| with subgradient 0 at exactly 0."""
    ad = a.data
    if _KINK_TRACKER is not None:
        _KINK_TRACKER.add_mask(ad >= 0)

    def bwd(g):
        _accum(a, g * np.sign(ad))

    return _node(np.abs(ad), (a,), bwd, "abs")


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes only strictly inside the interval."""
    ad = a.data
    inside = (ad > lo) & (ad < hi)
    if _KINK_TRACKER is not None:
        _KINK_TRACKER.add_mask(inside)

    def bwd(g):
        _accum(a, g * inside)

    return _node(np.clip(ad, lo, hi), (a,), bwd, "clamp")


def sum_(a: Tensor) -> Tensor:
    shape = a.data.shape

    def bwd(g):
        _accum(a, np.full(shape, g, dtype=a.dtype))

    return _node(np.asarray(a.data.sum(), dtype=a.dtype), (a,), bwd, "sum")


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.data.shape

    def bwd(g):
        _accum(a, np.full(shape, g / n, dtype=a.dtype))

    return _node(np.asarray(a.data.mean(), dtype=a.dtype), (a,), bwd, "mean")


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _KINK_TRACKER is not None:
        _KINK_TRACKER.add_mask(mask)

    def bwd(g):
        _accum(a, g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bwd, "relu")


def prelu(a: Tensor, alpha: Tensor) -> Tensor:
    """Parametric ReLU with a learnable per-channel slope, input is NCHW."""
    if a.data.ndim != 4:
        raise ShapeError(f"prelu expects NCHW input, got shape {a.data.shape}")
    if alpha.data.shape != (a.data.shape[1],):
        raise ShapeError(f"prelu alpha must have shape ({a.data.shape[1]},), got {alpha.data.shape}")
    ad = a.data
    neg = ad < 0
    if _KINK_TRACKER is not None:
        _KINK_TRACKER.add_mask(neg)
    al = alpha.data[None, :, None, None]
    out_data = np.where(neg, al * ad, ad)

    def bwd(g):
        _accum(a, g * np.where(neg, al, 1.0))
        _accum(alpha, (g * ad * neg).sum(axis=(0, 2, 3)))

    return _node(out_data, (a, alpha), bwd, "prelu")


def sigmoid(a: Tensor) -> Tensor:
    # overflow-safe: exp of a non-positive argument only
    ad = a.data
    z = np.exp(-np.abs(ad))
    out_data = np.where(ad >= 0, 1.0, z) / (1.0 + z)

    def bwd(g):
        _accum(a, g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), bwd, "sigmoid")


def tanh(a: Tensor) -> Tensor:
    out_data = np.tanh(a.data)

    def bwd(g):
        _accum(a, g * (1.0 - out_data * out_data))

    return _node(out_data, (a,), bwd, "tanh")


def activation(a: Tensor, kind: str, alpha: Tensor | None = None) -> Tensor:
    """Dispatch by name; ``prelu`` requires its per-channel slope tensor."""
    if kind == "relu":
        return relu(a)
    if kind == "prelu":
        if alpha is None:
            raise ParameterError("prelu requires an alpha tensor")
        return prelu(a, alpha)
    if kind == "sigmoid":
        return sigmoid(a)
    if kind == "tanh":
        return tanh(a)
    raise ParameterError(f"unknown activation kind: {kind!r}")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    """Return (N*Ho*Wo, C*kh*kw) patch matrix and the output spatial dims."""
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if padding > 0:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.transpose(0, 4, 5, 1, 2, 3).reshape(n * ho * wo, c * kh * kw), (ho, wo)


def _col2im(dcols: np.ndarray, xshape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add patch gradients back onto the input."""
    n, c, h, w = xshape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    d6 = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += d6[:, :, i, j]
    if padding > 0:
        return dxp[:, :, padding : padding + h, padding : padding + w]
    return dxp


def _pad_nchw(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return np.ascontiguousarray(x)
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    xp[:, :, padding : padding + h, padding : padding + w] = x
    return xp


def _conv_shift_forward(xp: np.ndarray, ktaps: np.ndarray, ho: int, wo: int) -> np.ndarray:
    # out[., h, w] = sum_ij  W[., ., i, j] @ xp[., ., h+i, w+j]; one channel
    # GEMM per kernel tap on the contiguous padded plane, then a shifted add
    n, cin, hp, wp = xp.shape
    kh, kw, cout, _ = ktaps.shape
    xflat = xp.reshape(n, cin, hp * wp)
    out = np.zeros((n, cout, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            y = np.matmul(ktaps[i, j], xflat).reshape(n, cout, hp, wp)
            out += y[:, :, i : i + ho, j : j + wo]
    return out


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, zero padded, NCHW in / NCHW out.

    ``kernel`` is (Cout, Cin, kH, kW); output spatial dims follow
    H' = (H + 2p - kH) // s + 1.  Stride 1 (every conv in the dehazing
    networks) runs as per-tap channel GEMMs over the padded plane, which
    avoids im2col's large strided copies; other strides fall back to an
    im2col/col2im pair.
    """
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input/kernel, got {x.data.shape} and {kernel.data.shape}")
    n, cin, h, w = x.data.shape
    cout, kcin, kh, kw = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {kcin}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.data.shape != (cout,):
        raise ShapeError(f"conv2d: bias must have shape ({cout},), got {bias.data.shape}")

    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xshape = x.data.shape
    xdata = x.data
    kd = kernel.data

    if stride == 1:
        # per-tap kernels must be contiguous or matmul abandons BLAS
        ktaps = np.ascontiguousarray(kd.transpose(2, 3, 0, 1))
        xp = _pad_nchw(xdata, padding)
        out_data = _conv_shift_forward(xp, ktaps, ho, wo)
        if bias is not None:
            out_data += bias.data[None, :, None, None]

        def bwd(g):
            if bias is not None and bias.requires_grad:
                _accum(bias, g.sum(axis=(0, 2, 3)))
            gflat = np.ascontiguousarray(g).reshape(n, cout, ho * wo)
            xpb = _pad_nchw(xdata, padding)
            if x.requires_grad:
                ktaps_t = np.ascontiguousarray(kd.transpose(2, 3, 1, 0))
                dxp = np.zeros_like(xpb)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + ho, j : j + wo] += np.matmul(ktaps_t[i, j], gflat).reshape(
                            n, cin, ho, wo
                        )
                _accum(x, dxp[:, :, padding : padding + h, padding : padding + w] if padding else dxp)
            if kernel.requires_grad:
                dk = np.empty_like(kd)
                for i in range(kh):
                    for j in range(kw):
                        patch = np.ascontiguousarray(xpb[:, :, i : i + ho, j : j + wo]).reshape(n, cin, ho * wo)
                        dk[:, :, i, j] = np.matmul(gflat, patch.transpose(0, 2, 1)).sum(axis=0)
                _accum(kernel, dk)

    else:
        cols, _ = _im2col(xdata, kh, kw, stride, padding)
        w2d = kd.reshape(cout, cin * kh * kw)
        out2d = cols @ w2d.T
        if bias is not None:
            out2d += bias.data
        out_data = np.ascontiguousarray(out2d.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

        def bwd(g):
            g2d = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, cout)
            if kernel.requires_grad:
                cols_b, _ = _im2col(xdata, kh, kw, stride, padding)
                _accum(kernel, (g2d.T @ cols_b).reshape(cout, cin, kh, kw))
            if bias is not None and bias.requires_grad:
                _accum(bias, g2d.sum(axis=0))
            if x.requires_grad:
                dcols = g2d @ w2d
                _accum(x, _col2im(dcols, xshape, kh, kw, stride, padding))

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _node(out_data, parents, bwd, "conv2d")


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


def _pool_windows(x: np.ndarray, kh: int, kw: int, stride: int):
    n, c, h, w = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    win = np.empty((n, c, kh * kw, ho, wo), dtype=x.dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            win[:, :, k] = x[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
            k += 1
    return win, ho, wo


def pool2d(x: Tensor, kind: str, kh: int, kw: int, stride: int) -> Tensor:
    """Window pooling without padding.

    ``max`` routes the gradient to the first (row-major) maximal element of
    each window; ``avg`` spreads it uniformly.
    """
    if kind not in ("max", "avg"):
        raise ParameterError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"pool2d expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if kh > h or kw > w:
        raise ShapeError(f"pool2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if stride < 1:
        raise ParameterError(f"stride must be >= 1, got {stride}")

    win, ho, wo = _pool_windows(x.data, kh, kw, stride)
    if kind == "max":
        arg = win.argmax(axis=2)
        if _KINK_TRACKER is not None:
            _KINK_TRACKER.add_indices(arg)
        out_data = np.take_along_axis(win, arg[:, :, None], axis=2)[:, :, 0]

        def bwd(g):
            dx = np.zeros((n, c, h, w), dtype=g.dtype)
            ki, kj = np.divmod(arg, kw)
            nn, cc, oh, ow = np.indices(arg.shape, sparse=False)
            np.add.at(dx, (nn, cc, oh * stride + ki, ow * stride + kj), g)
            _accum(x, dx)

    else:
        out_data = win.mean(axis=2)

        def bwd(g):
            dx = np.zeros((n, c, h, w), dtype=g.dtype)
            gshare = g / (kh * kw)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gshare
            _accum(x, dx)

    return _node(out_data, (x,), bwd, f"pool_{kind}")


def global_pool(x: Tensor, kind: str) -> Tensor:
    """Pool each channel's full spatial extent down to a single value."""
    if kind not in ("max", "avg"):
        raise ParameterError(f"pool kind must be 'max' or 'avg', got {kind!r}")
    if x.data.ndim != 4:
        raise ShapeError(f"global_pool expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    flat = x.data.reshape(n, c, h * w)
    if kind == "max":
        arg = flat.argmax(axis=2)
        if _KINK_TRACKER is not None:
            _KINK_TRACKER.add_indices(arg)
        out_data = np.take_along_axis(flat, arg[:, :, None], axis=2).reshape(n, c, 1, 1)

        def bwd(g):
            dflat = np.zeros((n, c, h * w), dtype=g.dtype)
            nn, cc = np.indices(arg.shape)
            dflat[nn, cc, arg] = g[:, :, 0, 0]
            _accum(x, dflat.reshape(n, c, h, w))

    else:
        out_data = flat.mean(axis=2).reshape(n, c, 1, 1)

        def bwd(g):
            _accum(x, np.broadcast_to(g / (h * w), (n, c, h, w)).copy())

    return _node(out_data, (x,), bwd, f"gpool_{kind}")


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-group standardization followed by a per-channel affine map."""
    if x.data.ndim != 4:
        raise ShapeError(f"group_norm expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    if c % groups != 0:
        raise ConfigError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.data.shape != (c,) or beta.data.shape != (c,):
        raise ShapeError(f"group_norm: gamma/beta must have shape ({c},)")

    m = (c // groups) * h * w
    xg = x.data.reshape(n, groups, m)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * inv_std).reshape(n, c, h, w)
    out_data = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bwd(g):
        if gamma.requires_grad:
            _accum(gamma, (g * xhat).sum(axis=(0, 2, 3)))
        if beta.requires_grad:
            _accum(beta, g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, m)
            xh = xhat.reshape(n, groups, m)
            t1 = dxhat.sum(axis=2, keepdims=True)
            t2 = (dxhat * xh).sum(axis=2, keepdims=True)
            dx = inv_std * (dxhat - t1 / m - xh * t2 / m)
            _accum(x, dx.reshape(n, c, h, w))

    return _node(out_data, (x, gamma, beta), bwd, "group_norm")


# ---------------------------------------------------------------------------
# shape plumbing
# ---------------------------------------------------------------------------


def concat(parts: list[Tensor], axis: int) -> Tensor:
    if not parts:
        raise ShapeError("concat of zero tensors")
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for p, a, b in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(a, b)
            _accum(p, np.ascontiguousarray(g[tuple(sl)]))

    return _node(out_data, tuple(parts), bwd, "concat")


def concat_channels(parts: list[Tensor]) -> Tensor:
    """Concatenate NCHW tensors along the channel axis (order preserved)."""
    ref = parts[0].data.shape
    for p in parts[1:]:
        if p.data.ndim != 4 or p.data.shape[0] != ref[0] or p.data.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: incompatible shapes {ref} vs {p.data.shape}")
    return concat(parts, axis=1)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"slice_channels expects NCHW input, got shape {x.data.shape}")
    c = x.data.shape[1]
    if not (0 <= start < stop <= c):
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {c} channels")
    out_data = np.ascontiguousarray(x.data[:, start:stop])

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[:, start:stop] = g
        _accum(x, dx)

    return _node(out_data, (x,), bwd, "slice_channels")


def reshape(x: Tensor, shape) -> Tensor:
    out_data = x.data.reshape(shape)
    orig = x.data.shape

    def bwd(g):
        _accum(x, g.reshape(orig))

    return _node(out_data, (x,), bwd, "reshape")


def broadcast_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Tile an (N, C, 1, 1) tensor to (N, C, h, w); backward sums spatially."""
    if x.data.ndim != 4 or x.data.shape[2:] != (1, 1):
        raise ShapeError(f"broadcast_spatial expects (N, C, 1, 1), got {x.data.shape}")
    out_data = np.broadcast_to(x.data, x.data.shape[:2] + (h, w)).copy()

    def bwd(g):
        _accum(x, g.sum(axis=(2, 3), keepdims=True))

    return _node(out_data, (x,), bwd, "broadcast_spatial")


_UPSAMPLE_CACHE: dict[tuple[int, str], np.ndarray] = {}


def _upsample_matrix(n_in: int, dtype) -> np.ndarray:
    key = (n_in, np.dtype(dtype).name)
    m = _UPSAMPLE_CACHE.get(key)
    if m is None:
        m = np.zeros((2 * n_in, n_in), dtype=dtype)
        for i in range(2 * n_in):
            src = (i + 0.5) / 2.0 - 0.5
            lo = int(np.floor(src))
            frac = src - lo
            m[i, min(max(lo, 0), n_in - 1)] += 1.0 - frac
            m[i, min(max(lo + 1, 0), n_in - 1)] += frac
        _UPSAMPLE_CACHE[key] = m
    return m


def upsample2x_bilinear(x: Tensor) -> Tensor:
    """Double both spatial dims with (half-pixel-aligned) bilinear weights."""
    if x.data.ndim != 4:
        raise ShapeError(f"upsample2x_bilinear expects NCHW input, got shape {x.data.shape}")
    h, w = x.data.shape[2:]
    wr = _upsample_matrix(h, x.dtype)
    wc = _upsample_matrix(w, x.dtype)
    out_data = np.matmul(np.matmul(wr, x.data), wc.T)

    def bwd(g):
        _accum(x, np.matmul(np.matmul(wr.T, g), wc))

    return _node(out_data, (x,), bwd, "upsample2x")


def reflect_pad2d(x: Tensor, pad_bottom: int, pad_right: int) -> Tensor:
    """Reflect-pad the bottom/right edges (used to round dims up to a multiple)."""
    if x.data.ndim != 4:
        raise ShapeError(f"reflect_pad2d expects NCHW input, got shape {x.data.shape}")
    h, w = x.data.shape[2:]
    if pad_bottom >= h or pad_right >= w:
        raise ShapeError("reflect padding must be smaller than the padded dim")
    if pad_bottom == 0 and pad_right == 0:
        return x
    idx_h = np.concatenate([np.arange(h), h - 2 - np.arange(pad_bottom)])
    idx_w = np.concatenate([np.arange(w), w - 2 - np.arange(pad_right)])
    out_data = np.ascontiguousarray(x.data[:, :, idx_h][:, :, :, idx_w])

    def bwd(g):
        dx = np.zeros_like(x.data)
        np.add.at(dx, (slice(None), slice(None), idx_h[:, None], idx_w[None, :]), g)
        _accum(x, dx)

    return _node(out_data, (x,), bwd, "reflect_pad")


def crop2d(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w window (inverse of bottom/right padding)."""
    if x.data.ndim != 4:
        raise ShapeError(f"crop2d expects NCHW input, got shape {x.data.shape}")
    if h > x.data.shape[2] or w > x.data.shape[3]:
        raise ShapeError(f"crop2d: {h}x{w} larger than input {x.data.shape[2]}x{x.data.shape[3]}")
    out_data = np.ascontiguousarray(x.data[:, :, :h, :w])

    def bwd(g):
        dx = np.zeros_like(x.data)
        dx[:, :, :h, :w] = g
        _accum(x, dx)

    return _node(out_data, (x,), bwd, "crop2d")


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    """Per-parameter moment estimates plus the shared step counter."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Adam:
    """Adam with bias correction over a named parameter dict.

    ``step()`` applies one update in deterministic (insertion) order and then
    clears every gradient.  Parameters whose gradient was never populated are
    a contract violation: with this package's training graphs every optimized
    parameter is reachable from the loss on every update.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = dict(params)
        self.state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
        for name, p in self.params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def step(self):
        s = self.state
        s.step_count += 1
        bc1 = 1.0 - s.beta1**s.step_count
        bc2 = 1.0 - s.beta2**s.step_count
        for name, p in self.params.items():
            if p.grad is None:
                raise ContractError(f"adam step: parameter {name!r} has no gradient")
            g = p.grad
            m = s.m[name]
            v = s.v[name]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * g * g
            mhat = m / bc1
            vhat = v / bc2
            p.data -= s.lr * mhat / (np.sqrt(vhat) + s.eps)
            p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    """Outcome of an analytic-vs-central-difference comparison.

    ``max_rel_error`` is the worst relative error over all checked coordinates,
    where a coordinate's relative error is |a - n| / max(|a|, |n|, floor) and
    the floor is 1e-3 of the parameter group's largest analytic gradient (so
    finite-difference noise on dead coordinates is measured against the
    group's scale instead of exploding).  ``failures`` lists coordinates that
    exceeded ``tol`` as (group, flat_index, rel_error).  ``excluded`` counts
    coordinates whose difference interval crossed a relu/clamp/max kink; the
    checker perturbs a different coordinate instead, since central differences
    are meaningless across a kink.
    """

    max_rel_error: float
    tol: float
    per_group: dict[str, float]
    failures: list[tuple[str, int, float]]
    checked: int = 0
    excluded: int = 0

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.tol


def _rel_errors(analytic: np.ndarray, numeric: np.ndarray, scale: float) -> np.ndarray:
    floor = max(1e-3 * scale, 1e-9)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def gradcheck_groups(
    f,
    groups: dict[str, list[Tensor]],
    samples_per_group: int | None = None,
    eps: float = 1e-5,
    tol: float = 1e-4,
    rng: np.random.Generator | None = None,
    exclude_kinks: bool = True,
) -> GradCheckReport:
    """Compare analytic gradients of the scalar ``f()`` against central differences.

    ``groups`` maps a group name to the tensors whose coordinates are pooled
    for sampling; with ``samples_per_group=None`` every coordinate is checked.
    Tensors are perturbed in place for the difference quotients, so ``f`` must
    recompute from current tensor contents on each call.

    With ``exclude_kinks`` the checker fingerprints the activation pattern of
    every probe evaluation and rejects coordinates whose interval crossed a
    kink, drawing replacements until ``samples_per_group`` smooth coordinates
    were verified (kinks of relu and friends are measure-zero in weight space,
    so replacements are essentially always available).
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ParameterError(f"gradcheck eps must lie in [1e-6, 1e-3], got {eps}")
    rng = rng or np.random.default_rng(0)

    for tensors in groups.values():
        for t in tensors:
            t.grad = None
    loss = f()
    if loss.data.ndim != 0:
        raise ContractError("gradcheck target must return a scalar tensor")
    loss.backward()
    analytic = {
        name: [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
        for name, tensors in groups.items()
    }

    def probe() -> tuple[float, bytes]:
        with track_kinks() as tr:
            with no_grad():
                val = float(f().data)
        return val, tr.digest()

    base_sig = probe()[1] if exclude_kinks else b""

    per_group: dict[str, float] = {}
    failures: list[tuple[str, int, float]] = []
    checked = 0
    excluded = 0
    for name, tensors in groups.items():
        sizes = np.array([t.data.size for t in tensors])
        total = int(sizes.sum())
        bounds = np.cumsum(sizes)
        if samples_per_group is None or samples_per_group >= total:
            candidates = np.arange(total)
            target = total
        else:
            candidates = rng.permutation(total)
            target = samples_per_group
        scale = max((float(np.max(np.abs(g))) if g.size else 0.0) for g in analytic[name])
        worst = 0.0
        accepted = 0
        for flat in candidates:
            if accepted >= target:
                break
            ti = int(np.searchsorted(bounds, flat, side="right"))
            local = int(flat - (bounds[ti - 1] if ti else 0))
            view = tensors[ti].data.reshape(-1)
            orig = view[local]
            view[local] = orig + eps
            fp, sp = probe()
            view[local] = orig - eps
            fm, sm = probe()
            view[local] = orig
            if exclude_kinks and (sp != base_sig or sm != base_sig):
                excluded += 1
                continue
            numeric = (fp - fm) / (2.0 * eps)
            a = float(analytic[name][ti].reshape(-1)[local])
            rel = float(_rel_errors(np.asarray(a), np.asarray(numeric), scale))
            if rel > tol:
                failures.append((name, int(flat), rel))
            worst = max(worst, rel)
            accepted += 1
            checked += 1
        per_group[name] = worst

    max_rel = max(per_group.values()) if per_group else 0.0
    return GradCheckReport(
        max_rel_error=max_rel, tol=tol, per_group=per_group, failures=failures, checked=checked, excluded=excluded
    )


def gradcheck(f, point: Tensor, eps: float = 1e-5, tol: float = 1e-4, exclude_kinks: bool = True) -> GradCheckReport:
    """Check df/d(point) for a scalar-valued ``f(point)`` on every coordinate."""
    point.requires_grad = True
    return gradcheck_groups(
        lambda: f(point), {"point": [point]}, samples_per_group=None, eps=eps, tol=tol, exclude_kinks=exclude_kinks
    )
