"""Dense float32 tensors with tape-based reverse-mode autodiff.

The op set is exactly what the refinement decoder and its training loop
need: same-padded stride-1 conv2d, bilinear upsampling, a small family of
elementwise ops, channel concatenation and a full-sum reduction. A Graph
is a per-forward-pass tape: ops are Graph methods, ``backward`` walks the
tape once in reverse.

Numerics: values are float32 throughout. conv2d runs as an im2col GEMM in
float32 (BLAS); reductions and the bilinear interpolation weights are
accumulated in float64 and cast back, which keeps constancy/convexity
properties exact at the float32 level.
"""

import math

import numpy as np

from .errors import ProtocolError, ShapeError

_ELEMENTWISE_OPS = ("add", "mul", "sub", "exp", "sigmoid", "relu")


class Tensor:
    """A dense n-d float32 value grid with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "node_id", "_graph")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)  # 0-d arrays are already contiguous
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.node_id = None
        self._graph = None

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on non-scalar tensor of dims {self.dims}")
        return float(self.data.reshape(()))

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    @classmethod
    def zeros(cls, dims, requires_grad: bool = False) -> "Tensor":
        return cls(np.zeros(dims, dtype=np.float32), requires_grad)

    @classmethod
    def full(cls, dims, value, requires_grad: bool = False) -> "Tensor":
        return cls(np.full(dims, value, dtype=np.float32), requires_grad)

    @classmethod
    def from_flat(cls, dims, flat, requires_grad: bool = False) -> "Tensor":
        dims = tuple(int(d) for d in dims)
        arr = np.asarray(flat, dtype=np.float32)
        if arr.size != math.prod(dims):
            raise ShapeError(
                f"flat data of length {arr.size} does not fill dims {dims}"
            )
        return cls(arr.reshape(dims), requires_grad)

    def __repr__(self):
        return f"Tensor(dims={self.dims}, requires_grad={self.requires_grad})"


def scalar(value: float) -> Tensor:
    """A constant 0-d tensor (no gradient)."""
    return Tensor(np.asarray(value, dtype=np.float32))


class _Node:
    __slots__ = ("tag", "inputs", "input_ids", "needs", "carries", "bwd")

    def __init__(self, tag, inputs, input_ids, needs, carries, bwd):
        self.tag = tag
        self.inputs = inputs
        self.input_ids = input_ids
        self.needs = needs
        self.carries = carries
        self.bwd = bwd


def _im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Unfold [h,w,c] into rows of k*k*c patch values, zero 'same' padding."""
    h, w, c = x.shape
    if k == 1:
        return x.reshape(h * w, c)
    xp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xp[pad : pad + h, pad : pad + w] = x
    s0, s1, s2 = xp.strides
    windows = np.lib.stride_tricks.as_strided(
        xp, shape=(h, w, k, k, c), strides=(s0, s1, s0, s1, s2)
    )
    return windows.reshape(h * w, k * k * c)


def _col2im(gcols: np.ndarray, h: int, w: int, k: int, pad: int, c: int) -> np.ndarray:
    """Fold [h*w, k*k*c] window gradients back onto the [h,w,c] input grid
    (adjoint of _im2col): overlapping window contributions add up."""
    if k == 1:
        return gcols.reshape(h, w, c)
    g5 = gcols.reshape(h, w, k, k, c)
    gp = np.zeros((h + 2 * pad, w + 2 * pad, c), dtype=gcols.dtype)
    for dy in range(k):
        for dx in range(k):
            gp[dy : dy + h, dx : dx + w] += g5[:, :, dy, dx, :]
    return gp[pad : pad + h, pad : pad + w]


_interp_cache: dict = {}


def _interp_matrix(n_in: int, factor: float) -> np.ndarray:
    """Row-interpolation matrix for half-pixel-center bilinear sampling.

    Output index o samples input coordinate (o + 0.5)/factor - 0.5 clamped
    to [0, n_in - 1]; float64 so convex-combination bounds survive the
    final cast to float32.
    """
    key = (n_in, float(factor))
    m = _interp_cache.get(key)
    if m is not None:
        return m
    n_out = int(round(n_in * factor))
    m = np.zeros((n_out, n_in), dtype=np.float64)
    for o in range(n_out):
        src = (o + 0.5) / factor - 0.5
        src = min(max(src, 0.0), float(n_in - 1))
        i0 = int(math.floor(src))
        t = src - i0
        i1 = min(i0 + 1, n_in - 1)
        m[o, i0] += 1.0 - t
        m[o, i1] += t
    _interp_cache[key] = m
    return m


def upsample_array(x: np.ndarray, factor: float) -> np.ndarray:
    """Graph-free bilinear upsample of [h,w,c], identical numerics to the op."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    h, w, c = x.shape
    r = _interp_matrix(h, factor)
    cm = _interp_matrix(w, factor)
    out = _apply_interp(x.astype(np.float64), r, cm)
    return out.astype(np.float32)


def _apply_interp(x64: np.ndarray, r: np.ndarray, cm: np.ndarray) -> np.ndarray:
    h_out = r.shape[0]
    w_in, c = x64.shape[1], x64.shape[2]
    t = (r @ x64.reshape(x64.shape[0], w_in * c)).reshape(h_out, w_in, c)
    t = t.transpose(1, 0, 2).reshape(w_in, h_out * c)
    out = (cm @ t).reshape(cm.shape[0], h_out, c).transpose(1, 0, 2)
    return np.ascontiguousarray(out)


class Graph:
    """Append-only op tape, rebuilt per forward pass, single-threaded."""

    def __init__(self):
        self.nodes: list = []

    # -- recording machinery -------------------------------------------

    def _tracked(self, t: Tensor) -> bool:
        return t.requires_grad or (t._graph is self and t.node_id is not None)

    def _record(self, tag, inputs, out_data, bwd) -> Tensor:
        needs = tuple(self._tracked(t) for t in inputs)
        out = Tensor(out_data)
        out.node_id = len(self.nodes)
        out._graph = self
        ids = tuple(
            t.node_id if (t._graph is self and t.node_id is not None) else -1
            for t in inputs
        )
        self.nodes.append(_Node(tag, tuple(inputs), ids, needs, any(needs), bwd))
        return out

    # -- ops ------------------------------------------------------------

    def conv2d(self, x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
        """Stride-1 'same' zero-padded convolution, odd k in {1,3,5}."""
        xd, kd, bd = x.data, kernel.data, bias.data
        if xd.ndim != 3:
            raise ShapeError(f"conv2d input must be [h,w,c], got {xd.shape}")
        if kd.ndim != 4 or kd.shape[0] != kd.shape[1]:
            raise ShapeError(f"conv2d kernel must be [k,k,c_in,c_out], got {kd.shape}")
        k = kd.shape[0]
        if k % 2 == 0 or k > 5:
            raise ShapeError(f"conv2d kernel size must be odd and <= 5, got {k}")
        if kd.shape[2] != xd.shape[2]:
            raise ShapeError(
                f"conv2d channel mismatch: input has {xd.shape[2]}, "
                f"kernel expects {kd.shape[2]}"
            )
        cout = kd.shape[3]
        if bd.shape != (cout,):
            raise ShapeError(f"conv2d bias must be [{cout}], got {bd.shape}")
        h, w, cin = xd.shape
        pad = (k - 1) // 2
        cols = _im2col(xd, k, pad)
        out = cols @ kd.reshape(k * k * cin, cout)
        out += bd
        out = out.reshape(h, w, cout)
        needs = (self._tracked(x), self._tracked(kernel), self._tracked(bias))

        def bwd(gout):
            gx = gk = gb = None
            g2 = gout.reshape(h * w, cout)
            if needs[2]:
                gb = g2.sum(axis=0, dtype=np.float64).astype(np.float32)
            if needs[1]:
                gk = (cols.T @ g2).reshape(kd.shape)
            if needs[0]:
                if cout * 4 <= cin:
                    # narrow output: cheaper as a correlation with the
                    # spatially flipped kernel
                    kf = np.ascontiguousarray(
                        np.flip(kd, axis=(0, 1)).transpose(0, 1, 3, 2)
                    )
                    gx = (_im2col(gout, k, pad) @ kf.reshape(k * k * cout, cin))
                    gx = gx.reshape(h, w, cin)
                else:
                    w2t = np.ascontiguousarray(kd.reshape(k * k * cin, cout).T)
                    gx = _col2im(g2 @ w2t, h, w, k, pad, cin)
            return (gx, gk, gb)

        return self._record("conv2d", (x, kernel, bias), out, bwd)

    def upsample_bilinear(self, x: Tensor, factor: float) -> Tensor:
        """Bilinear upsample by a rational factor >= 1 (half-pixel centers)."""
        if factor < 1:
            raise ValueError(f"upsample factor must be >= 1, got {factor}")
        xd = x.data
        if xd.ndim != 3:
            raise ShapeError(f"upsample input must be [h,w,c], got {xd.shape}")
        h, w, _ = xd.shape
        r = _interp_matrix(h, factor)
        cm = _interp_matrix(w, factor)
        out = _apply_interp(xd.astype(np.float64), r, cm).astype(np.float32)
        # float32 transposed-interp is plenty for gradients; the float64
        # path above is what keeps forward convexity exact
        rt = np.ascontiguousarray(r.T, dtype=np.float32)
        cmt = np.ascontiguousarray(cm.T, dtype=np.float32)

        def bwd(gout):
            return (_apply_interp(gout, rt, cmt),)

        return self._record("upsample_bilinear", (x,), out, bwd)

    # elementwise family

    @staticmethod
    def _broadcast_mode(a_shape, b_shape):
        if a_shape == b_shape:
            return "same"
        if b_shape == ():
            return "scalar"
        if (
            len(a_shape) == 3
            and len(b_shape) == 3
            and b_shape[:2] == a_shape[:2]
            and b_shape[2] == 1
        ):
            return "channel"
        raise ShapeError(f"incompatible dims for binary op: {a_shape} vs {b_shape}")

    @staticmethod
    def _reduce_to(g, mode):
        if mode == "same":
            return g
        if mode == "scalar":
            return np.asarray(g.sum(dtype=np.float64), dtype=np.float32)
        return g.sum(axis=2, keepdims=True, dtype=np.float64).astype(np.float32)

    def _binary(self, tag, a, b, fwd, bwd_a, bwd_b):
        mode = self._broadcast_mode(a.data.shape, b.data.shape)
        out = fwd(a.data, b.data)
        needs = (self._tracked(a), self._tracked(b))

        def bwd(gout):
            ga = bwd_a(gout, a.data, b.data) if needs[0] else None
            gb = None
            if needs[1]:
                gb = self._reduce_to(bwd_b(gout, a.data, b.data), mode)
            return (ga, gb)

        return self._record(tag, (a, b), out, bwd)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self._binary(
            "add", a, b,
            lambda x, y: x + y,
            lambda g, x, y: g,
            lambda g, x, y: g.copy(),
        )

    def sub(self, a: Tensor, b: Tensor) -> Tensor:
        return self._binary(
            "sub", a, b,
            lambda x, y: x - y,
            lambda g, x, y: g,
            lambda g, x, y: -g,
        )

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        return self._binary(
            "mul", a, b,
            lambda x, y: x * y,
            lambda g, x, y: g * y,
            lambda g, x, y: g * x,
        )

    def div(self, a: Tensor, b: Tensor) -> Tensor:
        return self._binary(
            "div", a, b,
            lambda x, y: x / y,
            lambda g, x, y: g / y,
            lambda g, x, y: -g * x / (y * y),
        )

    def _unary(self, tag, a, fwd, grad_from):
        out = fwd(a.data)

        def bwd(gout):
            return (grad_from(gout, a.data, out),)

        return self._record(tag, (a,), out, bwd)

    def exp(self, a: Tensor) -> Tensor:
        return self._unary("exp", a, np.exp, lambda g, x, y: g * y)

    def sigmoid(self, a: Tensor) -> Tensor:
        def fwd(x):
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            out[~pos] = ex / (1.0 + ex)
            return out

        return self._unary("sigmoid", a, fwd, lambda g, x, y: g * y * (1.0 - y))

    def relu(self, a: Tensor) -> Tensor:
        # subgradient at 0 is 0
        return self._unary(
            "relu", a,
            lambda x: np.maximum(x, 0.0),
            lambda g, x, y: g * (x > 0),
        )

    def elementwise(self, op: str, a: Tensor, b: Tensor = None) -> Tensor:
        """Generic dispatch over {add, mul, sub, exp, sigmoid, relu}."""
        if op not in _ELEMENTWISE_OPS:
            raise ValueError(f"unknown elementwise op {op!r}")
        if op in ("add", "mul", "sub"):
            if b is None:
                raise ValueError(f"elementwise {op!r} needs two operands")
            return getattr(self, op)(a, b)
        if b is not None:
            raise ValueError(f"elementwise {op!r} takes one operand")
        return getattr(self, op)(a)

    def concat_channels(self, a: Tensor, b: Tensor) -> Tensor:
        ad, bd = a.data, b.data
        if ad.ndim != 3 or bd.ndim != 3 or ad.shape[:2] != bd.shape[:2]:
            raise ShapeError(
                f"concat_channels spatial mismatch: {ad.shape} vs {bd.shape}"
            )
        c1 = ad.shape[2]
        out = np.concatenate([ad, bd], axis=2)

        def bwd(gout):
            return (
                np.ascontiguousarray(gout[:, :, :c1]),
                np.ascontiguousarray(gout[:, :, c1:]),
            )

        return self._record("concat_channels", (a, b), out, bwd)

    def sum(self, a: Tensor) -> Tensor:
        """Full reduction to a 0-d scalar tensor (float64 accumulation)."""
        out = np.asarray(a.data.sum(dtype=np.float64), dtype=np.float32)

        def bwd(gout):
            return (np.full(a.data.shape, gout.reshape(()), dtype=np.float32),)

        return self._record("sum", (a,), out, bwd)

    # -- backward --------------------------------------------------------

    def backward(self, loss: Tensor) -> None:
        """Reverse topological accumulation from a scalar loss.

        Gradients accumulate into the ``grad`` buffers of requires_grad
        tensors; calling twice without ``reset_grads`` adds up.
        """
        if loss.data.size != 1:
            raise ShapeError(f"loss must be scalar, got dims {loss.dims}")
        if loss.node_id is None or loss._graph is not self:
            if loss.requires_grad:
                seed = np.ones_like(loss.data)
                loss.grad = seed if loss.grad is None else loss.grad + seed
            return
        buf = {loss.node_id: np.ones_like(loss.data)}
        for nid in range(len(self.nodes) - 1, -1, -1):
            gout = buf.pop(nid, None)
            if gout is None:
                continue
            node = self.nodes[nid]
            if not node.carries:
                continue
            grads = node.bwd(gout)
            for t, need, gi in zip(node.inputs, node.needs, grads):
                if not need or gi is None:
                    continue
                if t.requires_grad:
                    if t.grad is None:
                        t.grad = np.array(gi, dtype=np.float32)
                    else:
                        t.grad += gi
                if t._graph is self and t.node_id is not None:
                    if t.node_id in buf:
                        buf[t.node_id] = buf[t.node_id] + gi
                    else:
                        buf[t.node_id] = gi


def backward(loss: Tensor, graph: Graph) -> None:
    graph.backward(loss)


def sgd_step(params, lr: float) -> None:
    """In-place SGD update param -= lr * grad, then clear the grads."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    params = list(params)
    for p in params:
        if p.grad is None:
            raise ProtocolError("sgd_step: parameter has no gradient populated")
    lr32 = np.float32(lr)
    for p in params:
        np.multiply(p.grad, lr32, out=p.grad)
        np.subtract(p.data, p.grad, out=p.data)
        p.grad = None


def reset_grads(params) -> None:
    for p in params:
        p.grad = None
