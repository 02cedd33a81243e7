"""Minimal reverse-mode automatic differentiation over numpy arrays.

Covers exactly the layer set the beat-compression networks need:
1-D convolution over time (leads/filters as channels), its transpose,
dense layers with optional L2 penalty, TanH, batch normalization and
inverted dropout, plus the Adam optimizer and a finite-difference
gradient checker. Everything is float64.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import OptimizerError, ShapeError, StateError

try:  # optional: tightens the inner conv loops considerably
    from numba import njit as _njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an optional extra
    _HAVE_NUMBA = False

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (fast inference path)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-accumulate gradients from this scalar into all parents."""
        if self.data.size != 1:
            raise StateError("backward() requires a scalar loss tensor")
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accum(t: Tensor, g: np.ndarray):
    if not (t.requires_grad or t._parents):
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _node(data, parents, backward) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad or p._parents for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
        out.requires_grad = True
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data + b.data

    def backward(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, mul(b, -1.0))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data * b.data

    def backward(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out_data = a.data @ b.data

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _node(out_data, (a, b), backward)


def tanh(a) -> Tensor:
    a = _wrap(a)
    y = np.tanh(a.data)

    def backward(g):
        t = y * y
        np.subtract(1.0, t, out=t)
        t *= g
        _accum(a, t)

    return _node(y, (a,), backward)


def exp(a) -> Tensor:
    a = _wrap(a)
    y = np.exp(a.data)

    def backward(g):
        _accum(a, g * y)

    return _node(y, (a,), backward)


def square(a) -> Tensor:
    a = _wrap(a)

    def backward(g):
        _accum(a, g * 2.0 * a.data)

    return _node(a.data * a.data, (a,), backward)


def powc(a, p: float) -> Tensor:
    """Elementwise constant power (used for 1/sqrt in batchnorm)."""
    a = _wrap(a)
    y = a.data**p

    def backward(g):
        _accum(a, g * p * a.data ** (p - 1.0))

    return _node(y, (a,), backward)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        gg = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a_ % a.data.ndim for a_ in axes):
                gg = np.expand_dims(gg, ax)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _node(y, (a,), backward)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = _wrap(a)
    y = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(y.size, 1)

    def backward(g):
        gg = np.asarray(g) / count
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            for ax in sorted(a_ % a.data.ndim for a_ in axes):
                gg = np.expand_dims(gg, ax)
        _accum(a, np.broadcast_to(gg, a.data.shape))

    return _node(y, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)

    def backward(g):
        _accum(a, g.reshape(a.data.shape))

    return _node(a.data.reshape(shape), (a,), backward)


def narrow(a, axis: int, start: int, stop: int) -> Tensor:
    """Slice [start:stop) along one axis."""
    a = _wrap(a)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backward(g):
        full = np.zeros_like(a.data)
        full[sl] = g
        _accum(a, full)

    return _node(a.data[sl], (a,), backward)


# ---------------------------------------------------------------------------
# convolution kernels


def _same_pads(l_out: int, l_in: int, k: int, stride: int) -> tuple[int, int]:
    total = max((l_out - 1) * stride + k - l_in, 0)
    return total // 2, total - total // 2


def _conv_fwd(xp: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    # xp (N,C,Lp), w (O,C,K) -> (N,O,Lo) plus the (N*Lo, C*K) patch matrix
    n, c, lp = xp.shape
    o, _, k = w.shape
    flat = _im2col_flat(np.ascontiguousarray(xp), k, stride)
    lo = (lp - k) // stride + 1
    y = (flat @ w.reshape(o, c * k).T).reshape(n, lo, o)
    return y.transpose(0, 2, 1), flat


def _col2im_py(t: np.ndarray, stride: int, lp: int) -> np.ndarray:
    # t (N,Lo,C,K) -> overlap-added (N,C,Lp)
    n, lo, c, k = t.shape
    tt = t.transpose(0, 2, 1, 3)
    dxp = np.zeros((n, c, lp))
    for kk in range(k):
        dxp[:, :, kk : kk + (lo - 1) * stride + 1 : stride] += tt[:, :, :, kk]
    return dxp


if _HAVE_NUMBA:

    @_njit(cache=True)
    def _col2im(t, stride, lp):  # pragma: no cover - numpy twin is tested
        n, lo, c, k = t.shape
        dxp = np.zeros((n, c, lp))
        for b in range(n):
            for i in range(lo):
                base = i * stride
                for ch in range(c):
                    for kk in range(k):
                        dxp[b, ch, base + kk] += t[b, i, ch, kk]
        return dxp

else:
    _col2im = _col2im_py


def _conv_bwd_data(dy: np.ndarray, w: np.ndarray, stride: int, lp: int) -> np.ndarray:
    # dy (N,O,Lo), w (O,C,K) -> dxp (N,C,Lp)
    n, o, lo = dy.shape
    _, c, k = w.shape
    flat = np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(n * lo, o)
    t = (flat @ w.reshape(o, c * k)).reshape(n, lo, c, k)
    return _col2im(t, stride, lp)


def _im2col_flat_py(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    # xp (N,C,Lp) -> (N*Lo, C*K) patch matrix
    cols = sliding_window_view(xp, k, axis=2)[:, :, ::stride, :]
    n, c, lo, _ = cols.shape
    return cols.transpose(0, 2, 1, 3).reshape(n * lo, c * k)


if _HAVE_NUMBA:

    @_njit(cache=True)
    def _im2col_flat(xp, k, stride):  # pragma: no cover - numpy twin is tested
        n, c, lp = xp.shape
        lo = (lp - k) // stride + 1
        flat = np.empty((n * lo, c * k))
        for b in range(n):
            for i in range(lo):
                row = b * lo + i
                base = i * stride
                for ch in range(c):
                    for kk in range(k):
                        flat[row, ch * k + kk] = xp[b, ch, base + kk]
        return flat

else:
    _im2col_flat = _im2col_flat_py


def _conv_bwd_weight(flat: np.ndarray, dy: np.ndarray, c: int, k: int) -> np.ndarray:
    # flat (N*Lo, C*K) patch matrix, dy (N,O,Lo) -> dw (O,C,K)
    n, o, lo = dy.shape
    dyf = np.ascontiguousarray(dy.transpose(0, 2, 1)).reshape(n * lo, o)
    return (dyf.T @ flat).reshape(o, c, k)


def conv1d(x, w, b, stride: int) -> Tensor:
    """Zero-padded "same" convolution: output length = ceil(L/stride).

    x (N, C_in, L); w (C_out, C_in, K); b (C_out,).
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    n, c, l_in = x.data.shape
    l_out = -(-l_in // stride)
    pl, pr = _same_pads(l_out, l_in, w.data.shape[2], stride)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pl, pr)))
    y, flat = _conv_fwd(xp, w.data, stride)
    out_data = y + b.data[None, :, None]
    o, c_in, k = w.data.shape

    def backward(g):
        _accum(b, g.sum(axis=(0, 2)))
        _accum(w, _conv_bwd_weight(flat, g, c_in, k))
        if x.requires_grad or x._parents:
            dxp = _conv_bwd_data(g, w.data, stride, xp.shape[2])
            _accum(x, dxp[:, :, pl : pl + l_in])

    return _node(out_data, (x, w, b), backward)


def conv_transpose1d(x, w, b, stride: int, out_len: int) -> Tensor:
    """Adjoint of :func:`conv1d`: maps length L to ``out_len`` where a
    same-padded strided conv would map ``out_len`` back to L.

    x (N, C_in, L); w (C_in, C_out, K); b (C_out,).
    """
    x, w, b = _wrap(x), _wrap(w), _wrap(b)
    n, c_in, l_in = x.data.shape
    k = w.data.shape[2]
    expect = -(-out_len // stride)
    if expect != l_in:
        raise ShapeError(
            f"conv_transpose1d: input length {l_in} cannot map to {out_len} "
            f"at stride {stride}"
        )
    pl, pr = _same_pads(l_in, out_len, k, stride)
    lp = out_len + pl + pr
    yp = _conv_bwd_data(x.data, w.data, stride, lp)
    out_data = yp[:, :, pl : pl + out_len] + b.data[None, :, None]

    def backward(g):
        _accum(b, g.sum(axis=(0, 2)))
        gp = np.pad(g, ((0, 0), (0, 0), (pl, pr)))
        y, flat = _conv_fwd(gp, w.data, stride)
        _accum(x, y)
        c_out = w.data.shape[1]
        _accum(w, _conv_bwd_weight(flat, x.data, c_out, k))

    return _node(out_data, (x, w, b), backward)


def _bn_fwd_py(x3, gamma, beta, eps):
    m = x3.mean(axis=(0, 2), keepdims=True)
    v = np.square(x3 - m).mean(axis=(0, 2), keepdims=True)
    inv = (v + eps) ** -0.5
    xhat = (x3 - m) * inv
    out = xhat * gamma.reshape(1, -1, 1) + beta.reshape(1, -1, 1)
    return out, xhat, inv.reshape(-1), m.reshape(-1), v.reshape(-1)


def _bn_bwd_py(g, xhat, inv, gamma):
    dbeta = g.sum(axis=(0, 2))
    dgamma = (g * xhat).sum(axis=(0, 2))
    gh = g * gamma.reshape(1, -1, 1)
    dx = inv.reshape(1, -1, 1) * (
        gh
        - gh.mean(axis=(0, 2), keepdims=True)
        - xhat * (gh * xhat).mean(axis=(0, 2), keepdims=True)
    )
    return dx, dgamma, dbeta


if _HAVE_NUMBA:

    @_njit(cache=True)
    def _bn_fwd(x, gamma, beta, eps):  # pragma: no cover - numpy twin is tested
        n, c, l = x.shape
        out = np.empty_like(x)
        xhat = np.empty_like(x)
        m = np.empty(c)
        v = np.empty(c)
        inv = np.empty(c)
        cnt = n * l
        for ch in range(c):
            s = 0.0
            for b in range(n):
                for i in range(l):
                    s += x[b, ch, i]
            mu = s / cnt
            s2 = 0.0
            for b in range(n):
                for i in range(l):
                    d = x[b, ch, i] - mu
                    s2 += d * d
            var = s2 / cnt
            iv = (var + eps) ** -0.5
            ga, be = gamma[ch], beta[ch]
            for b in range(n):
                for i in range(l):
                    xh = (x[b, ch, i] - mu) * iv
                    xhat[b, ch, i] = xh
                    out[b, ch, i] = xh * ga + be
            m[ch], v[ch], inv[ch] = mu, var, iv
        return out, xhat, inv, m, v

    @_njit(cache=True)
    def _bn_bwd(g, xhat, inv, gamma):  # pragma: no cover - numpy twin is tested
        n, c, l = g.shape
        dx = np.empty_like(g)
        dgamma = np.empty(c)
        dbeta = np.empty(c)
        cnt = n * l
        for ch in range(c):
            sg = 0.0
            sgx = 0.0
            for b in range(n):
                for i in range(l):
                    gv = g[b, ch, i]
                    sg += gv
                    sgx += gv * xhat[b, ch, i]
            dbeta[ch] = sg
            dgamma[ch] = sgx
            ga, iv = gamma[ch], inv[ch]
            mg = sg / cnt * ga
            mgx = sgx / cnt * ga
            for b in range(n):
                for i in range(l):
                    dx[b, ch, i] = iv * (g[b, ch, i] * ga - mg - xhat[b, ch, i] * mgx)
        return dx, dgamma, dbeta

else:
    _bn_fwd = _bn_fwd_py
    _bn_bwd = _bn_bwd_py


def batchnorm_train(x, gamma, beta, eps: float):
    """Fused training-mode batch normalization over (N,C,L) or (N,F).

    Normalizes with batch statistics (gradient flows through them).
    Returns (out, batch_mean, batch_var) with the statistics as plain
    per-channel arrays for running-average bookkeeping.
    """
    x, gamma, beta = _wrap(x), _wrap(gamma), _wrap(beta)
    if x.data.ndim == 3:
        xc = np.ascontiguousarray(x.data)
        out_data, xhat, inv, m, v = _bn_fwd(xc, gamma.data, beta.data, eps)

        def backward(g):
            dx, dgamma, dbeta = _bn_bwd(np.ascontiguousarray(g), xhat, inv, gamma.data)
            _accum(beta, dbeta)
            _accum(gamma, dgamma)
            _accum(x, dx)

        return _node(out_data, (x, gamma, beta), backward), m, v

    # dense-feature path: same math over axis 0 only
    m = x.data.mean(axis=0, keepdims=True)
    v = np.square(x.data - m).mean(axis=0, keepdims=True)
    inv = (v + eps) ** -0.5
    xhat = (x.data - m) * inv
    out_data = xhat * gamma.data.reshape(1, -1) + beta.data.reshape(1, -1)

    def backward(g):
        _accum(beta, g.sum(axis=0))
        _accum(gamma, (g * xhat).sum(axis=0))
        gh = g * gamma.data.reshape(1, -1)
        _accum(
            x,
            inv
            * (
                gh
                - gh.mean(axis=0, keepdims=True)
                - xhat * (gh * xhat).mean(axis=0, keepdims=True)
            ),
        )

    return _node(out_data, (x, gamma, beta), backward), m.reshape(-1), v.reshape(-1)


# ---------------------------------------------------------------------------
# layers


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def params(self) -> list[tuple[str, Tensor]]:
        return []

    def l2_penalty(self) -> Tensor | None:
        return None

    def forward(self, x: Tensor, training: bool) -> Tensor:
        raise NotImplementedError

    def fast_forward(self, x: np.ndarray, training: bool) -> np.ndarray:
        """Graph-free forward on raw arrays (same math as ``forward``).

        Used by the finite-difference loop of the gradient checker,
        where building the tape dominates the runtime. Never updates
        running statistics.
        """
        with no_grad():
            return self.forward(Tensor(x), training).data


class Dense(Layer):
    def __init__(self, n_in, n_out, rng, l2=0.0, name="dense"):
        self.name = name
        self.l2 = l2
        self.W = Tensor(
            glorot_uniform(rng, (n_in, n_out), n_in, n_out),
            requires_grad=True,
            name=f"{name}.W",
        )
        self.b = Tensor(np.zeros(n_out), requires_grad=True, name=f"{name}.b")

    def params(self):
        return [(self.W.name, self.W), (self.b.name, self.b)]

    def l2_penalty(self):
        if self.l2 <= 0:
            return None
        return mul(tsum(square(self.W)), self.l2)

    def forward(self, x, training):
        if x.data.ndim != 2 or x.data.shape[1] != self.W.data.shape[0]:
            raise ShapeError(
                f"{self.name}: expected (N, {self.W.data.shape[0]}), got {x.data.shape}"
            )
        return add(matmul(x, self.W), self.b)

    def fast_forward(self, x, training):
        return x @ self.W.data + self.b.data


class Conv1d(Layer):
    def __init__(self, c_in, c_out, kernel, stride, rng, name="conv"):
        if kernel < 1 or stride < 1:
            raise ShapeError(f"{name}: kernel and stride must be >= 1")
        self.name = name
        self.stride = stride
        fan_in, fan_out = c_in * kernel, c_out * kernel
        self.W = Tensor(
            glorot_uniform(rng, (c_out, c_in, kernel), fan_in, fan_out),
            requires_grad=True,
            name=f"{name}.W",
        )
        self.b = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.b")

    def params(self):
        return [(self.W.name, self.W), (self.b.name, self.b)]

    def forward(self, x, training):
        if x.data.ndim != 3 or x.data.shape[1] != self.W.data.shape[1]:
            raise ShapeError(
                f"{self.name}: expected (N, {self.W.data.shape[1]}, L), got {x.data.shape}"
            )
        return conv1d(x, self.W, self.b, self.stride)

    def fast_forward(self, x, training):
        l_in = x.shape[2]
        l_out = -(-l_in // self.stride)
        pl, pr = _same_pads(l_out, l_in, self.W.data.shape[2], self.stride)
        xp = np.pad(x, ((0, 0), (0, 0), (pl, pr)))
        y, _ = _conv_fwd(xp, self.W.data, self.stride)
        return y + self.b.data[None, :, None]


class ConvTranspose1d(Layer):
    def __init__(self, c_in, c_out, kernel, stride, out_len, rng, name="convT"):
        self.name = name
        self.stride = stride
        self.out_len = out_len
        fan_in, fan_out = c_in * kernel, c_out * kernel
        self.W = Tensor(
            glorot_uniform(rng, (c_in, c_out, kernel), fan_in, fan_out),
            requires_grad=True,
            name=f"{name}.W",
        )
        self.b = Tensor(np.zeros(c_out), requires_grad=True, name=f"{name}.b")

    def params(self):
        return [(self.W.name, self.W), (self.b.name, self.b)]

    def forward(self, x, training):
        if x.data.ndim != 3 or x.data.shape[1] != self.W.data.shape[0]:
            raise ShapeError(
                f"{self.name}: expected (N, {self.W.data.shape[0]}, L), got {x.data.shape}"
            )
        return conv_transpose1d(x, self.W, self.b, self.stride, self.out_len)

    def fast_forward(self, x, training):
        k = self.W.data.shape[2]
        pl, pr = _same_pads(x.shape[2], self.out_len, k, self.stride)
        lp = self.out_len + pl + pr
        yp = _conv_bwd_data(x, self.W.data, self.stride, lp)
        return yp[:, :, pl : pl + self.out_len] + self.b.data[None, :, None]


class Tanh(Layer):
    def __init__(self, name="tanh"):
        self.name = name

    def forward(self, x, training):
        return tanh(x)

    def fast_forward(self, x, training):
        return np.tanh(x)


class BatchNorm(Layer):
    """Per-channel batch normalization for (N, C, L) or (N, F) tensors.

    Training mode normalizes with batch statistics (gradient flows
    through them); inference uses running statistics.
    """

    def __init__(self, channels, rng=None, momentum=0.1, eps=1e-5, name="bn"):
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True, name=f"{name}.gamma")
        self.beta = Tensor(np.zeros(channels), requires_grad=True, name=f"{name}.beta")
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.update_stats = True

    def params(self):
        return [(self.gamma.name, self.gamma), (self.beta.name, self.beta)]

    def forward(self, x, training):
        conv_mode = x.data.ndim == 3
        shape = (1, -1, 1) if conv_mode else (1, -1)
        if training:
            out, m, v = batchnorm_train(x, self.gamma, self.beta, self.eps)
            if self.update_stats:
                mom = self.momentum
                self.running_mean += mom * (m - self.running_mean)
                self.running_var += mom * (v - self.running_var)
            return out
        rm = self.running_mean.reshape(shape)
        rv = self.running_var.reshape(shape)
        xhat = mul(sub(x, rm), (rv + self.eps) ** -0.5)
        return add(mul(xhat, reshape(self.gamma, shape)), reshape(self.beta, shape))

    def fast_forward(self, x, training):
        conv_mode = x.ndim == 3
        axes = (0, 2) if conv_mode else (0,)
        shape = (1, -1, 1) if conv_mode else (1, -1)
        if training:
            if conv_mode:
                out = _bn_fwd(
                    np.ascontiguousarray(x), self.gamma.data, self.beta.data, self.eps
                )[0]
                return out
            m = x.mean(axis=axes, keepdims=True)
            xc = x - m
            v = np.square(xc).mean(axis=axes, keepdims=True)
            xhat = xc * (v + self.eps) ** -0.5
        else:
            rm = self.running_mean.reshape(shape)
            rv = self.running_var.reshape(shape)
            xhat = (x - rm) * (rv + self.eps) ** -0.5
        return xhat * self.gamma.data.reshape(shape) + self.beta.data.reshape(shape)


class Dropout(Layer):
    """Inverted dropout: scales by 1/(1-p) in training, identity at inference.

    ``self.seed`` is assigned externally before each training forward;
    the mask RNG is re-created from it on every call, so re-running a
    forward with the same seed reproduces the same mask.
    """

    def __init__(self, rate, name="dropout"):
        if not 0.0 <= rate < 1.0:
            raise ShapeError(f"{name}: dropout rate must be in [0, 1)")
        self.name = name
        self.rate = rate
        self.seed = None
        self._mask_seed = None
        self._mask = None

    def forward(self, x, training):
        if not training or self.rate == 0.0:
            return x
        if self.seed is None:
            raise StateError(f"{self.name}: dropout seed not set")
        rng = np.random.default_rng(self.seed)
        keep = 1.0 - self.rate
        mask = (rng.random(x.data.shape) < keep) / keep
        return mul(x, Tensor(mask))

    def fast_forward(self, x, training):
        if not training or self.rate == 0.0:
            return x
        if self.seed is None:
            raise StateError(f"{self.name}: dropout seed not set")
        # the mask is a pure function of (seed, shape); cache it so the
        # finite-difference loop does not redraw it on every call
        if self._mask_seed is not self.seed or self._mask.shape != x.shape:
            rng = np.random.default_rng(self.seed)
            keep = 1.0 - self.rate
            self._mask = (rng.random(x.shape) < keep) / keep
            self._mask_seed = self.seed
        return x * self._mask


# ---------------------------------------------------------------------------
# Adam optimizer


@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params):
        return cls(
            m=[np.zeros_like(p.data) for p in params],
            v=[np.zeros_like(p.data) for p in params],
            step=0,
        )


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """In-place Adam update with bias correction over aligned param/grad lists."""
    state.step += 1
    t = state.step
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            name = getattr(p, "name", None) or f"param[{i}]"
            raise OptimizerError(f"non-finite gradient for {name}")
        state.m[i] += (1.0 - beta1) * (g - state.m[i])
        state.v[i] += (1.0 - beta2) * (g * g - state.v[i])
        mhat = state.m[i] / (1.0 - beta1**t)
        vhat = state.v[i] / (1.0 - beta2**t)
        p.data -= lr * mhat / (np.sqrt(vhat) + eps)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    passed: bool
    max_rel_error: float
    worst_param: str
    per_param: dict


def gradient_check(
    params,
    loss_fn,
    h: float = 1e-4,
    tolerance: float = 1e-4,
    fd_loss_for=None,
) -> GradcheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``params`` is a list of (name, Tensor). ``loss_fn()`` must rebuild
    the forward graph and return the scalar loss; it must be
    deterministic across calls (fix any noise seeds). ``fd_loss_for``
    optionally maps a param name to a cheaper zero-argument evaluator
    for the finite-difference loop.

    The per-parameter error is norm-based:
    ||analytic - fd|| / max(||analytic||, ||fd||). Elementwise ratios
    are meaningless where the true gradient is comparable to the FD
    truncation error (~1e-9 at h=1e-4), while a wrong backward rule
    perturbs the whole array and is still caught.
    """
    for _, p in params:
        p.zero_grad()
    loss = loss_fn()
    loss.backward()
    analytic = {}
    for name, p in params:
        if p.grad is None:
            analytic[name] = np.zeros_like(p.data)
        else:
            analytic[name] = p.grad.copy()

    per_param = {}
    worst = ("", 0.0)
    with no_grad():
        for name, p in params:
            evaluate = fd_loss_for(name) if fd_loss_for is not None else None
            if evaluate is None:
                evaluate = lambda: float(loss_fn().data)
            flat = p.data.reshape(-1)
            a_flat = analytic[name].reshape(-1)
            fd_flat = np.empty_like(a_flat)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                lp = evaluate()
                flat[i] = orig - h
                lm = evaluate()
                flat[i] = orig
                fd_flat[i] = (lp - lm) / (2.0 * h)
            # the 1e-4 floor keeps exact-zero gradients (e.g. a conv bias
            # followed by batchnorm) from dividing FD noise by ~0
            denom = max(np.linalg.norm(a_flat), np.linalg.norm(fd_flat), 1e-4)
            rel = float(np.linalg.norm(a_flat - fd_flat) / denom)
            per_param[name] = rel
            if rel > worst[1]:
                worst = (name, rel)
    return GradcheckReport(
        passed=worst[1] < tolerance,
        max_rel_error=worst[1],
        worst_param=worst[0],
        per_param=per_param,
    )


__all__ = [
    "Tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "matmul",
    "tanh",
    "exp",
    "square",
    "powc",
    "tsum",
    "tmean",
    "reshape",
    "narrow",
    "conv1d",
    "conv_transpose1d",
    "Layer",
    "Dense",
    "Conv1d",
    "ConvTranspose1d",
    "Tanh",
    "BatchNorm",
    "Dropout",
    "AdamState",
    "adam_step",
    "gradient_check",
    "GradcheckReport",
    "glorot_uniform",
]
