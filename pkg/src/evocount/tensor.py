"""Minimal reverse-mode autodiff over numpy float64 arrays.

Every differentiable value lives in a Tensor that remembers its parents and a
backward closure.  Calling backward(loss) walks the reachable graph in reverse
creation order, so each node's closure fires exactly once after all gradient
contributions into it have accumulated.  Only the ops a small convolutional
density-regression model needs are provided; all of them are batched over a
leading sample dimension where that makes sense.

Internal rule for backward closures: every array handed to _accumulate must be
freshly allocated (never a view of graph state), so accumulation may add in
place.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

_ids = itertools.count()
_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction for cheap inference."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _as_f64(x):
    a = np.asarray(x, dtype=np.float64)
    return a


class Tensor:
    """A float64 array plus the bookkeeping reverse-mode AD needs.

    grad is allocated lazily: reading it on a leaf the loss never touched
    yields zeros of the right shape rather than None.
    """

    __slots__ = ("data", "requires_grad", "_grad", "_parents", "_backward", "_nid")

    def __init__(self, data, requires_grad=False, _parents=()):
        self.data = _as_f64(data)
        self.requires_grad = bool(requires_grad)
        self._grad = None
        self._parents = _parents
        self._backward = None
        self._nid = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def grad(self):
        if not self.requires_grad:
            return None
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    def zero_grad(self):
        self._grad = None

    def item(self):
        return float(self.data)

    def _accumulate(self, g):
        if self._grad is None:
            self._grad = g
        else:
            self._grad += g

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _result(data, parents):
    """Build the output tensor for an op; tracks grad iff any parent does."""
    needs = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=needs, _parents=tuple(p for p in parents if p.requires_grad) if needs else ())


def backward(loss: Tensor):
    """Run reverse-mode accumulation from a scalar loss.

    Nodes are visited in strictly decreasing creation order, which is a valid
    topological order because every op's output is created after its inputs.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return
    seen = {id(loss)}
    nodes = [loss]
    stack = [loss]
    while stack:
        t = stack.pop()
        for p in t._parents:
            if id(p) not in seen:
                seen.add(id(p))
                nodes.append(p)
                stack.append(p)
    nodes.sort(key=lambda t: t._nid, reverse=True)
    loss._accumulate(np.ones((), dtype=np.float64))
    for t in nodes:
        if t._backward is not None:
            t._backward(t._grad)


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"add: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = _result(a.data + b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(g.copy())
            if b.requires_grad:
                b._accumulate(g.copy())
        out._backward = bwd
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul: shape mismatch {a.data.shape} vs {b.data.shape}")
    out = _result(a.data * b.data, (a, b))
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(g * b.data)
            if b.requires_grad:
                b._accumulate(g * a.data)
        out._backward = bwd
    return out


def affine(x: Tensor, gain: float, offset: float) -> Tensor:
    """gain * x + offset with python-float coefficients."""
    gain = float(gain)
    out = _result(gain * x.data + float(offset), (x,))
    if out.requires_grad:
        def bwd(g):
            x._accumulate(gain * g)
        out._backward = bwd
    return out


def sum_all(x: Tensor) -> Tensor:
    out = _result(x.data.sum(), (x,))
    if out.requires_grad:
        def bwd(g):
            x._accumulate(np.full_like(x.data, g))
        out._backward = bwd
    return out


def relu(x: Tensor) -> Tensor:
    data = np.maximum(x.data, 0.0)
    out = _result(data, (x,))
    if out.requires_grad:
        mask = x.data > 0.0
        def bwd(g):
            x._accumulate(g * mask)
        out._backward = bwd
    return out


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(x: Tensor) -> Tensor:
    # numerically stable in both tails; rounded away from exact 0/1 so the
    # output stays inside the open interval even in float64 saturation
    data = np.empty_like(x.data)
    pos = x.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    e = np.exp(x.data[~pos])
    data[~pos] = e / (1.0 + e)
    np.clip(data, _SIG_LO, _SIG_HI, out=data)
    out = _result(data, (x,))
    if out.requires_grad:
        def bwd(g):
            x._accumulate(g * data * (1.0 - data))
        out._backward = bwd
    return out


def _channel_axis(t: Tensor) -> int:
    if t.ndim == 4:
        return 1
    if t.ndim == 3:
        return 0
    raise ValueError(f"expected a 3D (C,H,W) or 4D (N,C,H,W) tensor, got ndim={t.ndim}")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != b.ndim:
        raise ValueError(f"concat_channels: rank mismatch {a.ndim} vs {b.ndim}")
    ax = _channel_axis(a)
    if a.data.shape[-2:] != b.data.shape[-2:]:
        raise ValueError(
            f"concat_channels: spatial mismatch {a.data.shape[-2:]} vs {b.data.shape[-2:]}")
    if a.ndim == 4 and a.data.shape[0] != b.data.shape[0]:
        raise ValueError(f"concat_channels: batch mismatch {a.data.shape[0]} vs {b.data.shape[0]}")
    ca = a.data.shape[ax]
    out = _result(np.concatenate([a.data, b.data], axis=ax), (a, b))
    if out.requires_grad:
        def bwd(g):
            ga, gb = np.split(g, [ca], axis=ax)
            if a.requires_grad:
                a._accumulate(ga.copy())
            if b.requires_grad:
                b._accumulate(gb.copy())
        out._backward = bwd
    return out


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    ax = _channel_axis(x)
    c = x.data.shape[ax]
    if not (0 <= start < stop <= c):
        raise ValueError(f"slice_channels: bad range [{start}:{stop}) for {c} channels")
    idx = (slice(None),) * ax + (slice(start, stop),)
    out = _result(x.data[idx].copy(), (x,))
    if out.requires_grad:
        def bwd(g):
            gx = np.zeros_like(x.data)
            gx[idx] = g
            x._accumulate(gx)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# convolution / pooling / linear


def _conv_geometry(H, W, kh, kw, stride, padding):
    Hp, Wp = H + 2 * padding, W + 2 * padding
    if kh > Hp or kw > Wp:
        raise ValueError(f"conv2d: kernel ({kh},{kw}) larger than padded input ({Hp},{Wp})")
    Ho = (Hp - kh) // stride + 1
    Wo = (Wp - kw) // stride + 1
    return Ho, Wo


def conv2d(x: Tensor, w: Tensor, b: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2D cross-correlation with bias, NCHW layout, zero padding.

    Accepts (C,H,W) or (N,C,H,W) input; weight is (C_out, C_in, kh, kw) and
    bias (C_out,).  Implemented as a single im2col GEMM so repeated calls are
    bitwise deterministic and adding output channels never perturbs existing
    ones.
    """
    if w.ndim != 4:
        raise ValueError(f"conv2d: weight must be 4D, got {w.data.shape}")
    if b.ndim != 1 or b.data.shape[0] != w.data.shape[0]:
        raise ValueError(f"conv2d: bias shape {b.data.shape} does not match weight {w.data.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride/padding ({stride},{padding})")
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ValueError(f"conv2d: input must be 3D or 4D, got ndim={x.ndim}")
    x4 = x.data if batched else x.data[None]
    N, Ci, H, W = x4.shape
    Co, Ciw, kh, kw = w.data.shape
    if Ci != Ciw:
        raise ValueError(f"conv2d: input has {Ci} channels, weight expects {Ciw}")
    Ho, Wo = _conv_geometry(H, W, kh, kw, stride, padding)

    if padding:
        xp = np.zeros((N, Ci, H + 2 * padding, W + 2 * padding), dtype=np.float64)
        xp[:, :, padding:padding + H, padding:padding + W] = x4
    else:
        xp = np.ascontiguousarray(x4)
    sN, sC, sH, sW = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(Ci, kh, kw, N, Ho, Wo),
        strides=(sC, sH, sW, sN, sH * stride, sW * stride),
        writeable=False,
    )
    ckk = Ci * kh * kw
    cols = win.reshape(ckk, N * Ho * Wo)  # copies into one contiguous GEMM operand
    wmat = w.data.reshape(Co, ckk)
    out = wmat @ cols
    out += b.data[:, None]
    out4 = out.reshape(Co, N, Ho, Wo).transpose(1, 0, 2, 3)
    res = _result(out4 if batched else out4[0], (x, w, b))
    if res.requires_grad:
        def bwd(g):
            g4 = g if batched else g[None]
            gmat = np.ascontiguousarray(g4.transpose(1, 0, 2, 3)).reshape(Co, N * Ho * Wo)
            if b.requires_grad:
                b._accumulate(gmat.sum(axis=1))
            if w.requires_grad:
                w._accumulate((gmat @ cols.T).reshape(Co, Ci, kh, kw))
            if x.requires_grad:
                gcols = (wmat.T @ gmat).reshape(Ci, kh, kw, N, Ho, Wo)
                gxp = np.zeros_like(xp)
                he = stride * Ho
                we = stride * Wo
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i:i + he:stride, j:j + we:stride] += (
                            gcols[:, i, j].transpose(1, 0, 2, 3))
                gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
                x._accumulate(gx if batched else np.ascontiguousarray(gx[0]))
        res._backward = bwd
    return res


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; spatial dims must divide by k.

    Ties inside a window route the gradient to the first maximum in row-major
    window order.
    """
    batched = x.ndim == 4
    if not batched and x.ndim != 3:
        raise ValueError(f"maxpool2d: input must be 3D or 4D, got ndim={x.ndim}")
    x4 = x.data if batched else x.data[None]
    N, C, H, W = x4.shape
    if H % k or W % k:
        raise ValueError(f"maxpool2d: spatial dims ({H},{W}) not divisible by k={k}")
    Ho, Wo = H // k, W // k
    tiles = x4.reshape(N, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, k * k)
    arg = tiles.argmax(axis=-1)
    data4 = np.take_along_axis(tiles, arg[..., None], axis=-1)[..., 0]
    out = _result(data4 if batched else data4[0], (x,))
    if out.requires_grad:
        def bwd(g):
            g4 = g if batched else g[None]
            gt = np.zeros_like(tiles)
            np.put_along_axis(gt, arg[..., None], g4[..., None], axis=-1)
            gx = gt.reshape(N, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H, W)
            x._accumulate(gx if batched else gx[0])
        out._backward = bwd
    return out


def global_avgpool(x: Tensor) -> Tensor:
    """Mean over the two spatial dims: (N,C,H,W) -> (N,C) or (C,H,W) -> (C,)."""
    if x.ndim not in (3, 4):
        raise ValueError(f"global_avgpool: input must be 3D or 4D, got ndim={x.ndim}")
    H, W = x.data.shape[-2:]
    out = _result(x.data.mean(axis=(-2, -1)), (x,))
    if out.requires_grad:
        inv = 1.0 / (H * W)
        def bwd(g):
            x._accumulate(np.broadcast_to((g * inv)[..., None, None], x.data.shape).copy())
        out._backward = bwd
    return out


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b for x of shape (D,) or (N,D), w (K,D), b (K,)."""
    if w.ndim != 2 or b.ndim != 1 or b.data.shape[0] != w.data.shape[0]:
        raise ValueError(f"linear: bad weight/bias shapes {w.data.shape}, {b.data.shape}")
    if x.data.shape[-1] != w.data.shape[1]:
        raise ValueError(f"linear: input dim {x.data.shape[-1]} != weight dim {w.data.shape[1]}")
    if x.ndim not in (1, 2):
        raise ValueError(f"linear: input must be 1D or 2D, got ndim={x.ndim}")
    out = _result(x.data @ w.data.T + b.data, (x, w, b))
    if out.requires_grad:
        def bwd(g):
            g2 = g if g.ndim == 2 else g[None]
            x2 = x.data if x.ndim == 2 else x.data[None]
            if b.requires_grad:
                b._accumulate(g2.sum(axis=0))
            if w.requires_grad:
                w._accumulate(g2.T @ x2)
            if x.requires_grad:
                gx = g2 @ w.data
                x._accumulate(gx if x.ndim == 2 else gx[0])
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# losses


def _target_data(t):
    return t.data if isinstance(t, Tensor) else _as_f64(t)


def softmax_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean cross-entropy of softmax(logits) against integer class labels.

    logits is (K,) or (N,K); target an int or an int array of shape (N,).
    """
    single = logits.ndim == 1
    if logits.ndim not in (1, 2):
        raise ValueError(f"softmax_cross_entropy: logits must be 1D or 2D, got {logits.ndim}")
    z = logits.data if not single else logits.data[None]
    n, k = z.shape
    y = np.atleast_1d(np.asarray(target.data if isinstance(target, Tensor) else target))
    y = y.astype(np.int64)
    if y.shape != (n,):
        raise ValueError(f"softmax_cross_entropy: target shape {y.shape} does not match {n} rows")
    if (y < 0).any() or (y >= k).any():
        raise ValueError("softmax_cross_entropy: label out of range")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    lse = np.log(sez)[:, 0] + zmax[:, 0]
    losses = lse - z[np.arange(n), y]
    out = _result(losses.mean(), (logits,))
    if out.requires_grad:
        probs = ez / sez
        def bwd(g):
            gl = probs.copy()
            gl[np.arange(n), y] -= 1.0
            gl *= float(g) / n
            logits._accumulate(gl if not single else np.ascontiguousarray(gl[0]))
        out._backward = bwd
    return out


def bce_loss(q: Tensor, b) -> Tensor:
    """Mean binary cross-entropy over all elements, probabilities clamped to 1e-12.

    b holds {0,1} ground truth and is never differentiated.
    """
    if isinstance(b, Tensor) and b.requires_grad:
        raise ValueError("bce_loss: target must not require grad")
    bt = _target_data(b)
    if bt.shape != q.data.shape:
        raise ValueError(f"bce_loss: shape mismatch {q.data.shape} vs {bt.shape}")
    eps = 1e-12
    qc = np.clip(q.data, eps, 1.0 - eps)
    m = q.data.size
    out = _result(-(bt * np.log(qc) + (1.0 - bt) * np.log(1.0 - qc)).mean(), (q,))
    if out.requires_grad:
        live = (q.data > eps) & (q.data < 1.0 - eps)
        def bwd(g):
            gq = np.zeros_like(q.data)
            np.divide(qc - bt, qc * (1.0 - qc), out=gq, where=live)
            gq *= float(g) / m
            q._accumulate(gq)
        out._backward = bwd
    return out


def mse_loss(pred: Tensor, target, scale: float, weights=None) -> Tensor:
    """scale * sum(weights * (pred - target)^2), weights defaulting to ones.

    Plain squared-error pools; the caller picks scale (for example 1/(2n)) and
    an optional non-negative weight array broadcastable to pred's shape.
    """
    td = _target_data(target)
    if td.shape != pred.data.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.data.shape} vs {td.shape}")
    scale = float(scale)
    diff = pred.data - td
    if weights is None:
        val = scale * np.sum(diff * diff)
    else:
        weights = np.broadcast_to(_as_f64(weights), pred.data.shape)
        val = scale * np.sum(weights * diff * diff)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    out = _result(val, parents)
    if out.requires_grad:
        def bwd(g):
            base = diff if weights is None else weights * diff
            gp = (2.0 * scale * float(g)) * base
            if pred.requires_grad:
                pred._accumulate(gp.copy())
            if isinstance(target, Tensor) and target.requires_grad:
                target._accumulate(-gp)
        out._backward = bwd
    return out


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    """First/second moment buffers plus the shared step counter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def _ensure(self, params):
        if not self.m:
            self.m = [np.zeros_like(p.data) for p in params]
            self.v = [np.zeros_like(p.data) for p in params]
        if len(self.m) != len(params):
            raise ValueError(f"AdamState tracks {len(self.m)} params, got {len(params)}")


def adam_step(params, grads, state: AdamState, lr: float, weight_decay: float = 0.0):
    """One Adam update with bias correction; decay is added to the raw gradient."""
    params = list(params)
    grads = list(grads)
    if len(params) != len(grads):
        raise ValueError(f"adam_step: {len(params)} params vs {len(grads)} grads")
    state._ensure(params)
    state.t += 1
    b1, b2, eps = state.beta1, state.beta2, state.eps
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = _as_f64(g)
        if g.shape != p.data.shape:
            raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# finite-difference checking


def grad_check(fn, inputs, eps: float = 1e-6) -> float:
    """Compare analytic gradients of a scalar-valued fn against central differences.

    fn maps the given list of Tensors to a scalar Tensor and must be pure.
    Returns the worst relative error max(|a-n|) / max(|a|,|n|,1e-8) over every
    element of every input that requires grad.
    """
    inputs = list(inputs)
    for t in inputs:
        t.zero_grad()
    out = fn(inputs)
    backward(out)
    analytic = [t.grad.copy() if t.requires_grad else None for t in inputs]
    worst = 0.0
    for ti, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        flat = t.data.reshape(-1)
        num = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn(inputs).data)
            flat[i] = orig - eps
            fm = float(fn(inputs).data)
            flat[i] = orig
            num[i] = (fp - fm) / (2.0 * eps)
        a = analytic[ti].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(num)), 1e-8)
        err = float(np.max(np.abs(a - num) / denom)) if flat.size else 0.0
        worst = max(worst, err)
    for t in inputs:
        t.zero_grad()
    return worst
