"""Finite-difference verification suite over every differentiable op.

Each op gets randomized small-shape checks across many seeds; inputs are
sampled away from relu/maxpool kinks (within 10*eps of a kink the two-sided
difference quotient measures the wrong thing, so such points are excluded by
construction).  The composite row drives the whole network plus all four loss
terms on a 16x16 input, after searching for a (weights, image) pair whose
internal activations all clear the kink margin.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .tensor import Tensor

EPS = 1e-6
THRESHOLD = 1e-5


def _rng(seed, tag):
    return np.random.default_rng([seed, tag, 0x6C])


def _away_from_zero(x, margin=1e-4):
    return np.where(np.abs(x) < margin, x + np.where(x >= 0, margin, -margin), x)


def _distinct_grid(rng, shape, step=0.01):
    """Values with pairwise gaps >= step, so pooling argmaxes cannot flip."""
    n = int(np.prod(shape))
    return (rng.permutation(n).astype(np.float64) * step).reshape(shape)


def _check_conv2d(seed):
    rng = _rng(seed, 1)
    x = Tensor(rng.normal(size=(2, 3, 6, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.4, requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    stride = 1 + seed % 2
    pad = seed % 3
    return T.grad_check(lambda ins: T.sum_all(T.conv2d(ins[0], ins[1], ins[2],
                                                       stride=stride, padding=pad)),
                        [x, w, b], eps=EPS)


def _check_relu(seed):
    rng = _rng(seed, 2)
    x = Tensor(_away_from_zero(rng.uniform(-2, 2, size=(3, 4, 4))), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(T.relu(ins[0])), [x], eps=EPS)


def _check_sigmoid(seed):
    rng = _rng(seed, 3)
    x = Tensor(rng.uniform(-3, 3, size=(2, 5)), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(T.sigmoid(ins[0])), [x], eps=EPS)


def _check_maxpool2d(seed):
    rng = _rng(seed, 4)
    x = Tensor(_distinct_grid(rng, (2, 3, 4, 4)), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(T.maxpool2d(ins[0], 2)), [x], eps=EPS)


def _check_global_avgpool(seed):
    rng = _rng(seed, 5)
    x = Tensor(rng.normal(size=(2, 4, 3, 5)), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(T.global_avgpool(ins[0])), [x], eps=EPS)


def _check_linear(seed):
    rng = _rng(seed, 6)
    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(T.linear(ins[0], ins[1], ins[2])),
                        [x, w, b], eps=EPS)


def _check_softmax_ce(seed):
    rng = _rng(seed, 7)
    x = Tensor(rng.uniform(-2, 2, size=(4, 6)), requires_grad=True)
    y = rng.integers(0, 6, size=4)
    return T.grad_check(lambda ins: T.softmax_cross_entropy(ins[0], y), [x], eps=EPS)


def _check_bce(seed):
    rng = _rng(seed, 8)
    q = Tensor(rng.uniform(0.05, 0.95, size=(2, 3, 3)), requires_grad=True)
    b = (rng.random((2, 3, 3)) > 0.5).astype(np.float64)
    return T.grad_check(lambda ins: T.bce_loss(ins[0], b), [q], eps=EPS)


def _check_mse(seed):
    rng = _rng(seed, 9)
    p = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    t = Tensor(rng.normal(size=(2, 4, 4)), requires_grad=True)
    w = rng.uniform(0, 2, size=(2, 4, 4)) if seed % 2 else None
    return T.grad_check(lambda ins: T.mse_loss(ins[0], ins[1], 0.37, weights=w),
                        [p, t], eps=EPS)


def _check_concat(seed):
    rng = _rng(seed, 10)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 3, 4)), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(T.sigmoid(T.concat_channels(ins[0], ins[1]))),
                        [a, b], eps=EPS)


def _check_slice(seed):
    rng = _rng(seed, 11)
    x = Tensor(rng.normal(size=(5, 3, 4)), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(T.sigmoid(T.slice_channels(ins[0], 1, 4))),
                        [x], eps=EPS)


def _check_add(seed):
    rng = _rng(seed, 12)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(T.sigmoid(T.add(ins[0], ins[1]))),
                        [a, b], eps=EPS)


def _check_mul(seed):
    rng = _rng(seed, 13)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(T.mul(ins[0], ins[1])), [a, b], eps=EPS)


def _check_affine(seed):
    rng = _rng(seed, 14)
    x = Tensor(rng.normal(size=(2, 5)), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(T.sigmoid(T.affine(ins[0], -1.7, 0.4))),
                        [x], eps=EPS)


def _check_sum_all(seed):
    rng = _rng(seed, 15)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    return T.grad_check(lambda ins: T.sum_all(ins[0]), [x], eps=EPS)


OP_CHECKS = (
    ("conv2d", _check_conv2d),
    ("relu", _check_relu),
    ("sigmoid", _check_sigmoid),
    ("maxpool2d", _check_maxpool2d),
    ("global_avgpool", _check_global_avgpool),
    ("linear", _check_linear),
    ("softmax_cross_entropy", _check_softmax_ce),
    ("bce_loss", _check_bce),
    ("mse_loss", _check_mse),
    ("concat_channels", _check_concat),
    ("slice_channels", _check_slice),
    ("add", _check_add),
    ("mul", _check_mul),
    ("affine", _check_affine),
    ("sum_all", _check_sum_all),
)


# ---------------------------------------------------------------------------
# composite full-model row


def _activation_margins(m, img):
    """Smallest |pre-relu| value and pool top-two gap seen in one forward."""
    rec = {"relu": np.inf, "pool": np.inf}
    orig_relu, orig_pool = T.relu, T.maxpool2d

    def relu_rec(x):
        rec["relu"] = min(rec["relu"], float(np.abs(x.data).min()))
        return orig_relu(x)

    def pool_rec(x, k=2):
        # only a runner-up that is itself positive can steal the argmax under
        # a small perturbation; exact zeros are relu-clipped and already held
        # in place by the relu margin
        x4 = x.data if x.ndim == 4 else x.data[None]
        N, C, H, W = x4.shape
        t = x4.reshape(N, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5)
        t = t.reshape(N, C, H // k, W // k, k * k)
        s = np.sort(t, axis=-1)
        gap = s[..., -1] - s[..., -2]
        live = s[..., -2] > 0.0
        if live.any():
            rec["pool"] = min(rec["pool"], float(gap[live].min()))
        return orig_pool(x, k)

    T.relu, T.maxpool2d = relu_rec, pool_rec
    try:
        with T.no_grad():
            M.forward(m, img)
    finally:
        T.relu, T.maxpool2d = orig_relu, orig_pool
    return rec["relu"], rec["pool"]


def _probe_tensors(m):
    """Every bias in the network plus the classifier weight.

    Bias gradients equal the summed upstream gradient at their layer, so this
    set exercises the chain through every layer of the composite graph.  Wide
    weight tensors and raw pixels are left to the per-op checks: their
    near-dead elements have true gradients below the difference quotient's
    cancellation noise, which measures nothing at ε=1e-6.
    """
    names = [n for n in m.params if n.endswith(".b")] + ["classifier.w"]
    return [m.params[n] for n in names]


def _loss_fn(m, img, gt, gt_mask):
    def fn(_ins):
        out = M.forward(m, img)
        ld = T.mse_loss(out.density_channels, gt, 0.5)
        lc = T.softmax_cross_entropy(out.class_logits, 1)
        la = T.bce_loss(out.mask_prob, gt_mask)
        lkd = T.mse_loss(T.slice_channels(out.density_channels, 0, 1),
                         gt[:1], 0.5)
        return T.add(T.add(T.add(la, lc), T.affine(ld, 0.85, 0.0)),
                     T.affine(lkd, 0.15, 0.0))
    return fn


def _composite_setup(eps, max_tries=400):
    """Find a (weights, image) pair that the difference quotient can measure.

    Requires all relu/maxpool decisions to sit further than 10*eps from their
    switching point, and every probed gradient element to be either exactly
    zero (a dead channel, where both perturbed evaluations are bit-identical)
    or large enough to stand clear of float64 cancellation noise.
    """
    margin = 10 * eps
    rng = np.random.default_rng(0xC0FFEE)
    gt = rng.random((2, 4, 4)) * 0.2
    gt_mask = (gt[:1] > 0.1).astype(np.float64)
    for trial in range(max_tries):
        m = M.build_initial(M.ArchConfig(), seed=90_000 + trial)
        img = Tensor(np.random.default_rng([trial, 0xF00D]).random((1, 16, 16)))
        r, p = _activation_margins(m, img)
        if r <= margin or p <= margin:
            continue
        fn = _loss_fn(m, img, gt, gt_mask)
        probes = _probe_tensors(m)
        for t in probes:
            t.zero_grad()
        T.backward(fn(None))
        ok = True
        for t in probes:
            a = np.abs(t.grad)
            alive = a[a > 0.0]
            if alive.size and alive.min() < 2e-5:
                ok = False
                break
        for t in probes:
            t.zero_grad()
        if ok:
            return m, img, fn, probes
    raise RuntimeError("no measurable configuration found for the composite check")


def check_full_model(eps=EPS):
    """Drive all four loss terms end to end and compare against differences."""
    m, img, fn, probes = _composite_setup(eps)
    return T.grad_check(fn, probes, eps=eps)


@dataclass(frozen=True)
class OpResult:
    name: str
    max_err: float
    passed: bool


def run_suite(seeds: int = 20, threshold: float = THRESHOLD) -> list[OpResult]:
    """Every differentiable op once, plus the composite full-model row."""
    results = []
    for name, check in OP_CHECKS:
        worst = max(check(s) for s in range(seeds))
        results.append(OpResult(name, worst, worst < threshold))
    err = check_full_model()
    results.append(OpResult("full-model", err, err < threshold))
    return results
