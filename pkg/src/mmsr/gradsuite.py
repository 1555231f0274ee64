"""Finite-difference validation of every differentiable primitive.

Each case draws a small random f64 problem, runs ``autodiff.gradcheck`` on
it and records the worst relative error.  Inputs to relu and l1 are pushed
at least ``MARGIN`` away from their kinks.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import modulation as mod
from .autodiff import Tensor

MARGIN = 1e-3
TOL = 1e-4
SIZES = (1, 3, 5)


def _t(rng, shape, name, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype="f64", name=name)


def _away_from_zero(x: np.ndarray) -> np.ndarray:
    small = np.abs(x) < 10 * MARGIN
    return np.where(small, np.where(x < 0, -1, 1) * (10 * MARGIN + np.abs(x)), x)


def _case_conv2d(rng):
    k = int(rng.choice([1, 3, 5]))
    c_in, c_out = rng.integers(1, 4, size=2)
    h, w = rng.integers(2, 6, size=2)
    x = _t(rng, (c_in, h, w), "x")
    wt = _t(rng, (c_out, c_in, k, k), "weight", 0.5)
    b = _t(rng, (c_out,), "bias")
    return ad.conv2d, [x, wt, b]


def _case_relu(rng):
    x = _t(rng, tuple(rng.integers(1, 5, size=3)), "x")
    x.data = _away_from_zero(x.data)
    return ad.relu, [x]


def _case_bilinear(rng):
    f = int(rng.integers(1, 4))
    x = _t(rng, (int(rng.integers(1, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 5))), "x")
    return (lambda a: ad.bilinear_upsample(a, f)), [x]


def _case_avg_pool(rng):
    f = int(rng.integers(1, 4))
    c, h, w = int(rng.integers(1, 3)), int(rng.integers(1, 4)) * f, int(rng.integers(1, 4)) * f
    return (lambda a: ad.avg_pool_down(a, f)), [_t(rng, (c, h, w), "x")]


def _case_softmax(rng):
    shape = tuple(int(s) for s in rng.integers(1, 6, size=2))
    axis = int(rng.integers(0, 2))
    return (lambda a: ad.softmax(a, axis=axis)), [_t(rng, shape, "x", 2.0)]


def _case_l1(rng):
    shape = tuple(int(s) for s in rng.integers(1, 5, size=3))
    a = _t(rng, shape, "a")
    b = _t(rng, shape, "b")
    b.data = a.data - _away_from_zero(a.data - b.data)
    return ad.l1_loss, [a, b]


def _case_add_concat(rng):
    shape = (int(rng.integers(1, 3)), 3, 4)
    a, b = _t(rng, shape, "a"), _t(rng, shape, "b")
    return (lambda x, y: ad.concat([ad.add(x, y), ad.mul(x, y)], axis=0)), [a, b]


def _case_sub_sum(rng):
    shape = tuple(int(v) for v in rng.integers(1, 5, size=3))
    a, b = _t(rng, shape, "a"), _t(rng, shape, "b")
    return (lambda x, y: ad.sum_all(ad.mul(ad.sub(x, y), x))), [a, b]


def _maps(rng, scale=1.0):
    c = int(rng.integers(1, 4))
    h, w = int(rng.integers(2, 6)), int(rng.integers(2, 6))
    return _t(rng, (c, h, w), "a", scale), _t(rng, (c, h, w), "b", scale)


def _case_unfold(rng):
    size = int(rng.choice(SIZES))
    a, _ = _maps(rng)
    return (lambda x: mod.unfold(x, size).tensor), [a]


def _case_weights(rng):
    size = int(rng.choice(SIZES))
    a, b = _maps(rng)
    return (lambda x, y: mod.cross_weights(mod.unfold(x, size), y).tensor), [a, b]


def _case_apply(rng):
    size = int(rng.choice(SIZES))
    a, _ = _maps(rng)
    c, h, w = a.shape
    stack = _t(rng, (c, size * size, h, w), "stack")
    wts = _t(rng, (size * size, h, w), "weights")
    return (lambda n, wt: mod.apply_weights(mod.NeighborhoodStack(n, size), mod.FilterWeights(wt))), [stack, wts]


def _case_s2g(rng):
    size = int(rng.choice(SIZES))
    a, b = _maps(rng)
    return (lambda x, y: mod.s2g_modulate(x, y, size).tensor), [a, b]


def _case_g2s(rng):
    size = int(rng.choice(SIZES))
    a, b = _maps(rng)
    return (lambda x, y: mod.g2s_modulate(x, y, size).tensor), [a, b]


def _case_self(rng):
    size = int(rng.choice(SIZES))
    a, _ = _maps(rng)
    return (lambda x: mod.self_modulate(x, size).tensor), [a]


def _case_composite(rng):
    """conv -> relu -> modulate -> upsample -> pool -> l1, the training path in miniature."""
    while True:
        a, b = _maps(rng, 0.5)
        c = a.shape[0]
        wt = _t(rng, (c, c, 3, 3), "weight", 0.5)
        target = Tensor(rng.standard_normal(a.shape), dtype="f64")

        def fn(x, y, w_, target=target):
            h = ad.relu(ad.conv2d(x, w_))
            h = mod.s2g_modulate(h, y, 3).tensor
            return ad.l1_loss(ad.avg_pool_down(ad.bilinear_upsample(h, 2), 2), target)

        with ad.no_grad():
            pre = ad.conv2d(a, wt).data
            h = mod.s2g_modulate(ad.relu(ad.conv2d(a, wt)), b, 3).tensor
            diff = ad.avg_pool_down(ad.bilinear_upsample(h, 2), 2).data - target.data
        # resample until no relu/l1 kink is within reach of the finite-difference step
        if np.abs(pre).min() > MARGIN and np.abs(diff).min() > MARGIN:
            return fn, [a, b, wt]


CASES = {
    "conv2d": _case_conv2d,
    "relu": _case_relu,
    "bilinear_upsample": _case_bilinear,
    "avg_pool_down": _case_avg_pool,
    "softmax": _case_softmax,
    "l1_loss": _case_l1,
    "add/mul/concat": _case_add_concat,
    "sub/sum_all": _case_sub_sum,
    "unfold": _case_unfold,
    "cross_weights": _case_weights,
    "apply_weights": _case_apply,
    "s2g_modulate": _case_s2g,
    "g2s_modulate": _case_g2s,
    "self_modulate": _case_self,
    "composite": _case_composite,
}


@dataclass
class SuiteResult:
    op: str
    cases: int
    max_rel_error: float
    passed: bool


def run_suite(seed: int = 0, n_configs: int = 20, ops=None) -> tuple[list[SuiteResult], float]:
    """Run ``n_configs`` random cases per op; returns per-op results and wall seconds."""
    t0 = time.perf_counter()
    results = []
    for k, (op, make) in enumerate(CASES.items()):
        if ops is not None and op not in ops:
            continue
        rng = np.random.default_rng([seed, k])
        worst = 0.0
        for i in range(n_configs):
            fn, inputs = make(rng)
            res = ad.gradcheck(fn, inputs, op=op, tol=TOL, probe_seed=i)
            worst = max(worst, res.max_rel_error)
        results.append(SuiteResult(op, n_configs, worst, worst < TOL))
    return results, time.perf_counter() - t0
