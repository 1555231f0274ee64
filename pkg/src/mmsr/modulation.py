"""Cross-domain adaptive filters (mutual modulation).

For every pixel, the neighbors of one feature map are re-weighted by a
softmax over their dot products with the counterpart pixel of a *target*
map, and the weighted neighbors replace the pixel:

    w = softmax(N^T t),   out = N w

Source-to-guide modulation filters the source features with the guide as
target; guide-to-source is the mirror; self-modulation targets the map's
own center pixel.  Neighborhoods are square, odd-sized and replicate padded.

Two implementations live here.  ``modulate`` is the fast path: it never
materializes the C x L x H x W stack but loops over the L window offsets and
accumulates shifted views, with a hand-written backward.  ``unfold`` +
``cross_weights`` + ``apply_weights`` is the literal decomposition, and
``reference_modulate`` is a per-pixel loop used as the conformance oracle.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, record, softmax
from .errors import ArgumentError

SOURCE = "source"
GUIDE = "guide"
S2G = "source-to-guide"
G2S = "guide-to-source"
DOMAINS = (SOURCE, GUIDE, S2G, G2S)


@dataclass
class FeatureMap:
    tensor: Tensor
    domain: str = SOURCE

    def __post_init__(self):
        if self.domain not in DOMAINS:
            raise ArgumentError(f"unknown feature domain {self.domain!r}")
        if self.tensor.ndim != 3 or min(self.tensor.shape) < 1:
            raise ArgumentError(f"feature map must be non-empty CxHxW, got {self.tensor.shape}")

    @property
    def shape(self) -> tuple:
        return self.tensor.shape


@dataclass
class NeighborhoodStack:
    tensor: Tensor  # C x L x H x W
    size: int


@dataclass
class FilterWeights:
    tensor: Tensor  # L x H x W

    def check(self, tol: float = 1e-6) -> None:
        w = self.tensor.data
        if (w < 0).any():
            raise ArgumentError("negative filter weight")
        dev = np.abs(w.sum(axis=0, dtype=np.float64) - 1.0).max()
        if dev > tol:
            raise ArgumentError(f"filter weights do not sum to 1 (max deviation {dev:.3g})")


def _tensor(x) -> Tensor:
    return x.tensor if isinstance(x, FeatureMap) else x


def _check_size(size) -> int:
    if not isinstance(size, (int, np.integer)) or size < 1 or size % 2 == 0:
        raise ArgumentError(f"neighborhood size must be a positive odd integer, got {size!r}")
    return int(size)


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.ndim != 3 or a.shape != b.shape:
        raise ArgumentError(f"{op}: feature maps must share CxHxW shape, got {a.shape} and {b.shape}")


def fold_replicate(padded_grad: np.ndarray, r: int) -> np.ndarray:
    """Adjoint of edge padding by ``r``: border strips collapse onto the edge pixels."""
    if r == 0:
        return padded_grad
    g = padded_grad.copy()
    h = g.shape[-2] - 2 * r
    w = g.shape[-1] - 2 * r
    g[..., r, :] += g[..., :r, :].sum(axis=-2)
    g[..., r + h - 1, :] += g[..., r + h:, :].sum(axis=-2)
    g = g[..., r:r + h, :]
    g[..., :, r] += g[..., :, :r].sum(axis=-1)
    g[..., :, r + w - 1] += g[..., :, r + w:].sum(axis=-1)
    return np.ascontiguousarray(g[..., :, r:r + w])


def _pad(x: np.ndarray, r: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (r, r), (r, r)), mode="edge") if r else x


# --------------------------------------------------------------------------
# literal decomposition


def unfold(feat, size: int) -> NeighborhoodStack:
    """Gather each pixel's size x size window (row-major) into a C x L x H x W stack."""
    size = _check_size(size)
    x = _tensor(feat)
    c, h, w = x.shape
    r = size // 2
    padded = _pad(x.data, r)
    stack = np.empty((c, size * size, h, w), dtype=x.dtype)
    for d in range(size * size):
        dy, dx = divmod(d, size)
        stack[:, d] = padded[:, dy:dy + h, dx:dx + w]

    def bw(g):
        gp = np.zeros((c, h + 2 * r, w + 2 * r), dtype=g.dtype)
        for d in range(size * size):
            dy, dx = divmod(d, size)
            gp[:, dy:dy + h, dx:dx + w] += g[:, d]
        return (fold_replicate(gp, r),)

    return NeighborhoodStack(record("unfold", stack, (x,), bw), size)


def cross_weights(stack: NeighborhoodStack, target) -> FilterWeights:
    """softmax over L of the dot products between each neighbor and the target pixel."""
    n = stack.tensor
    t = _tensor(target)
    if n.ndim != 4 or (n.shape[0],) + n.shape[2:] != t.shape:
        raise ArgumentError(f"weights: stack {n.shape} does not match target {t.shape}")
    nd, td = n.data, t.data
    logits = np.einsum("clhw,chw->lhw", nd, td)

    def bw(g):
        return (g[None] * td[:, None], np.einsum("lhw,clhw->chw", g, nd))

    return FilterWeights(softmax(record("correlate", logits, (n, t), bw), axis=0))


def s2g_weights(n_s: NeighborhoodStack, f_g) -> FilterWeights:
    return cross_weights(n_s, f_g)


def g2s_weights(m_g: NeighborhoodStack, f_s) -> FilterWeights:
    return cross_weights(m_g, f_s)


def apply_weights(stack: NeighborhoodStack, weights: FilterWeights) -> Tensor:
    """out[:, p] = N_p w_p for every pixel p."""
    n, w = stack.tensor, weights.tensor
    nd, wd = n.data, w.data
    out = np.einsum("clhw,lhw->chw", nd, wd)

    def bw(g):
        return (g[:, None] * wd[None], np.einsum("chw,clhw->lhw", g, nd))

    return record("apply_weights", out, (n, w), bw)


# --------------------------------------------------------------------------
# fast path


def modulation_weights(neigh: np.ndarray, target: np.ndarray, size: int) -> np.ndarray:
    """L x H x W softmax weights (float64) without building the neighborhood stack."""
    neigh = np.asarray(neigh, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    c, h, w = neigh.shape
    r = size // 2
    padded = _pad(neigh, r)
    logits = np.empty((size * size, h, w))
    for d in range(size * size):
        dy, dx = divmod(d, size)
        np.einsum("chw,chw->hw", padded[:, dy:dy + h, dx:dx + w], target, out=logits[d])
    logits -= logits.max(axis=0)
    np.exp(logits, out=logits)
    logits /= logits.sum(axis=0)
    return logits


# Channels per accumulation block; small blocks keep the working set in cache.
_BLOCK = 4


def modulate(neigh, target, size: int, op: str = "modulate") -> Tensor:
    """Filter ``neigh`` with per-pixel weights correlated against ``target``.

    Both inputs are C x H x W and differentiable.  Passing the same tensor
    twice gives self-modulation; gradients from both roles accumulate.
    """
    size = _check_size(size)
    s, t = _tensor(neigh), _tensor(target)
    _check_pair(op, s, t)
    if size == 1:
        return record(op, s.data.copy(), (s, t), lambda g: (g, None))

    c, h, w = s.shape
    r = size // 2
    offsets = [divmod(d, size) for d in range(size * size)]
    blocks = [slice(c0, c0 + _BLOCK) for c0 in range(0, c, _BLOCK)]
    sd, td = s.data, t.data
    # The forward pass accumulates in f64 whatever the input dtype: summing
    # L = size^2 weighted terms in f32 drifts by several ulps of the output.
    # The backward pass stays in the input dtype.
    sd64 = sd.astype(np.float64, copy=False)
    padded64 = _pad(sd64, r)
    weights64 = modulation_weights(sd64, td, size)
    out64 = np.zeros_like(sd64)
    tmp = np.empty((min(_BLOCK, c), h, w))
    for cb in blocks:
        acc, pb = out64[cb], padded64[cb]
        tb = tmp[:acc.shape[0]]
        for d, (dy, dx) in enumerate(offsets):
            np.multiply(pb[:, dy:dy + h, dx:dx + w], weights64[d], out=tb)
            acc += tb
    out = out64.astype(sd.dtype, copy=False)
    padded = padded64.astype(sd.dtype, copy=False)
    weights = weights64.astype(sd.dtype, copy=False)
    del sd64, out64, weights64, padded64, tmp

    def bw(g):
        # dL/dw, then through the softmax to the logits
        dw = np.empty_like(weights)
        for d, (dy, dx) in enumerate(offsets):
            np.einsum("chw,chw->hw", padded[:, dy:dy + h, dx:dx + w], g, out=dw[d])
        dlogit = weights * (dw - (weights * dw).sum(axis=0))
        gpad = np.zeros_like(padded)
        gt = np.zeros_like(td)
        tmp = np.empty((min(_BLOCK, c), h, w), dtype=g.dtype)
        for cb in blocks:
            gp, gtb, pb, gb, tdb = gpad[cb], gt[cb], padded[cb], g[cb], td[cb]
            tb = tmp[:gb.shape[0]]
            for d, (dy, dx) in enumerate(offsets):
                win = gp[:, dy:dy + h, dx:dx + w]
                np.multiply(gb, weights[d], out=tb)
                win += tb
                np.multiply(tdb, dlogit[d], out=tb)
                win += tb
                np.multiply(pb[:, dy:dy + h, dx:dx + w], dlogit[d], out=tb)
                gtb += tb
        return (fold_replicate(gpad, r), gt)

    return record(op, out, (s, t), bw)


def s2g_modulate(f_s, f_g, n: int) -> FeatureMap:
    return FeatureMap(modulate(f_s, f_g, n, op="s2g_modulate"), S2G)


def g2s_modulate(f_g, f_s, m: int) -> FeatureMap:
    return FeatureMap(modulate(f_g, f_s, m, op="g2s_modulate"), G2S)


def self_modulate(feat, size: int) -> FeatureMap:
    x = _tensor(feat)
    domain = feat.domain if isinstance(feat, FeatureMap) else SOURCE
    return FeatureMap(modulate(x, x, size, op="self_modulate"), domain)


# --------------------------------------------------------------------------
# oracle


def reference_modulate(f_a, f_b, size: int, target_mode: str = "cross", rows=None) -> FeatureMap:
    """Per-pixel loop evaluating the filter literally with explicit vectors.

    ``f_a`` is filtered; the target pixel comes from ``f_b`` (cross) or from
    ``f_a`` itself (self).  ``rows`` restricts the loop to a row range, which
    the benchmark uses to time the oracle on a strip; other rows are left 0.
    """
    size = _check_size(size)
    a = np.asarray(_tensor(f_a).data)
    b = np.asarray(_tensor(f_b).data)
    if target_mode not in ("cross", "self"):
        raise ArgumentError(f"target_mode must be 'cross' or 'self', got {target_mode!r}")
    if a.ndim != 3 or a.shape != b.shape:
        raise ArgumentError(f"reference_modulate: shapes {a.shape} and {b.shape} differ")
    if target_mode == "self":
        b = a
    c, h, w = a.shape
    r = size // 2
    out = np.zeros_like(a)
    row_range = range(h) if rows is None else range(*rows)
    for i in row_range:
        for j in range(w):
            cols = []
            for di in range(-r, r + 1):
                for dj in range(-r, r + 1):
                    ii = min(max(i + di, 0), h - 1)
                    jj = min(max(j + dj, 0), w - 1)
                    cols.append(a[:, ii, jj])
            nmat = np.stack(cols, axis=1)  # C x L
            logits = nmat.T @ b[:, i, j]
            e = np.exp(logits - logits.max())
            out[:, i, j] = nmat @ (e / e.sum())
    domain = {"cross": S2G, "self": SOURCE}[target_mode]
    return FeatureMap(Tensor(out), domain)
