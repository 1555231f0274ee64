"""Self-supervised online training with the cycle consistency loss.

One fresh network is fitted per (LR source, HR guide) pair.  Each epoch runs
a single full-image step: predict the SR source, average-pool it back to the
LR grid, take the mean absolute difference to the LR input, backpropagate
and apply Adam at the scheduled learning rate.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, ConfigError, MMSRError, NumericError, TrainingError
from .images import Image
from .network import ModelConfig, build, forward, normalize_variant

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 1000
    lr0: float = 0.002
    decay: float = 0.9998
    decay_every: int = 5
    seed: int = 0
    dtype: str = "f32"
    log_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0}")
        if not 0 < self.decay <= 1:
            raise ConfigError(f"decay must be in (0, 1], got {self.decay}")
        if self.decay_every < 1:
            raise ConfigError(f"decay_every must be >= 1, got {self.decay_every}")
        ad.resolve_dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    final_cycle_residual: float = float("nan")
    wall_seconds: float = 0.0
    sr: Image | None = None

    def log_lines(self) -> list[str]:
        lines = ["# epoch lr loss"]
        lines += [f"{e} {lr:.12g} {loss:.9g}" for e, (lr, loss) in enumerate(zip(self.lrs, self.losses))]
        return lines

    def summary(self, rmse_value: float | None = None) -> dict:
        out = {
            "epochs": len(self.losses),
            "final_loss": self.losses[-1] if self.losses else None,
            "final_cycle_residual": self.final_cycle_residual,
            "wall_seconds": round(self.wall_seconds, 3),
        }
        if rmse_value is not None:
            out["rmse"] = rmse_value
        return out


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ArgumentError(f"epoch must be >= 0, got {epoch}")
    return cfg.lr0 * cfg.decay ** (epoch // cfg.decay_every)


def cycle_loss(sr: Tensor, src_lr, scale: int) -> Tensor:
    """l1 between the average-pooled prediction and the LR source."""
    lr = src_lr if isinstance(src_lr, Tensor) else Tensor(np.asarray(getattr(src_lr, "data", src_lr), dtype=sr.dtype))
    if sr.ndim != 3 or lr.ndim != 3 or sr.shape != (lr.shape[0], lr.shape[1] * scale, lr.shape[2] * scale):
        raise ArgumentError(f"cycle_loss: SR {sr.shape} is not LR {lr.shape} x scale {scale}")
    return ad.l1_loss(ad.avg_pool_down(sr, scale), lr)


def rmse(a, b) -> float:
    """Root mean squared error in native units (Images) or raw values (arrays)."""
    av = a.native() if isinstance(a, Image) else np.asarray(a, dtype=np.float64)
    bv = b.native() if isinstance(b, Image) else np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise ArgumentError(f"rmse: shape mismatch {av.shape} vs {bv.shape}")
    return float(np.sqrt(np.mean((av - bv) ** 2)))


def _check_pair(src_lr: Image, guide: Image, scale: int) -> None:
    if src_lr.channels != 1 or guide.channels != 3:
        raise ArgumentError(f"need a 1-channel source and 3-channel guide, got {src_lr.channels} and {guide.channels}")
    if (guide.height, guide.width) != (src_lr.height * scale, src_lr.width * scale):
        raise ArgumentError(
            f"guide {guide.height}x{guide.width} != source {src_lr.height}x{src_lr.width} x scale {scale}"
        )


def predict_image(params, src_lr: Image, guide: Image, mcfg: ModelConfig) -> Image:
    with ad.no_grad():
        out = forward(params, src_lr, guide, mcfg)
    return Image(np.clip(out.data, 0.0, 1.0), src_lr.maxval)


def train_pair(src_lr: Image, guide: Image, mcfg: ModelConfig, tcfg: TrainConfig, params=None, log=None):
    """Fit a fresh model to one pair; returns (params, SR image, report)."""
    _check_pair(src_lr, guide, mcfg.scale)
    if params is None:
        params = build(mcfg, seed=tcfg.seed, dtype=tcfg.dtype)
    plist = list(params.values())
    state = ad.AdamState.for_params(plist)
    dt = plist[0].dtype
    src_t = Tensor(src_lr.data.astype(dt))
    guide_t = Tensor(guide.data.astype(dt))
    report = TrainReport()
    t0 = time.perf_counter()
    for epoch in range(tcfg.epochs):
        for p in plist:
            p.zero_grad()
        try:
            out = forward(params, src_t, guide_t, mcfg)
            loss = cycle_loss(out, src_t, mcfg.scale)
        except NumericError as exc:
            raise TrainingError(f"diverged: {exc}", epoch=epoch) from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError("loss is not finite", epoch=epoch)
        ad.backward(loss)
        lr = lr_at(epoch, tcfg)
        ad.adam_step(plist, [p.grad for p in plist], state, lr)
        report.losses.append(value)
        report.lrs.append(lr)
        if tcfg.log_every and epoch % tcfg.log_every == 0:
            logger.info("epoch %d lr %.6g loss %.6g", epoch, lr, value)
            if log is not None:
                log(epoch, lr, value)
    try:
        sr = predict_image(params, src_lr, guide, mcfg)
    except NumericError as exc:
        raise TrainingError(f"diverged: {exc}", epoch=tcfg.epochs) from exc
    report.wall_seconds = time.perf_counter() - t0
    report.sr = sr
    pooled = ad.pool_mean(sr.data.astype(np.float64), mcfg.scale)
    report.final_cycle_residual = float(np.abs(pooled - src_lr.data).mean())
    return params, sr, report


# --------------------------------------------------------------------------
# ablation


@dataclass(frozen=True)
class Pair:
    lr: Image
    guide: Image
    gt: Image
    name: str = ""


def _run_one(job):
    idx, pair, mcfg, tcfg = job
    try:
        _, sr, _ = train_pair(pair.lr, pair.guide, mcfg, tcfg)
    except MMSRError as exc:
        raise type(exc)(f"pair {pair.name or idx}, variant {mcfg.variant} (n={mcfg.n}, m={mcfg.m}): {exc}") from exc
    return rmse(sr, pair.gt)


def ablation_configs(variants: Sequence[str], base: ModelConfig, m_sweep: Sequence[int] = ()) -> list[ModelConfig]:
    """Rows ordered by variant, then by m: listed variants first, then the Model3 m-sweep."""
    cfgs = [replace(base, variant=normalize_variant(v)) for v in variants]
    cfgs += [replace(base, variant="model3", m=int(m)) for m in m_sweep]
    return cfgs


def run_ablation(pairs: Sequence[Pair], variants: Sequence[str], base: ModelConfig, tcfg: TrainConfig,
                 m_sweep: Sequence[int] = (), workers: int = 1) -> list[dict]:
    """Train every (config, pair) independently and report mean RMSE per config.

    Each pair gets its own init seed (``tcfg.seed + index``) shared across
    configs, so variants are compared from identical starting weights where
    their inventories coincide.
    """
    if not pairs:
        raise ArgumentError("run_ablation: no pairs")
    cfgs = ablation_configs(variants, base, m_sweep)
    jobs = [(i, p, c, replace(tcfg, seed=tcfg.seed + i)) for c in cfgs for i, p in enumerate(pairs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            scores = list(pool.map(_run_one, jobs))
    else:
        scores = [_run_one(j) for j in jobs]
    rows = []
    for k, c in enumerate(cfgs):
        per_pair = scores[k * len(pairs):(k + 1) * len(pairs)]
        rows.append({
            "variant": c.variant,
            "n": c.n,
            "m": c.m,
            "scale": c.scale,
            "mean_rmse": float(np.mean(per_pair)),
            "per_pair": per_pair,
        })
    return rows


CSV_COLUMNS = ("variant", "n", "m", "scale", "mean_rmse")


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for r in rows:
            w.writerow([r["variant"], r["n"], r["m"], r["scale"], f"{r['mean_rmse']:.6f}"])
