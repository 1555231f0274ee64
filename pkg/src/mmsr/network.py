"""The super-resolution network and its ablation variants.

Layout (channel width C, default 64)::

    source branch  conv1x1(1->C), conv1x1(C->C), 2 x resblock(1x1)
    guide branch   conv3x3(3->C), conv3x3(C->C), 2 x resblock(3x3)
    middle         variant-specific (mutual modulation for Model3)
    fusion         conv1x1(2C->C) over the channel concatenation
    prediction     3 x resblock(1x1), conv1x1(C->1)

Middle sections per variant:

    model0  F_s, F_g                      (no modulation)
    model1  F_s, g2s(F_g, F_s, m)
    model2  s2g(F_s, F_g, n), F_g
    model3  s2g(F_s, F_g, n), g2s(F_g, F_s, m)     (MMSR)
    model4  conv_n(F_s), conv_m(F_g)      (learned static filters)
    model5  conv_n over concat(F_s, F_g) replaces the 1x1 fusion
    model6  self(F_s, n), self(F_g, m)    (non-local style, same-domain target)
"""

from __future__ import annotations

import contextlib
import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ArgumentError, ConfigError, FormatError, NumericError
from .modulation import FeatureMap, g2s_modulate, s2g_modulate, self_modulate

VARIANTS = ("model0", "model1", "model2", "model3", "model4", "model5", "model6")
_ALIASES = {"mmsr": "model3"}


def normalize_variant(name: str) -> str:
    key = str(name).strip().lower().replace("_", "")
    key = _ALIASES.get(key, key)
    if key not in VARIANTS:
        raise ConfigError(f"unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
    return key


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "model3"
    n: int = 11
    m: int = 5
    channels: int = 64
    scale: int = 4

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        for name in ("n", "m"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1 or v % 2 == 0:
                raise ConfigError(f"{name} must be a positive odd integer, got {v!r}")
        if self.channels < 1:
            raise ConfigError(f"channels must be >= 1, got {self.channels}")
        if self.scale < 2:
            raise ConfigError(f"scale must be >= 2, got {self.scale}")

    def to_dict(self) -> dict:
        return asdict(self)


ModelParams = "OrderedDict[str, Tensor]"


def layer_specs(cfg: ModelConfig) -> list[tuple[str, int, int, int]]:
    """(name, c_in, c_out, kernel) for every conv, in build order."""
    c = cfg.channels
    specs = [("src.conv1", 1, c, 1), ("src.conv2", c, c, 1)]
    specs += [(f"src.rb{i}.conv{j}", c, c, 1) for i in (1, 2) for j in (1, 2)]
    specs += [("gd.conv1", 3, c, 3), ("gd.conv2", c, c, 3)]
    specs += [(f"gd.rb{i}.conv{j}", c, c, 3) for i in (1, 2) for j in (1, 2)]
    if cfg.variant == "model4":
        specs += [("mid.src_conv", c, c, cfg.n), ("mid.gd_conv", c, c, cfg.m)]
    fuse_k = cfg.n if cfg.variant == "model5" else 1
    specs.append(("fuse", 2 * c, c, fuse_k))
    specs += [(f"pred.rb{i}.conv{j}", c, c, 1) for i in (1, 2, 3) for j in (1, 2)]
    specs.append(("pred.out", c, 1, 1))
    return specs


# Extra gain on the two entry convs of each branch.  With the plain fan-in
# bound the branch features stay small, every softmax logit is close to 0 and
# the modulation filters start out as box blurs; the gain makes them
# selective from the first step without touching the residual stacks.
ENTRY_GAIN = 2.5
_ENTRY_CONVS = ("src.conv1", "src.conv2", "gd.conv1", "gd.conv2")


def build(cfg: ModelConfig, seed: int = 0, dtype="f32") -> "OrderedDict[str, Tensor]":
    """Fan-in scaled uniform weights, zero biases; a pure function of (cfg, seed, dtype)."""
    if not isinstance(cfg, ModelConfig):
        raise ConfigError("build() needs a ModelConfig")
    dt = ad.resolve_dtype(dtype)
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, c_in, c_out, k in layer_specs(cfg):
        bound = 1.0 / np.sqrt(c_in * k * k)
        if name in _ENTRY_CONVS:
            bound *= ENTRY_GAIN
        w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dt)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
        params[f"{name}.bias"] = Tensor(np.zeros(c_out, dtype=dt), requires_grad=True, name=f"{name}.bias")
    return params


@contextlib.contextmanager
def _layer(name: str):
    try:
        yield
    except NumericError as exc:
        raise NumericError(str(exc), where=name) from exc


def conv(params, name: str, x: Tensor) -> Tensor:
    with _layer(name):
        return ad.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"])


def residual_block(x, params, prefix: str) -> Tensor:
    """conv -> relu -> conv, plus the identity skip."""
    x = x.tensor if isinstance(x, FeatureMap) else x
    h = conv(params, f"{prefix}.conv1", x)
    with _layer(f"{prefix}.relu"):
        h = ad.relu(h)
    h = conv(params, f"{prefix}.conv2", h)
    with _layer(prefix):
        return ad.add(x, h)


def fuse(fa, fb, params, name: str = "fuse") -> Tensor:
    """Concatenate along channels, then the fusion conv."""
    fa = fa.tensor if isinstance(fa, FeatureMap) else fa
    fb = fb.tensor if isinstance(fb, FeatureMap) else fb
    if fa.shape != fb.shape:
        raise ArgumentError(f"fuse: shape mismatch {fa.shape} vs {fb.shape}")
    return conv(params, name, ad.concat([fa, fb], axis=0))


def source_branch(params, x: Tensor) -> Tensor:
    h = conv(params, "src.conv1", x)
    h = conv(params, "src.conv2", h)
    h = residual_block(h, params, "src.rb1")
    return residual_block(h, params, "src.rb2")


def guide_branch(params, x: Tensor) -> Tensor:
    h = conv(params, "gd.conv1", x)
    h = conv(params, "gd.conv2", h)
    h = residual_block(h, params, "gd.rb1")
    return residual_block(h, params, "gd.rb2")


def predict(params, x: Tensor) -> Tensor:
    for i in (1, 2, 3):
        x = residual_block(x, params, f"pred.rb{i}")
    return conv(params, "pred.out", x)


def _as_input(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x if x.dtype == dtype else Tensor(x.data.astype(dtype))
    data = getattr(x, "data", x)
    return Tensor(np.asarray(data, dtype=dtype))


def forward(params, src_lr, guide, cfg: ModelConfig) -> Tensor:
    """Predict the 1 x H x W super-resolved source from a 1 x h x w source and 3 x H x W guide."""
    dt = next(iter(params.values())).dtype
    src = _as_input(src_lr, dt)
    gd = _as_input(guide, dt)
    if src.ndim != 3 or src.shape[0] != 1:
        raise ArgumentError(f"source must be 1 x h x w, got {src.shape}")
    if gd.ndim != 3 or gd.shape[0] != 3:
        raise ArgumentError(f"guide must be 3 x H x W, got {gd.shape}")
    s = cfg.scale
    if gd.shape[1:] != (src.shape[1] * s, src.shape[2] * s):
        raise ArgumentError(
            f"guide {gd.shape[1]}x{gd.shape[2]} != source {src.shape[1]}x{src.shape[2]} x scale {s}"
        )

    with _layer("upsample"):
        up = ad.bilinear_upsample(src, s)
    f_s = source_branch(params, up)
    f_g = guide_branch(params, gd)

    v = cfg.variant
    if v == "model5":
        fused = fuse(f_s, f_g, params)
    else:
        with _layer(f"{v}.modulation"):
            if v == "model0":
                a, b = f_s, f_g
            elif v == "model1":
                a, b = f_s, g2s_modulate(f_g, f_s, cfg.m).tensor
            elif v == "model2":
                a, b = s2g_modulate(f_s, f_g, cfg.n).tensor, f_g
            elif v == "model3":
                a = s2g_modulate(f_s, f_g, cfg.n).tensor
                b = g2s_modulate(f_g, f_s, cfg.m).tensor
            elif v == "model6":
                a = self_modulate(f_s, cfg.n).tensor
                b = self_modulate(f_g, cfg.m).tensor
        if v == "model4":
            a = conv(params, "mid.src_conv", f_s)
            b = conv(params, "mid.gd_conv", f_g)
        fused = fuse(a, b, params)
    return predict(params, fused)


# --------------------------------------------------------------------------
# checkpoint file

MAGIC = b"MMSRCKPT"
VERSION = 1
_DTYPE_CODES = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def save_checkpoint(path, params, cfg: ModelConfig, extra: dict | None = None) -> None:
    """Write params in the MMSRCKPT layout (little-endian throughout)."""
    record = {"model": cfg.to_dict()}
    if extra:
        record.update(extra)
    cfg_bytes = json.dumps(record, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(params)))
    for name, t in params.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", _DTYPE_CODES[t.dtype]))
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(t.data.astype(t.dtype.newbyteorder("<"), copy=False).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple["OrderedDict[str, Tensor]", ModelConfig, dict]:
    raw = Path(path).read_bytes()
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"truncated checkpoint while reading {what}", offset=pos)
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    if take(8, "magic") != MAGIC:
        raise FormatError("not an MMSRCKPT file", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=8)
    (clen,) = struct.unpack("<I", take(4, "config length"))
    at = pos
    try:
        record = json.loads(take(clen, "config").decode("utf-8"))
        cfg = ModelConfig(**record["model"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"bad config record: {exc}", offset=at) from None
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    params: OrderedDict[str, Tensor] = OrderedDict()
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4, "name length"))
        at = pos
        try:
            name = take(nlen, "name").decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("tensor name is not UTF-8", offset=at) from None
        at = pos
        (code,) = struct.unpack("<B", take(1, "dtype"))
        if code not in _CODE_DTYPES:
            raise FormatError(f"unknown dtype code {code}", offset=at)
        dt = _CODE_DTYPES[code]
        (rank,) = struct.unpack("<I", take(4, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        count_el = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(count_el * dt.itemsize, f"{name} data"), dtype=dt.newbyteorder("<"))
        params[name] = Tensor(data.astype(dt).reshape(dims), requires_grad=True, name=name)
    if pos != len(raw):
        raise FormatError("trailing bytes after last tensor", offset=pos)
    expected = {f"{n}.{kind}" for n, *_ in layer_specs(cfg) for kind in ("weight", "bias")}
    if set(params) != expected:
        raise FormatError("checkpoint tensors do not match the configured architecture")
    return params, cfg, record
