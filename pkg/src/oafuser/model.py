"""Four-stage fused encoder, MLP decoder, initialization, cost reports and checkpoints.

Per stage: sub-aperture fusion -> spatial / angular transformer blocks ->
center angular rectification -> feature fusion. The rectified spatial
feature of stage ``s`` is the center input of stage ``s + 1``; raw
sub-aperture images enter every stage through that stage's shared stem.

The transformer blocks (spatially reduced attention + depthwise-conv
feed-forward) and the feature fusion gate are stand-ins for the
backbone components the architecture borrows; they are configured here,
not imported from pretrained weights.
"""
from __future__ import annotations

import dataclasses
import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .carm import CarmConfig, carm_forward, carm_specs
from .errors import ConfigError, DimensionError, FormatError
from .nn import (ParamSpec, conv2d_specs, dwconv_specs, from_tokens, init_param, linear,
                 linear_specs, multi_head_attention, norm, norm_specs, to_tokens)
from .safm import SafmStage, safm_forward
from .tensor import FlopReport, Tensor

PRESETS = {
    "tiny": dict(stage_channels=(16, 32, 48, 64), blocks_per_stage=(1, 1, 1, 1),
                 heads=(1, 2, 3, 4), decoder_dim=64),
    "mitb4-like": dict(stage_channels=(64, 128, 320, 512), blocks_per_stage=(3, 8, 27, 3),
                       heads=(1, 2, 5, 8), decoder_dim=256),
}


@dataclass(frozen=True)
class ModelConfig:
    stage_channels: tuple[int, ...] = (64, 128, 320, 512)
    stage_strides: tuple[int, ...] = (4, 8, 16, 32)
    blocks_per_stage: tuple[int, ...] = (2, 2, 2, 2)
    attn_reduction: tuple[int, ...] = (8, 4, 2, 1)
    heads: tuple[int, ...] = (1, 2, 5, 8)
    mlp_ratio: int = 4
    decoder_dim: int = 256
    classes: int = 14
    carm: CarmConfig = field(default_factory=CarmConfig)
    theta: str = "trust"
    compare: str = "deep"
    pattern: str = "diag9"

    def __post_init__(self):
        n = len(self.stage_channels)
        for name in ("stage_strides", "blocks_per_stage", "attn_reduction", "heads"):
            if len(getattr(self, name)) != n:
                raise ConfigError(f"{name} has {len(getattr(self, name))} entries, expected {n}")
        if any(b <= a for a, b in zip(self.stage_strides, self.stage_strides[1:])):
            raise ConfigError(f"stage strides must increase strictly: {self.stage_strides}")
        if any(b <= a for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ConfigError(f"stage channels must increase strictly: {self.stage_channels}")
        if self.classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.classes}")
        for c, h in zip(self.stage_channels, self.heads):
            if c % h:
                raise ConfigError(f"{c} channels not divisible by {h} heads")
        if self.theta not in ("trust", "novelty") or self.compare not in ("deep", "stem"):
            raise ConfigError(f"bad fusion flags theta={self.theta!r} compare={self.compare!r}")
        self.safm_stages()  # validates stride ratios

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        kw = dict(PRESETS[name])
        kw.update(overrides)
        return cls(**kw)

    def safm_stages(self) -> list[SafmStage]:
        out = []
        for i, (c, s) in enumerate(zip(self.stage_channels, self.stage_strides)):
            if i == 0:
                c_in, rel = 3, s
            else:
                c_in, prev = self.stage_channels[i - 1], self.stage_strides[i - 1]
                if s % prev:
                    raise ConfigError(f"stride {s} is not a multiple of {prev}")
                rel = s // prev
            out.append(SafmStage(i + 1, c_in, c, rel, s))
        return out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["carm"] = CarmConfig(**d.get("carm", {}))
        for k in ("stage_channels", "stage_strides", "blocks_per_stage", "attn_reduction", "heads"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical_json().encode()).digest()


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]
    step: int = 0

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------
# parameters


def block_specs(prefix: str, c: int, reduction: int, mlp_ratio: int) -> list[ParamSpec]:
    hidden = c * mlp_ratio
    specs = norm_specs(f"{prefix}.norm1", c)
    specs += linear_specs(f"{prefix}.attn.q", c, c) + linear_specs(f"{prefix}.attn.kv", c, 2 * c)
    if reduction > 1:
        specs += conv2d_specs(f"{prefix}.attn.sr", c, c, reduction) + norm_specs(f"{prefix}.attn.sr_norm", c)
    specs += linear_specs(f"{prefix}.attn.proj", c, c)
    specs += norm_specs(f"{prefix}.norm2", c)
    specs += linear_specs(f"{prefix}.ffn.fc1", c, hidden) + dwconv_specs(f"{prefix}.ffn.dw", hidden, 3)
    specs += linear_specs(f"{prefix}.ffn.fc2", hidden, c)
    return specs


def ffm_specs(stage: int, c: int) -> list[ParamSpec]:
    p = f"ffm.{stage}"
    return (linear_specs(f"{p}.merge", 2 * c, c) + linear_specs(f"{p}.gate.fc1", 2 * c, c)
            + linear_specs(f"{p}.gate.fc2", c, c))


def param_specs(config: ModelConfig) -> list[ParamSpec]:
    """Every parameter of the model, in a fixed order. Independent of the view count."""
    specs: list[ParamSpec] = []
    for geo in config.safm_stages():
        s, c = geo.stage, geo.c_out
        specs += geo.param_specs()
        for path in ("stb", "atb"):
            for j in range(config.blocks_per_stage[s - 1]):
                specs += block_specs(f"{path}.{s}.{j}", c, config.attn_reduction[s - 1], config.mlp_ratio)
        specs += carm_specs(s, c, config.carm)
        specs += ffm_specs(s, c)
    d = config.decoder_dim
    for s, c in enumerate(config.stage_channels, start=1):
        specs += linear_specs(f"decoder.proj.{s}", c, d)
    specs += linear_specs("decoder.fuse", d * len(config.stage_channels), d)
    specs += linear_specs("decoder.cls", d, config.classes)
    return specs


def init_model(config: ModelConfig, seed: int = 0, dtype=np.float64, placeholder: bool = False) -> ModelState:
    """Fan-in scaled uniform init; each tensor's stream depends only on (seed, ParamId)."""
    params: dict[str, Tensor] = {}
    for spec in param_specs(config):
        if spec.pid in params:
            raise ConfigError(f"duplicate ParamId {spec.pid}")
        params[spec.pid] = init_param(spec, seed, dtype, placeholder)
    return ModelState(config, params, 0)


def count_params(config: ModelConfig) -> int:
    return sum(s.size for s in param_specs(config))


# ---------------------------------------------------------------------------
# blocks


def _reduction_pads(n: int, r: int) -> tuple[int, int]:
    if n % r == 0:
        return 0, 0
    if n < r:
        return (r - n) // 2, r - n - (r - n) // 2
    raise DimensionError(f"attention reduction {r} does not divide feature extent {n}")


def transformer_block_forward(x: Tensor, params: dict[str, Tensor], prefix: str, heads: int,
                              reduction: int, mlp_ratio: int = 4) -> Tensor:
    """Pre-norm block: spatially reduced attention, then a depthwise-conv feed-forward.

    Keys and values come from the map pooled by a stride-``reduction``
    convolution. A map smaller than one reduction window is zero padded
    up to it (one pooled token); any other non-dividing extent is an error.
    """
    b, c, h, w = x.shape
    t = to_tokens(x)
    y = norm(t, params, f"{prefix}.norm1")
    q = linear(y, params, f"{prefix}.attn.q")
    if reduction > 1:
        ph, pw = _reduction_pads(h, reduction), _reduction_pads(w, reduction)
        m = from_tokens(y, h, w)
        if ph != (0, 0) or pw != (0, 0):
            m = T.pad2d(m, ph + pw)
        m = T.conv2d(m, params[f"{prefix}.attn.sr.w"], params[f"{prefix}.attn.sr.b"], stride=reduction)
        kv_src = norm(to_tokens(m), params, f"{prefix}.attn.sr_norm")
    else:
        kv_src = y
    kv = linear(kv_src, params, f"{prefix}.attn.kv")
    k, v = T.split(kv, -1, 2)
    a = multi_head_attention(q, k, v, heads, label=prefix)
    t = T.add(t, linear(a, params, f"{prefix}.attn.proj"))
    y = linear(norm(t, params, f"{prefix}.norm2"), params, f"{prefix}.ffn.fc1")
    y = from_tokens(y, h, w)
    y = T.depthwise_conv2d(y, params[f"{prefix}.ffn.dw.w"], params[f"{prefix}.ffn.dw.b"], pad=1)
    y = linear(T.gelu(to_tokens(y)), params, f"{prefix}.ffn.fc2")
    t = T.add(t, y)
    return from_tokens(t, h, w)


def ffm_forward(f_agl: Tensor, f_spl: Tensor, params: dict[str, Tensor], stage: int) -> Tensor:
    """Merge the two rectified features: pointwise projection scaled by a channel gate."""
    if f_agl.shape != f_spl.shape:
        raise DimensionError(f"fusion inputs differ: {f_agl.shape} vs {f_spl.shape}")
    b, c, h, w = f_agl.shape
    p = f"ffm.{stage}"
    with T.flop_scope("ffm", stage):
        cat = T.transpose(T.concat([f_agl, f_spl], axis=1), (0, 2, 3, 1))  # (B, H, W, 2C)
        merged = linear(cat, params, f"{p}.merge")
        pooled = T.mean(cat, axis=(1, 2))
        gate = T.sigmoid(linear(T.gelu(linear(pooled, params, f"{p}.gate.fc1")), params, f"{p}.gate.fc2"))
        out = T.mul(merged, T.reshape(gate, (b, 1, 1, c)))
        return T.transpose(out, (0, 3, 1, 2))


def _as_input(x, dtype) -> Tensor | None:
    if x is None:
        return None
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _param_dtype(state: ModelState):
    p = next(iter(state.params.values()))
    return p.data.dtype if p.data is not None else np.float64


def encoder_forward(state: ModelState, center, sais=None,
                    coords: Sequence[tuple[int, int]] | None = None) -> list[Tensor]:
    """Return the four stage features [f1..f4], each (B, C_s, ceil(H/stride_s), ceil(W/stride_s)).

    ``center`` is (B, 3, H, W); ``sais`` is (B, N, 3, H, W) or ``None``.
    """
    cfg, params = state.config, state.params
    dtype = _param_dtype(state)
    center, sais = _as_input(center, dtype), _as_input(sais, dtype)
    if sais is not None and sais.shape[1] == 0:
        sais = None
    x = center
    feats = []
    for geo in cfg.safm_stages():
        s = geo.stage
        f_spl, f_agl = safm_forward(x, sais, params, geo, theta=cfg.theta, compare=cfg.compare,
                                    raw_center=center, coords=coords)
        with T.flop_scope("stb", s):
            for j in range(cfg.blocks_per_stage[s - 1]):
                f_spl = transformer_block_forward(f_spl, params, f"stb.{s}.{j}", cfg.heads[s - 1],
                                                  cfg.attn_reduction[s - 1], cfg.mlp_ratio)
        with T.flop_scope("atb", s):
            for j in range(cfg.blocks_per_stage[s - 1]):
                f_agl = transformer_block_forward(f_agl, params, f"atb.{s}.{j}", cfg.heads[s - 1],
                                                  cfg.attn_reduction[s - 1], cfg.mlp_ratio)
        g_spl, g_agl = carm_forward(f_spl, f_agl, params, s, cfg.carm)
        feats.append(ffm_forward(g_agl, g_spl, params, s))
        x = g_spl
    return feats


def decode(features: Sequence[Tensor], params: dict[str, Tensor], config: ModelConfig,
           out_size: tuple[int, int]) -> Tensor:
    """Project each stage, upsample to the first stage grid, fuse, classify, upsample to input."""
    if len(features) != len(config.stage_channels):
        raise DimensionError(f"decoder needs {len(config.stage_channels)} stage features, "
                             f"got {len(features)}")
    with T.flop_scope("decoder", "head"):
        target = features[0].shape[2:]
        ups = []
        for s, f in enumerate(features, start=1):
            y = linear(T.transpose(f, (0, 2, 3, 1)), params, f"decoder.proj.{s}")
            y = T.transpose(y, (0, 3, 1, 2))
            if y.shape[2:] != target:
                y = T.resize_bilinear(y, target)
            ups.append(y)
        cat = T.transpose(T.concat(ups, axis=1), (0, 2, 3, 1))
        y = T.gelu(linear(cat, params, "decoder.fuse"))
        y = T.transpose(linear(y, params, "decoder.cls"), (0, 3, 1, 2))
        if y.shape[2:] != tuple(out_size):
            y = T.resize_bilinear(y, tuple(out_size))
    return y


def forward(state: ModelState, center, sais=None, coords=None) -> Tensor:
    """Logits (B, K, H, W) for a batch of center views and their sub-aperture images."""
    dtype = _param_dtype(state)
    center = _as_input(center, dtype)
    feats = encoder_forward(state, center, sais, coords)
    return decode(feats, state.params, state.config, center.shape[2:])


# ---------------------------------------------------------------------------
# static cost


def trace_flops(config: ModelConfig, input_size: tuple[int, int], n_views: int, batch: int = 1) -> FlopReport:
    """FLOPs of one forward pass on ``n_views`` images (center included), without computing values."""
    if n_views < 1:
        raise ConfigError(f"n_views counts the center view and must be >= 1, got {n_views}")
    h, w = input_size
    state = init_model(config, placeholder=True)
    with T.shape_only(), T.no_grad(), T.count_flops() as counter:
        center = Tensor(None, shape=(batch, 3, h, w))
        sais = Tensor(None, shape=(batch, n_views - 1, 3, h, w)) if n_views > 1 else None
        forward(state, center, sais)
    report = T.flop_report(counter)
    report.params = state.param_count()
    report.n_views = n_views
    return report


def count_model_flops(config: ModelConfig, input_size: tuple[int, int], n_views: int) -> FlopReport:
    """Traced FLOP report with ``marginal_per_view = FLOPs(n_views + 1) - FLOPs(n_views)``."""
    report = trace_flops(config, input_size, n_views)
    nxt = trace_flops(config, input_size, n_views + 1)
    report.marginal_per_view = nxt.total - report.total
    return report


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"OAFW1"
_DTYPE_TAGS = {np.dtype("<f8"): b"d", np.dtype("<f4"): b"f"}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_checkpoint(state: ModelState, path: str | os.PathLike) -> None:
    """Write ``state`` atomically to ``path`` in the flat OAFW1 container."""
    path = Path(path)
    cfg_json = state.config.canonical_json().encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(state.config.digest())
    buf.write(struct.pack("<I", len(cfg_json)))
    buf.write(cfg_json)
    buf.write(struct.pack("<QI", state.step, len(state.params)))
    for pid, p in state.params.items():
        arr = np.ascontiguousarray(p.numpy())
        dt = arr.dtype.newbyteorder("<")
        if dt not in _DTYPE_TAGS:
            raise FormatError(f"cannot store dtype {arr.dtype} for {pid}")
        name = pid.encode()
        buf.write(struct.pack("<H", len(name)))
        buf.write(name)
        buf.write(_DTYPE_TAGS[dt])
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.astype(dt, copy=False).tobytes())
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, config: ModelConfig | None = None) -> ModelState:
    """Read an OAFW1 file; the embedded config digest must verify (and match ``config`` if given)."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from None
    view = memoryview(raw)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = view[pos: pos + n]
        pos += n
        return chunk

    if bytes(take(5)) != MAGIC:
        raise FormatError(f"{path}: bad magic, not an OAFW1 checkpoint")
    digest = bytes(take(32))
    (n_cfg,) = struct.unpack("<I", take(4))
    cfg_json = bytes(take(n_cfg))
    if hashlib.sha256(cfg_json).digest() != digest:
        raise FormatError(f"{path}: config digest mismatch")
    stored = ModelConfig.from_dict(json.loads(cfg_json))
    if config is not None and config.digest() != digest:
        raise FormatError(f"{path}: checkpoint config does not match the requested config")
    step, count = struct.unpack("<QI", take(12))
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (n_name,) = struct.unpack("<H", take(2))
        pid = bytes(take(n_name)).decode()
        tag = bytes(take(1))
        if tag not in _TAG_DTYPES:
            raise FormatError(f"{path}: unknown dtype tag {tag!r} for {pid}")
        dt = _TAG_DTYPES[tag]
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        nbytes = math.prod(shape) * dt.itemsize
        arr = np.frombuffer(take(nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        params[pid] = Tensor(arr, requires_grad=True)
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    expected = {s.pid: s.shape for s in param_specs(stored)}
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        raise FormatError(f"{path}: parameters do not match config (missing {missing[:3]})")
    return ModelState(stored, params, step)
