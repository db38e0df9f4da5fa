"""Center angular rectification: row/column attention plus 3-D convolutions.

A horizontal pass concatenates the angular and spatial features along
the width, attends over each row of ``2W`` tokens (global rectification),
stacks the two halves as a depth-2 volume and runs a few 3-D convolutions
over it (local rectification). A vertical pass repeats the same thing
over columns of ``2H`` tokens with the very same parameter tensors.

Feature layout throughout is (B, C, H, W); tokens are (rows, tokens, C);
the local stack is (B, C, 2, H, W) with depth 0 = angular, 1 = spatial.
"""
from __future__ import annotations

import math

from dataclasses import asdict, dataclass

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import (ParamSpec, conv3d_specs, linear, linear_specs, multi_head_attention, norm,
                 norm_specs)
from .tensor import Tensor


@dataclass(frozen=True)
class CarmConfig:
    embed_mult: int = 2  # C2 = embed_mult * C1
    heads: int = 8
    local_layers: int = 3
    kernel: int = 3
    parallel: bool = False
    attn_residual: bool = True
    v_from_normalized: bool = False
    slope: float = 0.01

    def __post_init__(self):
        if self.embed_mult < 1 or self.heads < 1 or self.local_layers < 0:
            raise ConfigError(f"invalid rectification config {self}")
        if self.kernel % 2 == 0:
            raise ConfigError(f"3-D kernel must be odd, got {self.kernel}")

    def to_dict(self) -> dict:
        return asdict(self)


def carm_specs(stage: int, c1: int, cfg: CarmConfig) -> list[ParamSpec]:
    c2 = cfg.embed_mult * c1
    if c2 % cfg.heads:
        raise ConfigError(f"embedding width {c2} not divisible by {cfg.heads} heads")
    p = f"carm.{stage}"
    specs = linear_specs(f"{p}.min", c1, c2)
    specs += norm_specs(f"{p}.ln", c2)
    for name in ("q", "k", "v"):
        specs += linear_specs(f"{p}.{name}", c2, c2, bias=False)
    specs += linear_specs(f"{p}.mlp.fc1", c2, c2) + linear_specs(f"{p}.mlp.fc2", c2, c2)
    specs += linear_specs(f"{p}.out", c2, c1)
    leaky_gain = math.sqrt(2.0 / (1.0 + cfg.slope ** 2))
    for j in range(cfg.local_layers):
        gain = leaky_gain if j < cfg.local_layers - 1 else 1.0
        specs += conv3d_specs(f"{p}.local.{j}", c1, cfg.kernel, gain)
    return specs


def rectification_attention(tokens: Tensor, params: dict[str, Tensor], stage: int,
                            cfg: CarmConfig) -> tuple[Tensor, Tensor, Tensor]:
    """Embed tokens and attend. Returns (embedded tokens, values, attention output)."""
    p = f"carm.{stage}"
    emb = linear(tokens, params, f"{p}.min")
    normed = norm(emb, params, f"{p}.ln")
    q = linear(normed, params, f"{p}.q")
    k = linear(normed, params, f"{p}.k")
    v = linear(normed if cfg.v_from_normalized else emb, params, f"{p}.v")
    att = multi_head_attention(q, k, v, cfg.heads, label=f"carm.{stage}")
    return emb, v, att


def global_rectification(f_cat: Tensor, params: dict[str, Tensor], stage: int,
                         cfg: CarmConfig) -> Tensor:
    """Attention over the token axis of (..., 2W, C1); leading axes are independent rows."""
    if f_cat.shape[-2] % 2:
        raise DimensionError(f"token axis of {f_cat.shape} is odd; not a two-feature concatenation")
    lead = f_cat.shape[:-2]
    rows = 1
    for s in lead:
        rows *= s
    tokens = T.reshape(f_cat, (rows,) + f_cat.shape[-2:])
    p = f"carm.{stage}"
    emb, _, att = rectification_attention(tokens, params, stage, cfg)
    fa = T.add(att, emb) if cfg.attn_residual else att
    hidden = linear(T.gelu(linear(fa, params, f"{p}.mlp.fc1")), params, f"{p}.mlp.fc2")
    out = linear(T.add(hidden, fa), params, f"{p}.out")
    return T.reshape(out, f_cat.shape)


def local_rectification(stack: Tensor, params: dict[str, Tensor], stage: int,
                        cfg: CarmConfig) -> Tensor:
    """LeakyReLU(conv3d) for all but the last layer, then a plain conv3d; (B, C1, 2, H, W)."""
    if stack.ndim != 5 or stack.shape[2] != 2:
        raise DimensionError(f"local rectification needs a depth-2 stack (B, C, 2, H, W), "
                             f"got {stack.shape}")
    p = f"carm.{stage}.local"
    x = stack
    for j in range(cfg.local_layers):
        x = T.conv3d(x, params[f"{p}.{j}.w"], params[f"{p}.{j}.b"])
        if j < cfg.local_layers - 1:
            x = T.leaky_relu(x, cfg.slope)
    return x


def _tokens_to_stack(t: Tensor, b: int, lines: int, length: int, c: int, vertical: bool) -> Tensor:
    # t: (b*lines, 2*length, c) -> (b, c, 2, H, W)
    x = T.reshape(t, (b, lines, 2, length, c))
    if vertical:  # lines = W, length = H
        return T.transpose(x, (0, 4, 2, 3, 1))
    return T.transpose(x, (0, 4, 2, 1, 3))  # lines = H, length = W


def _direction(agl: Tensor, spl: Tensor, params: dict[str, Tensor], stage: int, cfg: CarmConfig,
               vertical: bool) -> tuple[Tensor, Tensor]:
    b, c, h, w = agl.shape
    if vertical:
        cat = T.concat([agl, spl], axis=2)  # (B, C, 2H, W)
        tokens = T.transpose(cat, (0, 3, 2, 1))  # (B, W, 2H, C)
        lines, length = w, h
    else:
        cat = T.concat([agl, spl], axis=3)  # (B, C, H, 2W)
        tokens = T.transpose(cat, (0, 2, 3, 1))  # (B, H, 2W, C)
        lines, length = h, w
    rect = global_rectification(tokens, params, stage, cfg)
    rect = T.reshape(rect, (b * lines, 2 * length, c))
    stack_g = _tokens_to_stack(rect, b, lines, length, c, vertical)
    if cfg.parallel:
        raw = T.stack([agl, spl], axis=2)
        out = T.add(stack_g, local_rectification(raw, params, stage, cfg))
    else:
        out = local_rectification(stack_g, params, stage, cfg)
    out_agl, out_spl = T.split(out, 2, 2)
    return T.reshape(out_agl, (b, c, h, w)), T.reshape(out_spl, (b, c, h, w))


def rectify_horizontal(agl: Tensor, spl: Tensor, params: dict[str, Tensor], stage: int,
                       cfg: CarmConfig) -> tuple[Tensor, Tensor]:
    return _direction(agl, spl, params, stage, cfg, vertical=False)


def rectify_vertical(agl: Tensor, spl: Tensor, params: dict[str, Tensor], stage: int,
                     cfg: CarmConfig) -> tuple[Tensor, Tensor]:
    return _direction(agl, spl, params, stage, cfg, vertical=True)


def carm_forward(f_spl: Tensor, f_agl: Tensor, params: dict[str, Tensor], stage: int,
                 cfg: CarmConfig) -> tuple[Tensor, Tensor]:
    """Horizontal then vertical rectification. Returns (rectified spatial, rectified angular)."""
    if f_spl.shape != f_agl.shape or f_spl.ndim != 4:
        raise DimensionError(f"rectification inputs differ: {f_spl.shape} vs {f_agl.shape}")
    with T.flop_scope("carm", stage):
        h_agl, h_spl = rectify_horizontal(f_agl, f_spl, params, stage, cfg)
        g_agl, g_spl = rectify_vertical(h_agl, h_spl, params, stage, cfg)
    return g_spl, g_agl

