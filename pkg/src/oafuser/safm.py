"""Sub-aperture fusion: fold any number of sub-aperture views into one angular feature.

The center view gets its own embedding convolution; every sub-aperture
image (SAI) goes through one stem convolution shared by all views of a
stage. Each SAI embedding is compared with the center embedding, the
absolute difference is mapped to a weight in [0, 1] and squared, and
the weighted SAI embeddings are summed onto the center embedding.

Stem geometry: a stem with stride ``s`` uses kernel ``s + 3`` and padding
``s/2 + 1``, so its output extent is ``ceil(H / s)`` for every ``H``. For
``s = 4`` this is the familiar 7/4/3 overlapping patch embedding.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .nn import ParamSpec, conv2d_specs
from .tensor import Tensor

EPS = 1e-6
MASK_FLOPS = 5  # per element: max, divide, subtract, clamp, square


def stem_geometry(stride: int) -> tuple[int, int]:
    """Kernel and padding of a stride-``stride`` embedding with ceil-division output."""
    if stride < 2 or stride % 2:
        raise ConfigError(f"stem stride must be an even integer >= 2, got {stride}")
    return stride + 3, stride // 2 + 1


@dataclass(frozen=True)
class SafmStage:
    """Static geometry of one stage's fusion module."""

    stage: int
    c_in: int  # channels entering the center embedding
    c_out: int
    center_stride: int  # relative to the center input of this stage
    sai_stride: int  # relative to the raw image

    @property
    def center_kernel(self) -> tuple[int, int]:
        return stem_geometry(self.center_stride)

    @property
    def sai_kernel(self) -> tuple[int, int]:
        return stem_geometry(self.sai_stride)

    def param_specs(self) -> list[ParamSpec]:
        kc, _ = self.center_kernel
        ks, _ = self.sai_kernel
        return (conv2d_specs(f"safm.{self.stage}.center", self.c_in, self.c_out, kc)
                + conv2d_specs(f"safm.{self.stage}.sai", 3, self.c_out, ks))


# ---------------------------------------------------------------------------
# normalizer freezing (finite-difference harnesses only)


class _Freeze(threading.local):
    def __init__(self):
        self.mode: str | None = None
        self.values: list[np.ndarray] = []
        self.cursor = 0


_freeze = _Freeze()


@contextlib.contextmanager
def frozen_normalizers(mode: str, store: list | None = None) -> Iterator[list]:
    """Record (``mode="record"``) or replay (``"replay"``) mask-score normalizers.

    The per-view maximum inside :func:`mask_score` is a detached constant,
    so a finite-difference check has to hold it fixed while perturbing
    parameters. Record once at the base point, replay for each probe.
    """
    if mode not in ("record", "replay"):
        raise ConfigError(f"unknown freeze mode {mode!r}")
    prev = (_freeze.mode, _freeze.values, _freeze.cursor)
    _freeze.mode = mode
    _freeze.values = [] if store is None else store
    _freeze.cursor = 0
    try:
        yield _freeze.values
    finally:
        _freeze.mode, _freeze.values, _freeze.cursor = prev


def _view_max(e: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    if _freeze.mode == "replay":
        m = _freeze.values[_freeze.cursor]
        _freeze.cursor += 1
        return m
    m = e.max(axis=axes, keepdims=True)
    if _freeze.mode == "record":
        _freeze.values.append(m)
    return m


# ---------------------------------------------------------------------------
# operations


def embed_center(x: Tensor, params: dict[str, Tensor], geo: SafmStage) -> Tensor:
    if x.shape[1] != geo.c_in:
        raise DimensionError(
            f"stage {geo.stage} center embedding expects {geo.c_in} channels, got {x.shape}")
    k, pad = geo.center_kernel
    return T.conv2d(x, params[f"safm.{geo.stage}.center.w"], params[f"safm.{geo.stage}.center.b"],
                    stride=geo.center_stride, pad=pad)


def embed_sai(sais: Tensor, params: dict[str, Tensor], geo: SafmStage) -> Tensor:
    """Embed raw SAIs (B, N, 3, H, W) with the stage's shared stem -> (B, N, C, h, w)."""
    b, n = sais.shape[:2]
    k, pad = geo.sai_kernel
    flat = T.reshape(sais, (b * n,) + sais.shape[2:])
    out = T.conv2d(flat, params[f"safm.{geo.stage}.sai.w"], params[f"safm.{geo.stage}.sai.b"],
                   stride=geo.sai_stride, pad=pad)
    return T.reshape(out, (b, n) + out.shape[1:])


def pixel_score(center_feat: Tensor, sai_feat: Tensor) -> Tensor:
    """Elementwise |center - sai|; a (B, C, h, w) center broadcasts over (B, N, C, h, w)."""
    if center_feat.ndim + 1 == sai_feat.ndim:
        center_feat = T.reshape(center_feat, center_feat.shape[:1] + (1,) + center_feat.shape[1:])
    elif center_feat.shape != sai_feat.shape:
        raise DimensionError(f"pixel_score: shapes {center_feat.shape} and {sai_feat.shape}")
    return T.abs_(T.sub(center_feat, sai_feat))


def mask_score(e: Tensor, eps: float = EPS, theta: str = "trust", map_axes: int | None = None) -> Tensor:
    """Squared [0, 1] weight from pixel scores.

    ``trust``: theta(e) = clamp(1 - e / (max(e) + eps), 0, 1), so identical
    features weigh 1. ``novelty``: theta(e) = clamp(e / (max(e) + eps), 0, 1).
    The max runs over the trailing ``map_axes`` axes (default: the last three,
    i.e. one view's channels and positions; all axes for rank < 3) and is
    treated as a constant in the backward pass. Gradient is zero where the
    clamp is active or on its boundary.
    """
    if theta not in ("trust", "novelty"):
        raise ConfigError(f"theta must be 'trust' or 'novelty', got {theta!r}")
    if map_axes is None:
        map_axes = min(3, e.ndim)
    axes = tuple(range(e.ndim - map_axes, e.ndim))
    box = {}

    def fwd():
        x = e.data
        if (x < 0).any():
            raise ValueError("pixel scores must be non-negative")
        m = _view_max(x, axes) + eps
        raw = x / m
        if theta == "trust":
            raw = 1.0 - raw
        th = np.clip(raw, 0.0, 1.0)
        box["th"], box["m"], box["inside"] = th, m, (raw > 0.0) & (raw < 1.0)
        return th * th

    def bwd(g):
        sign = -1.0 if theta == "trust" else 1.0
        return (np.where(box["inside"], g * 2.0 * box["th"] * sign / box["m"], 0.0),)

    return T.apply_op("mask_score", (e,), e.shape, MASK_FLOPS * e.size, fwd, bwd)


def aggregate_angular(center_feat: Tensor, sai_feats, scores) -> Tensor:
    """center + sum_i scores_i * sai_i, accumulated in list order.

    ``sai_feats``/``scores`` are either stacked (B, N, ...) tensors or equal
    length lists of center-shaped tensors. N = 0 returns ``center_feat``.
    """
    if isinstance(sai_feats, (list, tuple)) or isinstance(scores, (list, tuple)):
        if len(sai_feats) != len(scores):
            raise DimensionError(f"{len(sai_feats)} SAI features but {len(scores)} mask scores")
        if not sai_feats:
            return center_feat
        sai_feats = T.stack(list(sai_feats), axis=1)
        scores = T.stack(list(scores), axis=1)
    if sai_feats.shape != scores.shape:
        raise DimensionError(f"SAI features {sai_feats.shape} vs scores {scores.shape}")
    b, n = sai_feats.shape[:2]
    if (b,) + sai_feats.shape[2:] != center_feat.shape:
        raise DimensionError(f"center {center_feat.shape} vs SAI features {sai_feats.shape}")
    if n == 0:
        return center_feat

    def fwd():
        out = center_feat.data.copy()
        for i in range(n):
            out += scores.data[:, i] * sai_feats.data[:, i]
        return out

    def bwd(g):
        gs = g[:, None] * scores.data if sai_feats.requires_grad else None
        gt = g[:, None] * sai_feats.data if scores.requires_grad else None
        return g, gs, gt

    flops = 2 * n * center_feat.size
    return T.apply_op("aggregate", (center_feat, sai_feats, scores), center_feat.shape, flops, fwd, bwd)


def order_views(sais, coords: Sequence[tuple[int, int]] | None):
    """Sort SAIs by angular coordinate so summation order never depends on input order."""
    if coords is None:
        return sais, None
    order = sorted(range(len(coords)), key=lambda i: tuple(coords[i]))
    if isinstance(sais, Tensor):
        if order != list(range(len(order))):
            sais = Tensor(sais.data[:, order], dtype=sais.data.dtype) if sais.data is not None \
                else Tensor(None, shape=sais.shape)
    else:
        sais = sais[:, order]
    return sais, [tuple(coords[i]) for i in order]


def safm_forward(center_input: Tensor, sais: Tensor | None, params: dict[str, Tensor], geo: SafmStage,
                 *, theta: str = "trust", compare: str = "deep", raw_center: Tensor | None = None,
                 coords: Sequence[tuple[int, int]] | None = None) -> tuple[Tensor, Tensor]:
    """Return (F_spl, F_agl), both (B, C, h, w).

    ``sais`` holds raw images (B, N, 3, H, W) and may be ``None`` for N = 0.
    With ``compare="stem"`` pixel scores compare each SAI with the SAI stem
    applied to ``raw_center`` instead of the center embedding.
    """
    if compare not in ("deep", "stem"):
        raise ConfigError(f"compare must be 'deep' or 'stem', got {compare!r}")
    with T.flop_scope("safm", geo.stage):
        f_spl = embed_center(center_input, params, geo)
        if sais is None or sais.shape[1] == 0:
            return f_spl, f_spl
        if not isinstance(sais, Tensor):
            sais = Tensor(sais)
        sais, _ = order_views(sais, coords)
        emb = embed_sai(sais, params, geo)
        if emb.shape[2:] != f_spl.shape[1:]:
            raise DimensionError(
                f"stage {geo.stage}: SAI embedding {emb.shape[2:]} != center {f_spl.shape[1:]}")
        if compare == "stem":
            if raw_center is None:
                raise ConfigError("compare='stem' needs the raw center image")
            ref = embed_sai(T.reshape(raw_center, raw_center.shape[:1] + (1,) + raw_center.shape[1:]),
                            params, geo)
            ref = T.reshape(ref, f_spl.shape)
        else:
            ref = f_spl
        e = pixel_score(ref, emb)
        t = mask_score(e, theta=theta)
        f_agl = aggregate_angular(f_spl, emb, t)
    return f_spl, f_agl
