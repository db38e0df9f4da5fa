"""Parameter bookkeeping and layers shared by the encoder modules."""
from __future__ import annotations

import contextlib
import math
import threading
import zlib
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor


@dataclass(frozen=True)
class ParamSpec:
    """Shape and initializer of one named parameter tensor.

    ``init`` is ``"uniform"`` (bound 1/sqrt(fan_in), used for biases),
    ``"scaled"`` (variance gain**2 / fan_in, used for weights so activations
    keep their scale through deep chains), ``"ones"`` or ``"zeros"``.
    """

    pid: str
    shape: tuple[int, ...]
    init: str = "uniform"
    fan_in: int = 1
    gain: float = 1.0

    @property
    def size(self) -> int:
        return math.prod(self.shape)


def init_param(spec: ParamSpec, seed: int, dtype=np.float64, placeholder: bool = False) -> Tensor:
    """Materialize a parameter; the stream depends only on (seed, pid)."""
    if placeholder:
        return Tensor(None, requires_grad=True, shape=spec.shape)
    if spec.init == "ones":
        data = np.ones(spec.shape, dtype=dtype)
    elif spec.init == "zeros":
        data = np.zeros(spec.shape, dtype=dtype)
    else:
        rng = np.random.default_rng([seed, zlib.crc32(spec.pid.encode())])
        if spec.init == "scaled":
            bound = spec.gain * math.sqrt(3.0 / spec.fan_in)
        else:
            bound = 1.0 / math.sqrt(spec.fan_in)
        data = rng.uniform(-bound, bound, size=spec.shape).astype(dtype)
    return Tensor(data, requires_grad=True)


def linear_specs(prefix: str, cin: int, cout: int, bias: bool = True) -> list[ParamSpec]:
    specs = [ParamSpec(f"{prefix}.w", (cin, cout), "scaled", cin)]
    if bias:
        specs.append(ParamSpec(f"{prefix}.b", (cout,), "uniform", cin))
    return specs


def conv2d_specs(prefix: str, cin: int, cout: int, k: int) -> list[ParamSpec]:
    fan = cin * k * k
    return [ParamSpec(f"{prefix}.w", (cout, cin, k, k), "scaled", fan),
            ParamSpec(f"{prefix}.b", (cout,), "uniform", fan)]


def dwconv_specs(prefix: str, c: int, k: int) -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.w", (c, k, k), "scaled", k * k),
            ParamSpec(f"{prefix}.b", (c,), "uniform", k * k)]


def conv3d_specs(prefix: str, c: int, k: int, gain: float = 1.0) -> list[ParamSpec]:
    fan = c * k ** 3
    return [ParamSpec(f"{prefix}.w", (c, c, k, k, k), "scaled", fan, gain),
            ParamSpec(f"{prefix}.b", (c,), "uniform", fan)]


def norm_specs(prefix: str, c: int) -> list[ParamSpec]:
    return [ParamSpec(f"{prefix}.g", (c,), "ones"), ParamSpec(f"{prefix}.b", (c,), "zeros")]


def linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return T.linear(x, params[f"{prefix}.w"], params.get(f"{prefix}.b"))


def norm(x: Tensor, params: dict[str, Tensor], prefix: str, eps: float = 1e-6) -> Tensor:
    return T.layer_norm(x, params[f"{prefix}.g"], params[f"{prefix}.b"], eps)


def to_tokens(x: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, H*W, C)."""
    b, c, h, w = x.shape
    return T.reshape(T.transpose(x, (0, 2, 3, 1)), (b, h * w, c))


def from_tokens(t: Tensor, h: int, w: int) -> Tensor:
    """(B, H*W, C) -> (B, C, H, W)."""
    b, _, c = t.shape
    return T.transpose(T.reshape(t, (b, h, w, c)), (0, 3, 1, 2))


# ---------------------------------------------------------------------------
# attention


class _AttnLog(threading.local):
    def __init__(self):
        self.sinks: list[list] = []


_attn_log = _AttnLog()


@contextlib.contextmanager
def record_attention() -> Iterator[list]:
    """Collect every attention probability array computed inside the block.

    Items are ``(label, probs)`` with ``probs`` shaped (..., queries, keys).
    """
    sink: list = []
    _attn_log.sinks.append(sink)
    try:
        yield sink
    finally:
        _attn_log.sinks.remove(sink)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int, label: str = "attn") -> Tensor:
    """Scaled dot-product attention over (B, N, C) tokens split into ``heads``."""
    b, nq, c = q.shape
    nk = k.shape[1]
    if c % heads:
        raise DimensionError(f"channels {c} not divisible by {heads} heads")
    if k.shape != (b, nk, c) or v.shape != (b, nk, c):
        raise DimensionError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    d = c // heads
    qh = T.transpose(T.reshape(q, (b, nq, heads, d)), (0, 2, 1, 3))
    kt = T.transpose(T.reshape(k, (b, nk, heads, d)), (0, 2, 3, 1))
    vh = T.transpose(T.reshape(v, (b, nk, heads, d)), (0, 2, 1, 3))
    scores = T.scale(T.matmul(qh, kt), 1.0 / math.sqrt(d))
    probs = T.softmax(scores, axis=-1)
    if _attn_log.sinks and probs.data is not None:
        for sink in _attn_log.sinks:
            sink.append((label, probs.data))
    out = T.matmul(probs, vh)
    return T.reshape(T.transpose(out, (0, 2, 1, 3)), (b, nq, c))
