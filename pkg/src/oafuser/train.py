"""Augmentation, loss, learning-rate schedule, AdamW, training loop and segmentation metrics."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, DegenerateBatchError, DimensionError, NonFiniteError
from .lfio import IGNORE_LABEL, LightFieldSample, ViewPattern, center_of, make_pattern
from .model import ModelState, forward
from .tensor import Tensor

CROP_CAP = 96


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 6e-5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    weight_decay: float = 0.01
    poly_power: float = 0.9
    warmup_epochs: float = 10
    flip_prob: float = 0.5
    scales: tuple[float, ...] = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75)
    norm_mean: tuple[float, float, float] = (0.485, 0.456, 0.406)
    norm_std: tuple[float, float, float] = (0.229, 0.224, 0.225)
    epochs: int = 50
    batch: int = 8
    seed: int = 0
    crop: int | None = None  # default min(H, W, 96)
    dtype: str = "float32"

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if not self.scales or any(s <= 0 for s in self.scales):
            raise ConfigError(f"scales must be positive, got {self.scales}")
        if self.epochs < 1 or self.batch < 1 or self.warmup_epochs < 0:
            raise ConfigError("epochs and batch must be >= 1, warmup_epochs >= 0")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        for k in ("betas", "scales", "norm_mean", "norm_std"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


# ---------------------------------------------------------------------------
# augmentation


def normalize(images: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Per-channel (x - mean) / std on (..., H, W, 3) images."""
    mean = np.asarray(config.norm_mean)
    std = np.asarray(config.norm_std)
    return (images - mean) / std


def _resize_images(images: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (..., H, W, 3)."""
    h, w = images.shape[-3:-1]
    if (h, w) == tuple(size):
        return images
    rh = T.bilinear_matrix(h, size[0])
    rw = T.bilinear_matrix(w, size[1])
    return np.einsum("ih,...hwc,jw->...ijc", rh, images, rw, optimize=True)


def _resize_labels(labels: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    h, w = labels.shape
    if (h, w) == tuple(size):
        return labels
    rows = np.minimum(np.floor((np.arange(size[0]) + 0.5) * h / size[0]).astype(int), h - 1)
    cols = np.minimum(np.floor((np.arange(size[1]) + 0.5) * w / size[1]).astype(int), w - 1)
    return labels[rows[:, None], cols[None, :]]


def _crop_or_pad(images: np.ndarray, labels: np.ndarray, crop: tuple[int, int],
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One random window for every view; padding is 0 in normalized space and ignored in labels."""
    h, w = labels.shape
    ch, cw = crop
    if h > ch or w > cw:
        top = int(rng.integers(0, h - ch + 1)) if h > ch else 0
        left = int(rng.integers(0, w - cw + 1)) if w > cw else 0
        images = images[..., top: top + min(h, ch), left: left + min(w, cw), :]
        labels = labels[top: top + min(h, ch), left: left + min(w, cw)]
        h, w = labels.shape
    if h < ch or w < cw:
        pad_img = [(0, 0)] * (images.ndim - 3) + [(0, ch - h), (0, cw - w), (0, 0)]
        images = np.pad(images, pad_img)
        labels = np.pad(labels, ((0, ch - h), (0, cw - w)), constant_values=IGNORE_LABEL)
    return images, labels


def _decide(rng: np.random.Generator, config: TrainConfig, flip: bool | None, scale: float | None):
    do_flip = bool(rng.random() < config.flip_prob) if flip is None else bool(flip)
    if scale is None:
        scale = float(config.scales[int(rng.integers(len(config.scales)))])
    return do_flip, scale


def _geometry(images: np.ndarray, labels: np.ndarray, do_flip: bool, scale: float,
              crop: tuple[int, int] | None, rng: np.random.Generator, config: TrainConfig):
    if do_flip:
        images = images[..., :, ::-1, :]
        labels = labels[:, ::-1]
    if scale != 1.0:
        h, w = labels.shape
        size = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
        images = _resize_images(images, size)
        labels = _resize_labels(labels, size)
    images = normalize(images, config)
    if crop is not None:
        images, labels = _crop_or_pad(images, labels, crop, rng)
    return np.ascontiguousarray(images), np.ascontiguousarray(labels)


def _crop_size(h: int, w: int, config: TrainConfig) -> tuple[int, int]:
    c = config.crop if config.crop is not None else CROP_CAP
    return (min(h, c), min(w, c))


def augment(sample: LightFieldSample, rng: np.random.Generator, config: TrainConfig, *,
            flip: bool | None = None, scale: float | None = None,
            crop: bool = True) -> LightFieldSample:
    """Flip and rescale every view and the labels with one shared decision, then normalize.

    A horizontal flip mirrors each image and also reverses the angular
    column index (view v becomes view V-1-v), so the result is again a
    consistent light field. Images are resampled bilinearly, labels by
    nearest neighbour; a random crop (or ignore-label padding) brings the
    result to ``min(H, 96)`` square. ``flip``/``scale`` force the decision.
    """
    do_flip, s = _decide(rng, config, flip, scale)
    views = sample.views[:, ::-1] if do_flip else sample.views
    h, w = sample.size
    window = _crop_size(h, w, config) if crop else None
    views, labels = _geometry(views, sample.labels, do_flip, s, window, rng, config)
    manifest = dict(sample.manifest, augment={"flip": do_flip, "scale": s})
    return LightFieldSample(views, labels, manifest)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    center: np.ndarray  # (B, 3, H, W), normalized
    sais: np.ndarray | None  # (B, N, 3, H, W)
    labels: np.ndarray  # (B, H, W)
    coords: tuple[tuple[int, int], ...]

    @property
    def size(self) -> int:
        return self.center.shape[0]


def _gather(sample: LightFieldSample, pattern: ViewPattern, flipped: bool) -> np.ndarray:
    """(1 + N, H, W, 3): the center then the pattern views, as seen after an optional flip."""
    if tuple(pattern.grid) != tuple(sample.grid):
        raise DimensionError(f"pattern grid {pattern.grid} does not match sample grid {sample.grid}")
    gv = sample.grid[1]
    c = sample.center
    idx = [c] + list(pattern.coords)
    if flipped:
        idx = [(u, gv - 1 - v) for u, v in idx]
    return np.stack([sample.views[u, v] for u, v in idx])


def _to_batch(items: Sequence[tuple[np.ndarray, np.ndarray]], coords, dtype) -> Batch:
    stacks = np.stack([it[0] for it in items]).astype(dtype, copy=False)  # (B, 1+N, H, W, 3)
    stacks = stacks.transpose(0, 1, 4, 2, 3)
    labels = np.stack([it[1] for it in items]).astype(np.int64)
    center = np.ascontiguousarray(stacks[:, 0])
    sais = np.ascontiguousarray(stacks[:, 1:]) if stacks.shape[1] > 1 else None
    return Batch(center, sais, labels, tuple(coords))


def make_batch(samples: Sequence[LightFieldSample], pattern: ViewPattern, config: TrainConfig,
               rng: np.random.Generator | None = None, train: bool = True) -> Batch:
    """Training batches are augmented with ``rng``; evaluation batches are only normalized."""
    items = []
    for s in samples:
        if train:
            do_flip, sc = _decide(rng, config, None, None)
            stack = _gather(s, pattern, do_flip)
            h, w = s.size
            items.append(_geometry(stack, s.labels, do_flip, sc, _crop_size(h, w, config), rng, config))
        else:
            items.append((normalize(_gather(s, pattern, False), config), s.labels))
    return _to_batch(items, pattern.coords, config.np_dtype)


# ---------------------------------------------------------------------------
# loss, schedule, optimizer


def loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy over non-ignored pixels. Accepts (K, H, W) or (B, K, H, W) logits."""
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits = T.reshape(logits, (1,) + logits.shape)
        labels = labels[None]
    return T.cross_entropy(logits, labels, IGNORE_LABEL)


def steps_per_epoch(n_samples: int, batch: int) -> int:
    return max(1, math.ceil(n_samples / batch))


def lr_at(step: int, total_steps: int, config: TrainConfig, warmup_steps: int | None = None) -> float:
    """Linear warmup from 0 to lr0, then polynomial decay to 0 at ``total_steps``.

    ``warmup_steps`` defaults to ``warmup_epochs`` worth of steps assuming
    one step per epoch; :func:`fit` passes the real conversion.
    """
    if not 0 <= step <= total_steps:
        raise ConfigError(f"step {step} outside [0, {total_steps}]")
    warm = int(round(config.warmup_epochs)) if warmup_steps is None else int(warmup_steps)
    warm = min(warm, total_steps)
    if step < warm:
        return config.lr0 * step / warm
    if step >= total_steps:
        return 0.0
    frac = (step - warm) / (total_steps - warm)
    return config.lr0 * (1.0 - frac) ** config.poly_power


@dataclass
class AdamW:
    """Adam with bias correction and decoupled weight decay applied to every parameter."""

    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float) -> None:
        b1, b2 = self.betas
        self.t += 1
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for pid, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m.get(pid)
            if m is None:
                m = self.m[pid] = np.zeros_like(p.data)
                self.v[pid] = np.zeros_like(p.data)
            v = self.v[pid]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * (update + self.weight_decay * p.data)).astype(p.data.dtype, copy=False)


def train_step(state: ModelState, batch: Batch, config: TrainConfig, step: int,
               optimizer: AdamW, lr: float) -> tuple[ModelState, float]:
    """Forward, loss, backward, one AdamW update, clear gradients. Mutates ``state`` in place."""
    if batch.size == 0:
        raise DegenerateBatchError("empty batch")
    logits = forward(state, batch.center, batch.sais, batch.coords)
    value = loss(logits, batch.labels)
    lv = float(value.item())
    if not math.isfinite(lv):
        raise NonFiniteError("train.loss", f"at step {step}")
    T.backward(value)
    optimizer.step(state.params, lr)
    state.zero_grad()
    state.step += 1
    return state, lv


@dataclass
class StepLog:
    step: int
    loss: float
    lr: float

    def line(self) -> str:
        return f"step={self.step} loss={self.loss:.6f} lr={self.lr:.6e}"


def fit(state: ModelState, samples: Sequence[LightFieldSample], config: TrainConfig,
        pattern: ViewPattern | str = "diag9", *, max_steps: int | None = None,
        log: Callable[[StepLog], None] | None = None,
        stop: Callable[[ModelState, int], bool] | None = None) -> list[StepLog]:
    """Train for ``config.epochs`` epochs (or ``max_steps``). Deterministic given the seed.

    Epoch ``e`` visits the samples in the order of a permutation drawn
    from ``default_rng([seed, e])``; augmentation draws from a separate
    stream ``default_rng([seed, e, 1])``. ``stop(state, step)`` is polled
    after each step and ends training early when it returns true.
    """
    if not samples:
        raise DegenerateBatchError("empty training set")
    if isinstance(pattern, str):
        pattern = make_pattern(pattern, samples[0].grid)
    spe = steps_per_epoch(len(samples), config.batch)
    total = config.epochs * spe if max_steps is None else int(max_steps)
    warm = int(round(config.warmup_epochs * spe))
    opt = AdamW(config.betas, config.adam_eps, config.weight_decay)
    history: list[StepLog] = []
    step = 0
    epoch = 0
    while step < total:
        order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
        aug_rng = np.random.default_rng([config.seed, epoch, 1])
        for i in range(0, len(order), config.batch):
            if step >= total:
                break
            chosen = [samples[j] for j in order[i: i + config.batch]]
            batch = make_batch(chosen, pattern, config, aug_rng, train=True)
            lr = lr_at(step, total, config, warm)
            _, lv = train_step(state, batch, config, step, opt, lr)
            entry = StepLog(step, lv, lr)
            history.append(entry)
            if log is not None:
                log(entry)
            step += 1
            if stop is not None and stop(state, step):
                return history
        epoch += 1
    return history


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    """Confusion-matrix metrics; rows are ground truth, columns predictions."""

    confusion: np.ndarray

    @classmethod
    def empty(cls, classes: int) -> "Metrics":
        return cls(np.zeros((classes, classes), dtype=np.int64))

    @classmethod
    def from_maps(cls, pred: np.ndarray, truth: np.ndarray, classes: int,
                  ignore_index: int = IGNORE_LABEL) -> "Metrics":
        m = cls.empty(classes)
        m.update(pred, truth, ignore_index)
        return m

    @property
    def classes(self) -> int:
        return self.confusion.shape[0]

    def update(self, pred: np.ndarray, truth: np.ndarray, ignore_index: int = IGNORE_LABEL) -> None:
        pred = np.asarray(pred).ravel().astype(np.int64)
        truth = np.asarray(truth).ravel().astype(np.int64)
        if pred.shape != truth.shape:
            raise DimensionError(f"prediction {pred.shape} vs truth {truth.shape}")
        keep = truth != ignore_index
        pred, truth = pred[keep], truth[keep]
        k = self.classes
        if truth.size and (truth.min() < 0 or truth.max() >= k or pred.min() < 0 or pred.max() >= k):
            raise DimensionError(f"label or prediction outside [0, {k})")
        self.confusion += np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    @property
    def acc(self) -> float:
        return float(np.trace(self.confusion) / self.total) if self.total else float("nan")

    def per_class_acc(self) -> np.ndarray:
        rows = self.confusion.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(rows > 0, np.diag(self.confusion) / rows, np.nan)

    def per_class_iou(self) -> np.ndarray:
        diag = np.diag(self.confusion)
        union = self.confusion.sum(axis=1) + self.confusion.sum(axis=0) - diag
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, diag / union, np.nan)

    @property
    def macc(self) -> float:
        v = self.per_class_acc()
        return float(np.nanmean(v)) if np.isfinite(v).any() else float("nan")

    @property
    def miou(self) -> float:
        v = self.per_class_iou()
        return float(np.nanmean(v)) if np.isfinite(v).any() else float("nan")

    def to_text(self) -> str:
        lines = [f"{'class':>6} {'acc':>8} {'iou':>8} {'support':>9}"]
        for c, (a, i, n) in enumerate(zip(self.per_class_acc(), self.per_class_iou(),
                                          self.confusion.sum(axis=1))):
            fa = "-" if np.isnan(a) else f"{100 * a:.2f}"
            fi = "-" if np.isnan(i) else f"{100 * i:.2f}"
            lines.append(f"{c:>6} {fa:>8} {fi:>8} {int(n):>9}")
        lines.append(f"Acc {100 * self.acc:.2f}  mAcc {100 * self.macc:.2f}  mIoU {100 * self.miou:.2f}")
        return "\n".join(lines)

    def to_keyvalue(self) -> str:
        return "\n".join([f"acc={self.acc!r}", f"macc={self.macc!r}", f"miou={self.miou!r}",
                          f"pixels={self.total}", f"classes={self.classes}"])

    def as_dict(self) -> dict:
        return {"acc": self.acc, "macc": self.macc, "miou": self.miou, "pixels": self.total,
                "confusion": self.confusion.tolist()}


def predict(state: ModelState, samples: Sequence[LightFieldSample], pattern: ViewPattern | str,
            config: TrainConfig | None = None, batch: int = 8) -> list[np.ndarray]:
    """Argmax label maps at native resolution, one per sample."""
    config = config or TrainConfig()
    if not samples:
        return []
    if isinstance(pattern, str):
        pattern = make_pattern(pattern, samples[0].grid)
    dtype = next(iter(state.params.values())).data.dtype
    config = replace(config, dtype=str(np.dtype(dtype)))
    out = []
    with T.no_grad():
        for i in range(0, len(samples), batch):
            b = make_batch(samples[i: i + batch], pattern, config, train=False)
            logits = forward(state, b.center, b.sais, b.coords)
            out.extend(np.argmax(logits.data, axis=1).astype(np.uint8))
    return out


def evaluate(state: ModelState, samples: Sequence[LightFieldSample], pattern: ViewPattern | str,
             config: TrainConfig | None = None, batch: int = 8) -> Metrics:
    """One confusion matrix over every pixel of every sample."""
    if not samples:
        raise DegenerateBatchError("empty evaluation set")
    m = Metrics.empty(state.config.classes)
    for pred, s in zip(predict(state, samples, pattern, config, batch), samples):
        m.update(pred, s.labels)
    return m
