"""Light-field samples: view patterns, synthetic scenes, macro-pixel layout, disk format.

A sample stores all U x V sub-aperture views as one (U, V, H, W, 3) array
with values in [0, 1] and the class labels of the center view. Disparity
is measured in pixels of shift per unit step of the angular index: a
layer with disparity ``d`` appears in view (u, v) translated by
``d * (u - u_c)`` rows and ``d * (v - v_c)`` columns relative to the
center view (u_c, v_c).
"""
from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, FormatError

GENERATOR_VERSION = "lfsynth-1"
IGNORE_LABEL = 255
DEFAULT_DISPARITY = (-0.47, 1.55)
BIG_DISPARITY = (-7.39, 7.07)


def center_of(grid: tuple[int, int]) -> tuple[int, int]:
    u, v = grid
    return (math.ceil(u / 2) - 1, math.ceil(v / 2) - 1)


@dataclass
class LightFieldSample:
    views: np.ndarray  # (U, V, H, W, 3)
    labels: np.ndarray  # (H, W) uint8
    manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.views.ndim != 5 or self.views.shape[-1] != 3:
            raise FormatError(f"views must be (U, V, H, W, 3), got {self.views.shape}")
        if self.labels.shape != self.views.shape[2:4]:
            raise FormatError(f"labels {self.labels.shape} do not match views {self.views.shape}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.views.shape[:2]

    @property
    def size(self) -> tuple[int, int]:
        return self.views.shape[2:4]

    @property
    def center(self) -> tuple[int, int]:
        return center_of(self.grid)

    def view(self, u: int, v: int) -> np.ndarray:
        return self.views[u, v]


# ---------------------------------------------------------------------------
# view patterns


@dataclass(frozen=True)
class ViewPattern:
    """Ordered sub-aperture coordinates, never including the center view."""

    name: str
    coords: tuple[tuple[int, int], ...]
    grid: tuple[int, int]

    def __post_init__(self):
        c = center_of(self.grid)
        if len(set(self.coords)) != len(self.coords):
            raise ConfigError(f"pattern {self.name!r} repeats a view coordinate")
        for u, v in self.coords:
            if not (0 <= u < self.grid[0] and 0 <= v < self.grid[1]):
                raise ConfigError(f"pattern {self.name!r}: ({u},{v}) outside grid {self.grid}")
            if (u, v) == c:
                raise ConfigError(f"pattern {self.name!r} contains the center view {c}")

    def __len__(self) -> int:
        return len(self.coords)

    @property
    def n_views(self) -> int:
        return len(self.coords) + 1


def make_pattern(name: str, grid: tuple[int, int] = (9, 9),
                 coords: Sequence[tuple[int, int]] | None = None) -> ViewPattern:
    """diag9 / diag17: both diagonals through the center at offsets k in {2, 4} / {1, 2, 3, 4}.

    ``none`` is the empty pattern (center view only), ``all`` every other view,
    ``custom`` takes explicit ``coords``. Coordinates come out row-major.
    """
    grid = (int(grid[0]), int(grid[1]))
    cu, cv = center_of(grid)
    if name in ("diag9", "diag17"):
        if min(grid) < 3:
            raise ConfigError(f"diagonal patterns need a grid of at least 3x3, got {grid}")
        ks = (2, 4) if name == "diag9" else (1, 2, 3, 4)
        pts = set()
        for k in ks:
            for du in (-k, k):
                for dv in (-k, k):
                    u, v = cu + du, cv + dv
                    if not (0 <= u < grid[0] and 0 <= v < grid[1]):
                        raise ConfigError(f"pattern {name} does not fit grid {grid}")
                    pts.add((u, v))
        return ViewPattern(name, tuple(sorted(pts)), grid)
    if name == "all":
        pts = [(u, v) for u in range(grid[0]) for v in range(grid[1]) if (u, v) != (cu, cv)]
        return ViewPattern(name, tuple(pts), grid)
    if name == "none":
        return ViewPattern(name, (), grid)
    if name == "custom":
        if coords is None:
            raise ConfigError("custom pattern needs coordinates")
        return ViewPattern(name, tuple((int(u), int(v)) for u, v in coords), grid)
    raise ConfigError(f"unknown view pattern {name!r}")


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass(frozen=True)
class Layer:
    shape: str  # "rectangle" | "ellipse"
    class_id: int
    disparity: float
    texture_seed: int
    center: tuple[float, float]  # (row, col) in the center view
    half_size: tuple[float, float]
    texture: str = "noise"


@dataclass(frozen=True)
class SceneSpec:
    layers: tuple[Layer, ...]
    classes: int
    background_class: int = 0
    background_disparity: float = 0.0
    background_texture: str = "smooth"
    background_seed: int = 0
    disparity_range: tuple[float, float] = DEFAULT_DISPARITY

    def __post_init__(self):
        lo, hi = self.disparity_range
        for d in [self.background_disparity] + [l.disparity for l in self.layers]:
            if not lo - 1e-12 <= d <= hi + 1e-12:
                raise ConfigError(f"disparity {d} outside range {self.disparity_range}")
        if self.classes < 2:
            raise ConfigError("a scene needs at least 2 classes")
        for l in self.layers:
            if not 0 <= l.class_id < self.classes or l.shape not in ("rectangle", "ellipse"):
                raise ConfigError(f"bad layer {l}")

    def render_order(self) -> list[Layer]:
        """Far to near: ascending signed disparity, stable for ties."""
        return sorted(self.layers, key=lambda l: l.disparity)

    def to_dict(self) -> dict:
        return {
            "layers": [dict(shape=l.shape, class_id=l.class_id, disparity=l.disparity,
                            texture_seed=l.texture_seed, center=list(l.center),
                            half_size=list(l.half_size), texture=l.texture) for l in self.layers],
            "classes": self.classes,
            "background_class": self.background_class,
            "background_disparity": self.background_disparity,
            "background_texture": self.background_texture,
            "background_seed": self.background_seed,
            "disparity_range": list(self.disparity_range),
        }


def _texture(kind: str, seed: int, shape: tuple[int, int]) -> np.ndarray:
    rng = np.random.default_rng(seed)
    h, w = shape
    base = rng.uniform(0.2, 0.8, size=3)
    if kind == "smooth":
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        ramp = rng.uniform(-0.3, 0.3, size=(2, 3))
        tex = base + yy[..., None] * ramp[0] + xx[..., None] * ramp[1]
        tex = tex + rng.normal(0.0, 0.02, size=(h, w, 3))
    elif kind in ("noise", "coarse"):
        # square blocks of gray noise over a random base color
        blk = 2 if kind == "noise" else 4
        coarse = rng.uniform(-0.35, 0.35, size=(-(-h // blk), -(-w // blk), 1))
        tex = base + np.repeat(np.repeat(coarse, blk, axis=0), blk, axis=1)[:h, :w]
    else:
        raise ConfigError(f"unknown texture {kind!r}")
    return np.clip(tex, 0.0, 1.0)


def _layer_mask(layer: Layer, shape: tuple[int, int], pad: int) -> np.ndarray:
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = layer.center[0] + pad, layer.center[1] + pad
    ry, rx = layer.half_size
    if layer.shape == "rectangle":
        m = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
    else:
        m = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    return m.astype(np.float64)


def _shift_sample(canvas: np.ndarray, dy: float, dx: float, pad: int, h: int, w: int) -> np.ndarray:
    """Bilinear sample of ``canvas`` so content moves by (+dy, +dx) pixels."""
    sy, sx = pad - dy, pad - dx
    y0, x0 = math.floor(sy), math.floor(sx)
    fy, fx = sy - y0, sx - x0
    a = canvas[y0: y0 + h, x0: x0 + w]
    b = canvas[y0: y0 + h, x0 + 1: x0 + 1 + w]
    c = canvas[y0 + 1: y0 + 1 + h, x0: x0 + w]
    d = canvas[y0 + 1: y0 + 1 + h, x0 + 1: x0 + 1 + w]
    return (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d)


def generate_synthetic_sample(spec: SceneSpec, size: tuple[int, int], grid: tuple[int, int] = (9, 9),
                              seed: int = 0) -> LightFieldSample:
    """Render every view of ``spec`` by painter's order with bilinear sub-pixel shifts.

    Pure function of its arguments; ``seed`` only seeds the manifest
    record and the sensor noise-free renderer draws nothing else.
    """
    h, w = size
    if h < 16 or w < 16:
        raise ConfigError(f"views must be at least 16x16, got {size}")
    gu, gv = grid
    cu, cv = center_of(grid)
    disps = [spec.background_disparity] + [l.disparity for l in spec.layers]
    dmax = max(abs(d) for d in disps)
    reach_u, reach_v = max(cu, gu - 1 - cu), max(cv, gv - 1 - cv)
    if dmax * reach_v > w / 2 or dmax * reach_u > h / 2:
        raise ConfigError(f"disparity {dmax} shifts views by more than half the image "
                          f"({dmax * max(reach_u, reach_v):.2f} px)")
    pad = int(math.ceil(dmax * max(reach_u, reach_v))) + 2
    ch, cw = h + 2 * pad, w + 2 * pad
    bg = _texture(spec.background_texture, spec.background_seed, (ch, cw))
    layers = [(l, _texture(l.texture, l.texture_seed, (ch, cw)), _layer_mask(l, (ch, cw), pad))
              for l in spec.render_order()]
    views = np.empty((gu, gv, h, w, 3))
    for u in range(gu):
        for v in range(gv):
            du, dv = u - cu, v - cv
            d = spec.background_disparity
            img = _shift_sample(bg, d * du, d * dv, pad, h, w)
            for layer, tex, mask in layers:
                dy, dx = layer.disparity * du, layer.disparity * dv
                alpha = _shift_sample(mask, dy, dx, pad, h, w)[..., None]
                img = alpha * _shift_sample(tex, dy, dx, pad, h, w) + (1.0 - alpha) * img
            views[u, v] = img
    labels = np.full((h, w), spec.background_class, dtype=np.uint8)
    for layer, _, mask in layers:
        labels[mask[pad: pad + h, pad: pad + w] >= 0.5] = layer.class_id
    manifest = {
        "seed": int(seed),
        "grid": [gu, gv],
        "size": [h, w],
        "disparity_range": list(spec.disparity_range),
        "classes": spec.classes,
        "generator_version": GENERATOR_VERSION,
        "scene": spec.to_dict(),
    }
    return LightFieldSample(views, labels, manifest)


def random_scene_spec(rng: np.random.Generator, size: tuple[int, int], classes: int,
                      disparity_range: tuple[float, float] = DEFAULT_DISPARITY,
                      n_layers: tuple[int, int] = (2, 5)) -> SceneSpec:
    """Random scene: textured background (class 0) plus a few shapes of classes 1..K-1."""
    h, w = size
    lo, hi = disparity_range
    layers = []
    for _ in range(int(rng.integers(n_layers[0], n_layers[1] + 1))):
        layers.append(Layer(
            shape=str(rng.choice(["rectangle", "ellipse"])),
            class_id=int(rng.integers(1, classes)),
            disparity=float(rng.uniform(lo, hi)),
            texture_seed=int(rng.integers(2 ** 31)),
            center=(float(rng.uniform(0.15, 0.85) * h), float(rng.uniform(0.15, 0.85) * w)),
            half_size=(float(rng.uniform(0.1, 0.3) * h), float(rng.uniform(0.1, 0.3) * w)),
            texture=str(rng.choice(["noise", "smooth"])),
        ))
    return SceneSpec(tuple(layers), classes, 0, float(np.clip(0.0, lo, hi)), "smooth",
                     int(rng.integers(2 ** 31)), (lo, hi))


def angular_scene_spec(rng: np.random.Generator, size: tuple[int, int], classes: int = 3,
                       disparity_range: tuple[float, float] = DEFAULT_DISPARITY,
                       n_layers: tuple[int, int] = (2, 4), texture: str = "coarse") -> SceneSpec:
    """Angular-discrimination scene: foreground classes share one texture generator and
    shape distribution and differ only in disparity.

    Class 0 is a smooth background at the disparity range's lower end;
    class c >= 1 sits at an evenly spaced disparity level, so the center view
    alone cannot tell foreground classes apart.
    """
    if classes < 3:
        raise ConfigError("the angular preset needs at least 3 classes")
    h, w = size
    lo, hi = disparity_range
    levels = np.linspace(lo, hi, classes - 1)
    layers = []
    for _ in range(int(rng.integers(n_layers[0], n_layers[1] + 1))):
        cid = int(rng.integers(1, classes))
        layers.append(Layer(
            shape=str(rng.choice(["rectangle", "ellipse"])),
            class_id=cid,
            disparity=float(levels[cid - 1]),
            texture_seed=int(rng.integers(2 ** 31)),
            center=(float(rng.uniform(0.15, 0.85) * h), float(rng.uniform(0.15, 0.85) * w)),
            half_size=(float(rng.uniform(0.12, 0.3) * h), float(rng.uniform(0.12, 0.3) * w)),
            texture=texture,
        ))
    return SceneSpec(tuple(layers), classes, 0, float(lo), "smooth", int(rng.integers(2 ** 31)),
                     (lo, hi))


def synthesize(n: int, size: tuple[int, int], grid: tuple[int, int], classes: int, seed: int,
               disparity_range: tuple[float, float] = DEFAULT_DISPARITY,
               angular: bool = False) -> list[LightFieldSample]:
    """``n`` samples; sample i uses seed ``(seed, i)`` so prefixes are stable."""
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        make = angular_scene_spec if angular else random_scene_spec
        spec = make(rng, size, classes, disparity_range)
        sample = generate_synthetic_sample(spec, size, grid, seed=seed)
        sample.manifest["index"] = i
        sample.manifest["preset"] = "angular" if angular else "random"
        out.append(sample)
    return out


# ---------------------------------------------------------------------------
# macro-pixel layout


def pack_macro_pixel(views: np.ndarray) -> np.ndarray:
    """(U, V, H, W, 3) -> (H*U, W*V, 3); pixel (h, w) becomes a U x V block."""
    views = views.views if isinstance(views, LightFieldSample) else views
    u, v, h, w, c = views.shape
    return views.transpose(2, 0, 3, 1, 4).reshape(h * u, w * v, c)


def unpack_macro_pixel(image: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    u, v = grid
    hh, ww, c = image.shape
    if hh % u or ww % v:
        raise FormatError(f"macro-pixel image {image.shape[:2]} not divisible by grid {grid}")
    return image.reshape(hh // u, u, ww // v, v, c).transpose(1, 3, 0, 2, 4)


# ---------------------------------------------------------------------------
# netpbm


def _read_netpbm(path: Path) -> tuple[str, np.ndarray]:
    try:
        data = path.read_bytes()
    except OSError:
        raise FormatError(f"missing or unreadable file {path.name}") from None
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos: pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos: pos + 1] == b"#":
            while pos < len(data) and data[pos: pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos: pos + 1].isspace() and data[pos: pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError(f"{path.name}: truncated header")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic = tokens[0].decode("ascii", "replace")
    if magic not in ("P5", "P6"):
        raise FormatError(f"{path.name}: unsupported magic {magic!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path.name}: malformed header") from None
    if maxval != 255:
        raise FormatError(f"{path.name}: only 8-bit files are supported (maxval {maxval})")
    ch = 3 if magic == "P6" else 1
    raster = np.frombuffer(data, dtype=np.uint8, count=h * w * ch, offset=pos) \
        if len(data) - pos >= h * w * ch else None
    if raster is None:
        raise FormatError(f"{path.name}: raster shorter than {w}x{h}x{ch}")
    return magic, raster.reshape(h, w, ch) if ch == 3 else raster.reshape(h, w)


def write_ppm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Binary P6 from (H, W, 3) floats in [0, 1] (rounded) or uint8."""
    img = image if image.dtype == np.uint8 else np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w, _ = img.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    magic, arr = _read_netpbm(Path(path))
    if magic != "P6":
        raise FormatError(f"{Path(path).name}: expected P6, found {magic}")
    return arr


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    magic, arr = _read_netpbm(Path(path))
    if magic != "P5":
        raise FormatError(f"{Path(path).name}: expected P5, found {magic}")
    return arr


# ---------------------------------------------------------------------------
# directories

_VIEW_RE = re.compile(r"^view_(\d+)_(\d+)\.ppm$")


def save_sample(sample: LightFieldSample, directory: str | os.PathLike) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    gu, gv = sample.grid
    for u in range(gu):
        for v in range(gv):
            write_ppm(d / f"view_{u}_{v}.ppm", sample.views[u, v])
    write_pgm(d / "labels.pgm", sample.labels)
    manifest = dict(sample.manifest)
    manifest["grid"] = [gu, gv]
    manifest["size"] = list(sample.size)
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_sample(directory: str | os.PathLike) -> LightFieldSample:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        gu, gv = (int(x) for x in manifest["grid"])
    except FileNotFoundError:
        raise FormatError(f"{d}: missing manifest.json") from None
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"{d}/manifest.json: malformed ({exc})") from None
    present = {m.groups() for m in (_VIEW_RE.match(p.name) for p in d.iterdir()) if m}
    present = {(int(a), int(b)) for a, b in present}
    expected = {(u, v) for u in range(gu) for v in range(gv)}
    for u, v in sorted(expected - present):
        raise FormatError(f"{d}: missing view file view_{u}_{v}.ppm "
                          f"(manifest grid {gu}x{gv}, {len(present)} view files present)")
    if present - expected:
        extra = sorted(present - expected)[0]
        raise FormatError(f"{d}: view_{extra[0]}_{extra[1]}.ppm lies outside manifest grid {gu}x{gv}")
    first = read_ppm(d / "view_0_0.ppm")
    h, w = first.shape[:2]
    views = np.empty((gu, gv, h, w, 3))
    for u in range(gu):
        for v in range(gv):
            img = first if (u, v) == (0, 0) else read_ppm(d / f"view_{u}_{v}.ppm")
            if img.shape != first.shape:
                raise FormatError(f"{d}: view_{u}_{v}.ppm is {img.shape[:2]}, expected {(h, w)}")
            views[u, v] = img / 255.0
    labels = read_pgm(d / "labels.pgm")
    if labels.shape != (h, w):
        raise FormatError(f"{d}: labels.pgm is {labels.shape}, views are {(h, w)}")
    k = int(manifest.get("classes", 256))
    bad = (labels >= k) & (labels != IGNORE_LABEL)
    if bad.any():
        raise FormatError(f"{d}: labels.pgm holds values outside [0, {k}) and != {IGNORE_LABEL}")
    return LightFieldSample(views, labels.copy(), manifest)


def save_dataset(samples: Sequence[LightFieldSample], directory: str | os.PathLike,
                 extra: dict | None = None) -> list[Path]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, s in enumerate(samples):
        p = d / f"sample_{i:04d}"
        save_sample(s, p)
        paths.append(p)
    manifest = {"samples": [p.name for p in paths], "count": len(paths),
                "generator_version": GENERATOR_VERSION}
    if samples:
        m = samples[0].manifest
        manifest.update(grid=list(samples[0].grid), size=list(samples[0].size),
                        classes=m.get("classes"), disparity_range=m.get("disparity_range"),
                        seed=m.get("seed"))
    manifest.update(extra or {})
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return paths


def load_dataset(directory: str | os.PathLike) -> list[LightFieldSample]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"dataset directory {d} does not exist")
    dirs = sorted(p for p in d.iterdir() if p.is_dir() and (p / "manifest.json").exists())
    if not dirs and (d / "manifest.json").exists() and any(_VIEW_RE.match(p.name) for p in d.iterdir()):
        return [load_sample(d)]
    if not dirs:
        raise FormatError(f"{d}: no sample directories found")
    return [load_sample(p) for p in dirs]
