"""Compositing, procedural training scenes, patch sampling and PNG dataset I/O."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage
from scipy import ndimage

from . import trimap as tm
from .tiling import PatchSpec, extract_patch, resize_patch

TAU = 1e-6
SUBDIRS = ("images", "trimaps", "alphas", "fgs", "bgs")


@dataclass
class TrainingSample:
    image: np.ndarray
    trimap: np.ndarray
    alpha: np.ndarray | None = None
    fg: np.ndarray | None = None
    bg: np.ndarray | None = None
    contexts: list = field(default_factory=list)
    name: str = ""


def _check_same(*arrays):
    shapes = {a.shape[:2] for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"spatial shape mismatch: {sorted(shapes)}")


def composite(fg: np.ndarray, alpha: np.ndarray, bg: np.ndarray) -> np.ndarray:
    _check_same(fg, alpha, bg)
    a = alpha[..., None]
    return a * fg + (1 - a) * bg


def merge_foregrounds(fg1, alpha1, fg2, alpha2, tau: float = TAU):
    """Layer (fg1, alpha1) over (fg2, alpha2) into a single foreground."""
    _check_same(fg1, alpha1, fg2, alpha2)
    alpha = 1 - (1 - alpha1) * (1 - alpha2)
    a1 = alpha1[..., None]
    a2 = alpha2[..., None]
    premult = a1 * fg1 + (1 - a1) * a2 * fg2
    fg = premult / np.maximum(alpha, tau)[..., None]
    fg = np.where(alpha[..., None] > 0, fg, 0)
    return np.clip(fg, 0, 1).astype(fg1.dtype), alpha.astype(alpha1.dtype)


# procedural scenes


@dataclass
class SceneConfig:
    canvas_side: int = 256
    max_radius: int = 25
    u_bounds: tuple[float, float] = (0.05, 0.6)
    second_layer_prob: float = 0.5
    # fg and bg are flat colours drawn from one distribution, so only known
    # regions elsewhere in the image tell them apart
    flat_colors: bool = False
    unknown_windows: int = 0
    window_side: int = 64
    # multiplies shape radii and strand lengths
    shape_scale: float = 1.0


def _smooth_field(rng, side: int, colors: np.ndarray, cells: int = 4) -> np.ndarray:
    grid = colors[rng.integers(0, len(colors), size=(cells, cells))]
    grid = grid + rng.normal(0, 0.08, size=grid.shape)
    field_ = resize_patch(grid.astype(np.float32), side, nearest=False)
    return field_


def _texture(rng, side: int, flat: bool) -> np.ndarray:
    if flat:
        base = np.broadcast_to(rng.uniform(0.05, 0.95, size=3).astype(np.float32), (side, side, 3))
    else:
        palette = rng.uniform(0.0, 1.0, size=(3, 3))
        base = _smooth_field(rng, side, palette)
    noise = rng.normal(0, 0.02, size=(side, side, 3)).astype(np.float32)
    return np.clip(base + noise, 0, 1).astype(np.float32)


def _soft(dist: np.ndarray, feather: float) -> np.ndarray:
    return np.clip(0.5 + dist / feather, 0, 1)


def _paint(alpha: np.ndarray, center, reach: float, fn) -> None:
    """Union a shape into ``alpha``, evaluating ``fn(yy, xx)`` only on its bounding box."""
    side = alpha.shape[0]
    r0 = int(max(0, np.floor(center[0] - reach)))
    r1 = int(min(side, np.ceil(center[0] + reach) + 1))
    c0 = int(max(0, np.floor(center[1] - reach)))
    c1 = int(min(side, np.ceil(center[1] + reach) + 1))
    if r0 >= r1 or c0 >= c1:
        return
    yy, xx = np.mgrid[r0:r1, c0:c1].astype(np.float32)
    a = fn(yy, xx)
    region = alpha[r0:r1, c0:c1]
    alpha[r0:r1, c0:c1] = 1 - (1 - region) * (1 - a)


def _disk(alpha, rng, side, scale=1.0):
    c = rng.uniform(0.2, 0.8, size=2) * side
    r = rng.uniform(0.08, 0.25) * side * scale
    feather = rng.uniform(1.0, 6.0)
    _paint(alpha, c, r + feather, lambda y, x: _soft(r - np.hypot(y - c[0], x - c[1]), feather))


def _polygon(alpha, rng, side, scale=1.0):
    c = rng.uniform(0.2, 0.8, size=2) * side
    r = rng.uniform(0.1, 0.3) * side * scale
    n = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0, 2 * np.pi, size=n))
    pts = np.stack([c[0] + r * np.sin(angles), c[1] + r * np.cos(angles)], 1)
    feather = rng.uniform(1.0, 8.0)

    def fn(y, x):
        d = np.full(y.shape, np.inf, dtype=np.float32)
        for k in range(n):
            p, q = pts[k], pts[(k + 1) % n]
            edge = q - p
            length = np.hypot(*edge) + 1e-9
            # inward normal for counter-clockwise ordering in (row, col) coordinates
            cross = (edge[1] * (y - p[0]) - edge[0] * (x - p[1])) / length
            d = np.minimum(d, cross)
        return _soft(d, feather)

    _paint(alpha, c, r + feather, fn)


def _strands(alpha, rng, side, scale=1.0):
    c = rng.uniform(0.2, 0.8, size=2) * side
    length = rng.uniform(0.1, 0.3) * side * scale
    theta = rng.uniform(0, np.pi)
    direction = np.array([np.sin(theta), np.cos(theta)])
    normal = np.array([direction[1], -direction[0]])
    count = int(rng.integers(3, 9))
    amp = rng.uniform(1.0, 0.05 * side)
    wavelength = rng.uniform(0.1, 0.4) * side
    for _ in range(count):
        offset = rng.uniform(-0.1, 0.1) * side
        phase = rng.uniform(0, 2 * np.pi)
        width = rng.uniform(0.8, 2.5)
        peak = rng.uniform(0.4, 0.95)

        def fn(y, x, offset=offset, phase=phase, width=width, peak=peak):
            t = (y - c[0]) * direction[0] + (x - c[1]) * direction[1]
            n = (y - c[0]) * normal[0] + (x - c[1]) * normal[1]
            curve = offset + amp * np.sin(2 * np.pi * t / wavelength + phase)
            a = peak * np.clip(1 - np.abs(n - curve) / width, 0, 1)
            return np.where(np.abs(t) <= length, a, 0)

        _paint(alpha, c, length + abs(offset) + amp + width, fn)


def _layer_alpha(rng, side: int, scale: float = 1.0) -> np.ndarray:
    alpha = np.zeros((side, side), dtype=np.float32)
    painters = (_disk, _polygon, _strands)
    for _ in range(int(rng.integers(1, 4))):
        painters[int(rng.integers(0, 3))](alpha, rng, side, scale)
    return alpha


def _unknown_windows(rng, alpha: np.ndarray, cfg: SceneConfig) -> np.ndarray:
    side = alpha.shape[0]
    mask = np.zeros(alpha.shape, dtype=bool)
    edge = np.argwhere((alpha > TAU) & (alpha < 1 - TAU))
    if len(edge) == 0 or cfg.unknown_windows == 0:
        return mask
    for _ in range(cfg.unknown_windows):
        cy, cx = edge[rng.integers(0, len(edge))]
        w = int(cfg.window_side * rng.uniform(0.8, 1.6))
        r0, c0 = max(0, cy - w // 2), max(0, cx - w // 2)
        mask[r0:min(side, r0 + w), c0:min(side, c0 + w)] = True
    return mask


def _scene_trimap(rng, alpha, cfg: SceneConfig, windows: np.ndarray) -> np.ndarray:
    lo, hi = cfg.u_bounds
    erode, dilate = (int(v) for v in rng.integers(1, cfg.max_radius + 1, size=2))
    for _ in range(12):
        tri = tm.dilate_alpha_to_trimap(alpha, erode, dilate)
        tri[windows] = tm.U
        frac = float((tri == tm.U).mean())
        if frac > hi and max(erode, dilate) > 1:
            erode, dilate = max(1, erode // 2), max(1, dilate // 2)
        elif frac < lo and dilate < alpha.shape[0] // 4:
            erode, dilate = erode + max(1, erode // 2), dilate + max(1, dilate // 2)
        else:
            break
    return tri


def synth_scene(seed: int, canvas_side: int | None = None, config: SceneConfig | None = None) -> TrainingSample:
    """Deterministic soft-edged shapes over a procedural background."""
    cfg = config or SceneConfig()
    side = canvas_side or cfg.canvas_side
    if side < 64:
        raise ValueError("canvas_side must be >= 64")
    rng = np.random.default_rng(seed)
    for _ in range(50):
        alpha = _layer_alpha(rng, side, cfg.shape_scale)
        fg = _texture(rng, side, cfg.flat_colors)
        if rng.uniform() < cfg.second_layer_prob:
            alpha2 = _layer_alpha(rng, side, cfg.shape_scale)
            fg2 = _texture(rng, side, cfg.flat_colors)
            fg, alpha = merge_foregrounds(fg, alpha, fg2, alpha2)
        soft = (alpha > TAU) & (alpha < 1 - TAU)
        if soft.mean() > 0.005 and (alpha >= 1 - TAU).any():
            break
    bg = _texture(rng, side, cfg.flat_colors)
    alpha = alpha.astype(np.float32)
    image = composite(fg, alpha, bg).astype(np.float32)
    windows = _unknown_windows(rng, alpha, cfg)
    tri = _scene_trimap(rng, alpha, cfg, windows)
    return TrainingSample(image=image, trimap=tri, alpha=alpha, fg=fg, bg=bg, name=f"scene{seed}")


# training patches


@dataclass
class TrainingPatch:
    image: np.ndarray
    trimap: np.ndarray
    alpha: np.ndarray
    fg: np.ndarray
    bg: np.ndarray
    crop_side: int
    angle: float
    flipped: bool
    center: tuple[int, int]
    contexts: list = field(default_factory=list)


def _rotate(arr: np.ndarray, angle: float, order: int) -> np.ndarray:
    if angle == 0:
        return arr
    return ndimage.rotate(arr, angle, axes=(1, 0), reshape=False, order=order, mode="mirror")


def _transform(arr, spec, side, angle, flip, nearest):
    crop = extract_patch(arr, spec)
    crop = _rotate(crop, angle, 0 if nearest else 1)
    out = resize_patch(crop, side, nearest=nearest)
    if flip:
        out = out[:, ::-1]
    return np.ascontiguousarray(out)


def sample_training_patch(
    sample: TrainingSample,
    seed,
    side: int = 320,
    scales=(320, 480, 640),
    max_angle: float = 15.0,
    n_contexts: int = 0,
    angle: float | None = None,
    flip: bool | None = None,
    crop_side: int | None = None,
) -> TrainingPatch:
    """Crop around a random unknown pixel, rotate, resize to ``side`` and maybe flip.

    ``angle``, ``flip`` and ``crop_side`` override the random draws. Context
    crops are taken uniformly over the canvas at the same scale, resized and
    not rotated.
    """
    rng = np.random.default_rng(seed)
    unknown = np.flatnonzero(sample.trimap.reshape(-1) == tm.U)
    if len(unknown) == 0:
        raise ValueError("sample has no unknown pixels to centre a crop on")
    h, w = sample.trimap.shape
    cy, cx = divmod(int(unknown[rng.integers(0, len(unknown))]), w)
    s = int(crop_side if crop_side is not None else scales[int(rng.integers(0, len(scales)))])
    a = float(angle if angle is not None else rng.uniform(-max_angle, max_angle))
    f = bool(flip if flip is not None else rng.uniform() < 0.5)
    if s > max(h, w) * 2:
        raise ValueError(f"crop side {s} too large for a {h}x{w} canvas")
    spec = PatchSpec(cy - s // 2, cx - s // 2, s)
    out = TrainingPatch(
        image=_transform(sample.image, spec, side, a, f, False),
        trimap=_transform(sample.trimap, spec, side, a, f, True),
        alpha=np.clip(_transform(sample.alpha, spec, side, a, f, False), 0, 1),
        fg=_transform(sample.fg, spec, side, a, f, False),
        bg=_transform(sample.bg, spec, side, a, f, False),
        crop_side=s,
        angle=a,
        flipped=f,
        center=(cy, cx),
    )
    for _ in range(n_contexts):
        r0 = int(rng.integers(0, max(1, h - s + 1)))
        c0 = int(rng.integers(0, max(1, w - s + 1)))
        cspec = PatchSpec(r0, c0, s)
        out.contexts.append(
            (resize_patch(extract_patch(sample.image, cspec), side, nearest=False),
             resize_patch(extract_patch(sample.trimap, cspec), side, nearest=True))
        )
    return out


# PNG I/O


def read_image(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    PILImage.fromarray(arr, "RGB").save(path)


def read_trimap(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return tm.from_gray(np.asarray(im.convert("L")))


def write_trimap(path, trimap: np.ndarray) -> None:
    PILImage.fromarray(trimap.astype(np.uint8), "L").save(path)


def read_alpha(path) -> np.ndarray:
    with PILImage.open(path) as im:
        if im.mode in ("I;16", "I;16B", "I;16L", "I"):
            return np.asarray(im, dtype=np.float64).astype(np.float32) / 65535.0
        return np.asarray(im.convert("L"), dtype=np.float32) / 255.0


def write_alpha(path, alpha: np.ndarray, depth: int = 8) -> None:
    a = np.clip(np.asarray(alpha, dtype=np.float64), 0, 1)
    if depth == 8:
        PILImage.fromarray(np.round(a * 255).astype(np.uint8), "L").save(path)
    elif depth == 16:
        PILImage.fromarray(np.round(a * 65535).astype(np.uint16)).save(path)
    else:
        raise ValueError(f"depth must be 8 or 16, got {depth}")


def save_dataset(root, samples) -> None:
    root = Path(root)
    for sub in SUBDIRS:
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, s in enumerate(samples):
        name = s.name or f"{i:05d}"
        write_image(root / "images" / f"{name}.png", s.image)
        write_trimap(root / "trimaps" / f"{name}.png", s.trimap)
        if s.alpha is not None:
            write_alpha(root / "alphas" / f"{name}.png", s.alpha, depth=16)
        if s.fg is not None:
            write_image(root / "fgs" / f"{name}.png", s.fg)
        if s.bg is not None:
            write_image(root / "bgs" / f"{name}.png", s.bg)


def load_dataset(root) -> list[TrainingSample]:
    """Read ``<root>/{images,trimaps,alphas,fgs,bgs}/<name>.png``; images and trimaps are required."""
    root = Path(root)
    images = sorted((root / "images").glob("*.png"))
    if not images:
        raise FileNotFoundError(f"no images under {root / 'images'}")
    out = []
    for path in images:
        name = path.stem
        tri_path = root / "trimaps" / f"{name}.png"
        if not tri_path.exists():
            raise FileNotFoundError(f"missing trimap for {name}")

        def optional(sub, reader):
            p = root / sub / f"{name}.png"
            return reader(p) if p.exists() else None

        out.append(
            TrainingSample(
                image=read_image(path),
                trimap=read_trimap(tri_path),
                alpha=optional("alphas", read_alpha),
                fg=optional("fgs", read_image),
                bg=optional("bgs", read_image),
                name=name,
            )
        )
    return out
