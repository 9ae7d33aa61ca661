"""Overlapping patch grids, reflective patch extraction and blended stitching.

Patches live on a regular grid with stride ``patch_side - margin``. The last
patch on each axis keeps the regular stride and may run past the far image
edge; the overhang is filled by mirror reflection. Every pixel is therefore
covered by exactly 1, 2 or 4 patches.

Blend weights use the top-left corner of a pixel as its coordinate, so the
distance of pixel ``i`` to the leading boundary is ``i`` and to the trailing
boundary is ``side - i``. With that convention the two weights inside an
edge overlap add up to exactly one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PatchSpec:
    origin_row: int
    origin_col: int
    side: int
    scale_side: int | None = None

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"patch side must be positive, got {self.side}")
        if self.scale_side is None:
            object.__setattr__(self, "scale_side", self.side)

    @property
    def rows(self) -> slice:
        return slice(self.origin_row, self.origin_row + self.side)

    @property
    def cols(self) -> slice:
        return slice(self.origin_col, self.origin_col + self.side)

    def intersects(self, height: int, width: int) -> bool:
        return (
            self.origin_row < height
            and self.origin_col < width
            and self.origin_row + self.side > 0
            and self.origin_col + self.side > 0
        )

    def clip(self, height: int, width: int) -> tuple[slice, slice, slice, slice]:
        """Image-space and patch-space slices of the in-image part."""
        r0 = max(self.origin_row, 0)
        c0 = max(self.origin_col, 0)
        r1 = min(self.origin_row + self.side, height)
        c1 = min(self.origin_col + self.side, width)
        return (
            slice(r0, r1),
            slice(c0, c1),
            slice(r0 - self.origin_row, r1 - self.origin_row),
            slice(c0 - self.origin_col, c1 - self.origin_col),
        )


@dataclass
class PatchPlan:
    image_height: int
    image_width: int
    patch_side: int
    margin: int
    n_rows: int
    n_cols: int
    patches: list[PatchSpec] = field(default_factory=list)

    @property
    def stride(self) -> int:
        return self.patch_side - self.margin

    def __len__(self) -> int:
        return len(self.patches)

    def grid_position(self, index: int) -> tuple[int, int]:
        return divmod(index, self.n_cols)

    def neighbors(self, index: int) -> tuple[bool, bool, bool, bool]:
        """(top, bottom, left, right) flags: True where a neighbouring patch overlaps."""
        r, c = self.grid_position(index)
        return (r > 0, r < self.n_rows - 1, c > 0, c < self.n_cols - 1)

    def coverage(self) -> np.ndarray:
        counts = np.zeros((self.image_height, self.image_width), dtype=np.int32)
        for spec in self.patches:
            rs, cs, _, _ = spec.clip(self.image_height, self.image_width)
            counts[rs, cs] += 1
        return counts

    def dump(self) -> str:
        """Plain-text debug dump, one patch per line."""
        lines = [f"{i} {p.origin_row} {p.origin_col} {p.side}" for i, p in enumerate(self.patches)]
        return "\n".join(lines) + "\n"


def _axis_origins(length: int, side: int, stride: int) -> list[int]:
    if length <= side:
        return [0]
    n = math.ceil((length - side) / stride) + 1
    return [k * stride for k in range(n)]


def plan_patches(image_height: int, image_width: int, patch_side: int, margin: int) -> PatchPlan:
    if image_height < 1 or image_width < 1:
        raise ValueError(f"image dimensions must be positive, got {image_height}x{image_width}")
    if patch_side <= 0:
        raise ValueError(f"patch_side must be positive, got {patch_side}")
    if not 0 <= margin < patch_side:
        raise ValueError(f"need 0 <= margin < patch_side, got margin={margin}, patch_side={patch_side}")
    stride = patch_side - margin
    rows = _axis_origins(image_height, patch_side, stride)
    cols = _axis_origins(image_width, patch_side, stride)
    patches = [PatchSpec(r, c, patch_side) for r in rows for c in cols]
    return PatchPlan(image_height, image_width, patch_side, margin, len(rows), len(cols), patches)


def mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Reflect indices into [0, n) without repeating the edge sample."""
    idx = np.asarray(idx)
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def extract_patch(image: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Crop ``spec`` out of ``image``, mirror-padding whatever falls outside."""
    h, w = image.shape[:2]
    if not spec.intersects(h, w):
        raise ValueError(f"patch {spec} does not intersect a {h}x{w} image")
    if spec.origin_row >= 0 and spec.origin_col >= 0 and spec.origin_row + spec.side <= h and spec.origin_col + spec.side <= w:
        return image[spec.rows, spec.cols].copy()
    rows = mirror_index(np.arange(spec.origin_row, spec.origin_row + spec.side), h)
    cols = mirror_index(np.arange(spec.origin_col, spec.origin_col + spec.side), w)
    return image[np.ix_(rows, cols)]


def blend_weight(dist, margin: int):
    """Per-pixel weight for a distance to the nearest shared boundary."""
    if margin == 0:
        return np.ones_like(np.asarray(dist, dtype=np.float64))
    return np.minimum(1.0, np.asarray(dist, dtype=np.float64) / margin)


def blend_mask(
    patch_side: int,
    margin: int,
    neighbors: tuple[bool, bool, bool, bool] = (True, True, True, True),
) -> np.ndarray:
    """Blend weights for one patch.

    ``neighbors`` flags (top, bottom, left, right) mark the sides shared with
    an overlapping patch; only those sides pull the weight below one. Corner
    pixels take the minimum over the per-side distances.
    """
    if not 0 <= margin < patch_side:
        raise ValueError(f"need 0 <= margin < patch_side, got margin={margin}, patch_side={patch_side}")
    top, bottom, left, right = neighbors
    i = np.arange(patch_side, dtype=np.float64)
    inf = np.full(patch_side, np.inf)
    row_dist = np.minimum(i if top else inf, patch_side - i if bottom else inf)
    col_dist = np.minimum(i if left else inf, patch_side - i if right else inf)
    dist = np.minimum(row_dist[:, None], col_dist[None, :])
    return blend_weight(dist, margin)


def plan_blend_mask(plan: PatchPlan, index: int) -> np.ndarray:
    return blend_mask(plan.patch_side, plan.margin, plan.neighbors(index))


def stitch(patch_alphas, plan: PatchPlan, tol: float = 1e-6) -> np.ndarray:
    """Weighted average of overlapping patch alphas.

    Accumulation always runs in plan order, so any permutation of
    ``patch_alphas`` yields a bit-identical result.
    """
    by_spec = {}
    for spec, alpha in patch_alphas:
        if spec in by_spec:
            raise ValueError(f"duplicate alpha for patch {spec}")
        by_spec[spec] = alpha
    planned = set(plan.patches)
    missing = planned - set(by_spec)
    extra = set(by_spec) - planned
    if missing or extra:
        raise ValueError(f"patch mismatch: {len(missing)} missing, {len(extra)} not in plan")

    h, w = plan.image_height, plan.image_width
    num = np.zeros((h, w), dtype=np.float64)
    den = np.zeros((h, w), dtype=np.float64)
    for index, spec in enumerate(plan.patches):
        alpha = np.asarray(by_spec[spec], dtype=np.float64)
        if alpha.shape != (spec.side, spec.side):
            raise ValueError(f"alpha for patch {index} has shape {alpha.shape}, expected {(spec.side, spec.side)}")
        if alpha.min() < -tol or alpha.max() > 1 + tol:
            raise ValueError(f"alpha for patch {index} outside [0, 1]")
        weights = plan_blend_mask(plan, index)
        rs, cs, prs, pcs = spec.clip(h, w)
        num[rs, cs] += alpha[prs, pcs] * weights[prs, pcs]
        den[rs, cs] += weights[prs, pcs]
    if not (den > 0).all():
        raise RuntimeError("blend weights vanish at some pixel")
    return np.clip(num / den, 0.0, 1.0)


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def _nearest_axis(n_in: int, n_out: int) -> np.ndarray:
    return np.minimum(np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp), n_in - 1)


def resize_patch(patch: np.ndarray, target_side, nearest: bool | None = None) -> np.ndarray:
    """Resize a square (or rectangular) patch to ``target_side``.

    Bilinear with half-pixel centres and edge clamping for images and alphas;
    nearest-neighbour for label maps. Trimaps (uint8) default to nearest.
    """
    if isinstance(target_side, int):
        out_h = out_w = target_side
    else:
        out_h, out_w = target_side
    if out_h <= 0 or out_w <= 0:
        raise ValueError("target size must be positive")
    h, w = patch.shape[:2]
    if (h, w) == (out_h, out_w):
        return patch.copy()
    if nearest is None:
        nearest = patch.dtype == np.uint8
    if nearest:
        return patch[np.ix_(_nearest_axis(h, out_h), _nearest_axis(w, out_w))]

    r0, r1, fr = _bilinear_axis(h, out_h)
    c0, c1, fc = _bilinear_axis(w, out_w)
    x = patch.astype(np.float64) if patch.dtype != np.float32 else patch
    extra = (None,) * (patch.ndim - 2)
    fr = fr[(slice(None), None) + extra]
    fc = fc[(None, slice(None)) + extra]
    top = x[r0][:, c0] * (1 - fc) + x[r0][:, c1] * fc
    bot = x[r1][:, c0] * (1 - fc) + x[r1][:, c1] * fc
    return (top * (1 - fr) + bot * fr).astype(x.dtype)
