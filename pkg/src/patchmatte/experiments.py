"""Toy-scale experiment setups shared by scripts/ and the acceptance tests."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .data import SceneConfig, TrainingSample, synth_scene
from .network import MattingNet, NetConfig, build_model
from .pipeline import InferenceConfig, TiledMatter, TrainConfig, evaluate, mean_report, train
from .tiling import PatchPlan
from .trimap import U

# Flat colours plus one large all-unknown window per scene: query patches
# inside the window see no known pixels and must borrow from contexts.
ABLATION_SCENES = SceneConfig(
    canvas_side=192,
    flat_colors=True,
    unknown_windows=1,
    window_side=64,
    u_bounds=(0.05, 0.9),
    max_radius=12,
    shape_scale=2.0,
)
ABLATION_TRAIN = TrainConfig(steps=2000, batch=8, k=3, patch_side=64, scales=(64,), seed=0)
ABLATION_INFER = InferenceConfig(patch_side=64, margin=16, k=3, pool_limit=30)
TEST_SEED_OFFSET = 10000


def ablation_data(n_train: int = 512, n_test: int = 20, scenes: SceneConfig = ABLATION_SCENES):
    train_set = [synth_scene(s, config=scenes) for s in range(n_train)]
    test_set = [synth_scene(TEST_SEED_OFFSET + s, config=scenes) for s in range(n_test)]
    return train_set, test_set


@dataclass
class AblationArm:
    mode: str
    model: MattingNet
    sad: float
    mse: float
    train_seconds: float
    final_loss: float
    reports: list = field(repr=False, default_factory=list)


def run_arm(mode: str, train_set, test_set, train_cfg: TrainConfig = ABLATION_TRAIN,
            infer_cfg: InferenceConfig = ABLATION_INFER, model_seed: int = 0, progress=None) -> AblationArm:
    """Train one model variant and score it on the held-out scenes."""
    model = build_model(NetConfig(context_mode=mode), seed=model_seed)
    start = time.perf_counter()
    result = train(train_set, model, train_cfg, progress)
    seconds = time.perf_counter() - start
    reports = evaluate(test_set, result.model, infer_cfg)
    mean = mean_report(reports)
    tail = [l.l_overall for l in result.losses[-50:]]
    return AblationArm(mode, result.model, mean.sad, mean.mse, seconds, float(np.mean(tail)) if tail else float("nan"), reports)


def boundary_pairs(plan: PatchPlan, height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Masks over vertical and horizontal neighbour pairs that straddle a patch edge.

    Entry ``[r, c]`` of the first mask marks the pair ``(r, c)``-``(r + 1, c)``;
    the second mask marks ``(r, c)``-``(r, c + 1)``.
    """
    rows = np.zeros(height - 1, dtype=bool)
    cols = np.zeros(width - 1, dtype=bool)
    for spec in plan.patches:
        for edge, n, mask in ((spec.origin_row, height, rows), (spec.origin_row + spec.side, height, rows),
                              (spec.origin_col, width, cols), (spec.origin_col + spec.side, width, cols)):
            if 0 < edge < n:
                mask[edge - 1] = True
    vertical = np.broadcast_to(rows[:, None], (height - 1, width))
    horizontal = np.broadcast_to(cols[None, :], (height, width - 1))
    return vertical, horizontal


def seam_ratio(alpha: np.ndarray, trimap: np.ndarray, plan: PatchPlan) -> tuple[float, float, float]:
    """Mean |d alpha| on patch-edge pairs, on all other pairs, and their ratio.

    Only pairs with at least one unknown pixel count; known pixels are copied
    from the trimap and carry no seam information.
    """
    h, w = alpha.shape
    dv = np.abs(np.diff(alpha, axis=0))
    dh = np.abs(np.diff(alpha, axis=1))
    unknown = trimap == U
    uv = unknown[:-1] | unknown[1:]
    uh = unknown[:, :-1] | unknown[:, 1:]
    bv, bh = boundary_pairs(plan, h, w)
    seam = np.concatenate([dv[bv & uv], dh[bh & uh]])
    interior = np.concatenate([dv[~bv & uv], dh[~bh & uh]])
    if seam.size == 0 or interior.size == 0:
        raise ValueError("no unknown pixel pairs on one side of the comparison")
    s, i = float(seam.mean()), float(interior.mean())
    return s, i, s / i if i > 0 else float("inf")


@dataclass
class WholeVsTiled:
    tiled_sad: float
    whole_sad: float
    difference_sad: float
    ratio: float
    seconds: float


def whole_vs_tiled(sample: TrainingSample, model: MattingNet, tiled_cfg: InferenceConfig) -> WholeVsTiled:
    """Compare tiled inference with one patch covering the whole image."""
    start = time.perf_counter()
    tiled = TiledMatter(sample.image, sample.trimap, model, tiled_cfg).run()
    side = max(sample.trimap.shape)
    side += -side % model.stride
    whole_cfg = InferenceConfig(
        patch_side=side, margin=tiled_cfg.margin, k=tiled_cfg.k, pool_limit=tiled_cfg.pool_limit,
        memory_budget_bytes=tiled_cfg.memory_budget_bytes * 16, clamp_known=tiled_cfg.clamp_known,
    )
    whole = TiledMatter(sample.image, sample.trimap, model, whole_cfg).run()
    t_sad = metrics.sad(tiled, sample.alpha, sample.trimap)
    w_sad = metrics.sad(whole, sample.alpha, sample.trimap)
    d_sad = metrics.sad(tiled, whole, sample.trimap)
    return WholeVsTiled(t_sad, w_sad, d_sad, d_sad / t_sad if t_sad > 0 else float("inf"), time.perf_counter() - start)


@dataclass
class LargeRun:
    alpha: np.ndarray
    plan: PatchPlan
    peak_bytes: int
    budget_bytes: int
    evictions: int
    seconds: float


def large_run(sample: TrainingSample, model: MattingNet, cfg: InferenceConfig) -> LargeRun:
    start = time.perf_counter()
    matter = TiledMatter(sample.image, sample.trimap, model, cfg)
    alpha = matter.run()
    return LargeRun(alpha, matter.plan, matter.cache.peak_bytes, cfg.memory_budget_bytes,
                    matter.cache.evictions, time.perf_counter() - start)
