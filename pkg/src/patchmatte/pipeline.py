"""Memory-budgeted tiled inference, training loop, evaluation and attention maps."""

from __future__ import annotations

import logging
import math
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from . import cpc
from . import trimap as tm
from .data import TrainingSample, sample_training_patch
from .metrics import MetricReport, evaluate_matte, format_table
from .network import (
    Encoded,
    LossBreakdown,
    MattingNet,
    backward,
    loss_alpha,
    loss_composite,
    loss_overall,
    network_input,
)
from .tiling import PatchPlan, blend_mask, extract_patch, plan_patches, stitch

log = logging.getLogger(__name__)

MiB = 1 << 20


class BudgetError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, step: int, message: str):
        super().__init__(f"step {step}: {message}")
        self.step = step


@dataclass
class InferenceConfig:
    patch_side: int = 320
    margin: int = 80
    k: int = 3
    pool_limit: int = 30
    encoder_stride: int | None = None
    memory_budget_bytes: int = 512 * MiB
    seed: int = 0
    clamp_known: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.pool_limit < self.k:
            raise ValueError("pool limit N must be >= K")
        if not 0 <= self.margin < self.patch_side:
            raise ValueError("margin must be in [0, patch_side)")

    @classmethod
    def from_mapping(cls, values: dict) -> "InferenceConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            name = key.replace("-", "_")
            if name not in known:
                raise ValueError(f"unknown inference setting {key!r}")
            if name == "clamp_known":
                kwargs[name] = str(raw).lower() in ("1", "true", "yes")
            elif raw is None or raw == "None":
                kwargs[name] = None
            else:
                kwargs[name] = int(raw)
        return cls(**kwargs)


def tensor_bytes(value) -> int:
    if isinstance(value, torch.Tensor):
        return value.element_size() * value.nelement()
    if isinstance(value, np.ndarray):
        return value.nbytes
    if isinstance(value, (list, tuple)):
        return sum(tensor_bytes(v) for v in value)
    return 0


class FeatureCache:
    """Byte-bounded LRU cache that recomputes evicted entries on demand.

    Only the arrays held by the cache are counted; ``peak_bytes`` never
    exceeds ``budget_bytes``.
    """

    def __init__(self, budget_bytes: int, compute):
        self.budget_bytes = budget_bytes
        self._compute = compute
        self._data: OrderedDict = OrderedDict()
        self._sizes: dict = {}
        self._lock = threading.Lock()
        self.bytes = 0
        self.peak_bytes = 0
        self.hits = 0
        self.misses = 0
        self.evictions = 0

    def __contains__(self, key) -> bool:
        return key in self._data

    def __len__(self) -> int:
        return len(self._data)

    def get(self, key):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                self.hits += 1
                return self._data[key]
        value = self._compute(key)
        size = tensor_bytes(value)
        if size > self.budget_bytes:
            raise BudgetError(f"one entry needs {size} bytes but the budget is {self.budget_bytes}")
        with self._lock:
            self.misses += 1
            if key in self._data:
                return self._data[key]
            while self.bytes + size > self.budget_bytes:
                old, _ = self._data.popitem(last=False)
                self.bytes -= self._sizes.pop(old)
                self.evictions += 1
            self._data[key] = value
            self._sizes[key] = size
            self.bytes += size
            self.peak_bytes = max(self.peak_bytes, self.bytes)
        return value


def candidate_pool(n_patches: int, pool_limit: int) -> list[int]:
    """All patches, or ``pool_limit`` of them evenly strided over the plan."""
    if n_patches <= pool_limit:
        return list(range(n_patches))
    return sorted({int(round(v)) for v in np.linspace(0, n_patches - 1, pool_limit)})


@dataclass
class Selection:
    candidates: list[int]
    scores: np.ndarray
    chosen: list[int]


class TiledMatter:
    """Crop-and-stitch inference for one image.

    Every patch is encoded at most once while it stays cached; evicted
    patches are re-encoded when needed again.
    """

    def __init__(self, image: np.ndarray, trimap: np.ndarray, model: MattingNet, config: InferenceConfig | None = None):
        self.config = config = config or InferenceConfig()
        if image.shape[:2] != trimap.shape:
            raise ValueError(f"image {image.shape[:2]} and trimap {trimap.shape} differ in size")
        if config.encoder_stride is not None and config.encoder_stride != model.stride:
            raise ValueError(f"config stride {config.encoder_stride} != model stride {model.stride}")
        if config.patch_side % model.stride:
            raise ValueError(f"patch side {config.patch_side} not divisible by encoder stride {model.stride}")
        self.image = image
        self.trimap = trimap
        self.model = model.eval()
        self.dtype = next(model.parameters()).dtype
        self.plan: PatchPlan = plan_patches(*trimap.shape, config.patch_side, config.margin)
        self.cache = FeatureCache(config.memory_budget_bytes, self._encode)
        self.pool = candidate_pool(len(self.plan), config.pool_limit)
        self._context_sums: dict[int, torch.Tensor] = {}
        self._feature_trimaps: dict[int, np.ndarray] = {}
        self.network_calls = 0
        self.selections: dict[int, Selection] = {}

    def patch_trimap(self, index: int) -> np.ndarray:
        return extract_patch(self.trimap, self.plan.patches[index])

    def feature_trimap(self, index: int) -> np.ndarray:
        if index not in self._feature_trimaps:
            self._feature_trimaps[index] = tm.downsample_trimap(self.patch_trimap(index), self.model.stride)
        return self._feature_trimaps[index]

    def _encode(self, index: int) -> Encoded:
        spec = self.plan.patches[index]
        x = network_input(extract_patch(self.image, spec), self.patch_trimap(index), self.dtype)
        with torch.no_grad():
            return self.model.encode(x[None])

    def encoded(self, index: int) -> Encoded:
        return self.cache.get(index)

    def keyed(self, index: int, role: str) -> cpc.KeyedPatch:
        with torch.no_grad():
            feats = self.encoded(index).features[0]
            return cpc.embed(feats, role, self.model.embeddings, self.feature_trimap(index), self.plan.patches[index])

    def context_sum(self, index: int) -> torch.Tensor:
        if index not in self._context_sums:
            with torch.no_grad():
                key, _ = self.model.embeddings(self.encoded(index).features[0], "context")
            self._context_sums[index] = cpc.masked_key_sum(key).double()
        return self._context_sums[index]

    def select_contexts(self, index: int, query: cpc.KeyedPatch) -> Selection:
        candidates = [j for j in self.pool if j != index]
        if not candidates:
            return Selection([], np.zeros(0), [])
        q_sum = cpc.masked_key_sum(query.key, query.trimap).double()
        h = [float(torch.dot(q_sum, self.context_sum(j))) for j in candidates]
        scores = cpc.score_pool(h)
        top = cpc.select_topk(list(scores), self.config.k)
        return Selection(candidates, scores, [candidates[t] for t in top])

    def predict_patch(self, index: int) -> np.ndarray:
        enc = self.encoded(index)
        with torch.no_grad():
            if self.model.config.context_mode == "none":
                dec_in = enc.features
            else:
                query = self.keyed(index, "query")
                sel = self.select_contexts(index, query)
                self.selections[index] = sel
                contexts = [self.keyed(j, "context") for j in sel.chosen]
                dec_in = cpc.cpc_forward(query, contexts)[None]
            alpha = self.model.decode(dec_in, enc.skips, enc.indices)[0, 0]
        self.network_calls += 1
        return alpha.double().numpy()

    def run(self) -> np.ndarray:
        outputs = []
        for index, spec in enumerate(self.plan.patches):
            tri = self.patch_trimap(index)
            if (tri == tm.U).any():
                alpha = self.predict_patch(index)
                if self.config.clamp_known:
                    alpha = np.where(tri == tm.F, 1.0, np.where(tri == tm.B, 0.0, alpha))
            else:
                alpha = tm.trimap_alpha(tri)
            outputs.append((spec, alpha))
        return stitch(outputs, self.plan)


def matte_image(image, trimap, model: MattingNet, config: InferenceConfig | None = None) -> np.ndarray:
    return TiledMatter(image, trimap, model, config).run()


# training


@dataclass
class TrainConfig:
    steps: int = 200
    batch: int = 8
    lr: float = 5e-4
    weight_decay: float = 1e-4
    seed: int = 0
    k: int = 3
    patch_side: int = 64
    scales: tuple[int, ...] = (64, 96, 128)
    max_angle: float = 15.0
    # probability that a whole batch trains with no context patches
    context_dropout: float = 0.0


@dataclass
class TrainResult:
    model: MattingNet
    losses: list[LossBreakdown] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)

    def loss_log(self) -> str:
        lines = ["step,l_overall,l_alpha,l_composite,lr"]
        for i, (l, lr) in enumerate(zip(self.losses, self.lrs)):
            lines.append(f"{i},{l.l_overall:.8f},{l.l_alpha:.8f},{l.l_composite:.8f},{lr:.8g}")
        return "\n".join(lines) + "\n"


def _chw(arr: np.ndarray) -> np.ndarray:
    return np.moveaxis(arr, -1, 0) if arr.ndim == 3 else arr[None]


def make_batch(dataset, rng: np.random.Generator, cfg: TrainConfig, n_contexts: int, margin: int):
    """Stack ``cfg.batch`` sampled patches into tensors."""
    blend = blend_mask(cfg.patch_side, margin)
    items = []
    while len(items) < cfg.batch:
        sample = dataset[int(rng.integers(len(dataset)))]
        patch = sample_training_patch(
            sample, int(rng.integers(1 << 62)), side=cfg.patch_side, scales=cfg.scales,
            max_angle=cfg.max_angle, n_contexts=n_contexts,
        )
        weights = blend * (patch.trimap == tm.U)
        if weights.sum() > 0:
            items.append((patch, weights))

    def stack(fn, dtype=torch.float32):
        return torch.from_numpy(np.stack([fn(p, w) for p, w in items])).to(dtype)

    batch = {
        "x": torch.stack([network_input(p.image, p.trimap) for p, _ in items]),
        "trimap": np.stack([p.trimap for p, _ in items]),
        "alpha": stack(lambda p, w: _chw(p.alpha)),
        "image": stack(lambda p, w: _chw(p.image)),
        "fg": stack(lambda p, w: _chw(p.fg)),
        "bg": stack(lambda p, w: _chw(p.bg)),
        "weights": stack(lambda p, w: w[None]),
        "ctx_x": None,
        "ctx_trimap": None,
    }
    if n_contexts:
        batch["ctx_x"] = torch.stack(
            [torch.stack([network_input(ci, ct) for ci, ct in p.contexts]) for p, _ in items]
        )
        batch["ctx_trimap"] = np.stack([np.stack([ct for _, ct in p.contexts]) for p, _ in items])
    return batch


def batch_losses(model: MattingNet, batch) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    dtype = next(model.parameters()).dtype
    conv = {k: (v.to(dtype) if isinstance(v, torch.Tensor) else v) for k, v in batch.items()}
    pred = model(conv["x"], conv["trimap"], conv["ctx_x"], conv["ctx_trimap"])
    la = loss_alpha(pred, conv["alpha"], conv["weights"])
    lc = loss_composite(pred, conv["image"], conv["fg"], conv["bg"], conv["weights"])
    return la, lc, loss_overall(la, lc)


def train(dataset: list[TrainingSample], model: MattingNet, cfg: TrainConfig | None = None, progress=None) -> TrainResult:
    """Seeded mini-batch training with Adam and cosine learning-rate decay."""
    cfg = cfg or TrainConfig()
    if not dataset:
        raise ValueError("training needs a nonempty dataset")
    for s in dataset:
        if s.alpha is None or s.fg is None or s.bg is None:
            raise ValueError(f"sample {s.name!r} lacks alpha/fg/bg needed for the losses")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(model)
    if cfg.steps == 0:
        return result
    margin = cfg.patch_side // 4
    use_context = model.config.context_mode != "none"
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.steps)
    model.train()
    for step in range(cfg.steps):
        drop = use_context and rng.uniform() < cfg.context_dropout
        n_ctx = cfg.k if use_context and not drop else 0
        batch = make_batch(dataset, rng, cfg, n_ctx, margin)
        la, lc, lo = batch_losses(model, batch)
        if not math.isfinite(lo.item()):
            raise TrainingError(step, f"non-finite loss {lo.item()}")
        try:
            backward(lo, model)
        except FloatingPointError as exc:
            raise TrainingError(step, str(exc)) from exc
        result.lrs.append(opt.param_groups[0]["lr"])
        opt.step()
        sched.step()
        result.losses.append(LossBreakdown(la.item(), lc.item(), lo.item()))
        if progress is not None:
            progress(step, result.losses[-1])
    model.eval()
    return result


# evaluation


@dataclass
class RunReport:
    name: str
    metrics: MetricReport
    seconds: float
    peak_bytes: int
    patch_count: int

    def csv_line(self) -> str:
        return f"{self.name},{self.metrics.csv_line()},{self.seconds:.3f},{self.peak_bytes},{self.patch_count}"


CSV_HEADER = "name,SAD,MSE,Grad,Conn,unknown_pixels,seconds,peak_bytes,patches"


def evaluate(dataset: list[TrainingSample], model, config: InferenceConfig | None = None) -> list[RunReport]:
    """Matte every sample and score it.

    ``model`` is a MattingNet or any callable ``(image, trimap) -> alpha``.
    """
    config = config or InferenceConfig()
    reports = []
    for s in dataset:
        if s.alpha is None:
            raise ValueError(f"sample {s.name!r} has no ground-truth alpha")
        t0 = time.perf_counter()
        if isinstance(model, MattingNet):
            matter = TiledMatter(s.image, s.trimap, model, config)
            pred = matter.run()
            peak, count = matter.cache.peak_bytes, len(matter.plan)
        else:
            pred = model(s.image, s.trimap)
            peak, count = 0, 1
        seconds = time.perf_counter() - t0
        reports.append(RunReport(s.name, evaluate_matte(pred, s.alpha, s.trimap), seconds, peak, count))
    return reports


def mean_report(reports: list[RunReport]) -> MetricReport:
    vals = np.array([r.metrics.values() for r in reports])
    m = vals.mean(0)
    return MetricReport(*[float(v) for v in m], unknown_pixel_count=int(sum(r.metrics.unknown_pixel_count for r in reports)))


def reports_csv(reports: list[RunReport]) -> str:
    lines = [CSV_HEADER] + [r.csv_line() for r in reports]
    if reports:
        lines.append("mean," + mean_report(reports).csv_line() + ",,,")
    return "\n".join(lines) + "\n"


def format_summary(reports: list[RunReport]) -> str:
    rows = [(r.name, r.metrics) for r in reports]
    if reports:
        rows.append(("mean", mean_report(reports)))
    return format_table(rows)


# attention visualisation


@dataclass
class AttentionViz:
    query_index: int
    pixel: tuple[int, int]
    query_patch: np.ndarray
    query_spec: object
    context_indices: list[int]
    context_specs: list
    weights: list[dict[int, np.ndarray]]
    heatmaps: list[dict[int, np.ndarray]]


def visualize_attention(image, trimap, model: MattingNet, query_index: int, pixel, config: InferenceConfig | None = None) -> AttentionViz:
    """Attention of one unknown query pixel over its top-K context patches.

    ``pixel`` is (row, col) inside the query patch. Heatmaps are upsampled to
    patch resolution and scaled so the brightest position of each region is 1.
    """
    if model.config.context_mode == "none":
        raise ValueError("model has no context module")
    matter = TiledMatter(image, trimap, model, config)
    if not 0 <= query_index < len(matter.plan):
        raise IndexError(f"patch index {query_index} out of range")
    r, c = pixel
    side = matter.plan.patch_side
    if not (0 <= r < side and 0 <= c < side):
        raise ValueError(f"pixel {pixel} outside the {side}x{side} patch")
    stride = model.stride
    pos = (r // stride, c // stride)
    if matter.patch_trimap(query_index)[r, c] != tm.U or matter.feature_trimap(query_index)[pos] != tm.U:
        raise ValueError(f"pixel {pixel} is not in the unknown region of patch {query_index}")
    query = matter.keyed(query_index, "query")
    sel = matter.select_contexts(query_index, query)
    if not sel.chosen:
        raise ValueError("query patch has no context patches")
    contexts = [matter.keyed(j, "context") for j in sel.chosen]
    weights = cpc.attention_maps(query, contexts, pos)
    heatmaps = [{} for _ in contexts]
    for region in cpc.REGION_ORDER:
        peak = max(float(w[region].max()) for w in weights)
        for i, w in enumerate(weights):
            norm = w[region] / peak if peak > 0 else w[region]
            heatmaps[i][region] = np.kron(norm, np.ones((stride, stride)))
    patch = extract_patch(image, matter.plan.patches[query_index]).copy()
    marked = _mark(patch, r, c)
    return AttentionViz(
        query_index, (r, c), marked, matter.plan.patches[query_index], sel.chosen, [matter.plan.patches[j] for j in sel.chosen], weights, heatmaps
    )


def _mark(patch: np.ndarray, r: int, c: int, radius: int = 4) -> np.ndarray:
    out = patch.astype(np.float32).copy()
    yy, xx = np.ogrid[: out.shape[0], : out.shape[1]]
    ring = np.abs(np.hypot(yy - r, xx - c) - radius) < 1.0
    out[ring] = (0.0, 0.0, 1.0)
    return out
