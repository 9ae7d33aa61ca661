"""SAD, MSE, gradient and connectivity errors over the unknown region.

Mattes are float arrays in [0, 1]. Reported scales: SAD, Grad and Conn
divided by 1000, MSE multiplied by 1000.

Outside U both mattes are replaced by the trimap label (F -> 1, B -> 0)
before any filtering, so Grad and Conn, which look at neighbourhoods and
whole components, depend on unknown pixels only.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .trimap import U, trimap_alpha


def _prep(pred, gt, trimap):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.shape != trimap.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape}, gt {gt.shape}, trimap {trimap.shape}")
    mask = trimap == U
    known = trimap_alpha(trimap)
    return np.where(mask, pred, known), np.where(mask, gt, known), mask


def sad(pred, gt, trimap) -> float:
    pred, gt, mask = _prep(pred, gt, trimap)
    return float(np.abs(pred - gt)[mask].sum() / 1000.0)


def mse(pred, gt, trimap) -> float:
    pred, gt, mask = _prep(pred, gt, trimap)
    n = mask.sum()
    if n == 0:
        return 0.0
    return float(((pred - gt) ** 2)[mask].sum() / n * 1000.0)


def gaussian_derivative_kernels(sigma: float = 1.4, truncate: float = 3.0):
    """(d/dx, d/dy) first-derivative-of-Gaussian kernels, unit L2 norm."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    half = int(np.ceil(truncate * sigma))
    u = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(u ** 2) / (2 * sigma ** 2)) / (sigma * np.sqrt(2 * np.pi))
    dg = -u * g / sigma ** 2
    hx = g[:, None] * dg[None, :]
    hx /= np.sqrt((hx ** 2).sum())
    return hx, hx.T


def gradient_magnitude(alpha, sigma: float = 1.4) -> np.ndarray:
    hx, hy = gaussian_derivative_kernels(sigma)
    gx = ndimage.convolve(alpha, hx, mode="nearest")
    gy = ndimage.convolve(alpha, hy, mode="nearest")
    return np.sqrt(gx ** 2 + gy ** 2)


def gradient_metric(pred, gt, trimap, sigma: float = 1.4) -> float:
    pred, gt, mask = _prep(pred, gt, trimap)
    diff = (gradient_magnitude(pred, sigma) - gradient_magnitude(gt, sigma)) ** 2
    return float(diff[mask].sum() / 1000.0)


_FOUR = ndimage.generate_binary_structure(2, 1)


def largest_component(mask: np.ndarray) -> np.ndarray:
    labels, n = ndimage.label(mask, structure=_FOUR)
    if n == 0:
        return np.zeros_like(mask, dtype=bool)
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == sizes.argmax()


def connectivity_levels(pred, gt, step: float = 0.1) -> np.ndarray:
    """Per pixel, the last threshold at which it still belonged to the shared largest component."""
    thresholds = np.arange(0.0, 1.0 + step, step)
    level = np.full(pred.shape, -1.0)
    for i in range(1, len(thresholds)):
        omega = largest_component((pred >= thresholds[i]) & (gt >= thresholds[i]))
        flag = (level == -1) & ~omega
        level[flag] = thresholds[i - 1]
    level[level == -1] = 1.0
    return level


def connectivity_metric(pred, gt, trimap, step: float = 0.1, penalty_threshold: float = 0.15) -> float:
    if not 0 < step < 1:
        raise ValueError("step must be in (0, 1)")
    pred, gt, mask = _prep(pred, gt, trimap)
    level = connectivity_levels(pred, gt, step)
    pred_d = pred - level
    gt_d = gt - level
    pred_phi = 1 - pred_d * (pred_d >= penalty_threshold)
    gt_phi = 1 - gt_d * (gt_d >= penalty_threshold)
    return float(np.abs(pred_phi - gt_phi)[mask].sum() / 1000.0)


@dataclass
class MetricReport:
    sad: float
    mse: float
    grad: float
    conn: float
    unknown_pixel_count: int

    COLUMNS = ("SAD", "MSE", "Grad", "Conn")

    def values(self) -> tuple[float, float, float, float]:
        return (self.sad, self.mse, self.grad, self.conn)

    def csv_line(self) -> str:
        return ",".join(f"{v:.6f}" for v in self.values()) + f",{self.unknown_pixel_count}"

    def as_dict(self) -> dict:
        return asdict(self)


def evaluate_matte(pred, gt, trimap, sigma: float = 1.4, step: float = 0.1) -> MetricReport:
    return MetricReport(
        sad=sad(pred, gt, trimap),
        mse=mse(pred, gt, trimap),
        grad=gradient_metric(pred, gt, trimap, sigma),
        conn=connectivity_metric(pred, gt, trimap, step),
        unknown_pixel_count=int((trimap == U).sum()),
    )


def format_table(rows: list[tuple[str, MetricReport]]) -> str:
    """Plain-text table with columns SAD, MSE, Grad, Conn."""
    width = max([len("Method")] + [len(name) for name, _ in rows])
    head = f"{'Method':<{width}} | " + " ".join(f"{c:>8}" for c in MetricReport.COLUMNS)
    lines = [head, "-" * len(head)]
    for name, rep in rows:
        lines.append(f"{name:<{width}} | " + " ".join(f"{v:8.3f}" for v in rep.values()))
    return "\n".join(lines)
