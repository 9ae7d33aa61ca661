from collections import deque

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from patchmatte.metrics import (
    MetricReport,
    connectivity_metric,
    evaluate_matte,
    format_table,
    gaussian_derivative_kernels,
    gradient_metric,
    largest_component,
    mse,
    sad,
)
from patchmatte.trimap import B, F, U


def rand_case(seed, h=12, w=14):
    rng = np.random.default_rng(seed)
    pred = rng.random((h, w))
    gt = rng.random((h, w))
    tri = rng.choice(np.array([B, U, F], np.uint8), size=(h, w), p=(0.2, 0.6, 0.2))
    return pred, gt, tri


def conv_oracle(img, k):
    # true convolution (kernel flipped) with edge replication
    h, w = img.shape
    r = k.shape[0] // 2
    out = np.zeros_like(img)
    for i in range(h):
        for j in range(w):
            acc = 0.0
            for a in range(-r, r + 1):
                for b in range(-r, r + 1):
                    y = min(max(i - a, 0), h - 1)
                    x = min(max(j - b, 0), w - 1)
                    acc += k[a + r, b + r] * img[y, x]
            out[i, j] = acc
    return out


def pin_oracle(a, tri):
    out = a.astype(np.float64).copy()
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            if tri[i, j] == F:
                out[i, j] = 1.0
            elif tri[i, j] == B:
                out[i, j] = 0.0
    return out


def grad_oracle(pred, gt, tri, sigma=1.4):
    pred, gt = pin_oracle(pred, tri), pin_oracle(gt, tri)
    hx, hy = gaussian_derivative_kernels(sigma)

    def mag(a):
        return np.sqrt(conv_oracle(a, hx) ** 2 + conv_oracle(a, hy) ** 2)

    d = (mag(pred) - mag(gt)) ** 2
    return sum(d[i, j] for i, j in zip(*np.nonzero(tri == U))) / 1000


def largest_oracle(mask):
    h, w = mask.shape
    seen = np.zeros_like(mask, dtype=bool)
    best = []
    for i in range(h):
        for j in range(w):
            if mask[i, j] and not seen[i, j]:
                comp = []
                dq = deque([(i, j)])
                seen[i, j] = True
                while dq:
                    y, x = dq.popleft()
                    comp.append((y, x))
                    for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                        a, b = y + dy, x + dx
                        if 0 <= a < h and 0 <= b < w and mask[a, b] and not seen[a, b]:
                            seen[a, b] = True
                            dq.append((a, b))
                if len(comp) > len(best):
                    best = comp
    out = np.zeros_like(mask, dtype=bool)
    for y, x in best:
        out[y, x] = True
    return out


def conn_oracle(pred, gt, tri, step=0.1, thr=0.15):
    pred, gt = pin_oracle(pred, tri), pin_oracle(gt, tri)
    h, w = pred.shape
    n = int(round(1 / step))
    level = [[None] * w for _ in range(h)]
    for i in range(1, n + 1):
        t = i * step
        omega = largest_oracle((pred >= t) & (gt >= t))
        for y in range(h):
            for x in range(w):
                if level[y][x] is None and not omega[y, x]:
                    level[y][x] = (i - 1) * step
    total = 0.0
    for y in range(h):
        for x in range(w):
            lv = 1.0 if level[y][x] is None else level[y][x]
            dp, dg = pred[y, x] - lv, gt[y, x] - lv
            phi_p = 1 - (dp if dp >= thr else 0)
            phi_g = 1 - (dg if dg >= thr else 0)
            if tri[y, x] == U:
                total += abs(phi_p - phi_g)
    return total / 1000


def test_identity_all_zero():
    pred, _, tri = rand_case(0)
    rep = evaluate_matte(pred, pred, tri)
    assert rep.values() == (0.0, 0.0, 0.0, 0.0)


def test_sad_arithmetic():
    tri = np.full((10, 100), U, np.uint8)
    assert sad(np.ones((10, 100)), np.zeros((10, 100)), tri) == pytest.approx(1.0)


def test_mse_uniform_error():
    tri = np.full((5, 5), U, np.uint8)
    assert mse(np.full((5, 5), 0.6), np.full((5, 5), 0.5), tri) == pytest.approx(10.0)
    assert mse(np.ones((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), np.uint8)) == 0.0


def test_sad_mse_loop_oracle():
    pred, gt, tri = rand_case(1)
    s = m = 0.0
    n = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            if tri[i, j] == U:
                s += abs(pred[i, j] - gt[i, j])
                m += (pred[i, j] - gt[i, j]) ** 2
                n += 1
    assert sad(pred, gt, tri) == pytest.approx(s / 1000)
    assert mse(pred, gt, tri) == pytest.approx(m / n * 1000)


def test_shape_mismatch():
    tri = np.full((3, 3), U, np.uint8)
    for fn in (sad, mse, gradient_metric, connectivity_metric):
        with pytest.raises(ValueError):
            fn(np.zeros((3, 4)), np.zeros((3, 3)), tri)


def test_grad_constants():
    tri = np.full((9, 9), U, np.uint8)
    assert gradient_metric(np.full((9, 9), 0.2), np.full((9, 9), 0.9), tri) == pytest.approx(0.0, abs=1e-20)


def test_grad_kernel_properties():
    hx, hy = gaussian_derivative_kernels(1.4)
    assert hx.shape == (11, 11)
    assert np.sum(hx ** 2) == pytest.approx(1.0)
    assert abs(hx.sum()) < 1e-12
    np.testing.assert_allclose(hy, hx.T)
    with pytest.raises(ValueError):
        gaussian_derivative_kernels(0)


def test_grad_step_edge_oracle():
    pred = np.zeros((14, 14))
    pred[:, 7:] = 1.0
    gt = np.zeros((14, 14))
    gt[:, 5:] = 0.8
    tri = np.full((14, 14), U, np.uint8)
    tri[:2] = B
    assert gradient_metric(pred, gt, tri) == pytest.approx(grad_oracle(pred, gt, tri), rel=1e-9)


def test_grad_random_oracle():
    pred, gt, tri = rand_case(2, 10, 9)
    assert gradient_metric(pred, gt, tri) == pytest.approx(grad_oracle(pred, gt, tri), rel=1e-9)


def test_largest_component_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        mask = rng.random((12, 12)) < 0.5
        ours = largest_component(mask)
        ref = largest_oracle(mask)
        assert ours.sum() == ref.sum()
    assert not largest_component(np.zeros((3, 3), bool)).any()


def test_largest_component_is_four_connected():
    mask = np.array([[1, 0], [0, 1]], bool)
    assert largest_component(mask).sum() == 1


def test_conn_constant_mattes():
    tri = np.full((8, 8), U, np.uint8)
    assert connectivity_metric(np.full((8, 8), 0.5), np.full((8, 8), 0.5), tri) == 0.0


def test_conn_two_blob_oracle():
    gt = np.zeros((12, 12))
    gt[1:5, 1:5] = 0.9
    gt[7:11, 6:11] = 0.7
    pred = gt.copy()
    pred[1:5, 1:5] = 0.5
    pred[8, 8] = 0.1
    tri = np.full((12, 12), U, np.uint8)
    ours = connectivity_metric(pred, gt, tri)
    assert ours > 0
    assert ours == pytest.approx(conn_oracle(pred, gt, tri), rel=1e-12)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31))
def test_conn_random_oracle(seed):
    pred, gt, tri = rand_case(seed, 8, 9)
    assert connectivity_metric(pred, gt, tri) == pytest.approx(conn_oracle(pred, gt, tri), abs=1e-12)


def test_conn_step_validation():
    tri = np.full((2, 2), U, np.uint8)
    with pytest.raises(ValueError):
        connectivity_metric(np.zeros((2, 2)), np.zeros((2, 2)), tri, step=0)


mattes = arrays(np.float64, (6, 7), elements=st.floats(0, 1))


@settings(max_examples=30, deadline=None)
@given(mattes, mattes, st.integers(0, 2**31))
def test_metric_properties(a, b, seed):
    tri = np.random.default_rng(seed).choice(np.array([B, U, F], np.uint8), size=(6, 7))
    rep = evaluate_matte(a, b, tri)
    assert all(v >= 0 for v in rep.values())
    assert sad(a, b, tri) == pytest.approx(sad(b, a, tri))
    assert mse(a, b, tri) == pytest.approx(mse(b, a, tri))
    # known pixels are pinned to their labels, so nothing outside U matters
    a2 = np.where(tri == U, a, 1 - a)
    b2 = np.where(tri == U, b, b[::-1, ::-1])
    assert evaluate_matte(a2, b2, tri) == rep


def test_sad_linear_in_error():
    tri = np.full((4, 4), U, np.uint8)
    gt = np.full((4, 4), 0.2)
    assert sad(gt + 0.4, gt, tri) == pytest.approx(2 * sad(gt + 0.2, gt, tri))


def test_report_serialization():
    rep = MetricReport(1.0, 2.5, 0.25, 0.125, 42)
    assert rep.csv_line() == "1.000000,2.500000,0.250000,0.125000,42"
    assert rep.as_dict()["unknown_pixel_count"] == 42
    table = format_table([("Model A", rep), ("Model C", rep)])
    head = table.splitlines()[0]
    assert [c for c in head.split() if c in MetricReport.COLUMNS] == ["SAD", "MSE", "Grad", "Conn"]
    assert "Model C" in table
