import numpy as np
import pytest

from drebnet.boxes import GroundTruthBox, iou
from drebnet.targets import (
    decode_batch,
    decode_detections,
    draw_gaussian,
    encode_targets,
    gaussian_radius,
)


def _bisect_max(ok, hi):
    lo = 0.0
    for _ in range(200):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    return lo


def radius_oracle(h, w, m):
    """Largest r keeping IoU >= m under each perturbation, by bisection on explicit IoUs."""
    shifted = _bisect_max(lambda r: iou((0, 0, w, h), (r, r, w + r, h + r)) >= m, min(h, w))
    shrunk = _bisect_max(lambda r: iou((0, 0, w, h), (r, r, w - r, h - r)) >= m, min(h, w) / 2)
    grown = _bisect_max(lambda r: iou((0, 0, w, h), (-r, -r, w + r, h + r)) >= m, max(h, w) * 10)
    return min(shifted, shrunk, grown)


@pytest.mark.parametrize("h,w,m", [(24, 24, 0.7), (5, 11, 0.7), (3.3, 1.2, 0.5), (40, 9, 0.9), (2, 2, 0.3)])
def test_radius_matches_bisection(h, w, m):
    assert gaussian_radius((h, w), m) == pytest.approx(radius_oracle(h, w, m), abs=1e-9)


def test_radius_limits():
    assert gaussian_radius((1e-9, 1e-9)) < 1e-8
    assert gaussian_radius((0, 5)) == 0.0
    assert gaussian_radius((20, 20), 1 - 1e-12) < 1e-9
    assert gaussian_radius((24, 24), 0.7) == pytest.approx(1.96, abs=1e-3)


def test_single_box_peak():
    t = encode_targets([GroundTruthBox(1, 10, 14, 30, 38)], 2, (64, 64))
    assert t.hm_t[1].max() == 1.0
    assert t.hm_t[1, 6, 5] == 1.0  # center (20, 26) / 4 -> cell (5, 6)
    assert not t.hm_t[0].any()
    assert t.wh_t[:, 6, 5].tolist() == [5.0, 6.0]
    assert t.reg_t[:, 6, 5].tolist() == [0.0, 0.5]
    assert t.num_pos == 1


def test_overlapping_boxes_max_splat():
    a, b = GroundTruthBox(0, 8, 8, 40, 40), GroundTruthBox(0, 16, 12, 48, 44)
    both = encode_targets([a, b], 1, (64, 64)).hm_t
    ha = encode_targets([a], 1, (64, 64)).hm_t
    hb = encode_targets([b], 1, (64, 64)).hm_t
    assert np.array_equal(both, np.maximum(ha, hb))


def test_gaussian_profile():
    hm = np.zeros((9, 9))
    draw_gaussian(hm, 4, 4, 3.0)
    assert hm[4, 4] == 1.0
    assert hm[4, 5] == pytest.approx(np.exp(-1 / 2))
    assert hm[0, 0] == 0.0  # outside the int(r) window
    hm = np.zeros((3, 3))
    draw_gaussian(hm, 1, 1, 0.0)
    assert hm.sum() == 1.0


def test_collision_later_box_wins():
    a, b = GroundTruthBox(0, 10, 10, 20, 20), GroundTruthBox(1, 8, 8, 22, 22)
    t = encode_targets([a, b], 2, (64, 64))
    assert t.num_pos == 1
    assert t.wh_t[:, 3, 3].tolist() == [3.5, 3.5]
    assert t.hm_t[0, 3, 3] == t.hm_t[1, 3, 3] == 1.0


def test_offsets_in_unit_interval_and_clipping():
    r = np.random.default_rng(0)
    boxes = []
    for _ in range(30):
        x0, y0 = r.uniform(-10, 60, 2)
        boxes.append(GroundTruthBox(0, x0, y0, x0 + r.uniform(1, 30), y0 + r.uniform(1, 30)))
    t = encode_targets(boxes, 1, (64, 64))
    assert np.all((t.reg_t[:, t.pos_mask] >= 0) & (t.reg_t[:, t.pos_mask] < 1))
    assert t.hm_t.max() == 1.0 and t.hm_t.min() >= 0.0


def test_box_outside_is_skipped():
    t = encode_targets([GroundTruthBox(0, 70, 70, 80, 80), GroundTruthBox(0, 4, 4, 12, 12)], 1, (64, 64))
    assert t.skipped == 1 and t.num_pos == 1
    with pytest.raises(ValueError):
        encode_targets([GroundTruthBox(3, 0, 0, 4, 4)], 2, (64, 64))


# ------------------------------------------------------------------ decode

def test_decode_single_peak():
    hm = np.zeros((1, 16, 16))
    hm[0, 10, 10] = 0.9
    wh = np.zeros((2, 16, 16))
    reg = np.zeros((2, 16, 16))
    wh[:, 10, 10] = 2.0
    reg[:, 10, 10] = 0.5
    (d,) = decode_detections((hm, wh, reg))
    assert d.box == (38.0, 38.0, 46.0, 46.0)
    assert d.score == pytest.approx(0.9) and d.class_id == 0


def test_decode_below_threshold_is_empty():
    hm = np.full((2, 8, 8), 0.05)
    assert decode_detections((hm, np.zeros((2, 8, 8)), np.zeros((2, 8, 8))), score_thresh=0.1) == []


def decode_oracle(hm, wh, reg, k, thresh):
    c, h, w = hm.shape
    found = []
    for cls in range(c):
        for y in range(h):
            for x in range(w):
                v = hm[cls, y, x]
                neigh = [hm[cls, yy, xx] for yy in range(y - 1, y + 2) for xx in range(x - 1, x + 2)
                         if 0 <= yy < h and 0 <= xx < w]
                if v > thresh and v >= max(neigh):
                    found.append((-v, (cls * h + y) * w + x, cls, y, x))
    found.sort()
    out = []
    for negv, _, cls, y, x in found[:k]:
        cx, cy = 4 * (x + reg[0, y, x]), 4 * (y + reg[1, y, x])
        bw, bh = 4 * wh[0, y, x], 4 * wh[1, y, x]
        box = tuple(min(max(v, 0.0), lim) for v, lim in
                    zip((cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), (4 * w, 4 * h, 4 * w, 4 * h)))
        out.append((cls, box, -negv))
    return out


@pytest.mark.parametrize("seed", range(25))
def test_decode_matches_exhaustive_oracle(seed):
    r = np.random.default_rng(seed)
    c, h, w = r.integers(1, 3), r.integers(2, 7), r.integers(2, 7)
    hm = np.round(r.uniform(0, 1, (c, h, w)), 1)  # coarse values force ties
    wh, reg = r.uniform(0, 4, (2, h, w)), r.uniform(0, 1, (2, h, w))
    k = int(r.integers(1, 10))
    got = [(d.class_id, d.box, d.score) for d in decode_detections((hm, wh, reg), k, 0.3)]
    ref = decode_oracle(hm, wh, reg, k, 0.3)
    assert len(got) == len(ref)
    for (gc, gb, gs), (rc, rb, rs) in zip(got, ref):
        assert gc == rc and gs == rs
        assert np.allclose(gb, rb, atol=1e-12)
    assert all(a[2] >= b[2] for a, b in zip(got, got[1:]))


def test_decode_batch_ids():
    hm = np.zeros((2, 1, 4, 4))
    hm[:, 0, 1, 1] = 0.8
    out = decode_batch((hm, np.ones((2, 2, 4, 4)), np.zeros((2, 2, 4, 4))), image_ids=[7, 9])
    assert [d.image_id for ds in out for d in ds] == [7, 9]


def test_round_trip_five_boxes():
    r = np.random.default_rng(3)
    boxes, cells = [], set()
    while len(boxes) < 5:
        w, h = r.uniform(6, 30, 2)
        x0, y0 = r.uniform(0, 64 - w), r.uniform(0, 64 - h)
        cell = (int((x0 + w / 2) / 4), int((y0 + h / 2) / 4))
        if cell in cells:
            continue
        cells.add(cell)
        boxes.append(GroundTruthBox(int(r.integers(0, 2)), x0, y0, x0 + w, y0 + h))
    t = encode_targets(boxes, 2, (64, 64), dtype=np.float64)
    dets = decode_detections((t.hm_t, t.wh_t, t.reg_t), score_thresh=0.99)
    assert len(dets) == 5
    for b in boxes:
        best = max(dets, key=lambda d: iou(d.box, b.box) if d.class_id == b.class_id else -1)
        assert best.class_id == b.class_id and iou(best.box, b.box) > 0.95
