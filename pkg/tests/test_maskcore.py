import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from interseg.maskcore import (
    Hypothesis,
    Point2,
    centroid,
    connected_components,
    difference_mask,
    iou,
    largest_component,
    load_image,
    load_mask,
    nms,
    pairwise_iou,
    principal_axis,
    save_image,
    save_mask,
)

from conftest import disc

masks_6x6 = arrays(bool, (6, 6))


def test_iou_basic():
    a = np.zeros((4, 4), bool)
    b = np.zeros((4, 4), bool)
    a[:2, :2] = True
    b[:2, :] = True
    assert iou(a, b) == pytest.approx(0.5)
    assert iou(a, a) == 1.0
    assert iou(np.zeros((3, 3), bool), np.zeros((3, 3), bool)) == 1.0


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        iou(np.zeros((3, 3), bool), np.zeros((3, 4), bool))


@given(masks_6x6, masks_6x6)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)


@given(st.lists(masks_6x6, min_size=1, max_size=4), st.lists(masks_6x6, min_size=1, max_size=4))
def test_pairwise_iou_matches_scalar(xs, ys):
    m = pairwise_iou(xs, ys)
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            assert m[i, j] == iou(a, b)


def test_connected_components_connectivity():
    m = np.zeros((5, 5), bool)
    m[0, 0] = m[1, 1] = True  # diagonal neighbours
    m[3:5, 3:5] = True
    assert len(connected_components(m, 4)) == 3
    comps = connected_components(m, 8)
    assert len(comps) == 2
    assert comps[0].sum() == 4  # largest first
    with pytest.raises(ValueError):
        connected_components(m, 6)


@given(masks_6x6)
def test_components_partition_the_mask(m):
    comps = connected_components(m, 8)
    total = np.zeros_like(m)
    for c in comps:
        assert not (total & c).any()
        total |= c
    assert (total == m).all()
    sizes = [c.sum() for c in comps]
    assert sizes == sorted(sizes, reverse=True)


def test_largest_component_empty():
    assert largest_component(np.zeros((3, 3), bool)) is None


def test_centroid_and_axis():
    m = np.zeros((20, 20), bool)
    m[9:11, 2:18] = True  # horizontal bar
    c = centroid(m)
    assert c == Point2(9.5, 9.5)
    assert principal_axis(m) == pytest.approx(0.0, abs=1e-12)
    assert principal_axis(m.T) == pytest.approx(np.pi / 2)
    d = np.eye(12, dtype=bool)  # 45 degrees, y grows downwards
    assert principal_axis(d) == pytest.approx(np.pi / 4)


def test_axis_isotropic_is_zero():
    assert principal_axis(disc(21, 21, 10, 10, 6)) == 0.0


def test_axis_needs_two_pixels():
    m = np.zeros((3, 3), bool)
    m[1, 1] = True
    with pytest.raises(ValueError):
        principal_axis(m)
    with pytest.raises(ValueError):
        centroid(np.zeros((3, 3), bool))


@given(st.integers(0, 179))
def test_axis_in_range(deg):
    t = np.deg2rad(deg)
    yy, xx = np.mgrid[0:41, 0:41] - 20.0
    along = xx * np.cos(t) + yy * np.sin(t)
    across = -xx * np.sin(t) + yy * np.cos(t)
    m = (np.abs(along) <= 15) & (np.abs(across) <= 2)
    a = principal_axis(m)
    assert 0.0 <= a < np.pi
    diff = abs((a - t + np.pi / 2) % np.pi - np.pi / 2)
    assert diff < 0.05


def test_difference_mask_window():
    a = np.zeros((10, 10, 3))
    b = a.copy()
    b[0, 0] = 1.0
    b[5, 5] = 1.0
    d = difference_mask(a, b, Point2(5, 5), 4, 0.5)
    assert d[5, 5] and not d[0, 0]
    # window [3, 7) around the centre
    d = difference_mask(a, np.ones_like(a), Point2(5, 5), 4, 0.5)
    assert d.sum() == 16 and d[3:7, 3:7].all()
    with pytest.raises(ValueError):
        difference_mask(a, b, Point2(5, 5), 0, 0.5)


def test_difference_mask_threshold_is_strict():
    a = np.zeros((4, 4, 3))
    b = np.full((4, 4, 3), 0.25)
    assert not difference_mask(a, b, Point2(2, 2), 8, 0.25).any()
    assert difference_mask(a, b, Point2(2, 2), 8, 0.24).all()


def _hyp(mask, score):
    return Hypothesis(mask, score, centroid(mask) if mask.any() else Point2(0, 0))


def test_nms_keeps_best_and_disjoint():
    a = disc(30, 30, 10, 10, 5)
    b = disc(30, 30, 11, 10, 5)
    c = disc(30, 30, 22, 22, 4)
    kept = nms([_hyp(b, 0.8), _hyp(a, 0.9), _hyp(c, 0.5)], 0.5)
    assert [h.score for h in kept] == [0.9, 0.5]
    assert len(nms([], 0.5)) == 0
    with pytest.raises(ValueError):
        nms([], 1.5)


@given(st.lists(st.tuples(masks_6x6, st.floats(0, 1)), max_size=8), st.floats(0.0, 0.99))
def test_nms_survivors_overlap_at_most_threshold(items, th):
    hyps = [_hyp(m, s) for m, s in items]
    kept = nms(hyps, th)
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            assert iou(kept[i].mask, kept[j].mask) <= th
    # running it again changes nothing
    assert [id(h) for h in nms(kept, th)] == [id(h) for h in kept]


def test_mask_and_image_roundtrip(tmp_path, rng):
    m = rng.random((7, 9)) > 0.5
    save_mask(tmp_path / "m.png", m)
    assert (load_mask(tmp_path / "m.png") == m).all()
    img = np.round(rng.random((7, 9, 3)) * 255) / 255
    save_image(tmp_path / "i.png", img)
    assert np.array_equal(load_image(tmp_path / "i.png"), img)
