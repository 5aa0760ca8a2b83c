import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfpp.codec import BBox
from sfpp.tracker import (PostprocConfig, Tracker, blend_window, dump_score_map, fuse_scores, penalty_map,
                          read_results_csv, select, track_sequence, window_map, write_results_csv)

from stubs import MapStub, OracleStub, blank_sequence, moving_boxes


def _boxes_like(w, h, N=5):
    return np.broadcast_to(np.array([0.0, 0.0, w, h]), (N, N, 4)).copy()


# ----------------------------------------------------------------- penalty

def test_penalty_no_change_normalized():
    p = penalty_map(_boxes_like(30, 20), (30, 20), 0.3)
    np.testing.assert_allclose(p, 1.0)


def test_penalty_no_change_paper_literal():
    p = penalty_map(_boxes_like(30, 20), (30, 20), 0.3, PostprocConfig(penalty_mode="paper_literal"))
    np.testing.assert_allclose(p, math.exp(0.3))


def test_penalty_doubling_area_lowers_score():
    k = 0.1
    side = math.sqrt(2)
    p = penalty_map(_boxes_like(30 * side, 20 * side), (30, 20), k)
    assert np.all(p < 1)
    # padded sqrt size scales linearly with the side, ratio unchanged
    np.testing.assert_allclose(p, math.exp(-k * (side - 1)))
    p_area = penalty_map(_boxes_like(30 * side, 20 * side), (30, 20), k, PostprocConfig(size_def="area"))
    np.testing.assert_allclose(p_area, math.exp(-k * (2 - 1)))


def test_penalty_symmetric_in_change_direction():
    a = penalty_map(_boxes_like(60, 20), (30, 20), 0.2)
    b = penalty_map(_boxes_like(15, 20), (30, 20), 0.2)
    # a ratio change of 2 is penalised whichever way it goes
    assert np.all(a < 1) and np.all(b < 1)
    # transposed box: same padded size, ratio change 1.5 / (1 / 1.5)
    c = penalty_map(_boxes_like(20, 30), (30, 20), 0.2)
    r = 1.5 ** 2
    np.testing.assert_allclose(c, math.exp(-0.2 * (r - 1)))


def test_penalty_zero_area_cell():
    boxes = _boxes_like(30, 20)
    boxes[1, 2] = [5, 5, 5, 9]
    p = penalty_map(boxes, (30, 20), 0.1)
    assert p[1, 2] == 0.0 and p[0, 0] == 1.0


def test_penalty_k_zero_is_one():
    rng = np.random.default_rng(0)
    boxes = np.concatenate([np.zeros((5, 5, 2)), rng.uniform(1, 80, (5, 5, 2))], -1)
    np.testing.assert_allclose(penalty_map(boxes, (30, 20), 0.0), 1.0)


# ------------------------------------------------------------------ window

def test_hann_window_values():
    w = window_map(9)
    assert w[4, 4] == pytest.approx(1.0)
    assert w[0, 0] == 0.0 and w[8, 8] == pytest.approx(0.0, abs=1e-15)
    np.testing.assert_allclose(w, w.T)
    assert w.argmax() == 4 * 9 + 4


def test_paper_literal_window():
    w = window_map(9, "paper_literal")
    # the printed radial form is 0 at the centre and 1 half a period away
    assert w[4, 4] == 0.0
    assert w[4, 5] == pytest.approx(0.5 - 0.5 * math.cos(2 * math.pi / 3))
    with pytest.raises(ValueError):
        window_map(3, "paper_literal")
    with pytest.raises(ValueError):
        window_map(2)


def test_blend_identities():
    rng = np.random.default_rng(1)
    s, w = rng.random((7, 7)), window_map(7)
    np.testing.assert_array_equal(blend_window(s, w, 0.0), s)
    np.testing.assert_array_equal(blend_window(s, w, 1.0), w)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 1000))
def test_blend_stays_in_unit_interval(omega, seed):
    s = np.random.default_rng(seed).random((9, 9))
    b = blend_window(s, window_map(9), omega)
    assert b.min() >= 0 and b.max() <= 1 + 1e-12


# ------------------------------------------------------------------ fusion

def test_fuse_scores_properties():
    rng = np.random.default_rng(2)
    c, q = rng.random((5, 5)), rng.random((5, 5))
    np.testing.assert_array_equal(fuse_scores(c, np.ones((5, 5))), c)
    f = fuse_scores(c, q)
    assert np.all(f <= np.minimum(c, q))
    np.testing.assert_array_equal(fuse_scores(c, None), c)


def test_zero_quality_cell_never_selected():
    rng = np.random.default_rng(3)
    c = rng.random((5, 5)) * 0.5 + 0.5
    q = rng.random((5, 5)) * 0.5 + 0.5
    c[2, 3], q[2, 3] = 1.0, 0.0
    sel = select(fuse_scores(c, q), _boxes_like(30, 20), (30, 20), PostprocConfig(0.0, 0.0))
    assert (sel.row, sel.col) != (2, 3)


# --------------------------------------------------------------- selection

def test_disabled_postproc_is_raw_argmax():
    rng = np.random.default_rng(4)
    boxes = np.concatenate([np.zeros((9, 9, 2)), rng.uniform(5, 90, (9, 9, 2))], -1)
    for _ in range(20):
        s = rng.random((9, 9))
        sel = select(s, boxes, (30, 20), PostprocConfig(penalty_k=0.0, window_influence=0.0))
        assert sel.row * 9 + sel.col == int(np.argmax(s))


def test_argmax_invariant_to_score_scaling():
    rng = np.random.default_rng(5)
    boxes = np.concatenate([np.zeros((9, 9, 2)), rng.uniform(5, 90, (9, 9, 2))], -1)
    cfg = PostprocConfig(window_influence=0.0)
    for _ in range(20):
        s = rng.random((9, 9))
        a, b = select(s, boxes, (30, 20), cfg), select(0.3 * s, boxes, (30, 20), cfg)
        assert (a.row, a.col) == (b.row, b.col)
        assert b.rate == pytest.approx(0.3 * a.rate)


def test_tie_break_row_major():
    s = np.zeros((5, 5))
    s[3, 1] = s[1, 4] = s[1, 2] = 0.7
    sel = select(s, _boxes_like(30, 20), (30, 20), PostprocConfig(0.0, 0.0))
    assert (sel.row, sel.col) == (1, 2)


def test_alpha_prime_clamped():
    s = np.full((5, 5), 0.9)
    cfg = PostprocConfig(penalty_k=1.0, window_influence=0.0, size_lr=1.0, penalty_mode="paper_literal")
    sel = select(s, _boxes_like(30, 20), (30, 20), cfg)
    assert 0.9 * math.e > 1 and sel.rate == 1.0


def test_all_zero_is_lost():
    sel = select(np.zeros((5, 5)), _boxes_like(30, 20), (30, 20), PostprocConfig(window_influence=0.0))
    assert sel.lost


def test_config_validation():
    for bad in (dict(penalty_k=-1), dict(window_influence=1.5), dict(size_lr=-0.1),
                dict(window_mode="x"), dict(penalty_mode="x"), dict(size_def="x")):
        with pytest.raises(ValueError):
            PostprocConfig(**bad).validate()


# ----------------------------------------------------------- tracker loop

def _dist_for_box(box_patch, N=9, stride=8, offset=28.0):
    from sfpp.codec import grid_pixels
    px = grid_pixels(N, stride, offset)
    X, Y = np.meshgrid(px, px)
    return np.stack([X - box_patch.x0, Y - box_patch.y0, box_patch.x1 - X, box_patch.y1 - Y]).clip(1.0, None)


def test_oracle_stationary_within_one_pixel():
    boxes = moving_boxes(10)
    res = track_sequence(OracleStub(boxes), blank_sequence(boxes))
    for p, g in zip(res.boxes, boxes):
        assert max(abs(a - b) for a, b in zip(p.as_tuple(), g.as_tuple())) <= 1.0
    assert len(res.telemetry) == 9 and [t.frame for t in res.telemetry] == list(range(1, 10))


def test_oracle_exact_without_postproc():
    boxes = moving_boxes(12, velocity=(5.0, 3.0))
    res = track_sequence(OracleStub(boxes), blank_sequence(boxes), PostprocConfig(0.0, 0.0))
    for p, g in zip(res.boxes, boxes):
        np.testing.assert_allclose(p.as_tuple(), g.as_tuple(), atol=1e-4)


def test_strong_window_makes_prediction_lag():
    boxes = moving_boxes(12, velocity=(14.0, 0.0), wh=(20, 20))
    seq = blank_sequence(boxes)
    free = track_sequence(OracleStub(boxes), seq, PostprocConfig(window_influence=0.0))
    held = track_sequence(OracleStub(boxes), seq, PostprocConfig(window_influence=0.9))
    lag_free = np.array([p.cx - g.cx for p, g in zip(free.boxes[1:], boxes[1:])])
    lag_held = np.array([p.cx - g.cx for p, g in zip(held.boxes[1:], boxes[1:])])
    assert np.all(np.abs(lag_free) < 1e-3)
    assert np.all(lag_held < -1.0)
    # with the window on, the centre cell keeps winning although the peak moved
    assert all((t.sel_row, t.sel_col) == (4, 4) for t in held.telemetry)
    assert all(t.sel_col > 4 for t in free.telemetry)


def test_template_computed_once_and_reused():
    boxes = moving_boxes(6)
    stub = OracleStub(boxes)
    tr = Tracker(stub)
    state = tr.init(blank_sequence(boxes).frames[0], boxes[0])
    z = state.template_feats
    for t in range(1, 6):
        tr.track(np.zeros((3, 256, 256), np.uint8), frame_index=t)
        assert tr.state.template_feats is z
    assert stub.templates == 1


def test_init_is_deterministic_and_checks_box():
    boxes = moving_boxes(2)
    frame = np.random.default_rng(6).integers(0, 255, (3, 256, 256), dtype=np.uint8)
    a = Tracker(OracleStub(boxes)).init(frame, boxes[0])
    b = Tracker(OracleStub(boxes)).init(frame, boxes[0])
    assert a.prev_box == b.prev_box and np.array_equal(a.template_feats[1], b.template_feats[1])
    with pytest.raises(ValueError):
        Tracker(OracleStub(boxes)).init(frame, BBox(5, 5, 5, 9))
    with pytest.raises(RuntimeError):
        Tracker(OracleStub(boxes)).track(frame)


def test_size_interpolation_full_confidence():
    # centre cell scores 1 and decodes to a box twice the previous side
    start = BBox.from_center(128, 128, 20, 20)
    side = 2 * math.sqrt(2 * 20 * 2 * 20)
    scale = 128 / side
    cur = BBox.from_center(64, 64, 40 * scale, 40 * scale)
    cls = np.full((9, 9), -50.0)
    cls[4, 4] = 50.0
    stub = MapStub(cls, _dist_for_box(cur), quality=np.full((9, 9), 50.0))
    tr = Tracker(stub, PostprocConfig(penalty_k=0.0, window_influence=0.0, size_lr=0.5))
    tr.init(np.zeros((3, 256, 256), np.uint8), start)
    box, tel = tr.track(np.zeros((3, 256, 256), np.uint8))
    assert tel.selected_score == pytest.approx(1.0)
    assert box.w == pytest.approx((20 + 40) / 2, rel=1e-6)
    assert box.cx == pytest.approx(128, abs=1e-6)


def test_zero_size_rate_keeps_size():
    start = BBox.from_center(128, 128, 30, 20)
    stub = MapStub(np.full((9, 9), 50.0), np.full((4, 9, 9), 40.0))
    tr = Tracker(stub, PostprocConfig(size_lr=0.0))
    tr.init(np.zeros((3, 256, 256), np.uint8), start)
    box, _ = tr.track(np.zeros((3, 256, 256), np.uint8))
    assert (box.w, box.h) == pytest.approx((30, 20))


def test_lost_keeps_previous_box():
    start = BBox.from_center(100, 90, 30, 20)
    stub = MapStub(np.full((9, 9), -1000.0), np.full((4, 9, 9), 10.0))
    tr = Tracker(stub, PostprocConfig(window_influence=0.0))
    tr.init(np.zeros((3, 256, 256), np.uint8), start)
    box, tel = tr.track(np.zeros((3, 256, 256), np.uint8))
    assert tel.lost and box == start


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(10, 240), st.floats(10, 240))
def test_centre_stays_in_search_footprint(seed, cx, cy):
    rng = np.random.default_rng(seed)
    stub = MapStub(rng.normal(0, 3, (9, 9)), rng.uniform(1, 400, (4, 9, 9)))
    tr = Tracker(stub, PostprocConfig(penalty_k=0.0, window_influence=0.0, size_lr=1.0))
    tr.init(np.zeros((3, 256, 256), np.uint8), BBox.from_center(cx, cy, 24, 18))
    for _ in range(3):
        prev = tr.state.prev_box
        side = 2 * math.sqrt((prev.w + (prev.w + prev.h) / 2) * (prev.h + (prev.w + prev.h) / 2))
        box, _ = tr.track(np.zeros((3, 256, 256), np.uint8))
        assert abs(box.cx - prev.cx) <= side / 2 + 1e-9 and abs(box.cy - prev.cy) <= side / 2 + 1e-9
        assert 0 <= box.cx <= 256 and 0 <= box.cy <= 256
        assert box.w >= 2 and box.h >= 2


def test_results_csv_roundtrip(tmp_path):
    boxes = moving_boxes(5)
    res = track_sequence(OracleStub(boxes), blank_sequence(boxes))
    path = tmp_path / "results.csv"
    write_results_csv(str(path), res)
    lines = path.read_text().splitlines()
    assert lines[0] == "frame,x0,y0,x1,y1,max_score,sel_row,sel_col"
    assert lines[1].endswith(",1.000000,-1,-1") and len(lines) == 6
    back = read_results_csv(str(path))
    for a, b in zip(back, res.boxes):
        np.testing.assert_allclose(a.as_tuple(), b.as_tuple(), atol=5e-4)


def test_dump_score_map(tmp_path):
    s = np.arange(9.0).reshape(3, 3) / 8
    dump_score_map(str(tmp_path), 7, s)
    np.testing.assert_allclose(np.loadtxt(tmp_path / "score_00007.csv", delimiter=","), s, atol=1e-6)
    raw = (tmp_path / "score_00007.pgm").read_bytes()
    assert raw.startswith(b"P5")
    assert raw[-9:] == bytes(np.rint(np.arange(9) / 8 * 255).astype(np.uint8))
    dump_score_map(str(tmp_path), 8, np.zeros((3, 3)))
    assert (tmp_path / "score_00008.pgm").read_bytes()[-9:] == bytes(9)


def test_keep_maps_in_telemetry():
    boxes = moving_boxes(3)
    res = track_sequence(OracleStub(boxes), blank_sequence(boxes), keep_maps=True)
    assert res.telemetry[0].scores.shape == (9, 9)
    assert res.telemetry[0].max_score == pytest.approx(res.telemetry[0].scores.max())
