import numpy as np
import pytest

from deformproto import explain as E
from deformproto import model as M
from deformproto.data import read_ppm
from deformproto.deform import PartGrid


def test_downsampling_factor():
    assert E.downsampling_factor(224, 14) == 16
    with pytest.raises(ValueError):
        E.downsampling_factor(225, 14)


def test_zero_offset_boxes_form_the_dilated_grid():
    grid = PartGrid(3, 3)
    boxes = E.part_boxes(grid, (5, 7), np.zeros((9, 2)), 16)
    assert [b.part for b in boxes] == grid.part_indices()
    rows = sorted({b.center_row for b in boxes})
    cols = sorted({b.center_col for b in boxes})
    assert rows == [64.0, 80.0, 96.0] and cols == [96.0, 112.0, 128.0]
    assert all(b.side == 16.0 for b in boxes)
    g2 = PartGrid.from_shape("2x2")
    b2 = E.part_boxes(g2, (3, 3), np.zeros((4, 2)), 8)
    assert np.diff(sorted({b.center_row for b in b2})).tolist() == [8.0 * g2.dilation]


def test_box_coordinates_are_scaled_fractional_positions():
    grid = PartGrid(1, 1)
    (box,) = E.part_boxes(grid, (2, 3), [[0.25, -0.5]], 16)
    assert (box.center_row, box.center_col) == (36.0, 40.0)
    assert box.bounds == (28.0, 32.0, 44.0, 48.0)


def test_visualize_prototype(trained_toy, toy_train):
    model, _ = trained_toy
    boxes = E.visualize_prototype(model, toy_train.images[0], 1, image_id="x")
    assert len(boxes) == model.grid.rho and len({b.part for b in boxes}) == model.grid.rho
    assert all(b.side == model.config.gamma and b.image == "x" for b in boxes)
    with pytest.raises(ValueError):
        E.visualize_prototype(model, toy_train.images[0][:, :30, :30], 1)


def test_report_matches_evaluate(trained_toy, toy_train):
    model, _ = trained_toy
    _, logits = M.evaluate(model, toy_train)
    for i in range(0, len(toy_train), 4):
        rep = E.reasoning_report(model, toy_train.images[i])
        np.testing.assert_allclose(rep.class_totals, logits[i], atol=1e-5)
        assert rep.predicted == int(np.argmax(logits[i]))
        totals, pred = E.parse_report(rep.to_text())
        np.testing.assert_allclose([totals[c] for c in range(3)], logits[i], atol=1e-5)
        assert pred == rep.predicted


def test_report_text_layout():
    rep = E.ReasoningReport(np.array([0.5]), np.array([[2.0, -1.0]]), ["0/0"], 0)
    assert rep.to_text().splitlines() == [
        "proto=0/0 score=0.500000 weight=2.000000 contrib=1.000000",
        "class=0 total=1.000000",
        "proto=0/0 score=0.500000 weight=-1.000000 contrib=-0.500000",
        "class=1 total=-0.500000",
        "predicted=0",
    ]


def test_local_analysis(trained_toy, toy_train):
    model, _ = trained_toy
    img = toy_train.images[4]
    scores = M.forward(model, img[None]).scores[0]
    ranked = E.local_analysis(model, img, 2)
    assert len(ranked) == 2 and ranked[0].score >= ranked[1].score
    assert ranked[0].score == pytest.approx(scores.max())
    full = E.local_analysis(model, img, 99)
    assert sorted(r.prototype for r in full) == list(range(len(scores)))
    naive = sorted(range(len(scores)), key=lambda p: (-scores[p], p))
    assert [r.prototype for r in full] == naive
    assert all(r.source_boxes is not None for r in full)
    assert E.local_analysis(model, img, 0) == []


def test_global_analysis(trained_toy, toy_train):
    model, _ = trained_toy
    for rec in model.projections:
        top = E.global_analysis(model, toy_train, rec.prototype, 3)
        assert top[0].score == pytest.approx(1.0, abs=1e-4)
        assert M.forward(model, toy_train.images[top[0].image][None]).scores[0, rec.prototype] \
            == pytest.approx(1.0, abs=1e-4)
    p = 2
    naive = []
    for i in range(len(toy_train)):
        naive.append(M.forward(model, toy_train.images[i:i + 1]).maps[0, p].max())
    order = sorted(range(len(naive)), key=lambda i: (-naive[i], i))
    got = E.global_analysis(model, toy_train, p, len(toy_train))
    assert [g.image for g in got] == order
    np.testing.assert_allclose([g.score for g in got], sorted(naive, reverse=True), atol=1e-6)
    assert E.global_analysis(model, toy_train, p, 0) == []
    with pytest.raises(ValueError):
        E.global_analysis(model, toy_train.subset([]), p, 1)
    with pytest.raises(ValueError):
        E.global_analysis(model, toy_train, 99, 1)


def test_draw_boxes_outline_and_clipping():
    rgb = np.zeros((20, 20, 3), np.uint8)
    box = E.PartBox((0, 0), 10.0, 10.0, 8.0)
    out = E.draw_boxes(rgb, [box])
    assert not rgb.any()
    red = np.all(out == E.PART_COLORS[0], axis=-1)
    assert red[6:8, 6:14].all() and red[12:14, 6:14].all()
    assert red[6:14, 6:8].all() and red[6:14, 12:14].all()
    assert not red[8:12, 8:12].any()
    assert red.sum() == 8 * 8 - 4 * 4
    edge = E.draw_boxes(rgb, [box, E.PartBox((0, 1), 0.0, 19.5, 8.0)])
    green = np.all(edge == E.PART_COLORS[1], axis=-1)
    # top edge lies above the image; left and bottom edges survive clipping
    assert green[0:4, 15:17].all() and green[2:4, 15:].all()
    assert green.sum() == 4 * 2 + 2 * 3


def test_overlay_files(tmp_path):
    rgb = np.zeros((16, 16, 3), np.uint8)
    boxes = [E.PartBox((0, 0), -1.25, 3.5, 8.0, "img")]
    path = E.write_overlay(tmp_path, "ov", rgb, boxes)
    assert read_ppm(path).shape == (16, 16, 3)
    text = (tmp_path / "ov.txt").read_text()
    assert text == "part=0,0 center_row=-1.25 center_col=3.5 side=8.0 image=img\n"
    assert sorted(f.name for f in tmp_path.iterdir()) == ["ov.ppm", "ov.txt"]
