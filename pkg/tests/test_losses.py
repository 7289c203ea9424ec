from __future__ import annotations

from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from steptrack.data import Annotation
from steptrack.encodings import EncodingConfig, bbox_offset_map, target_state_maps
from steptrack.losses import LossWeights, cls_loss, giou_loss, hinged_offset_mse, total_loss
from steptrack.tensor import DimensionError, Tensor, grad_check

CFG = EncodingConfig(s=16, k=2, n=8, H_f=4, W_f=4)


def _one_fg_cell(row=1, col=2):
    gm = np.zeros((1, 4, 4))
    gm[0, row, col] = 1.0
    return gm


class TestCls:
    def test_perfect(self):
        t = np.random.default_rng(0).uniform(size=(2, 4, 4))
        assert cls_loss(Tensor(t), t).item() == 0.0

    def test_background_hinge(self):
        t = np.zeros((1, 2, 2))
        pred = np.zeros((1, 2, 2))
        pred[0, 0, 0] = -0.3
        assert cls_loss(Tensor(pred), t).item() == 0.0
        pred[0, 0, 0] = 0.5
        assert cls_loss(Tensor(pred), t).item() == pytest.approx(0.25 / 4)

    @given(st.floats(-5, -1e-6), st.floats(-5, -1e-6))
    def test_lowering_background_changes_nothing(self, a, b):
        t = np.zeros((1, 1, 2))
        assert cls_loss(Tensor(np.array([[[a, 0.2]]])), t).item() == cls_loss(Tensor(np.array([[[b, 0.2]]])), t).item()

    def test_foreground_is_plain_square(self):
        t = np.array([[[0.8]]])
        assert cls_loss(Tensor(np.array([[[-0.2]]])), t).item() == pytest.approx(1.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            cls_loss(Tensor(np.zeros((1, 2, 2))), np.zeros((1, 3, 3)))


class TestGiou:
    def _loss(self, pred_box, gt_box, scale=1.0):
        cfg = EncodingConfig(s=int(16 * scale), k=1, n=8, H_f=4, W_f=4)
        pred = bbox_offset_map(tuple(v * scale for v in pred_box), cfg)
        gt = bbox_offset_map(tuple(v * scale for v in gt_box), cfg)
        return giou_loss(Tensor(pred), gt, _one_fg_cell(), cfg).item()

    def test_identical(self):
        assert self._loss((0, 0, 10, 10), (0, 0, 10, 10)) == 0.0

    def test_half_overlap(self):
        assert self._loss((0, 0, 10, 10), (5, 0, 15, 10)) == pytest.approx(2 / 3, abs=1e-9)

    def test_far_apart_tends_to_two(self):
        assert self._loss((0, 0, 1, 1), (1000, 1000, 1001, 1001)) == pytest.approx(2.0, abs=1e-5)

    def test_degenerate_prediction(self):
        # an inverted predicted box has zero area and zero overlap
        value = self._loss((10, 10, 0, 0), (0, 0, 10, 10))
        assert np.isfinite(value) and value >= 1.0

    @given(st.floats(0.25, 4.0), st.lists(st.floats(0, 50), min_size=4, max_size=4))
    def test_scale_invariant(self, scale, raw):
        pred = (raw[0], raw[1], raw[0] + 5 + raw[2], raw[1] + 5 + raw[3])
        gt = (10.0, 12.0, 40.0, 33.0)
        assert self._loss(pred, gt, scale) == pytest.approx(self._loss(pred, gt), abs=1e-9)

    def test_no_foreground_is_zero(self):
        assert giou_loss(Tensor(np.ones((4, 4, 4))), np.zeros((4, 4, 4)), np.zeros((1, 4, 4)), CFG).item() == 0.0

    def test_gradient(self):
        gt = bbox_offset_map((3, 5, 40, 50), CFG)
        gm = np.zeros((1, 4, 4))
        gm[0, 1:3, 1:3] = 0.5
        pred = Tensor(gt + np.random.default_rng(2).normal(0, 4, size=gt.shape))
        assert grad_check(lambda p: giou_loss(p, gt, gm, CFG), pred).passed


class TestHom:
    def _setup(self):
        kgm = np.zeros((2, 4, 4))
        kgm[0, 1, 1] = 1.0
        kgm[1, 3, 3] = 1.0
        return kgm, np.zeros((4, 4, 4))

    def test_single_cell_error(self):
        kgm, target = self._setup()
        pred = target.copy()
        pred[0:2, 1, 1] = (3.0, 4.0)
        loss = hinged_offset_mse(Tensor(pred), target, [True, False], kgm, radius=0.0)
        assert loss.item() == pytest.approx(12.5)

    def test_invisible_ignored(self):
        kgm, target = self._setup()
        pred = np.random.default_rng(0).normal(size=target.shape) * 50
        assert hinged_offset_mse(Tensor(pred), target, [False, False], kgm).item() == 0.0

    def test_perfect(self):
        kgm, target = self._setup()
        assert hinged_offset_mse(Tensor(target.copy()), target, [True, True], kgm).item() == 0.0

    def test_outside_radius_ignored(self):
        kgm, target = self._setup()
        pred = target.copy()
        pred[0:2, 3, 3] = 100.0  # three cells diagonal from keypoint 0's peak
        assert hinged_offset_mse(Tensor(pred), target, [True, False], kgm).item() == 0.0

    def test_mean_over_support(self):
        kgm, target = self._setup()
        pred = target.copy()
        pred[0:2] = np.array([3.0, 4.0])[:, None, None]
        # every cell of keypoint 0's support has error (3, 4)
        assert hinged_offset_mse(Tensor(pred), target, [True, False], kgm).item() == pytest.approx(12.5)

    def test_channel_mismatch(self):
        kgm, target = self._setup()
        with pytest.raises(DimensionError):
            hinged_offset_mse(Tensor(np.zeros((2, 4, 4))), np.zeros((2, 4, 4)), [True, True], kgm)


def _perfect_outputs(maps, train_maps):
    return SimpleNamespace(
        B_gm_hat=Tensor(maps.B_gm),
        B_om_hat=Tensor(maps.B_om),
        K_gm_hat=Tensor(maps.K_gm),
        K_om_hat=Tensor(maps.K_om),
        K_gmsp_hat_train=Tensor(np.stack([m.K_gmsp for m in train_maps])),
    )


def _maps():
    ann = Annotation(0, (7, 9, 40, 51), [[12, 20, 2], [33, 44, 1]])
    return target_state_maps(ann, CFG)


class TestTotal:
    def test_defaults(self):
        assert tuple(vars(LossWeights()).values()) == (100.0, 10.0, 100.0, 10.0, 100.0)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            LossWeights(giou=-1.0)

    def test_perfect_predictions(self):
        maps = _maps()
        report = total_loss(_perfect_outputs(maps, [maps, maps]), maps, [maps, maps], CFG)
        assert report.total == 0.0 and all(v == 0.0 for v in report.as_dict().values())

    def test_only_giou(self):
        maps = _maps()
        gt = bbox_offset_map((0, 0, 10, 10), CFG)
        maps = type(maps)(**{**vars(maps), "B_gm": _one_fg_cell(), "B_om": gt})
        out = _perfect_outputs(maps, [maps])
        out.B_om_hat = Tensor(bbox_offset_map((5, 0, 15, 10), CFG))
        report = total_loss(out, maps, [maps], CFG)
        assert report.giou == pytest.approx(2 / 3, abs=1e-12)
        assert report.total == pytest.approx(10 * 2 / 3, abs=1e-9)
        half = total_loss(out, maps, [maps], CFG, LossWeights(giou=7.5))
        assert half.total == pytest.approx(5.0, abs=1e-9)

    def test_weighted_sum(self):
        maps = _maps()
        rng = np.random.default_rng(1)
        out = _perfect_outputs(maps, [maps])
        out.K_gm_hat = Tensor(rng.uniform(size=maps.K_gm.shape))
        out.K_om_hat = Tensor(maps.K_om + rng.normal(size=maps.K_om.shape))
        lw = LossWeights(1.0, 2.0, 3.0, 4.0, 5.0)
        r = total_loss(out, maps, [maps], CFG, lw)
        expected = r.cls_box + 2 * r.giou + 3 * r.cls_kp + 4 * r.hom + 5 * r.gmsp
        assert r.total == pytest.approx(expected, rel=1e-12) and r.total > 0
        assert r.graph.item() == r.total

    def test_no_gmsp_term_without_soft_maps(self):
        maps = _maps()
        out = _perfect_outputs(maps, [maps])
        out.K_gmsp_hat_train = None
        assert total_loss(out, maps, [maps], CFG).gmsp == 0.0

    def test_gmsp_frame_count_checked(self):
        maps = _maps()
        with pytest.raises(DimensionError):
            total_loss(_perfect_outputs(maps, [maps]), maps, [maps, maps], CFG)
