import numpy as np
import pytest

from hyperfuse.autodiff import Tape
from hyperfuse.boxes import GroundTruthBox
from hyperfuse.config import default_config
from hyperfuse.model import Detector
from hyperfuse.params import load_checkpoint, save_checkpoint


def toy_config(**over):
    cfg = default_config()
    cfg["backbone"]["channels"] = [4, 4, 8, 8, 8]
    cfg["head"]["width"] = 8
    cfg["data"]["image_size"] = 64
    for section, updates in over.items():
        cfg[section].update(updates)
    return cfg


def toy_image(seed=0, side=64):
    return np.random.default_rng(seed).random((3, side, side)).astype(np.float32)


class TestDetectorForward:
    def test_level_shapes_and_aux(self):
        model = Detector(toy_config(), dtype=np.float32)
        pred, aux = model.forward(toy_image())
        assert [lp.obj.shape[1] for lp in pred.levels] == [8, 4, 2]
        assert pred.image_size == (64, 64)
        assert aux.hyper is not None
        assert aux.mixed.x.shape[0] == sum((4, 4, 8, 8, 8))

    def test_disabled_fusion_has_no_hyper_aux(self):
        model = Detector(toy_config(fusion={"enabled": False}), dtype=np.float32)
        pred, aux = model.forward(toy_image())
        assert aux.hyper is None and aux.mixed is None
        assert [lp.obj.shape[1] for lp in pred.levels] == [8, 4, 2]

    def test_forward_deterministic(self):
        model = Detector(toy_config(), dtype=np.float32)
        img = toy_image(3)
        a, _ = model.forward(img)
        b, _ = model.forward(img)
        for la, lb in zip(a.levels, b.levels):
            np.testing.assert_array_equal(la.obj.data, lb.obj.data)

    def test_init_seed_reproducible(self):
        a = Detector(toy_config(), dtype=np.float32, init_seed=5)
        b = Detector(toy_config(), dtype=np.float32, init_seed=5)
        for (n1, t1), (n2, t2) in zip(a.params.items(), b.params.items()):
            assert n1 == n2
            np.testing.assert_array_equal(t1.data, t2.data)

    def test_ablation_flags_change_param_set(self):
        full = Detector(toy_config(), dtype=np.float32)
        base = Detector(toy_config(backbone={"mlf_enabled": False},
                                   fusion={"enabled": False}), dtype=np.float32)
        assert "fusion.theta" in full.params
        assert "fusion.theta" not in base.params
        assert any(".dcn." in n for n in full.params.names())
        assert not any(".dcn." in n for n in base.params.names())
        assert base.params.num_values() < full.params.num_values()


class TestDetectorLossAndPredict:
    GTS = [GroundTruthBox(0, (8.0, 8.0, 28.0, 26.0)),
           GroundTruthBox(1, (36.0, 40.0, 56.0, 58.0))]

    def test_loss_finite_and_positive(self):
        model = Detector(toy_config(), dtype=np.float32)
        loss, parts = model.loss_on(toy_image(), self.GTS)
        assert np.isfinite(loss.data) and float(loss.data) > 0
        assert parts["num_pos"] == 2

    def test_backward_populates_every_used_param(self):
        model = Detector(toy_config(), dtype=np.float64)
        with Tape() as tape:
            loss, _ = model.loss_on(toy_image().astype(np.float64), self.GTS)
        tape.backward(loss)
        grads = model.params.grads()
        # offset predictors start at zero but still receive gradients
        assert any(".off.w" in n for n in grads)
        assert "fusion.theta" in grads
        assert "head.obj.w" in grads

    def test_predict_returns_valid_detections(self):
        model = Detector(toy_config(), dtype=np.float32)
        for det in model.predict(toy_image(), score_thresh=0.1):
            x1, y1, x2, y2 = det.box
            assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64

    def test_checkpoint_round_trip_preserves_forward(self, tmp_path):
        model = Detector(toy_config(), dtype=np.float32, init_seed=9)
        img = toy_image(4)
        ref, _ = model.forward(img)
        save_checkpoint(tmp_path / "m.ckpt", model.params)
        clone = Detector(toy_config(), dtype=np.float32, init_seed=1)
        clone.load_state(load_checkpoint(tmp_path / "m.ckpt"))
        got, _ = clone.forward(img)
        for la, lb in zip(ref.levels, got.levels):
            np.testing.assert_array_equal(la.cls.data, lb.cls.data)

    def test_load_state_rejects_mismatched_config(self, tmp_path):
        model = Detector(toy_config(), dtype=np.float32)
        save_checkpoint(tmp_path / "m.ckpt", model.params)
        other = Detector(toy_config(fusion={"enabled": False}), dtype=np.float32)
        with pytest.raises(ValueError):
            other.load_state(load_checkpoint(tmp_path / "m.ckpt"))
