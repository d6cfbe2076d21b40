import math

import numpy as np
import pytest

from gbnet.data import Dataset, synthetic_dataset
from gbnet.geometry import PointCloud
from gbnet.model import (
    ABLATIONS,
    CheckpointError,
    GbnetModel,
    ModelConfig,
    SgdState,
    TrainConfig,
    checkpoint_bytes,
    checkpoint_load,
    checkpoint_save,
    confusion_matrix,
    cosine_lr,
    evaluate,
    gbnet_forward,
    loss_cross_entropy,
    metrics_from_confusion,
    sgd_cosine_step,
    train_epoch,
)
from gbnet.tensor import Parameter, Tape, Tensor, backward
from gbnet.verify import TOL_END_TO_END, _t_end_to_end
from oracles import confusion_metrics, cosine


def small_config(classes=3, **kw):
    base = dict(num_points=32, k=4, scales=(8, 8, 16, 16), emb=32, fc=(16, 8))
    base.update(kw)
    return ModelConfig(classes, **base)


def unit_clouds(rng, b, n):
    p = rng.standard_normal((b, n, 3))
    p -= p.mean(axis=1, keepdims=True)
    return (p / np.linalg.norm(p, axis=-1).max(axis=1)[:, None, None]).astype(np.float32)


def toy_dataset(n_per_class=8, n_points=32, seed=0):
    """Two linearly separable classes: flat discs versus tall sticks."""
    rng = np.random.default_rng(seed)
    clouds = []
    for i in range(2 * n_per_class):
        label = i % 2
        p = rng.standard_normal((n_points, 3))
        p[:, 2 if label == 0 else 0] *= 0.05
        p[:, 1] *= 0.05 if label == 1 else 1.0
        p -= p.mean(axis=0)
        p /= np.linalg.norm(p, axis=1).max()
        clouds.append(PointCloud(p.astype(np.float32), label))
    return Dataset(clouds, ["disc", "stick"])


class TestForward:
    def test_full_shape_contract(self, rng):
        model = GbnetModel(ModelConfig(6)).eval()
        assert model.skip_width == 1024 and model.fuse_mlp.c_in == 1024 and model.fc_out.c_out == 6
        logits = gbnet_forward(model, unit_clouds(rng, 2, 256))
        assert logits.shape == (2, 6) and logits.dtype == np.float32

    def test_permutation_invariance(self, rng):
        model = GbnetModel(small_config())
        for p in model.alpha_parameters():
            p.data[...] = 0.5
        model.eval()
        pts = unit_clouds(rng, 2, 32)
        base = gbnet_forward(model, pts).data
        for _ in range(5):
            perm = rng.permutation(32)
            np.testing.assert_allclose(gbnet_forward(model, pts[:, perm]).data, base, atol=1e-5)

    def test_end_to_end_grad_check(self):
        rep = _t_end_to_end()
        assert rep.passed and rep.tolerance == TOL_END_TO_END, rep.line()

    def test_strict_mode_rejects_unnormalized(self, rng):
        model = GbnetModel(small_config(strict=True)).eval()
        with pytest.raises(ValueError, match="normalized"):
            gbnet_forward(model, unit_clouds(rng, 1, 32) * 3)
        gbnet_forward(model, unit_clouds(rng, 1, 32))

    def test_n_not_above_k(self, rng):
        model = GbnetModel(small_config()).eval()
        with pytest.raises(ValueError):
            gbnet_forward(model, unit_clouds(rng, 1, 4))

    @pytest.mark.parametrize("model_id", sorted(ABLATIONS))
    def test_ablations_run(self, model_id, rng):
        cfg = ModelConfig.ablation(model_id, 3, num_points=32, k=4, scales=(8, 8, 16, 16), emb=32, fc=(16, 8))
        model = GbnetModel(cfg)
        with Tape():
            loss = loss_cross_entropy(gbnet_forward(model, unit_clouds(rng, 2, 32)), [0, 1])
        backward(loss)
        assert np.isfinite(loss.item())

    @pytest.mark.parametrize("form", range(1, 9))
    def test_descriptor_forms_run(self, form, rng):
        model = GbnetModel(small_config(descriptor_form=form)).eval()
        assert gbnet_forward(model, unit_clouds(rng, 1, 32)).shape == (1, 3)

    def test_alpha_frozen_no_dropout_shapes(self, rng):
        model = GbnetModel(small_config(dropout=0.0))
        assert all(np.all(p.data == 0) for p in model.alpha_parameters())
        assert gbnet_forward(model, unit_clouds(rng, 2, 32)).shape == (2, 3)

    @pytest.mark.parametrize("training", [True, False])
    def test_initial_loss_near_log_c(self, training, rng):
        model = GbnetModel(ModelConfig(6, num_points=64, k=8, dropout=0.0)).train(training)
        labels = rng.integers(0, 6, 16)
        loss = loss_cross_entropy(gbnet_forward(model, unit_clouds(rng, 16, 64)), labels).item()
        assert abs(loss - math.log(6)) <= 0.1 * math.log(6)

    def test_parameter_names_unique(self):
        names = [n for n, _ in GbnetModel(small_config()).named_parameters()]
        assert len(names) == len(set(names))
        assert "abem_layers.0.edgeconv_phi.weight" in names


class TestLoss:
    def test_uniform(self):
        assert loss_cross_entropy(Tensor(np.zeros((2, 4))), [0, 3]).item() == pytest.approx(1.3863, abs=1e-4)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            loss_cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])


class TestOptimizer:
    def test_schedule_points(self):
        assert cosine_lr(0, 10, 0.1, 0.001) == pytest.approx(0.1)
        assert cosine_lr(10, 10, 0.1, 0.001) == pytest.approx(0.001)
        assert cosine_lr(5, 10, 0.1, 0.001) == pytest.approx(0.0505)
        for e in range(11):
            assert cosine_lr(e, 10, 0.1, 0.001) == pytest.approx(cosine(e, 10, 0.001, 0.1), abs=1e-15)

    def test_first_step(self):
        w = Parameter(np.array([1.0]))
        w.grad = np.array([0.5])
        state = SgdState(0.9)
        sgd_cosine_step(state, {"w": w}, 0, 10, 0.1, 0.001)
        assert state.velocity["w"].tolist() == [0.5]
        assert w.data[0] == pytest.approx(0.95)

    def test_zero_momentum_is_gradient_descent(self, rng):
        w0 = rng.standard_normal(4)
        w = Parameter(w0.copy())
        state = SgdState(0.0)
        for _ in range(3):
            w.grad = np.array([1.0, -2.0, 0.5, 0.0])
            sgd_cosine_step(state, {"w": w}, 0, 10, 0.1, 0.001)
        np.testing.assert_allclose(w.data, w0 - 3 * 0.1 * np.array([1.0, -2.0, 0.5, 0.0]))

    def test_momentum_accumulates(self):
        w = Parameter(np.array([0.0]))
        state = SgdState(0.9)
        for _ in range(2):
            w.grad = np.array([1.0])
            sgd_cosine_step(state, {"w": w}, 0, 10, 0.1, 0.001)
        assert state.velocity["w"][0] == pytest.approx(1.9)
        assert w.data[0] == pytest.approx(-0.1 - 0.19)

    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            TrainConfig(lr_max=0.001, lr_min=0.1)
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)


class TestTraining:
    def test_deterministic(self):
        ds = toy_dataset(4)
        cfg = TrainConfig(epochs=2, batch_size=4)
        params = []
        for _ in range(2):
            model = GbnetModel(small_config(2))
            opt = SgdState(cfg.momentum)
            for e in range(2):
                train_epoch(model, opt, ds, cfg, e)
            params.append(model.state_dict())
        for k in params[0]:
            assert np.array_equal(params[0][k], params[1][k]), k

    def test_logged_lr_matches_schedule(self):
        ds = toy_dataset(2)
        cfg = TrainConfig(epochs=4, batch_size=4)
        model, opt = GbnetModel(small_config(2)), SgdState(cfg.momentum)
        for e in range(2):
            assert train_epoch(model, opt, ds, cfg, e)["lr"] == cosine_lr(e, 4, cfg.lr_max, cfg.lr_min)

    def test_loss_decreases_on_separable_toy(self):
        ds = toy_dataset(8)
        cfg = TrainConfig(epochs=20, batch_size=8, lr_max=0.02, lr_min=0.001, augment=False)
        model = GbnetModel(small_config(2, dropout=0.0))
        opt = SgdState(cfg.momentum)
        losses = [train_epoch(model, opt, ds, cfg, e)["loss"] for e in range(5)]
        assert all(b < a for a, b in zip(losses, losses[1:])), losses

    def test_trailing_singleton_batch_merged(self):
        ds = toy_dataset(4)
        ds.clouds.append(ds.clouds[0])
        cfg = TrainConfig(epochs=1, batch_size=4)
        model, opt = GbnetModel(small_config(2)), SgdState(cfg.momentum)
        rec = train_epoch(model, opt, ds, cfg, 0)
        assert np.isfinite(rec["loss"])

    def test_freeze_alpha(self):
        ds = toy_dataset(2)
        cfg = TrainConfig(epochs=1, batch_size=4, freeze_alpha=True)
        model, opt = GbnetModel(small_config(2)), SgdState(cfg.momentum)
        train_epoch(model, opt, ds, cfg, 0)
        assert all(np.all(p.data == 0) for p in model.alpha_parameters())

    def test_empty_dataset(self):
        model = GbnetModel(small_config(2))
        with pytest.raises(ValueError):
            train_epoch(model, SgdState(), Dataset([], ["a", "b"]), TrainConfig(), 0)
        with pytest.raises(ValueError):
            evaluate(model, Dataset([], ["a", "b"]))


class TestMetrics:
    def test_perfect(self):
        m = metrics_from_confusion(confusion_matrix([0, 1, 2, 2], [0, 1, 2, 2], 3))
        assert m["overall_acc"] == 1.0 and m["avg_class_acc"] == 1.0 and m["f1"] == [1.0, 1.0, 1.0]
        assert np.array_equal(np.array(m["confusion"]), np.diag([1, 1, 2]))

    def test_constant_predictor(self):
        m = metrics_from_confusion(confusion_matrix([0, 0, 1, 1], [0, 0, 0, 0], 2))
        assert m["overall_acc"] == 0.5 and m["avg_class_acc"] == 0.5 and m["f1"][1] == 0.0

    def test_hand_built_matrix(self):
        cm = [[5, 2, 1], [0, 7, 3], [1, 1, 10]]
        m = metrics_from_confusion(np.array(cm))
        rec, prec, f1 = confusion_metrics(cm)
        assert m["avg_class_acc"] == pytest.approx(sum(rec) / 3)
        assert m["avg_class_acc"] == pytest.approx((5 / 8 + 7 / 10 + 10 / 12) / 3)
        np.testing.assert_allclose(m["f1"], f1)
        np.testing.assert_allclose(m["precision"], prec)
        assert m["overall_acc"] == pytest.approx(22 / 30)

    def test_rows_are_true_class(self):
        cm = confusion_matrix([0, 0, 1], [1, 1, 1], 2)
        assert cm.tolist() == [[0, 2], [0, 1]]


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        model = GbnetModel(small_config())
        for p in model.parameters():
            p.data = p.data + rng.normal(0, 0.01, p.shape).astype(p.dtype)
        opt = SgdState(0.9, {"fc_out.weight": rng.standard_normal(model.fc_out.weight.shape).astype(np.float32)})
        model.abem_layers[0].edgeconv_phi.bn.running_mean[:] = 0.3
        path = tmp_path / "m.gbnc"
        checkpoint_save(path, model, opt, {"epoch": 3})
        loaded, opt2, extra = checkpoint_load(path)
        pts = unit_clouds(rng, 2, 32)
        model.eval(), loaded.eval()
        assert np.array_equal(gbnet_forward(model, pts).data, gbnet_forward(loaded, pts).data)
        assert extra == {"epoch": 3}
        assert np.array_equal(opt2.velocity["fc_out.weight"], opt.velocity["fc_out.weight"])
        assert checkpoint_bytes(loaded, opt2, extra) == path.read_bytes()

    def test_truncated(self, tmp_path):
        buf = checkpoint_bytes(GbnetModel(small_config()))
        for cut in (3, 10, len(buf) // 2, len(buf) - 1):
            (tmp_path / "t.gbnc").write_bytes(buf[:cut])
            with pytest.raises(CheckpointError):
                checkpoint_load(tmp_path / "t.gbnc")

    def test_bad_magic_and_version(self, tmp_path):
        buf = bytearray(checkpoint_bytes(GbnetModel(small_config())))
        (tmp_path / "a").write_bytes(b"XXXX" + bytes(buf[4:]))
        with pytest.raises(CheckpointError, match="version 1"):
            checkpoint_load(tmp_path / "a")
        buf[4] = 9
        (tmp_path / "b").write_bytes(bytes(buf))
        with pytest.raises(CheckpointError, match="expected version 1"):
            checkpoint_load(tmp_path / "b")

    def test_class_count_mismatch(self, tmp_path):
        checkpoint_save(tmp_path / "c.gbnc", GbnetModel(small_config(3)))
        with pytest.raises(CheckpointError, match="class-count"):
            checkpoint_load(tmp_path / "c.gbnc", num_classes=6)


def test_synthetic_dataset_trains_end_to_end_smoke():
    ds = synthetic_dataset("train", per_class=2, n_points=32, classes=("sphere", "plane"))
    cfg = TrainConfig(epochs=1, batch_size=4)
    model = GbnetModel(small_config(2))
    rec = train_epoch(model, SgdState(), ds, cfg, 0)
    assert set(rec) == {"epoch", "loss", "acc", "lr"}
    m = evaluate(model, ds)
    assert 0 <= m["overall_acc"] <= 1 and len(m["per_class_acc"]) == 2
