import warnings

import numpy as np
import pytest

from gbnet.geometry import NeighborIndex, knn_search
from gbnet.gradcheck import grad_check, projection_loss
from gbnet.layers import (
    BatchNorm,
    LfcLayer,
    MlpLayer,
    batchnorm_forward,
    edgeconv_forward,
    edgeconv_reference,
    edgelfc_forward,
    edgelfc_reference,
    lfc_forward,
    mlp_forward,
)
from gbnet.tensor import Tensor
from oracles import edgeconv_loops, lfc_loops

F64 = np.float64


def frozen(layer):
    """Eval mode with identity running statistics: BN becomes gamma*x+beta."""
    layer.eval()
    return layer


def randomize(layer, rng):
    for name, p in layer.named_parameters():
        if name.endswith(("gamma",)):
            p.data[...] = rng.uniform(0.5, 1.5, p.shape)
        elif name.endswith(("beta", "bias")):
            p.data[...] = rng.normal(0, 0.2, p.shape)
    return layer


class TestMlp:
    def test_identity_weights(self, rng):
        layer = frozen(MlpLayer(3, 3, rng, dtype=F64))
        layer.weight.data[...] = np.eye(3)
        x = rng.standard_normal((5, 3))
        out = mlp_forward(layer, x).data
        np.testing.assert_allclose(out, np.where(x > 0, x, 0.2 * x), rtol=1e-5)

    def test_constant_input_train_mode(self, rng):
        layer = MlpLayer(4, 3, rng, dtype=F64)
        out = mlp_forward(layer, np.full((8, 4), 2.5)).data
        np.testing.assert_allclose(out, 0.0, atol=1e-6)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            mlp_forward(MlpLayer(4, 3, rng), np.zeros((2, 5)))

    @pytest.mark.parametrize("training", [False, True])
    def test_grad_check(self, training, rng):
        layer = randomize(MlpLayer(4, 5, rng, dtype=F64), rng).train(training)
        x = Tensor(rng.standard_normal((8, 4)), requires_grad=True)
        rep = grad_check(lambda: projection_loss(mlp_forward(layer, x)), [x] + layer.parameters())
        assert rep.passed, rep.line()

    def test_weight_sharing(self, rng):
        layer = frozen(randomize(MlpLayer(4, 3, rng, dtype=F64), rng))
        x = rng.standard_normal((6, 5, 4))
        full = mlp_forward(layer, x).data
        for n in range(6):
            for j in range(5):
                np.testing.assert_allclose(full[n, j], mlp_forward(layer, x[n, j][None]).data[0], rtol=1e-12)


class TestLfc:
    def test_averaging_kernel(self, rng):
        k, c = 4, 3
        layer = LfcLayer(c, c, k, rng, bn=False, slope=1.0, dtype=F64)
        layer.weight.data[...] = np.eye(c)[:, :, None] / k
        x = rng.standard_normal((5, k, c))
        np.testing.assert_allclose(lfc_forward(layer, x).data, x.mean(axis=1), rtol=1e-12)

    def test_zero_input(self, rng):
        layer = frozen(LfcLayer(3, 2, 4, rng, dtype=F64))
        assert np.all(lfc_forward(layer, np.zeros((5, 4, 3))).data == 0)

    def test_loop_oracle(self, rng):
        layer = LfcLayer(3, 4, 5, rng, bn=False, slope=1.0, dtype=F64)
        layer.bias.data[...] = rng.standard_normal(4)
        x = rng.standard_normal((6, 5, 3))
        np.testing.assert_allclose(lfc_forward(layer, x).data, lfc_loops(layer.weight.data, layer.bias.data, x))

    def test_k_mismatch(self, rng):
        with pytest.raises(ValueError):
            lfc_forward(LfcLayer(3, 2, 4, rng), np.zeros((5, 3, 3)))

    @pytest.mark.parametrize("training", [False, True])
    def test_grad_check(self, training, rng):
        layer = randomize(LfcLayer(2, 4, 3, rng, dtype=F64), rng).train(training)
        x = Tensor(rng.standard_normal((6, 3, 2)), requires_grad=True)
        rep = grad_check(lambda: projection_loss(lfc_forward(layer, x)), [x] + layer.parameters())
        assert rep.passed, rep.line()


class TestEdgeConv:
    def test_shape(self, rng):
        layer = MlpLayer(28, 64, rng)
        x = rng.standard_normal((16, 14)).astype(np.float32)
        assert edgeconv_forward(layer, x, knn_search(x, 15)).shape == (16, 15, 64)

    def test_center_copy(self, rng):
        d = 3
        layer = MlpLayer(2 * d, d, rng, bn=False, slope=1.0, dtype=F64)
        layer.weight.data[...] = np.hstack([np.eye(d), np.zeros((d, d))])
        x = rng.standard_normal((7, d))
        out = edgeconv_forward(layer, x, knn_search(x, 3)).data
        np.testing.assert_allclose(out, np.broadcast_to(x[:, None], (7, 3, d)), rtol=1e-12)

    def test_loop_oracle(self, rng):
        layer = MlpLayer(6, 4, rng, bn=False, slope=1.0, dtype=F64)
        layer.bias.data[...] = rng.standard_normal(4)
        x = rng.standard_normal((9, 3))
        nbr = knn_search(x, 3)
        np.testing.assert_allclose(
            edgeconv_forward(layer, x, nbr).data, edgeconv_loops(layer.weight.data, layer.bias.data, x, nbr.indices),
            rtol=1e-10, atol=1e-12,
        )

    @pytest.mark.parametrize("training", [False, True])
    def test_split_weight_matches_literal(self, training, rng):
        layer = randomize(MlpLayer(10, 6, rng, dtype=F64), rng).train(training)
        x = rng.standard_normal((2, 12, 5))
        nbr = knn_search(x, 4)
        a = edgeconv_forward(layer, x, nbr).data
        b = edgeconv_reference(layer, x, nbr).data
        np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("training", [False, True])
    def test_grad_check(self, training, rng):
        layer = randomize(MlpLayer(6, 4, rng, dtype=F64), rng).train(training)
        x = Tensor(rng.standard_normal((8, 3)), requires_grad=True)
        nbr = knn_search(x.data, 2)
        rep = grad_check(lambda: projection_loss(edgeconv_forward(layer, x, nbr)), [x] + layer.parameters())
        assert rep.passed, rep.line()

    def test_max_over_slots_invariant_to_slot_order(self, rng):
        layer = frozen(randomize(MlpLayer(6, 4, rng, dtype=F64), rng))
        x = rng.standard_normal((8, 3))
        nbr = knn_search(x, 3)
        shuffled = NeighborIndex(nbr.indices[:, ::-1].copy(), 3)
        a = edgeconv_forward(layer, x, nbr).data.max(axis=1)
        b = edgeconv_forward(layer, x, shuffled).data.max(axis=1)
        np.testing.assert_allclose(a, b, rtol=1e-12)

    def test_point_equivariance(self, rng):
        layer = frozen(randomize(MlpLayer(6, 4, rng, dtype=F64), rng))
        x = rng.standard_normal((10, 3))
        perm = rng.permutation(10)
        a = edgeconv_forward(layer, x, knn_search(x, 3)).data[perm]
        b = edgeconv_forward(layer, x[perm], knn_search(x[perm], 3)).data
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


class TestEdgeLfc:
    def test_shape(self, rng):
        layer = LfcLayer(28, 64, 15, rng)
        x = rng.standard_normal((16, 14)).astype(np.float32)
        assert edgelfc_forward(layer, x, knn_search(x, 15)).shape == (16, 64)

    @pytest.mark.parametrize("training", [False, True])
    def test_split_weight_matches_literal(self, training, rng):
        layer = randomize(LfcLayer(10, 6, 4, rng, dtype=F64), rng).train(training)
        x = rng.standard_normal((2, 12, 5))
        nbr = knn_search(x, 4)
        np.testing.assert_allclose(edgelfc_forward(layer, x, nbr).data, edgelfc_reference(layer, x, nbr).data,
                                   rtol=1e-9, atol=1e-12)

    def test_degenerate_cloud_depends_on_center_only(self, rng):
        layer = frozen(LfcLayer(6, 4, 3, rng, dtype=F64))
        x = np.ones((7, 3))
        out1 = edgelfc_forward(layer, x, knn_search(x, 3)).data
        layer.weight.data[:, 3:, :] = rng.standard_normal((4, 3, 3))  # edge weights are irrelevant
        out2 = edgelfc_forward(layer, x, knn_search(x, 3)).data
        np.testing.assert_allclose(out1, out2, rtol=1e-12, atol=1e-13)
        assert np.allclose(out1, out1[0])

    def test_slot_order_matters(self, rng):
        layer = frozen(randomize(LfcLayer(6, 4, 3, rng, dtype=F64), rng))
        x = rng.standard_normal((8, 3))
        nbr = knn_search(x, 3)
        shuffled = NeighborIndex(nbr.indices[:, ::-1].copy(), 3)
        assert not np.allclose(edgelfc_forward(layer, x, nbr).data, edgelfc_forward(layer, x, shuffled).data)

    @pytest.mark.parametrize("training", [False, True])
    def test_grad_check(self, training, rng):
        layer = randomize(LfcLayer(6, 4, 2, rng, dtype=F64), rng).train(training)
        x = Tensor(rng.standard_normal((8, 3)), requires_grad=True)
        nbr = knn_search(x.data, 2)
        rep = grad_check(lambda: projection_loss(edgelfc_forward(layer, x, nbr)), [x] + layer.parameters())
        assert rep.passed, rep.line()


class TestBatchNorm:
    def test_constant_channel_train(self):
        bn = BatchNorm(2, dtype=F64)
        out = batchnorm_forward(bn, np.full((6, 2), 3.0)).data
        assert np.all(out == 0)

    def test_eval_identity_stats(self, rng):
        bn = BatchNorm(3, dtype=F64).eval()
        bn.gamma.data[...] = [1.0, 2.0, 0.5]
        bn.beta.data[...] = [0.0, -1.0, 3.0]
        x = rng.standard_normal((4, 3))
        np.testing.assert_allclose(batchnorm_forward(bn, x).data, bn.gamma.data * x / np.sqrt(1 + 1e-5) + bn.beta.data)

    def test_train_moments(self, rng):
        bn = BatchNorm(4, dtype=F64)
        out = batchnorm_forward(bn, rng.standard_normal((5, 7, 4)) * 3 + 2).data.reshape(-1, 4)
        np.testing.assert_allclose(out.mean(axis=0), 0, atol=1e-5)
        np.testing.assert_allclose(out.var(axis=0), 1, atol=1e-3)

    def test_running_stats_update(self, rng):
        bn = BatchNorm(2, dtype=F64)
        x = rng.standard_normal((10, 2))
        batchnorm_forward(bn, x)
        np.testing.assert_allclose(bn.running_mean, 0.1 * x.mean(axis=0))
        np.testing.assert_allclose(bn.running_var, 0.9 + 0.1 * x.var(axis=0, ddof=1))
        assert np.all(bn.running_var >= 0)

    def test_single_position_warns(self):
        bn = BatchNorm(2, dtype=F64)
        with pytest.warns(RuntimeWarning):
            out = batchnorm_forward(bn, np.array([[1.0, 2.0]])).data
        np.testing.assert_allclose(out, np.array([[1.0, 2.0]]) / np.sqrt(1 + 1e-5))
        assert np.all(bn.running_mean == 0)
