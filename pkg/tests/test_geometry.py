import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gbnet.geometry import (
    NeighborIndex,
    PointCloud,
    build_edge_features,
    descriptor_array,
    descriptor_columns,
    descriptor_length,
    geometric_descriptor,
    knn_search,
    normalize_to_unit_sphere,
)
from oracles import descriptor as descriptor_oracle
from oracles import knn_bruteforce

FORM_LENGTHS = {1: 3, 2: 8, 3: 11, 4: 11, 5: 12, 6: 14, 7: 18, 8: 24}


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q *= np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


class TestKnn:
    def test_collinear(self):
        x = np.array([[0.0], [1.0], [2.0], [4.0]])
        assert knn_search(x, 2).indices[0].tolist() == [1, 2]

    def test_equilateral_tie_to_lower_index(self, backend):
        # exactly equal pairwise distances sqrt(2)
        x = np.array([[1.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
        assert knn_search(x, 1).indices[:, 0].tolist() == [1, 0, 0]

    def test_200_points_k20(self, rng, backend):
        x = rng.standard_normal((200, 3))
        assert np.array_equal(knn_search(x, 20).indices, knn_bruteforce(x, 20))

    def test_self_excluded_rows_sorted(self, rng):
        x = rng.standard_normal((50, 4))
        idx = knn_search(x, 7).indices
        for i, row in enumerate(idx):
            assert i not in row
            d = np.sum((x[row] - x[i]) ** 2, axis=1)
            assert np.all(np.diff(d) >= 0)

    @pytest.mark.parametrize("k", [0, 5, 6])
    def test_k_out_of_range(self, k):
        with pytest.raises(ValueError):
            knn_search(np.zeros((5, 3)), k)

    def test_batched(self, rng):
        x = rng.standard_normal((3, 30, 5))
        nbr = knn_search(x, 4)
        assert nbr.indices.shape == (3, 30, 4)
        for b in range(3):
            assert np.array_equal(nbr.indices[b], knn_bruteforce(x[b], 4))


class TestEdgeFeatures:
    def test_single_edge(self):
        x = np.array([[1.0, 2.0], [3.0, 5.0]])
        out = build_edge_features(x, NeighborIndex(np.array([[1], [0]]), 1)).data
        assert out[0, 0].tolist() == [1.0, 2.0, 2.0, 3.0]

    def test_zero_edge_for_equal_value(self):
        x = np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]])
        out = build_edge_features(x, NeighborIndex(np.array([[1], [0], [0]]), 1)).data
        assert out[0, 0].tolist() == [1.0, 2.0, 0.0, 0.0]

    def test_degenerate_cloud(self):
        x = np.ones((6, 3))
        out = build_edge_features(x, knn_search(x, 3)).data
        assert out.shape == (6, 3, 6)
        assert np.all(out[..., 3:] == 0) and np.all(out[..., :3] == 1)

    def test_index_out_of_range(self):
        with pytest.raises(IndexError):
            build_edge_features(np.ones((3, 2)), NeighborIndex(np.array([[1], [2], [3]]), 1))

    def test_permutation_equivariance(self, rng):
        x = rng.standard_normal((12, 3))
        nbr = knn_search(x, 4)
        perm = rng.permutation(12)
        inv = np.argsort(perm)
        nbr_p = NeighborIndex(inv[nbr.indices[perm]], 4)
        np.testing.assert_array_equal(build_edge_features(x[perm], nbr_p).data, build_edge_features(x, nbr).data[perm])


class TestDescriptor:
    def test_right_triangle(self):
        p = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
        row = descriptor_array(p, 6)[0]
        assert row.tolist() == [0, 0, 0, 0, 0, 1, 1, 0, 0, 0, 1, 0, 1, 1]

    def test_collinear_zero_normal(self):
        p = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
        row = descriptor_array(p, 6)[0]
        assert row[3:6].tolist() == [0, 0, 0] and row[12:].tolist() == [1, 2]

    @pytest.mark.parametrize("form,length", sorted(FORM_LENGTHS.items()))
    def test_lengths(self, form, length, rng):
        assert descriptor_length(form) == length
        assert len(descriptor_columns(form)) == length
        assert descriptor_array(rng.standard_normal((10, 3)), form).shape == (10, length)

    def test_form6_column_layout(self):
        assert descriptor_columns(6) == [
            "x", "y", "z", "nx", "ny", "nz", "e1x", "e1y", "e1z", "e2x", "e2y", "e2z", "l1", "l2"
        ]
        assert descriptor_columns(1) == ["x", "y", "z"]

    @pytest.mark.parametrize("form", range(1, 9))
    def test_matches_loop_oracle(self, form, rng):
        p = rng.standard_normal((25, 3))
        np.testing.assert_allclose(descriptor_array(p, form), descriptor_oracle(p, form), rtol=1e-12, atol=1e-14)

    def test_length3_uses_third_edge(self):
        p = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0]])
        row = descriptor_array(p, 8)[0]
        assert row[-1] == pytest.approx(np.sqrt(5.0))

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            geometric_descriptor(PointCloud(np.zeros((2, 3))), 6)

    def test_unknown_form(self):
        with pytest.raises(ValueError):
            descriptor_columns(9)

    @pytest.mark.parametrize("form", range(2, 9))
    def test_translation_bit_identical(self, form, rng):
        # dyadic coordinates and shifts keep every difference exact
        p = rng.integers(-64, 64, size=(40, 3)) / 16.0
        t = rng.integers(-64, 64, size=3) / 8.0
        a, b = descriptor_array(p, form), descriptor_array(p + t, form)
        shifted = [i for i, c in enumerate(descriptor_columns(form)) if c in ("x", "y", "z") or c.startswith("pj")]
        keep = [i for i in range(a.shape[1]) if i not in shifted]
        assert np.array_equal(a[:, keep], b[:, keep])
        np.testing.assert_allclose(b[:, :3] - a[:, :3], np.broadcast_to(t, (40, 3)))

    def test_rotation(self, rng):
        p = rng.standard_normal((60, 3))
        R = random_rotation(rng)
        a, b = descriptor_array(p, 8), descriptor_array(p @ R.T, 8)
        cols = descriptor_columns(8)
        lengths = [cols.index(c) for c in ("l1", "l2", "l3")]
        np.testing.assert_allclose(b[:, lengths], a[:, lengths], rtol=1e-5)
        for item in ("n", "e1", "e2", "e3", "nj1", "nj2"):
            j = cols.index(f"{item}x")
            np.testing.assert_allclose(b[:, j : j + 3], a[:, j : j + 3] @ R.T, atol=1e-10)

    @given(st.integers(0, 2**31))
    def test_normal_magnitude(self, seed):
        p = np.random.default_rng(seed).standard_normal((12, 3))
        d = descriptor_array(p, 6)
        e1, e2 = d[:, 6:9], d[:, 9:12]
        cos = np.sum(e1 * e2, axis=1) / (d[:, 12] * d[:, 13])
        sin = np.sqrt(np.clip(1 - cos**2, 0, None))
        expected = d[:, 12] * d[:, 13] * sin
        np.testing.assert_allclose(np.linalg.norm(d[:, 3:6], axis=1), expected, rtol=1e-5, atol=1e-12)
        assert np.array_equal(d[:, 3:6], np.cross(e1, e2))
        assert np.all(d[:, 12:] >= 0)


class TestNormalize:
    def test_already_normalized(self):
        out = normalize_to_unit_sphere(PointCloud(np.array([[1.0, 0, 0], [-1, 0, 0]])))
        assert out.points.tolist() == [[1, 0, 0], [-1, 0, 0]]

    def test_shift_and_scale(self):
        out = normalize_to_unit_sphere(PointCloud(np.array([[10.0, 0, 0], [12, 0, 0]])))
        assert out.points.tolist() == [[-1, 0, 0], [1, 0, 0]]

    def test_integer_points(self):
        out = normalize_to_unit_sphere(PointCloud(np.array([[10, 0, 0], [12, 0, 0]])))
        assert out.points.dtype == np.float64 and out.points.tolist() == [[-1, 0, 0], [1, 0, 0]]

    @given(st.integers(0, 2**31))
    def test_idempotent_and_unit(self, seed):
        rng = np.random.default_rng(seed)
        c = PointCloud(rng.standard_normal((20, 3)) * rng.uniform(0.1, 10) + rng.normal(0, 5, 3))
        once = normalize_to_unit_sphere(c)
        twice = normalize_to_unit_sphere(once)
        np.testing.assert_allclose(twice.points, once.points, atol=1e-6)
        assert np.abs(once.points.mean(axis=0)).max() < 1e-6
        assert abs(np.linalg.norm(once.points, axis=1).max() - 1) < 1e-6

    def test_zero_scale(self):
        with pytest.raises(ValueError):
            normalize_to_unit_sphere(PointCloud(np.ones((4, 3))))
