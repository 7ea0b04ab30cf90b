"""기하 연산 테스트"""
import numpy as np
import pytest

from app.core.errors import (
    ContractError,
    DegenerateCloudError,
    DimensionError,
    DomainError,
    UnreachableVertexError,
)
from app.core.gradcheck import check_gradients
from app.core.losses import correspondence_loss
from app.core.tensor import Tensor, mul, softmax_rows, sum_all
from app.core.geometry import (
    ROTATION_MODES,
    Correspondence,
    MeshRef,
    PointCloud,
    RotationMode,
    apply_permutation,
    block_distance_matrix,
    chamfer,
    gaussian_energy,
    geodesic_distances,
    geodesic_rows,
    inject_noise,
    nearest_neighbor_match,
    normalize,
    random_rotation,
    rotate,
    rotation_about,
    surface_scale,
)
from tests.conftest import random_cloud


class _PinnedRng:
    """uniform이 항상 같은 값을 돌려주는 rng"""

    def __init__(self, value):
        self.value = value

    def uniform(self, low, high, size=None):
        return self.value


def grid_mesh(rng, side=4, jitter=0.1):
    """살짝 흔든 격자 삼각분할"""
    xs, ys = np.meshgrid(np.arange(side, dtype=float), np.arange(side, dtype=float), indexing="ij")
    points = np.stack([xs.ravel(), ys.ravel(), np.zeros(side * side)], axis=1)
    points += rng.uniform(-jitter, jitter, size=points.shape)
    triangles = []
    for i in range(side - 1):
        for j in range(side - 1):
            a, b, c, d = i * side + j, i * side + j + 1, (i + 1) * side + j, (i + 1) * side + j + 1
            triangles.extend([(a, b, d), (a, d, c)])
    return MeshRef(PointCloud(points), np.array(triangles))


def floyd_warshall(mesh):
    n = mesh.n
    dist = np.full((n, n), np.inf)
    np.fill_diagonal(dist, 0.0)
    for a, b in mesh.edges():
        length = np.linalg.norm(mesh.cloud.points[a] - mesh.cloud.points[b])
        dist[a, b] = dist[b, a] = length
    for k in range(n):
        dist = np.minimum(dist, dist[:, k:k + 1] + dist[k:k + 1, :])
    return dist


# ==================== 타입 ====================


class TestTypes:
    def test_point_cloud_shape(self):
        with pytest.raises(DimensionError):
            PointCloud(np.zeros((3, 2)))
        with pytest.raises(DimensionError):
            PointCloud(np.zeros((0, 3)))

    def test_point_cloud_finite(self):
        with pytest.raises(DomainError):
            PointCloud([[0.0, np.nan, 0.0]])

    def test_point_cloud_is_read_only(self):
        cloud = PointCloud(np.zeros((2, 3)))
        with pytest.raises(ValueError):
            cloud.points[0, 0] = 1.0

    def test_correspondence_must_be_bijection(self):
        with pytest.raises(ContractError):
            Correspondence([0, 0, 1])
        corr = Correspondence([2, 0, 1])
        np.testing.assert_array_equal(corr.inverse().pairs, [1, 2, 0])


# ==================== 정규화 ====================


class TestNormalize:
    def test_two_points(self):
        out = normalize(PointCloud([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))
        np.testing.assert_array_equal(out.points, [[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]])

    def test_centroid_and_radius(self, rng):
        out = normalize(PointCloud(rng.normal(size=(50, 3)) * 7 + 3))
        assert np.abs(out.points.mean(axis=0)).max() < 1e-9
        assert np.linalg.norm(out.points, axis=1).max() == pytest.approx(1.0, abs=1e-12)

    def test_idempotent(self, rng):
        once = normalize(PointCloud(rng.normal(size=(30, 3))))
        twice = normalize(once)
        np.testing.assert_allclose(twice.points, once.points, atol=1e-12)

    def test_coincident_points_rejected(self):
        with pytest.raises(DegenerateCloudError):
            normalize(PointCloud(np.ones((4, 3))))
        with pytest.raises(DegenerateCloudError):
            normalize(PointCloud([[1.0, 2.0, 3.0]]))


# ==================== 블록 거리 행렬 ====================


class TestBlockDistance:
    def test_singletons(self):
        origin = PointCloud([[0.0, 0.0, 0.0]])
        matrix = block_distance_matrix(origin, origin)
        assert matrix.values.shape == (3, 3)
        np.testing.assert_array_equal(matrix.values, np.zeros((3, 3)))

    def test_unit_pair(self):
        x = PointCloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        matrix = block_distance_matrix(x, x)
        assert matrix.values[0, 1] == 1.0
        assert matrix.values[3, 4] == 1.0
        assert matrix.sep_index == 2

    def test_against_brute_force(self, rng):
        x, y = random_cloud(rng, 5), random_cloud(rng, 7)
        matrix = block_distance_matrix(x, y)
        assert matrix.size == 13
        for i in range(5):
            for j in range(5):
                assert matrix.values[i, j] == pytest.approx(np.linalg.norm(x.points[i] - x.points[j]), abs=1e-12)
        for i in range(7):
            for j in range(7):
                assert matrix.values[6 + i, 6 + j] == pytest.approx(
                    np.linalg.norm(y.points[i] - y.points[j]), abs=1e-12
                )
        assert np.all(matrix.values[~matrix.same_shape_mask] == 0.0)
        np.testing.assert_array_equal(matrix.values, matrix.values.T)


# ==================== Gaussian 에너지 ====================


class TestGaussianEnergy:
    def test_diagonal_is_one(self, rng):
        x = random_cloud(rng, 4)
        energy = gaussian_energy(block_distance_matrix(x, x), 0.1)
        np.testing.assert_array_equal(np.diag(energy.data), np.ones(9))

    def test_distance_equal_to_sigma(self):
        x = PointCloud([[0.0, 0.0, 0.0], [0.3, 0.0, 0.0]])
        energy = gaussian_energy(block_distance_matrix(x, x), 0.3)
        assert energy.data[0, 1] == pytest.approx(np.exp(-0.5), abs=1e-12)

    def test_cross_entries_masked(self, rng):
        x, y = random_cloud(rng, 3), random_cloud(rng, 3)
        matrix = block_distance_matrix(x, y)
        energy = gaussian_energy(matrix, 0.5)
        assert np.all(np.isneginf(energy.data[~matrix.same_shape_mask]))
        assert energy.data[3, 3] == 1.0
        weights = softmax_rows(energy).data
        assert np.all(weights[:3, 3:] == 0.0)
        assert np.all(weights[4:, :4] == 0.0)
        assert weights[3, 3] == 1.0

    def test_literal_cross_leaves_ones(self, rng):
        x, y = random_cloud(rng, 3), random_cloud(rng, 3)
        energy = gaussian_energy(block_distance_matrix(x, y), 0.5, literal_cross=True)
        np.testing.assert_array_equal(energy.data[:3, 4:], np.ones((3, 3)))

    def test_non_positive_sigma(self, rng):
        matrix = block_distance_matrix(random_cloud(rng, 3), random_cloud(rng, 3))
        with pytest.raises(DomainError):
            gaussian_energy(matrix, 0.0)
        with pytest.raises(DomainError):
            gaussian_energy(matrix, Tensor(-1.0, requires_grad=True))

    def test_sigma_gradient(self, rng):
        matrix = block_distance_matrix(random_cloud(rng, 4), random_cloud(rng, 4))
        sigma = Tensor(0.5, requires_grad=True)
        weights = rng.normal(size=(9, 9))
        errors = check_gradients(
            lambda: sum_all(mul(softmax_rows(gaussian_energy(matrix, sigma)), Tensor(weights))),
            {"sigma": sigma},
        )
        assert errors["sigma"] < 1e-6

    def test_rigid_invariance(self, rng):
        for _ in range(100):
            x, y = random_cloud(rng, 6), random_cloud(rng, 5)
            base = gaussian_energy(block_distance_matrix(x, y), 0.3).data
            moved = gaussian_energy(
                block_distance_matrix(
                    rotate(x, random_rotation("all_axes", rng)),
                    rotate(y, random_rotation("all_axes", rng)),
                ),
                0.3,
            ).data
            finite = np.isfinite(base)
            np.testing.assert_array_equal(finite, np.isfinite(moved))
            np.testing.assert_allclose(moved[finite], base[finite], atol=1e-9)


# ==================== 회전 ====================


class TestRotation:
    def test_none_is_identity(self, rng):
        np.testing.assert_array_equal(random_rotation("none", rng), np.eye(3))

    def test_quarter_turn_about_z(self):
        rotation = random_rotation("z", _PinnedRng(np.pi / 2))
        np.testing.assert_allclose(rotation @ np.array([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize("mode", ROTATION_MODES)
    def test_orthonormal(self, mode, rng):
        for _ in range(1000):
            rotation = random_rotation(mode, rng)
            np.testing.assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-12)
            assert np.linalg.det(rotation) == pytest.approx(1.0, abs=1e-12)

    def test_unknown_axis(self):
        with pytest.raises(DomainError):
            rotation_about("w", 1.0)

    def test_rotate_preserves_distances(self, rng):
        cloud = random_cloud(rng, 10)
        moved = rotate(cloud, random_rotation(RotationMode.ALL_AXES, rng))
        np.testing.assert_allclose(
            block_distance_matrix(moved, moved).values,
            block_distance_matrix(cloud, cloud).values,
            atol=1e-12,
        )


# ==================== 순열 ====================


class TestPermutation:
    def test_identity(self, rng):
        cloud = random_cloud(rng, 5)
        corr = Correspondence([1, 2, 3, 4, 0])
        moved, new_corr = apply_permutation(cloud, corr, np.arange(5))
        np.testing.assert_array_equal(moved.points, cloud.points)
        np.testing.assert_array_equal(new_corr.pairs, corr.pairs)

    def test_swap_source(self):
        cloud = PointCloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        moved, corr = apply_permutation(cloud, Correspondence.identity(2), [1, 0])
        np.testing.assert_array_equal(moved.points[0], [1.0, 0.0, 0.0])
        np.testing.assert_array_equal(corr.pairs, [1, 0])

    def test_inverse_restores(self, rng):
        cloud = random_cloud(rng, 6)
        corr = Correspondence(rng.permutation(6))
        perm = rng.permutation(6)
        moved, moved_corr = apply_permutation(cloud, corr, perm)
        back, back_corr = apply_permutation(moved, moved_corr, np.argsort(perm))
        np.testing.assert_array_equal(back.points, cloud.points)
        np.testing.assert_array_equal(back_corr.pairs, corr.pairs)

    def test_non_bijection_rejected(self, rng):
        with pytest.raises(ContractError):
            apply_permutation(random_cloud(rng, 3), Correspondence.identity(3), [0, 0, 1])

    @pytest.mark.parametrize("side", ["source", "target"])
    def test_loss_is_invariant(self, side, rng):
        n = 7
        x, y = random_cloud(rng, n), random_cloud(rng, n)
        corr = Correspondence(rng.permutation(n))
        x_hat, y_hat = rng.normal(size=(n, 3)), rng.normal(size=(n, 3))
        before = correspondence_loss(Tensor(x_hat), Tensor(y_hat), x, y, corr)

        perm = rng.permutation(n)
        if side == "source":
            x, corr = apply_permutation(x, corr, perm, side="source")
            x_hat = x_hat[perm]
        else:
            y, corr = apply_permutation(y, corr, perm, side="target")
            y_hat = y_hat[perm]
        after = correspondence_loss(Tensor(x_hat), Tensor(y_hat), x, y, corr)
        assert after[0].item() == pytest.approx(before[0].item(), abs=1e-12)
        assert after[1].item() == pytest.approx(before[1].item(), abs=1e-12)


# ==================== 노이즈 ====================


class TestNoise:
    def test_zero_fraction_or_stddev_is_identity(self, rng):
        cloud = random_cloud(rng, 20)
        assert inject_noise(cloud, 0.0, 0.1, rng) is cloud
        assert inject_noise(cloud, 1.0, 0.0, rng) is cloud

    def test_displacement_statistics(self, rng):
        cloud = PointCloud(np.zeros((10000, 3)))
        noisy = inject_noise(cloud, 1.0, 0.02, rng)
        assert noisy.points.std() == pytest.approx(0.02, rel=0.05)

    def test_fraction_of_points_moved(self, rng):
        cloud = random_cloud(rng, 10000)
        noisy = inject_noise(cloud, 0.5, 0.02, rng)
        moved = np.any(noisy.points != cloud.points, axis=1)
        assert int(moved.sum()) == 5000

    def test_invalid_parameters(self, rng):
        cloud = random_cloud(rng, 5)
        with pytest.raises(DomainError):
            inject_noise(cloud, 0.5, -0.1, rng)
        with pytest.raises(DomainError):
            inject_noise(cloud, 1.5, 0.1, rng)


# ==================== chamfer / 최근접 ====================


class TestChamferAndMatching:
    def test_self_is_zero(self, rng):
        cloud = random_cloud(rng, 10)
        assert chamfer(cloud, cloud) == 0.0

    def test_unit_offset(self):
        a = PointCloud([[0.0, 0.0, 0.0]])
        b = PointCloud([[1.0, 0.0, 0.0]])
        assert chamfer(a, b) == 2.0

    def test_symmetric_and_brute_force(self, rng):
        a, b = random_cloud(rng, 6), random_cloud(rng, 9)
        d = np.array([[np.sum((p - q) ** 2) for q in b.points] for p in a.points])
        expected = d.min(axis=1).mean() + d.min(axis=0).mean()
        assert chamfer(a, b) == pytest.approx(expected, abs=1e-12)
        assert chamfer(b, a) == pytest.approx(expected, abs=1e-12)

    def test_nearest_neighbor(self, rng):
        cloud = random_cloud(rng, 12)
        np.testing.assert_array_equal(nearest_neighbor_match(cloud, cloud), np.arange(12))
        tie = nearest_neighbor_match(PointCloud([[0.0, 0.0, 0.0]]), PointCloud([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]))
        assert tie[0] == 0

        a, b = random_cloud(rng, 8), random_cloud(rng, 11)
        expected = [int(np.argmin(np.linalg.norm(b.points - p, axis=1))) for p in a.points]
        np.testing.assert_array_equal(nearest_neighbor_match(a, b), expected)


# ==================== geodesic ====================


class TestGeodesic:
    def test_collinear_path(self):
        mesh = MeshRef(PointCloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]), [[0, 1, 2]])
        np.testing.assert_allclose(geodesic_distances(mesh, 0), [0.0, 1.0, 2.0], atol=1e-12)

    def test_matches_all_pairs_oracle(self, rng):
        mesh = grid_mesh(rng)
        expected = floyd_warshall(mesh)
        np.testing.assert_allclose(geodesic_rows(mesh, np.arange(mesh.n)), expected, atol=1e-9)

    def test_triangle_inequality(self, rng):
        mesh = grid_mesh(rng, side=5)
        dist = geodesic_rows(mesh, np.arange(mesh.n))
        for _ in range(200):
            i, j, k = rng.integers(0, mesh.n, size=3)
            assert dist[i, k] <= dist[i, j] + dist[j, k] + 1e-12
        np.testing.assert_allclose(dist, dist.T, atol=1e-12)

    def test_disconnected_mesh(self):
        points = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [5, 0, 0], [6, 0, 0], [5, 1, 0]], dtype=float)
        mesh = MeshRef(PointCloud(points), [[0, 1, 2], [3, 4, 5]])
        assert not mesh.is_connected()
        with pytest.raises(UnreachableVertexError):
            geodesic_distances(mesh, 0)

    def test_permuted_mesh_keeps_distances(self, rng):
        mesh = grid_mesh(rng)
        perm = rng.permutation(mesh.n)
        moved = mesh.permuted(perm)
        before = geodesic_rows(mesh, np.arange(mesh.n))
        after = geodesic_rows(moved, np.arange(mesh.n))
        np.testing.assert_allclose(after, before[np.ix_(perm, perm)], atol=1e-12)

    def test_surface_scale(self):
        mesh = MeshRef(PointCloud([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), [[0, 1, 2]])
        assert mesh.surface_area() == 0.5
        assert surface_scale(mesh, "none") == 1.0
        assert surface_scale(mesh, "sqrt_area") == pytest.approx(np.sqrt(0.5))
        with pytest.raises(DomainError):
            surface_scale(mesh, "cubic")
