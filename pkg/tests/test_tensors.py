import numpy as np
import pytest

from tensorgrade.tensors import (
    EIG_FLOOR,
    deformation_tensor,
    deformation_tensor_field,
    det_from_log,
    displacement_to_log_tensor,
    jacobian_field,
    log_distance_field,
    log_distance_voxel,
    log_tensor_field,
    mat_to_sym6,
    sym6_to_mat,
    sym_eigen,
    sym_eigen_field,
    tensor_exp,
    tensor_exp_field,
    tensor_log,
)
from tensorgrade.volume import Volume, VolumeError


def random_symmetric(rng, scale=1.0):
    a = rng.standard_normal((3, 3)) * scale
    return (a + a.T) / 2.0


def random_spd(rng, log_lo=-2.0, log_hi=2.0):
    """SPD matrix with log-uniform eigenvalues and random orthogonal frame."""
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    w = np.exp(rng.uniform(log_lo, log_hi, size=3))
    return (q * w) @ q.T


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    return q * np.sign(np.diag(r))


class TestSymEigen:
    def test_identity(self):
        w, v = sym_eigen(np.eye(3))
        assert np.array_equal(w, [1.0, 1.0, 1.0])
        assert np.array_equal(v, np.eye(3))

    def test_diagonal_descending_with_axis_vectors(self):
        w, v = sym_eigen(np.diag([3.0, 2.0, 1.0]))
        assert np.array_equal(w, [3.0, 2.0, 1.0])
        assert np.array_equal(np.abs(v), np.eye(3))

    def test_random_reconstruction(self, rng):
        for _ in range(200):
            s = random_symmetric(rng)
            w, v = sym_eigen(s)
            assert w[0] >= w[1] >= w[2]
            assert np.abs(v @ v.T - np.eye(3)).max() < 1e-10
            assert np.abs((v * w) @ v.T - s).max() < 1e-9
            for k in range(3):
                assert np.abs(s @ v[:, k] - w[k] * v[:, k]).max() < 1e-9 * (1 + abs(w[k]))

    @pytest.mark.parametrize(
        "s",
        [
            np.zeros((3, 3)),
            5.0 * np.eye(3),
            np.diag([2.0, 2.0, 1.0]),
            np.diag([2.0, 1.0, 1.0]),
            np.diag([1.0, 1.0, 1.0 - 1e-9]),
        ],
    )
    def test_degenerate_spectra(self, s):
        w, v = sym_eigen(s)
        assert np.abs(v @ v.T - np.eye(3)).max() < 1e-10
        assert np.abs((v * w) @ v.T - s).max() < 1e-9

    def test_near_degenerate_random_frames(self, rng):
        for gap in (1e-7, 1e-10, 0.0):
            for _ in range(50):
                q = random_rotation(rng)
                s = (q * np.array([1.0 + gap, 1.0, 0.5])) @ q.T
                s = (s + s.T) / 2.0
                w, v = sym_eigen(s)
                assert np.abs(v @ v.T - np.eye(3)).max() < 1e-10
                assert np.abs((v * w) @ v.T - s).max() < 1e-9

    def test_matches_lapack_eigenvalues(self, rng):
        s6 = rng.standard_normal((2000, 6))
        w, _ = sym_eigen_field(s6)
        ref = np.linalg.eigvalsh(sym6_to_mat(s6))[:, ::-1]
        assert np.abs(w - ref).max() < 1e-10

    def test_rejects_asymmetric(self):
        s = np.eye(3)
        s = s.copy()
        s[0, 1] = 1e-6
        with pytest.raises(VolumeError, match="symmetric"):
            sym_eigen(s)

    def test_batch_result_independent_of_batch_peers(self, rng):
        # A voxel's decomposition may not depend on which voxels share
        # its batch (the parallel grading contract).
        s6 = rng.standard_normal((64, 6))
        s6[10] = mat_to_sym6(np.diag([2.0, 2.0, 1.0]))  # forces a Jacobi row
        w_all, v_all = sym_eigen_field(s6)
        for i in (0, 10, 63):
            w_one, v_one = sym_eigen_field(s6[i : i + 1])
            assert np.array_equal(w_all[i], w_one[0])
            assert np.array_equal(v_all[i], v_one[0])


class TestJacobian:
    def test_zero_field_gives_identity(self):
        disp = Volume(np.zeros((4, 5, 6, 3)), (1.0, 2.0, 0.5))
        jac = jacobian_field(disp)
        assert jac.channels == 9
        expected = np.eye(3).reshape(9)
        assert np.array_equal(jac.data, np.broadcast_to(expected, jac.data.shape))

    def test_affine_field_exact(self, rng):
        # u = A x in physical coordinates; J = I - A at interior voxels.
        a = 0.1 * rng.standard_normal((3, 3))
        spacing = (0.8, 1.1, 1.4)
        nx, ny, nz = 6, 5, 7
        xs = np.arange(nx) * spacing[0]
        ys = np.arange(ny) * spacing[1]
        zs = np.arange(nz) * spacing[2]
        gz, gy, gx = np.meshgrid(zs, ys, xs, indexing="ij")
        coords = np.stack([gx, gy, gz], axis=-1)
        u = coords @ a.T
        jac = jacobian_field(Volume(u, spacing))
        expected = (np.eye(3) - a).reshape(9)
        interior = jac.data[1:-1, 1:-1, 1:-1]
        assert np.abs(interior - expected).max() < 1e-13

    def test_pure_scaling_toward_origin(self):
        # u_r(x) = (1 - alpha) x_r with alpha = 0.8 contracts to 0.8 I.
        alpha = 0.8
        nx = ny = nz = 5
        xs = np.arange(nx, dtype=np.float64)
        gz, gy, gx = np.meshgrid(xs, xs, xs, indexing="ij")
        u = np.stack([(1 - alpha) * gx, (1 - alpha) * gy, (1 - alpha) * gz], axis=-1)
        jac = jacobian_field(Volume(u, (1.0, 1.0, 1.0)))
        expected = (alpha * np.eye(3)).reshape(9)
        interior = jac.data[1:-1, 1:-1, 1:-1]
        assert np.abs(interior - expected).max() < 1e-14

    @staticmethod
    def _sinusoid_displacement(n, spacing):
        xs = np.arange(n) * spacing
        gz, gy, gx = np.meshgrid(xs, xs, xs, indexing="ij")
        u = np.stack(
            [
                0.05 * np.sin(gx) * np.cos(gy),
                0.04 * np.sin(gy) * np.cos(gz),
                0.03 * np.sin(gz) * np.cos(gx),
            ],
            axis=-1,
        )
        return Volume(u, (spacing,) * 3)

    @staticmethod
    def _sinusoid_jacobian_exact(n, spacing):
        xs = np.arange(n) * spacing
        gz, gy, gx = np.meshgrid(xs, xs, xs, indexing="ij")
        grad = np.zeros((n, n, n, 9))
        grad[..., 0] = 0.05 * np.cos(gx) * np.cos(gy)
        grad[..., 1] = -0.05 * np.sin(gx) * np.sin(gy)
        grad[..., 3 + 1] = 0.04 * np.cos(gy) * np.cos(gz)
        grad[..., 3 + 2] = -0.04 * np.sin(gy) * np.sin(gz)
        grad[..., 6 + 2] = 0.03 * np.cos(gz) * np.cos(gx)
        grad[..., 6 + 0] = -0.03 * np.sin(gz) * np.sin(gx)
        return np.eye(3).reshape(9) - grad

    def test_second_order_convergence(self):
        # Interior error on an analytic field must shrink ~4x per halving.
        errors = []
        base_extent = 1.6
        for factor in (1, 2, 4):
            n = 8 * factor + 1
            h = base_extent / (n - 1)
            disp = self._sinusoid_displacement(n, h)
            jac = jacobian_field(disp)
            exact = self._sinusoid_jacobian_exact(n, h)
            interior = (slice(1, -1),) * 3
            errors.append(np.abs(jac.data[interior] - exact[interior]).max())
        order1 = np.log2(errors[0] / errors[1])
        order2 = np.log2(errors[1] / errors[2])
        assert order1 >= 1.9
        assert order2 >= 1.9

    def test_matches_forward_difference_oracle(self, rng):
        # Independent O(h) scheme agrees to O(h) on a smooth random field.
        n, h = 9, 0.25
        xs = np.arange(n) * h
        gz, gy, gx = np.meshgrid(xs, xs, xs, indexing="ij")
        u = np.stack(
            [
                0.1 * np.sin(gx + 0.3) * np.cos(gy),
                0.1 * np.cos(gy + gz),
                0.1 * np.sin(gz) * np.cos(gx - 0.2),
            ],
            axis=-1,
        )
        jac = jacobian_field(Volume(u, (h, h, h)))
        for _ in range(60):
            x, y, z = (int(v) for v in rng.integers(1, n - 2, size=3))
            for r in range(3):
                fwd = {
                    0: (u[z, y, x + 1, r] - u[z, y, x, r]) / h,
                    1: (u[z, y + 1, x, r] - u[z, y, x, r]) / h,
                    2: (u[z + 1, y, x, r] - u[z, y, x, r]) / h,
                }
                for c in range(3):
                    got = (1.0 if r == c else 0.0) - fwd[c]
                    assert abs(jac.data[z, y, x, 3 * r + c] - got) < 0.1 * h

    def test_rejects_small_dims_and_wrong_channels(self):
        with pytest.raises(VolumeError, match="dims"):
            jacobian_field(Volume(np.zeros((1, 4, 4, 3))))
        with pytest.raises(VolumeError, match="channels"):
            jacobian_field(Volume(np.zeros((4, 4, 4, 2))))


class TestDeformationTensor:
    def test_identity(self):
        assert np.abs(deformation_tensor(np.eye(3)) - np.eye(3)).max() < 1e-14

    def test_rotation_gives_identity(self, rng):
        for _ in range(50):
            r = random_rotation(rng)
            assert np.abs(deformation_tensor(r) - np.eye(3)).max() < 1e-12

    def test_diagonal(self):
        phi = deformation_tensor(np.diag([2.0, 0.5, 1.0]))
        assert np.abs(phi - np.diag([2.0, 0.5, 1.0])).max() < 1e-12

    def test_result_symmetric_and_matches_det(self, rng):
        for _ in range(100):
            j = np.eye(3) + 0.4 * rng.standard_normal((3, 3))
            phi = deformation_tensor(j)
            assert np.array_equal(phi, phi.T)
            det_j = abs(np.linalg.det(j))
            if det_j > 1e-3:  # clamp-free region
                assert abs(np.linalg.det(phi) - det_j) < 1e-9 * det_j

    def test_degenerate_jacobian_clamped(self):
        j = np.zeros((3, 3))
        phi = deformation_tensor(j)
        w, _ = sym_eigen(phi)
        assert w[2] >= np.sqrt(EIG_FLOOR) * (1 - 1e-12)
        assert np.linalg.det(phi) >= EIG_FLOOR**3

    def test_field_counts_clamps(self):
        data = np.zeros((2, 2, 2, 9))
        data[..., :] = np.eye(3).reshape(9)
        data[0, 0, 0] = 0.0  # one singular voxel
        phi, clamps = deformation_tensor_field(Volume(data))
        assert clamps == 1
        assert phi.channels == 6

    def test_field_matches_scalar(self, rng):
        data = np.eye(3).reshape(9) + 0.3 * rng.standard_normal((3, 3, 3, 9))
        jac = Volume(data)
        phi, _ = deformation_tensor_field(jac)
        for z in range(3):
            for y in range(3):
                for x in range(3):
                    one = deformation_tensor(jac.at(x, y, z).reshape(3, 3))
                    assert np.abs(sym6_to_mat(phi.at(x, y, z)) - one).max() < 1e-12


class TestLogExp:
    def test_log_identity_is_zero(self):
        assert np.array_equal(tensor_log(np.eye(3)), np.zeros((3, 3)))

    def test_log_of_scaled_identity(self):
        got = tensor_log(np.diag([np.e, 1.0, 1.0]))
        assert np.abs(got - np.diag([1.0, 0.0, 0.0])).max() < 1e-14

    def test_round_trip_random_spd(self, rng):
        for _ in range(200):
            phi = random_spd(rng)
            back = tensor_exp(tensor_log(phi))
            rel = np.linalg.norm(back - phi) / np.linalg.norm(phi)
            assert rel < 1e-8

    def test_log_below_floor_raises(self):
        with pytest.raises(VolumeError, match="floor"):
            tensor_log(np.diag([1.0, 1.0, 1e-9]))

    def test_field_round_trip(self, rng):
        mats = np.stack([mat_to_sym6(random_spd(rng)) for _ in range(27)])
        phi = Volume(mats.reshape(3, 3, 3, 6))
        back = tensor_exp_field(log_tensor_field(phi))
        rel = np.abs(back.data - phi.data).max() / np.abs(phi.data).max()
        assert rel < 1e-8

    def test_log_field_rejects_below_floor(self):
        data = np.zeros((2, 2, 2, 6))
        data[..., :3] = 1.0
        data[1, 1, 1, :3] = (1.0, 1.0, 1e-9)
        with pytest.raises(VolumeError, match="floor"):
            log_tensor_field(Volume(data))


class TestLogDistance:
    def test_equal_inputs_give_zero(self, rng):
        l1 = random_symmetric(rng)
        assert log_distance_voxel(l1, l1) == 0.0

    def test_isotropic_analytic_value(self):
        l1 = np.log(2.0) * np.eye(3)  # log of 2I
        l2 = np.zeros((3, 3))         # log of I
        expected = np.sqrt(3.0) * np.log(2.0)
        assert abs(log_distance_voxel(l1, l2) - expected) < 1e-14
        assert abs(expected - 1.2005) < 1e-4

    def test_matches_trace_bruteforce(self, rng):
        for _ in range(200):
            l1 = random_symmetric(rng)
            l2 = random_symmetric(rng)
            m = l1 - l2
            expected = np.sqrt(np.trace(m @ m))
            assert abs(log_distance_voxel(l1, l2) - expected) < 1e-12 * (1 + expected)

    def test_metric_axioms(self, rng):
        for _ in range(500):
            a, b, c = (random_symmetric(rng) for _ in range(3))
            dab = log_distance_voxel(a, b)
            dba = log_distance_voxel(b, a)
            dac = log_distance_voxel(a, c)
            dcb = log_distance_voxel(c, b)
            assert dab >= 0.0
            assert dab == dba  # exact symmetry
            assert dab <= dac + dcb + 1e-12

    def test_identity_of_indiscernibles(self, rng):
        a = random_symmetric(rng)
        b = a + 1e-16 * np.eye(3)
        assert log_distance_voxel(a, b) < 1e-12

    def test_rotation_invariance(self, rng):
        for _ in range(200):
            l1, l2 = random_symmetric(rng), random_symmetric(rng)
            r = random_rotation(rng)
            base = log_distance_voxel(l1, l2)
            rotated = log_distance_voxel(r @ l1 @ r.T, r @ l2 @ r.T)
            assert abs(base - rotated) < 1e-10 * (1 + base)

    def test_field_matches_scalar_bitwise(self, rng):
        l1 = Volume(0.4 * rng.standard_normal((3, 4, 5, 6)))
        l2 = Volume(0.4 * rng.standard_normal((3, 4, 5, 6)))
        field = log_distance_field(l1, l2)
        for z in range(3):
            for y in range(4):
                for x in range(5):
                    one = log_distance_voxel(
                        sym6_to_mat(l1.at(x, y, z)), sym6_to_mat(l2.at(x, y, z))
                    )
                    assert field[z, y, x] == one

    def test_rejects_asymmetric_and_nonfinite(self):
        bad = np.eye(3).copy()
        bad[0, 1] = 1.0
        with pytest.raises(VolumeError):
            log_distance_voxel(bad, np.eye(3))
        nan = np.full((3, 3), np.nan)
        with pytest.raises(VolumeError):
            log_distance_voxel(nan, nan)


class TestFusedPipeline:
    def test_zero_displacement_gives_zero_log(self):
        disp = Volume(np.zeros((4, 4, 4, 3)))
        log, clamps = displacement_to_log_tensor(disp)
        assert clamps == 0
        assert np.abs(log.data).max() == 0.0

    def test_fused_matches_chained(self, rng):
        disp = Volume(0.05 * rng.standard_normal((5, 5, 5, 3)), (1.0, 1.0, 1.0))
        fused, clamps = displacement_to_log_tensor(disp)
        assert clamps == 0
        jac = jacobian_field(disp)
        phi, _ = deformation_tensor_field(jac)
        chained = log_tensor_field(phi)
        assert np.abs(fused.data - chained.data).max() < 1e-10

    def test_det_from_log_matches_jacobian_det(self, rng):
        disp = Volume(0.05 * rng.standard_normal((5, 5, 5, 3)))
        log, _ = displacement_to_log_tensor(disp)
        jac = jacobian_field(disp)
        det_j = np.abs(np.linalg.det(jac.data.reshape(5, 5, 5, 3, 3)))
        assert np.abs(det_from_log(log) - det_j).max() < 1e-10
