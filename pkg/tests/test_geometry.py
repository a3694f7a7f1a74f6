import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import expm

from fruitmap.geometry import (
    CameraIntrinsics,
    CameraPose,
    Sim3Transform,
    backproject,
    pixel_rays,
    project,
    sim3_apply,
    sim3_exp,
    sim3_log,
    sim3_point_jacobian,
    sim3_retract,
    skew,
    so3_exp,
    so3_log,
)


def quadrature_w_matrix(w, sigma, nodes=80):
    """Independent oracle: W = integral_0^1 e^(u*sigma) expm(u*skew(w)) du
    by Gauss-Legendre quadrature."""
    x, gw = np.polynomial.legendre.leggauss(nodes)
    u = 0.5 * (x + 1.0)
    W = np.zeros((3, 3))
    for ui, wi in zip(u, gw):
        W += 0.5 * wi * np.exp(ui * sigma) * expm(ui * skew(np.asarray(w, float)))
    return W


def random_tangent(rng, rot_max=3.0):
    xi = np.empty(7)
    xi[0:3] = rng.uniform(-1.0, 1.0, 3)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    xi[3:6] = axis * rng.uniform(0.0, rot_max)
    xi[6] = rng.uniform(-0.8, 0.8)
    return xi


class TestSim3Exp:
    def test_identity(self):
        T = sim3_exp(np.zeros(7))
        assert T.scale == pytest.approx(1.0, abs=1e-15)
        np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-15)
        np.testing.assert_allclose(T.translation, np.zeros(3), atol=1e-15)

    def test_pure_rotation_quarter_turn(self):
        T = sim3_exp(np.array([0, 0, 0, 0, 0, np.pi / 2, 0.0]))
        expected = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
        np.testing.assert_allclose(T.rotation, expected, atol=1e-12)
        assert T.scale == pytest.approx(1.0)
        np.testing.assert_allclose(T.translation, np.zeros(3), atol=1e-15)

    def test_scale_with_translation(self):
        xi = np.array([0.1, 0, 0, 0, 0, 0, np.log(2.0)])
        T = sim3_exp(xi)
        assert T.scale == pytest.approx(2.0, rel=1e-12)
        np.testing.assert_allclose(T.rotation, np.eye(3), atol=1e-14)
        # closed form for zero rotation: t = rho * (e^sigma - 1) / sigma
        np.testing.assert_allclose(T.translation, [0.1 / np.log(2.0), 0, 0], rtol=1e-12)
        xi_back = sim3_log(T)
        np.testing.assert_allclose(xi_back, xi, atol=1e-9)

    @pytest.mark.parametrize("seed", range(12))
    def test_translation_matches_quadrature_oracle(self, seed):
        rng = np.random.default_rng(seed)
        xi = random_tangent(rng)
        T = sim3_exp(xi)
        W = quadrature_w_matrix(xi[3:6], xi[6])
        np.testing.assert_allclose(T.translation, W @ xi[0:3], rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("seed", range(8))
    def test_matches_matrix_exponential(self, seed):
        rng = np.random.default_rng(100 + seed)
        xi = random_tangent(rng)
        gen = np.zeros((4, 4))
        gen[:3, :3] = skew(xi[3:6]) + xi[6] * np.eye(3)
        gen[:3, 3] = xi[0:3]
        M = expm(gen)
        np.testing.assert_allclose(sim3_exp(xi).matrix(), M, rtol=1e-9, atol=1e-11)

    def test_near_zero_rotation_stable(self):
        xi = np.array([0.3, -0.2, 0.5, 1e-9, 0, 0, 0.4])
        T = sim3_exp(xi)
        np.testing.assert_allclose(sim3_log(T), xi, atol=1e-12)


class TestSim3LogRoundTrip:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000))
    def test_roundtrip(self, seed):
        rng = np.random.default_rng(seed)
        xi = random_tangent(rng, rot_max=np.pi - 1e-3)
        np.testing.assert_allclose(sim3_log(sim3_exp(xi)), xi, atol=1e-9)

    def test_angle_canonicalized(self):
        # log of a rotation by 350 degrees reports 10 degrees the other way
        xi = np.array([0, 0, 0, 0, 0, np.deg2rad(350.0), 0.0])
        back = sim3_log(sim3_exp(xi))
        assert np.linalg.norm(back[3:6]) == pytest.approx(np.deg2rad(10.0), abs=1e-9)

    def test_near_pi_rotation(self):
        axis = np.array([1.0, 2.0, -0.5])
        axis /= np.linalg.norm(axis)
        for angle in (np.pi - 1e-4, np.pi - 1e-7):
            xi = np.zeros(7)
            xi[3:6] = axis * angle
            np.testing.assert_allclose(sim3_log(sim3_exp(xi)), xi, atol=1e-8)


class TestSim3Apply:
    def test_identity(self):
        T = Sim3Transform.identity()
        np.testing.assert_array_equal(sim3_apply(T, np.array([1.0, 2.0, 3.0])), [1, 2, 3])

    def test_pure_scale(self):
        T = Sim3Transform(2.0, np.eye(3), np.zeros(3))
        np.testing.assert_allclose(sim3_apply(T, np.array([1.0, 0, 0])), [2, 0, 0])

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_homogeneous_matrix_oracle(self, seed):
        rng = np.random.default_rng(seed)
        T = sim3_exp(random_tangent(rng))
        p = rng.uniform(-2, 2, size=(17, 3))
        hom = np.concatenate([p, np.ones((17, 1))], axis=1)
        expected = (T.matrix() @ hom.T).T[:, :3]
        np.testing.assert_allclose(sim3_apply(T, p), expected, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_composition_consistency(self, seed):
        rng = np.random.default_rng(seed)
        T1 = sim3_exp(random_tangent(rng))
        T2 = sim3_exp(random_tangent(rng))
        p = rng.uniform(-1, 1, 3)
        lhs = sim3_apply(T1.compose(T2), p)
        rhs = sim3_apply(T1, sim3_apply(T2, p))
        np.testing.assert_allclose(lhs, rhs, atol=1e-10)

    def test_inverse(self):
        rng = np.random.default_rng(7)
        T = sim3_exp(random_tangent(rng))
        p = rng.uniform(-1, 1, (5, 3))
        np.testing.assert_allclose(sim3_apply(T.inverse(), sim3_apply(T, p)), p, atol=1e-12)


class TestPointJacobian:
    def test_zero_point(self):
        J = sim3_point_jacobian(np.zeros(3))
        np.testing.assert_array_equal(J[:, 0:3], np.eye(3))
        np.testing.assert_array_equal(J[:, 3:6], np.zeros((3, 3)))
        np.testing.assert_array_equal(J[:, 6], np.zeros(3))

    def test_unit_z_rotation_block(self):
        J = sim3_point_jacobian(np.array([0.0, 0.0, 1.0]))
        expected = np.array([[0.0, 1.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
        np.testing.assert_array_equal(J[:, 3:6], expected)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_finite_differences(self, seed):
        # central differences of delta -> exp(delta) @ p at delta = 0
        rng = np.random.default_rng(seed)
        p = rng.uniform(-1.5, 1.5, 3)
        J = sim3_point_jacobian(p)
        h = 1e-6
        J_fd = np.empty((3, 7))
        for k in range(7):
            d = np.zeros(7)
            d[k] = h
            plus = sim3_apply(sim3_exp(d), p)
            minus = sim3_apply(sim3_exp(-d), p)
            J_fd[:, k] = (plus - minus) / (2 * h)
        err = np.abs(J - J_fd).max() / max(np.abs(J_fd).max(), 1e-12)
        assert err < 1e-5

    @pytest.mark.parametrize("seed", range(20))
    def test_left_perturbation_of_transformed_point(self, seed):
        # J of exp(d) @ (T @ p_w) wrt d equals sim3_point_jacobian(T @ p_w)
        rng = np.random.default_rng(1000 + seed)
        T = sim3_exp(random_tangent(rng))
        p_w = rng.uniform(-1, 1, 3)
        p_o = sim3_apply(T, p_w)
        J = sim3_point_jacobian(p_o)
        h = 1e-6
        for k in range(7):
            d = np.zeros(7)
            d[k] = h
            num = (sim3_apply(sim3_retract(T, d), p_w) - sim3_apply(sim3_retract(T, -d), p_w)) / (2 * h)
            np.testing.assert_allclose(J[:, k], num, atol=2e-5 * max(1.0, np.abs(p_o).max()))


class TestCamera:
    K = CameraIntrinsics(fx=525.0, fy=525.0, cx=319.5, cy=239.5, width=640, height=480)

    def test_backproject_principal_point(self):
        p = backproject(np.array([self.K.cx, self.K.cy]), 1.0, self.K)
        np.testing.assert_allclose(p, [0, 0, 1], atol=1e-15)

    def test_backproject_unit_offset(self):
        p = backproject(np.array([self.K.cx + self.K.fx, self.K.cy]), 1.0, self.K)
        np.testing.assert_allclose(p, [1, 0, 1], atol=1e-12)

    def test_backproject_rejects_nonpositive_depth(self):
        with pytest.raises(ValueError):
            backproject(np.array([10.0, 10.0]), 0.0, self.K)
        with pytest.raises(ValueError):
            backproject(np.array([10.0, 10.0]), -0.5, self.K)

    def test_project_backproject_roundtrip(self):
        rng = np.random.default_rng(3)
        uv = np.column_stack([
            rng.uniform(0, self.K.width, 1000),
            rng.uniform(0, self.K.height, 1000),
        ])
        d = rng.uniform(0.2, 5.0, 1000)
        back = project(backproject(uv, d, self.K), self.K)
        assert np.abs(back - uv).max() < 1e-9

    def test_pixel_rays_unit_depth(self):
        uv = np.array([[self.K.cx, self.K.cy], [self.K.cx + self.K.fx, self.K.cy]])
        rays = pixel_rays(uv, self.K)
        np.testing.assert_allclose(rays, [[0, 0, 1], [1, 0, 1]], atol=1e-12)

    def test_pose_roundtrip(self):
        rng = np.random.default_rng(11)
        R = so3_exp(rng.normal(size=3))
        pose = CameraPose(R, rng.normal(size=3))
        p = rng.normal(size=(6, 3))
        np.testing.assert_allclose(pose.world_to_camera(pose.camera_to_world(p)), p, atol=1e-12)

    def test_invalid_intrinsics_rejected(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=-1.0, fy=1.0, cx=0, cy=0, width=10, height=10)
        with pytest.raises(ValueError):
            CameraIntrinsics(fx=1.0, fy=1.0, cx=20, cy=0, width=10, height=10)


class TestValidate:
    def test_accepts_valid(self):
        sim3_exp(random_tangent(np.random.default_rng(0))).validate()

    def test_rejects_bad_scale(self):
        with pytest.raises(ValueError):
            Sim3Transform(-1.0, np.eye(3), np.zeros(3)).validate()

    def test_rejects_non_orthonormal(self):
        with pytest.raises(ValueError):
            Sim3Transform(1.0, np.eye(3) * 1.001, np.zeros(3)).validate()


def test_so3_log_exp_consistency():
    rng = np.random.default_rng(42)
    for _ in range(50):
        w = rng.normal(size=3)
        w = w / np.linalg.norm(w) * rng.uniform(0, np.pi - 1e-6)
        np.testing.assert_allclose(so3_log(so3_exp(w)), w, atol=1e-10)
