import numpy as np
import pytest

from fruitmap.decoders import (
    MlpDecoder,
    SphereDecoder,
    load_prior,
    reconstruct_mesh,
    save_prior,
    sdf_forward,
    sdf_forward_with_jacobian,
    ShapePriorModel,
)
from fruitmap.meshes import is_watertight


def finite_difference_jacobians(decoder, x, z, h=1e-6):
    """Central-difference oracle for (dv_dx, dv_dz) at a single point."""
    dv_dx = np.empty(3)
    for k in range(3):
        e = np.zeros(3)
        e[k] = h
        dv_dx[k] = (decoder(x + e, z)[0] - decoder(x - e, z)[0]) / (2 * h)
    dv_dz = np.empty(decoder.latent_size)
    for k in range(decoder.latent_size):
        e = np.zeros(decoder.latent_size)
        e[k] = h
        dv_dz[k] = (decoder(x, z + e)[0] - decoder(x, z - e)[0]) / (2 * h)
    return dv_dx, dv_dz


class TestSphereDecoder:
    def test_on_surface(self):
        dec = SphereDecoder(base_radius=0.04)
        v = sdf_forward(dec, np.array([[0.04, 0.0, 0.0]]), np.zeros(32))
        assert v[0] == pytest.approx(0.0, abs=1e-15)

    def test_center(self):
        dec = SphereDecoder(base_radius=0.04)
        v = sdf_forward(dec, np.zeros((1, 3)), np.zeros(32))
        assert v[0] == pytest.approx(-0.04, abs=1e-15)

    def test_unit_radial_gradient(self):
        dec = SphereDecoder(base_radius=0.04)
        _, dv_dx, _ = sdf_forward_with_jacobian(dec, np.array([[0.04, 0.0, 0.0]]), np.zeros(32))
        np.testing.assert_allclose(dv_dx[0], [1, 0, 0], atol=1e-15)

    def test_latent_derivative_closed_form(self):
        dec = SphereDecoder(base_radius=0.04)
        z = np.zeros(32)
        z[0] = 0.3
        _, _, dv_dz = sdf_forward_with_jacobian(dec, np.array([[0.1, 0.0, 0.0]]), z)
        assert dv_dz[0, 0] == pytest.approx(-0.04 * np.exp(0.3), rel=1e-14)
        np.testing.assert_array_equal(dv_dz[0, 1:], 0.0)

    def test_latent_scales_radius(self):
        dec = SphereDecoder(base_radius=0.04)
        z = np.zeros(32)
        z[0] = np.log(2.0)
        v = dec(np.array([[0.08, 0.0, 0.0]]), z)
        assert v[0] == pytest.approx(0.0, abs=1e-15)

    def test_gradients_match_closed_form_everywhere(self):
        dec = SphereDecoder(base_radius=0.04)
        rng = np.random.default_rng(0)
        x = rng.uniform(-0.1, 0.1, size=(64, 3))
        z = rng.normal(0, 0.3, size=32)
        v, dv_dx, dv_dz = dec.jacobians(x, z)
        norm = np.linalg.norm(x, axis=1)
        np.testing.assert_allclose(v, norm - 0.04 * np.exp(z[0]), atol=1e-12)
        np.testing.assert_allclose(dv_dx, x / norm[:, None], atol=1e-12)
        np.testing.assert_allclose(dv_dz[:, 0], -0.04 * np.exp(z[0]), atol=1e-12)


@pytest.fixture(scope="module")
def decoder():
    return MlpDecoder(latent_size=8, hidden=(16, 16, 16, 16),
                      rng=np.random.default_rng(5))


class TestMlpDecoder:
    def test_forward_shapes(self, decoder):
        x = np.random.default_rng(0).normal(size=(10, 3)) * 0.05
        v = decoder(x, np.zeros(8))
        assert v.shape == (10,)
        assert np.all(np.isfinite(v))

    def test_jacobians_match_finite_differences(self, decoder):
        rng = np.random.default_rng(1)
        worst = 0.0
        for _ in range(100):
            x = rng.uniform(-0.08, 0.08, 3)
            z = rng.normal(0, 0.3, 8)
            v, dv_dx, dv_dz = decoder.jacobians(x[None], z)
            fd_x, fd_z = finite_difference_jacobians(decoder, x[None], z)
            scale = max(np.abs(fd_x).max(), np.abs(fd_z).max(), 1e-9)
            err = max(np.abs(dv_dx[0] - fd_x).max(), np.abs(dv_dz[0] - fd_z).max()) / scale
            worst = max(worst, err)
        assert worst < 1e-4

    def test_per_point_codes_match_broadcast(self, decoder):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(6, 3)) * 0.05
        z = rng.normal(size=8)
        zm = np.tile(z, (6, 1))
        np.testing.assert_array_equal(decoder(x, z), decoder(x, zm))

    def test_param_gradients_match_finite_differences(self, decoder):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(5, 3)) * 0.05
        z = rng.normal(size=(5, 8)) * 0.3
        upstream = rng.normal(size=5)

        def objective():
            return float(np.dot(decoder(x, z), upstream))

        _, grads, dz = decoder.value_and_param_gradients(x, z, upstream)
        h = 1e-6
        params = decoder.parameters()
        for arr, g in zip(params, grads):
            flat = arr.ravel()
            for k in rng.choice(flat.size, size=min(5, flat.size), replace=False):
                old = flat[k]
                flat[k] = old + h
                fp = objective()
                flat[k] = old - h
                fm = objective()
                flat[k] = old
                num = (fp - fm) / (2 * h)
                assert g.ravel()[k] == pytest.approx(num, rel=2e-4, abs=1e-7)
        # latent gradients
        for i in (0, 3):
            for k in (0, 5):
                old = z[i, k]
                z[i, k] = old + h
                fp = objective()
                z[i, k] = old - h
                fm = objective()
                z[i, k] = old
                assert dz[i, k] == pytest.approx((fp - fm) / (2 * h), rel=2e-4, abs=1e-7)

    def test_determinism_of_construction(self):
        d1 = MlpDecoder(latent_size=4, hidden=(8, 8, 8, 8), rng=np.random.default_rng(9))
        d2 = MlpDecoder(latent_size=4, hidden=(8, 8, 8, 8), rng=np.random.default_rng(9))
        for a, b in zip(d1.parameters(), d2.parameters()):
            np.testing.assert_array_equal(a, b)

    def test_invalid_skip_layer(self):
        with pytest.raises(ValueError):
            MlpDecoder(hidden=(8, 8), skip_layer=0)

    def test_code_size_mismatch_rejected(self, decoder):
        with pytest.raises(ValueError):
            decoder(np.zeros((2, 3)), np.zeros(5))


class TestReconstructMesh:
    def test_sphere_level_set(self):
        dec = SphereDecoder(base_radius=0.04)
        mesh = reconstruct_mesh(dec, np.zeros(32), grid_resolution=64, bounds=0.08)
        cell = 0.16 / 63
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert radii.min() > 0.04 - cell
        assert radii.max() < 0.04 + cell

    def test_sphere_volume(self):
        dec = SphereDecoder(base_radius=0.04)
        mesh = reconstruct_mesh(dec, np.zeros(32), grid_resolution=64, bounds=0.08)
        assert mesh.volume() == pytest.approx(4 / 3 * np.pi * 0.04**3, rel=0.05)

    def test_watertight(self):
        dec = SphereDecoder(base_radius=0.05)
        mesh = reconstruct_mesh(dec, np.zeros(32), grid_resolution=48, bounds=0.08)
        assert is_watertight(mesh)

    def test_degenerate_code_empty_mesh(self):
        dec = SphereDecoder(base_radius=1e6)  # surface far outside grid
        mesh = reconstruct_mesh(dec, np.zeros(32), grid_resolution=16, bounds=0.08)
        assert mesh.is_empty()


class TestPriorFile:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        dec = MlpDecoder(latent_size=6, hidden=(8, 8, 8, 8), rng=rng)
        model = ShapePriorModel(
            decoder=dec,
            codes=rng.normal(size=(3, 6)),
            loss_history=np.array([1.0, 0.5, 0.2]),
            config={"latent_size": 6, "note": "test"},
        )
        path = tmp_path / "prior.bin"
        save_prior(model, path)
        back = load_prior(path)
        x = rng.normal(size=(7, 3)) * 0.05
        np.testing.assert_array_equal(back.decoder(x, back.codes[1]), dec(x, model.codes[1]))
        np.testing.assert_array_equal(back.codes, model.codes)
        np.testing.assert_array_equal(back.loss_history, model.loss_history)
        assert back.config["note"] == "test"

    def test_deterministic_bytes(self, tmp_path):
        rng = np.random.default_rng(4)
        dec = MlpDecoder(latent_size=6, hidden=(8, 8, 8, 8), rng=rng)
        model = ShapePriorModel(dec, np.zeros((2, 6)), np.zeros(3), {})
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_prior(model, p1)
        save_prior(model, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_wrong_magic(self, tmp_path):
        p = tmp_path / "junk.bin"
        p.write_bytes(b"NOTAPRIORFILE")
        with pytest.raises(ValueError):
            load_prior(p)
