import logging

import numpy as np
import pytest

from fruitmap.geometry import CameraIntrinsics, CameraPose
from fruitmap.mapping import (
    FrameInput,
    MapConfig,
    PanopticMap,
    TsdfSubmap,
    export_map,
    sample_submap_points,
)
from fruitmap.meshes import boundary_edge_count, is_watertight, trilinear_interpolate
from fruitmap.synth import look_at

K = CameraIntrinsics(fx=260.0, fy=260.0, cx=159.5, cy=119.5, width=320, height=240)


def sphere_depth_image(center, radius, camera, K=K):
    """Analytic z-depth image of one sphere; 0 where the ray misses."""
    ys, xs = np.mgrid[0:K.height, 0:K.width]
    dirs = np.column_stack([
        (xs.ravel() + 0.5 - K.cx) / K.fx,
        (ys.ravel() + 0.5 - K.cy) / K.fy,
        np.ones(xs.size),
    ]) @ camera.rotation.T
    oc = camera.center - np.asarray(center, float)
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    hit = disc > 0
    t = np.where(hit, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), 0.0)
    t = np.where(t > 0, t, 0.0)
    return t.reshape(K.height, K.width)


def plane_frame(depth_value=0.6, index=0):
    depth = np.full((K.height, K.width), depth_value)
    return FrameInput(index=index, depth=depth, masks={}, camera=CameraPose.identity())


class TestTsdfIntegration:
    def test_plane_zero_crossing(self):
        pmap = PanopticMap(K, MapConfig())
        pmap.integrate_frame(plane_frame(0.6))
        mesh = pmap.background.extract_mesh()
        assert not mesh.is_empty()
        # the reconstructed surface sits at the plane depth within a voxel
        z = mesh.vertices[:, 2]
        assert np.abs(z - 0.6).max() < pmap.background.voxel_size

    def test_repeated_frame_doubles_weight_keeps_tsdf(self):
        pmap = PanopticMap(K, MapConfig())
        pmap.integrate_frame(plane_frame(0.6, 0))
        d1 = pmap.background._tsdf.copy()
        w1 = pmap.background._weight.copy()
        pmap.integrate_frame(plane_frame(0.6, 1))
        np.testing.assert_allclose(pmap.background._tsdf, d1, atol=1e-12)
        np.testing.assert_allclose(pmap.background._weight, 2 * w1, atol=1e-12)

    def test_tsdf_bound_invariant(self):
        pmap = PanopticMap(K, MapConfig())
        for i in range(3):
            pmap.integrate_frame(plane_frame(0.5 + 0.05 * i, i))
        sub = pmap.background
        assert np.abs(sub._tsdf).max() <= sub.truncation + 1e-12

    def test_weight_cap(self):
        cfg = MapConfig(weight_cap=3.0)
        pmap = PanopticMap(K, cfg)
        for i in range(6):
            pmap.integrate_frame(plane_frame(0.6, i))
        assert pmap.background._weight.max() <= 3.0 + 1e-12


def make_sphere_views(center, radius, n_views=12, orbit_radius=0.4):
    frames = []
    for i in range(n_views):
        a = 2 * np.pi * i / n_views
        pos = np.asarray(center) + orbit_radius * np.array([np.cos(a), np.sin(a), 0.3 * np.sin(2 * a)])
        cam = look_at(pos, np.asarray(center, float))
        depth = sphere_depth_image(center, radius, cam)
        mask = depth > 0
        frames.append(FrameInput(index=i, depth=depth, masks={1: mask}, camera=cam))
    return frames


class TestSphereFusion:
    @pytest.fixture(scope="class")
    def fused(self):
        pmap = PanopticMap(K, MapConfig())
        for frame in make_sphere_views(np.array([0.0, 0.0, 0.0]), 0.05):
            pmap.integrate_frame(frame)
        return pmap

    def test_single_submap(self, fused):
        assert len(fused.instances) == 1

    def test_mesh_radius_error_below_voxel(self, fused):
        sub = fused.instances[1]
        mesh = sub.extract_mesh()
        assert not mesh.is_empty()
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert np.abs(radii - 0.05).max() < sub.voxel_size

    def test_mesh_watertight(self, fused):
        mesh = fused.instances[1].extract_mesh()
        assert boundary_edge_count(mesh) == 0
        assert is_watertight(mesh)

    def test_vertex_tsdf_interpolates_to_zero(self, fused):
        sub = fused.instances[1]
        D, W, origin = sub.dense()
        mesh = sub.extract_mesh()
        vals = trilinear_interpolate(D, origin, sub.voxel_size, mesh.vertices)
        assert np.abs(vals).max() < 0.1 * sub.voxel_size

    def test_sampled_points_on_surface(self, fused):
        mesh = fused.instances[1].extract_mesh()
        pts = sample_submap_points(mesh, 500, seed=1)
        radii = np.linalg.norm(pts, axis=1)
        assert np.abs(radii - 0.05).max() < 2 * fused.instances[1].voxel_size

    def test_sampling_deterministic(self, fused):
        mesh = fused.instances[1].extract_mesh()
        np.testing.assert_array_equal(sample_submap_points(mesh, 100, seed=3),
                                      sample_submap_points(mesh, 100, seed=3))


class TestAssociation:
    def test_cold_start_allocates(self):
        pmap = PanopticMap(K, MapConfig())
        cam = look_at(np.array([0.4, 0.0, 0.0]), np.zeros(3))
        d1 = sphere_depth_image([0.0, 0.06, 0.0], 0.04, cam)
        d2 = sphere_depth_image([0.0, -0.06, 0.0], 0.04, cam)
        depth = np.where(d1 > 0, d1, d2)
        frame = FrameInput(0, depth, {1: d1 > 0, 2: d2 > 0}, cam)
        assignment = pmap.integrate_frame(frame)
        assert sorted(assignment.values()) == [1, 2]
        assert len(pmap.instances) == 2

    def test_reassociation_after_small_motion(self):
        pmap = PanopticMap(K, MapConfig())
        centers = [np.array([0.0, 0.06, 0.0]), np.array([0.0, -0.06, 0.0])]
        for i, ox in enumerate((0.0, 0.01)):  # camera moves 1 cm
            cam = look_at(np.array([0.4, ox, 0.0]), np.zeros(3))
            d1 = sphere_depth_image(centers[0], 0.04, cam)
            d2 = sphere_depth_image(centers[1], 0.04, cam)
            depth = np.where(d1 > 0, d1, d2)
            frame = FrameInput(i, depth, {1: d1 > 0, 2: d2 > 0}, cam)
            assignment = pmap.integrate_frame(frame)
        assert len(pmap.instances) == 2  # no new submaps on the second frame
        assert sorted(assignment.values()) == [1, 2]

    def test_depth_gate_splits_fruit_behind_fruit(self):
        pmap = PanopticMap(K, MapConfig())
        cam = look_at(np.array([0.4, 0.0, 0.0]), np.zeros(3))
        near = sphere_depth_image([0.0, 0.0, 0.0], 0.04, cam)
        frame = FrameInput(0, near, {1: near > 0}, cam)
        pmap.integrate_frame(frame)
        # identical 2D mask, but the object is half a meter farther
        far = np.where(near > 0, near + 0.5, 0.0)
        frame2 = FrameInput(1, far, {1: near > 0}, cam)
        assignment = pmap.integrate_frame(frame2)
        assert assignment[1] == 2  # new submap, not merged
        assert len(pmap.instances) == 2

    def test_association_deterministic_replay(self):
        log1, log2 = [], []
        for log in (log1, log2):
            pmap = PanopticMap(K, MapConfig())
            for frame in make_sphere_views(np.zeros(3), 0.05, n_views=5):
                log.append(dict(pmap.integrate_frame(frame)))
        assert log1 == log2

    def test_tiny_masks_skipped(self):
        pmap = PanopticMap(K, MapConfig(min_mask_pixels=20))
        cam = CameraPose.identity()
        depth = np.full((K.height, K.width), 0.5)
        tiny = np.zeros_like(depth, dtype=bool)
        tiny[0, :5] = True
        frame = FrameInput(0, depth, {1: tiny}, cam)
        assignment = pmap.integrate_frame(frame)
        assert assignment == {}
        assert len(pmap.instances) == 0


class TestFreezeLifecycle:
    def make_map_with_one_instance(self):
        pmap = PanopticMap(K, MapConfig(freeze_after=10))
        frames = make_sphere_views(np.zeros(3), 0.05, n_views=1)
        pmap.integrate_frame(frames[0])
        return pmap

    def test_freeze_after_unobserved(self):
        pmap = self.make_map_with_one_instance()
        for i in range(10):
            pmap.integrate_frame(plane_frame(0.8, index=i + 1))
            newly = pmap.update_frozen()
        assert newly == [1]
        assert pmap.instances[1].frozen

    def test_reobservation_resets_counter(self):
        pmap = self.make_map_with_one_instance()
        for i in range(5):
            pmap.integrate_frame(plane_frame(0.8, index=i + 1))
            pmap.update_frozen()
        # re-observe at frame 6
        pmap.integrate_frame(make_sphere_views(np.zeros(3), 0.05, n_views=1)[0])
        assert pmap.instances[1].unobserved_count == 0
        for i in range(9):
            pmap.integrate_frame(plane_frame(0.8, index=i + 7))
            newly = pmap.update_frozen()
            assert newly == []
        pmap.integrate_frame(plane_frame(0.8, index=99))
        assert pmap.update_frozen() == [1]

    def test_flush_freezes_stragglers(self):
        pmap = self.make_map_with_one_instance()
        assert pmap.freeze_all() == [1]
        assert pmap.freeze_all() == []

    def test_frozen_rejects_integration(self, caplog):
        pmap = self.make_map_with_one_instance()
        pmap.freeze_all()
        sub = pmap.instances[1]
        d_before = sub._tsdf.copy()
        frame = make_sphere_views(np.zeros(3), 0.05, n_views=1)[0]
        with caplog.at_level(logging.WARNING):
            sub.integrate(np.zeros((1, 3)), np.array([[0, 0, 1.0]]),
                          frame.camera, K, frame.depth, np.ones_like(frame.depth, bool))
        assert "frozen" in caplog.text
        np.testing.assert_array_equal(sub._tsdf, d_before)


class TestDegenerateBlob:
    def test_isolated_negative_voxel_closed_surface(self):
        sub = TsdfSubmap(1, 0.003, 0.012, "instance")
        idx = sub._ensure_blocks(np.array([[0, 0, 0]]))
        # one interior voxel below zero, observed positive neighbors
        sub._tsdf[idx[0]][:] = 0.01
        sub._weight[idx[0]][:] = 1.0
        sub._tsdf[idx[0]][4, 4, 4] = -0.01
        mesh = sub.extract_mesh()
        assert not mesh.is_empty()
        assert boundary_edge_count(mesh) == 0


class TestMapValidation:
    def test_resolution_invariant_enforced(self):
        with pytest.raises(ValueError):
            PanopticMap(K, MapConfig(voxel_size_instance=0.01,
                                     voxel_size_background=0.01))

    def test_empty_submap_mesh(self):
        sub = TsdfSubmap(1, 0.003, 0.012, "instance")
        assert sub.extract_mesh().is_empty()

    def test_sample_empty_mesh_rejected(self):
        sub = TsdfSubmap(1, 0.003, 0.012, "instance")
        with pytest.raises(ValueError):
            sample_submap_points(sub.extract_mesh(), 10)


class TestExport:
    def test_manifest_and_meshes(self, tmp_path):
        pmap = PanopticMap(K, MapConfig())
        for frame in make_sphere_views(np.zeros(3), 0.05, n_views=3):
            pmap.integrate_frame(frame)
        pmap.freeze_all()
        export_map(pmap, tmp_path)
        manifest = (tmp_path / "map_manifest.txt").read_text()
        assert "submap 0 class background" in manifest
        assert "submap 1 class instance" in manifest
        assert "frozen 1" in manifest
        assert (tmp_path / "submap_001.ply").exists()

    def test_export_deterministic(self, tmp_path):
        for sub_dir in ("a", "b"):
            pmap = PanopticMap(K, MapConfig())
            for frame in make_sphere_views(np.zeros(3), 0.05, n_views=2):
                pmap.integrate_frame(frame)
            export_map(pmap, tmp_path / sub_dir)
        for f1 in sorted((tmp_path / "a").glob("*")):
            f2 = tmp_path / "b" / f1.name
            assert f1.read_bytes() == f2.read_bytes()
