"""Multi-resolution panoptic TSDF mapping.

One coarse background submap plus one fine submap per fruit instance, each a
sparse 8x8x8-block voxel store fused by band-limited projective TSDF
integration (only voxels within the truncation band of the measured surface
are touched). Instance masks are associated with submaps by rendered-mask
IoU plus a median depth gate; unobserved submaps freeze after a configured
number of frames and are then immutable.

A voxel with integer grid index g has its center at (g + 0.5) * voxel_size
in world coordinates.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import CameraIntrinsics, CameraPose
from .meshes import TriangleMesh, marching_cubes_mesh, sample_surface

logger = logging.getLogger(__name__)

BLOCK = 8

BACKGROUND = "background"
INSTANCE = "instance"


@dataclass
class MapConfig:
    voxel_size_instance: float = 0.003
    voxel_size_background: float = 0.01
    truncation_voxels: float = 4.0
    weight_cap: float = 100.0
    iou_threshold: float = 0.3
    depth_gate: float = 0.05  # median |rendered - measured| (meters)
    freeze_after: int = 10  # consecutive unobserved frames
    mask_render_dilate_px: int = 2
    min_mask_pixels: int = 20


class TsdfSubmap:
    """Sparse block-hashed TSDF volume for one panoptic entity."""

    def __init__(self, submap_id: int, voxel_size: float, truncation: float,
                 kind: str, weight_cap: float = 100.0):
        self.submap_id = submap_id
        self.voxel_size = float(voxel_size)
        self.truncation = float(truncation)
        self.kind = kind
        self.weight_cap = float(weight_cap)
        self.frozen = False
        self.unobserved_count = 0
        self.fit_status = "none"
        self.fit_result = None
        self.completed_mesh: TriangleMesh | None = None
        self._index: dict[tuple[int, int, int], int] = {}
        self._coords = np.zeros((0, 3), dtype=np.int64)
        self._tsdf = np.zeros((0, BLOCK, BLOCK, BLOCK))
        self._weight = np.zeros((0, BLOCK, BLOCK, BLOCK))
        self._mesh_cache: TriangleMesh | None = None

    @property
    def n_blocks(self) -> int:
        return len(self._index)

    def observed_weight(self) -> float:
        return float(self._weight.sum())

    def _ensure_blocks(self, coords: np.ndarray) -> np.ndarray:
        """Allocate any missing blocks; returns storage indices per coord."""
        idx = np.empty(len(coords), dtype=np.int64)
        new = []
        for i, c in enumerate(coords):
            key = (int(c[0]), int(c[1]), int(c[2]))
            j = self._index.get(key)
            if j is None:
                j = len(self._index) + len(new)
                self._index[key] = j
                new.append(key)
            idx[i] = j
        if new:
            n_old = len(self._coords)
            self._coords = np.concatenate([self._coords, np.array(new, dtype=np.int64)])
            grow = np.zeros((len(new), BLOCK, BLOCK, BLOCK))
            self._tsdf = np.concatenate([self._tsdf, grow])
            self._weight = np.concatenate([self._weight, grow.copy()])
            assert len(self._coords) == n_old + len(new)
        return idx

    def integrate(self, points_w: np.ndarray, ray_dirs: np.ndarray,
                  camera: CameraPose, K: CameraIntrinsics, depth: np.ndarray,
                  pixel_ok: np.ndarray) -> None:
        """Fuse one frame's surface points belonging to this submap.

        points_w: (n, 3) backprojected world surface points.
        ray_dirs: (n, 3) unit world ray directions for band allocation.
        pixel_ok: (h, w) bool, pixels this submap may consume.
        """
        if self.frozen:
            logger.warning("submap %d is frozen; integration rejected", self.submap_id)
            return
        if len(points_w) == 0:
            return
        vs = self.voxel_size
        # blocks touched by the truncation band around the measured surface
        probes = np.concatenate([
            points_w - ray_dirs * self.truncation,
            points_w,
            points_w + ray_dirs * self.truncation,
        ])
        blocks = np.unique(np.floor(probes / (vs * BLOCK)).astype(np.int64), axis=0)
        offsets = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1)
                            for k in (-1, 0, 1)], dtype=np.int64)
        blocks = np.unique((blocks[:, None, :] + offsets[None, :, :]).reshape(-1, 3), axis=0)
        idx = self._ensure_blocks(blocks)

        # voxel centers of every touched block
        local = np.stack(np.meshgrid(*([np.arange(BLOCK)] * 3), indexing="ij"), axis=-1)
        centers = ((blocks[:, None, None, None, :] * BLOCK + local[None]) + 0.5) * vs
        flat = centers.reshape(-1, 3)

        cam_pts = camera.world_to_camera(flat)
        z = cam_pts[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.floor(K.fx * cam_pts[:, 0] / z + K.cx).astype(np.int64)
            v = np.floor(K.fy * cam_pts[:, 1] / z + K.cy).astype(np.int64)
        valid = (z > 1e-4) & (u >= 0) & (u < K.width) & (v >= 0) & (v < K.height)
        u_c = np.clip(u, 0, K.width - 1)
        v_c = np.clip(v, 0, K.height - 1)
        meas = depth[v_c, u_c]
        valid &= (meas > 0) & pixel_ok[v_c, u_c]
        sdf = meas - z
        valid &= sdf >= -self.truncation

        upd = np.clip(sdf, -self.truncation, self.truncation)
        shape = (len(blocks), BLOCK, BLOCK, BLOCK)
        valid = valid.reshape(shape)
        upd = upd.reshape(shape)

        D = self._tsdf[idx]
        W = self._weight[idx]
        new_w = np.where(valid, W + 1.0, W)
        D = np.where(valid, (D * W + upd) / np.maximum(new_w, 1e-12), D)
        self._tsdf[idx] = D
        self._weight[idx] = np.minimum(new_w, self.weight_cap)
        self._mesh_cache = None

    def dense(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(tsdf volume, weight volume, world origin of voxel centers)."""
        if self.n_blocks == 0:
            return np.zeros((0, 0, 0)), np.zeros((0, 0, 0)), np.zeros(3)
        gmin = self._coords.min(axis=0) * BLOCK
        gmax = (self._coords.max(axis=0) + 1) * BLOCK
        size = gmax - gmin
        D = np.full(tuple(size), self.truncation)
        W = np.zeros(tuple(size))
        for key, j in self._index.items():
            o = np.array(key, dtype=np.int64) * BLOCK - gmin
            sl = (slice(o[0], o[0] + BLOCK), slice(o[1], o[1] + BLOCK),
                  slice(o[2], o[2] + BLOCK))
            D[sl] = self._tsdf[j]
            W[sl] = self._weight[j]
        origin = (gmin + 0.5) * self.voxel_size
        return D, W, origin

    def extract_mesh(self) -> TriangleMesh:
        """Marching cubes over observed voxels at the native resolution."""
        if self._mesh_cache is not None:
            return self._mesh_cache
        D, W, origin = self.dense()
        if D.size == 0:
            mesh = TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
        else:
            mesh = marching_cubes_mesh(D, 0.0, origin, self.voxel_size, mask=W > 0)
        self._mesh_cache = mesh
        return mesh

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        mesh = self.extract_mesh()
        if mesh.is_empty():
            D, W, origin = self.dense()
            if D.size == 0:
                return np.zeros(3), np.zeros(3)
            return origin, origin + np.array(D.shape) * self.voxel_size
        return mesh.bounds()


def sample_submap_points(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Area-weighted surface point cloud of a submap mesh (with replacement,
    deterministic under the seed)."""
    if mesh.is_empty():
        raise ValueError("cannot sample points from an empty submap mesh")
    if mesh.n_faces < 10:
        logger.warning("submap mesh has only %d triangles; low point coverage",
                       mesh.n_faces)
    pts, _ = sample_surface(mesh, n, np.random.default_rng(seed))
    return pts


@dataclass
class FrameInput:
    """One mapping input frame (already loaded/decoded)."""

    index: int
    depth: np.ndarray
    masks: dict[int, np.ndarray]
    camera: CameraPose


class PanopticMap:
    """Background + per-instance submaps with lifecycle management."""

    def __init__(self, K: CameraIntrinsics, config: MapConfig | None = None):
        self.config = config or MapConfig()
        if not self.config.voxel_size_instance < self.config.voxel_size_background:
            raise ValueError("instance voxels must be finer than background voxels")
        self.K = K
        cfg = self.config
        self.background = TsdfSubmap(
            0, cfg.voxel_size_background,
            cfg.truncation_voxels * cfg.voxel_size_background, BACKGROUND,
            cfg.weight_cap)
        self.instances: dict[int, TsdfSubmap] = {}
        self._next_id = 1

    # -- association -------------------------------------------------------

    def _rendered_instance_views(self, camera: CameraPose):
        """Splat active submap mesh vertices into the frame: per submap a
        dilated mask plus a sparse min-depth map."""
        views = {}
        h, w = self.K.height, self.K.width
        for sid in sorted(self.instances):
            sub = self.instances[sid]
            if sub.frozen:
                continue
            mesh = sub.extract_mesh()
            if mesh.is_empty():
                continue
            cam_pts = camera.world_to_camera(mesh.vertices)
            z = cam_pts[:, 2]
            ok = z > 1e-4
            if not ok.any():
                continue
            u = np.floor(self.K.fx * cam_pts[ok, 0] / z[ok] + self.K.cx).astype(int)
            v = np.floor(self.K.fy * cam_pts[ok, 1] / z[ok] + self.K.cy).astype(int)
            inside = (u >= 0) & (u < w) & (v >= 0) & (v < h)
            if not inside.any():
                continue
            u, v, zz = u[inside], v[inside], z[ok][inside]
            depth_map = np.full((h, w), np.inf)
            np.minimum.at(depth_map, (v, u), zz)
            mask = np.isfinite(depth_map)
            if self.config.mask_render_dilate_px > 0:
                selem = ndimage.generate_binary_structure(2, 2)
                mask = ndimage.binary_dilation(
                    mask, selem, iterations=self.config.mask_render_dilate_px)
            views[sid] = (mask, depth_map)
        return views

    def associate(self, frame: FrameInput) -> dict[int, int]:
        """Assign every sufficiently large predicted mask to an existing
        active submap (best IoU above the threshold, subject to the median
        depth gate) or to a newly allocated one. Returns mask id -> submap id."""
        views = self._rendered_instance_views(frame.camera)
        candidates = []
        mask_ids = [m for m in sorted(frame.masks)
                    if frame.masks[m].sum() >= self.config.min_mask_pixels]
        for mid in mask_ids:
            pred = frame.masks[mid]
            for sid, (rmask, rdepth) in views.items():
                inter = np.logical_and(pred, rmask).sum()
                union = np.logical_or(pred, rmask).sum()
                if union == 0:
                    continue
                iou = inter / union
                if iou < self.config.iou_threshold:
                    continue
                overlap = pred & np.isfinite(rdepth) & (frame.depth > 0)
                if overlap.any():
                    gap = float(np.median(
                        np.abs(rdepth[overlap] - frame.depth[overlap])))
                    if gap > self.config.depth_gate:
                        continue
                candidates.append((iou, mid, sid))

        assignment: dict[int, int] = {}
        used_submaps: set[int] = set()
        for iou, mid, sid in sorted(candidates, key=lambda t: (-t[0], t[1], t[2])):
            if mid in assignment or sid in used_submaps:
                continue
            assignment[mid] = sid
            used_submaps.add(sid)
        for mid in mask_ids:
            if mid not in assignment:
                assignment[mid] = self._allocate_instance()
        return assignment

    def _allocate_instance(self) -> int:
        cfg = self.config
        sid = self._next_id
        self._next_id += 1
        self.instances[sid] = TsdfSubmap(
            sid, cfg.voxel_size_instance,
            cfg.truncation_voxels * cfg.voxel_size_instance, INSTANCE,
            cfg.weight_cap)
        return sid

    # -- integration and lifecycle -----------------------------------------

    def integrate_frame(self, frame: FrameInput,
                        assignment: dict[int, int] | None = None) -> dict[int, int]:
        """Associate (unless given) and fuse one frame; returns the
        assignment used."""
        if assignment is None:
            assignment = self.associate(frame)
        h, w = frame.depth.shape
        ys, xs = np.mgrid[0:h, 0:w]
        dirs_cam = np.column_stack([
            (xs.ravel() + 0.5 - self.K.cx) / self.K.fx,
            (ys.ravel() + 0.5 - self.K.cy) / self.K.fy,
            np.ones(h * w),
        ])
        dirs_w = dirs_cam @ frame.camera.rotation.T
        pts_w = (frame.camera.center + frame.depth.reshape(-1, 1) * dirs_w)
        ray_unit = dirs_w / np.linalg.norm(dirs_w, axis=1, keepdims=True)
        valid = frame.depth.reshape(-1) > 0

        in_any_mask = np.zeros((h, w), dtype=bool)
        for mid, sid in sorted(assignment.items()):
            m = frame.masks[mid]
            in_any_mask |= m
            sel = m.reshape(-1) & valid
            self.instances[sid].integrate(
                pts_w[sel], ray_unit[sel], frame.camera, self.K, frame.depth, m)

        bg_ok = ~in_any_mask
        sel = bg_ok.reshape(-1) & valid
        self.background.integrate(
            pts_w[sel], ray_unit[sel], frame.camera, self.K, frame.depth, bg_ok)

        observed = set(assignment.values())
        for sid in sorted(self.instances):
            sub = self.instances[sid]
            if sub.frozen:
                continue
            if sid in observed:
                sub.unobserved_count = 0
            else:
                sub.unobserved_count += 1
        return assignment

    def update_frozen(self) -> list[int]:
        """Freeze instance submaps unobserved for the configured number of
        consecutive frames; returns newly frozen ids."""
        newly = []
        for sid in sorted(self.instances):
            sub = self.instances[sid]
            if not sub.frozen and sub.unobserved_count >= self.config.freeze_after:
                sub.frozen = True
                newly.append(sid)
        return newly

    def freeze_all(self) -> list[int]:
        """End-of-sequence flush."""
        newly = []
        for sid in sorted(self.instances):
            if not self.instances[sid].frozen:
                self.instances[sid].frozen = True
                newly.append(sid)
        return newly

    def embed_fit_result(self, submap_id: int, fit_result, decoder,
                         grid_resolution: int = 56) -> None:
        """Attach the completed canonical-frame reconstruction, transformed
        into the world frame, to a fitted submap."""
        from .decoders import reconstruct_mesh

        sub = self.instances[submap_id]
        sub.fit_result = fit_result
        if not fit_result.converged:
            sub.fit_status = "failed"
            sub.completed_mesh = None
            return
        bound = 0.1 / min(fit_result.pose.scale, 1.0)
        canonical = reconstruct_mesh(decoder, fit_result.code,
                                     grid_resolution=grid_resolution,
                                     bounds=max(bound, 0.09))
        if canonical.is_empty():
            sub.fit_status = "failed"
            sub.completed_mesh = None
            return
        sub.fit_status = "completed"
        sub.completed_mesh = canonical.transformed(fit_result.pose.inverse())


def export_map(pmap: PanopticMap, out_dir) -> None:
    """One PLY per submap (raw TSDF mesh, plus the completed model when a
    fit succeeded) and a manifest describing every submap."""
    from pathlib import Path

    from .meshes import save_ply

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []

    def describe(sub: TsdfSubmap, mesh_file: str) -> str:
        fields = [f"submap {sub.submap_id}", f"class {sub.kind}",
                  f"voxel {sub.voxel_size:.9g}", f"frozen {int(sub.frozen)}",
                  f"fit {sub.fit_status}", f"mesh {mesh_file}"]
        if sub.fit_result is not None and sub.fit_status == "completed":
            mat = sub.fit_result.pose.matrix().reshape(-1)
            fields.append("pose_ow " + " ".join(f"{v:.9g}" for v in mat))
            fields.append(f"code_norm {np.linalg.norm(sub.fit_result.code):.9g}")
        return " ".join(fields)

    mesh_file = "submap_000_background.ply"
    save_ply(pmap.background.extract_mesh(), out / mesh_file)
    lines.append(describe(pmap.background, mesh_file))
    for sid in sorted(pmap.instances):
        sub = pmap.instances[sid]
        mesh_file = f"submap_{sid:03d}.ply"
        save_ply(sub.extract_mesh(), out / mesh_file)
        if sub.completed_mesh is not None:
            save_ply(sub.completed_mesh, out / f"completed_{sid:03d}.ply")
        lines.append(describe(sub, mesh_file))
    (out / "map_manifest.txt").write_text("\n".join(lines) + "\n")
