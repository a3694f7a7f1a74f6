"""Deterministic synthetic scene and RGB-D sequence generation.

Ground-truth fruits are represented by a dense scalar-field grid in the
canonical frame (the parametric family's inside/outside field, or the SDF of
a latent code under a trained decoder). The exported ground-truth mesh is
the marching-cubes zero set of that grid, and depth rendering marches rays
through the trilinear interpolation of the same grid, so depth, masks, and
meshes are mutually consistent. Occluders and the ground plane intersect in
closed form.

Depth images are z-depth in meters; pixel (x, y) corresponds to the ray
through (x + 0.5, y + 0.5).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .decoders import decoder_volume
from .fruits import (
    FruitParams,
    fruit_bounding_radius,
    fruit_implicit,
    sample_fruit_params,
)
from .geometry import CameraIntrinsics, CameraPose, Sim3Transform, so3_exp
from .meshes import TriangleMesh, marching_cubes_mesh, trilinear_interpolate


@dataclass
class FieldGrid:
    """Dense scalar field with its zero set as the shape surface."""

    values: np.ndarray  # (n, n, n)
    origin: np.ndarray  # world position of voxel (0, 0, 0)
    spacing: float

    def interpolate(self, points: np.ndarray) -> np.ndarray:
        return trilinear_interpolate(self.values, self.origin, self.spacing, points)

    def mesh(self) -> TriangleMesh:
        return marching_cubes_mesh(self.values, 0.0, self.origin, self.spacing)

    def march(self, origins: np.ndarray, dirs: np.ndarray, t0: np.ndarray,
              t1: np.ndarray, step: float, refine_iters: int = 40) -> np.ndarray:
        """First zero crossing along each ray within [t0, t1]; NaN for
        misses. Fixed-step bracketing followed by bisection."""
        n_rays = len(dirs)
        hit_t = np.full(n_rays, np.nan)
        span = float(np.max(t1 - t0)) if n_rays else 0.0
        if span <= 0:
            return hit_t
        n_steps = int(np.ceil(span / step)) + 1
        ts = t0[:, None] + np.linspace(0.0, 1.0, n_steps)[None, :] * (t1 - t0)[:, None]
        chunk = max(1, int(2_000_000 / max(n_steps, 1)))
        for s in range(0, n_rays, chunk):
            sl = slice(s, min(s + chunk, n_rays))
            pts = origins[sl][:, None, :] + ts[sl][:, :, None] * dirs[sl][:, None, :]
            vals = self.interpolate(pts.reshape(-1, 3)).reshape(pts.shape[:2])
            neg = vals < 0.0
            first = neg.argmax(axis=1)
            found = neg.any(axis=1) & (first > 0)
            idx = np.nonzero(found)[0]
            if len(idx) == 0:
                continue
            rows = np.arange(len(vals))[idx]
            lo = ts[sl][rows, first[idx] - 1]
            hi = ts[sl][rows, first[idx]]
            o = origins[sl][idx]
            d = dirs[sl][idx]
            for _ in range(refine_iters):
                mid = 0.5 * (lo + hi)
                vm = self.interpolate(o + mid[:, None] * d)
                neg_m = vm < 0.0
                hi = np.where(neg_m, mid, hi)
                lo = np.where(neg_m, lo, mid)
            hit_t[np.arange(n_rays)[sl][idx]] = 0.5 * (lo + hi)
        return hit_t


@dataclass
class FruitInstance:
    """One placed ground-truth fruit."""

    instance_id: int
    pose_wo: Sim3Transform  # canonical object -> world
    grid: FieldGrid  # canonical frame
    bounding_radius: float  # canonical frame
    params: FruitParams | None = None
    latent: np.ndarray | None = None

    @property
    def pose_ow(self) -> Sim3Transform:
        return self.pose_wo.inverse()

    @property
    def center_world(self) -> np.ndarray:
        return self.pose_wo.translation

    @property
    def world_radius(self) -> float:
        return self.bounding_radius * self.pose_wo.scale

    @property
    def stem_axis_world(self) -> np.ndarray:
        return self.pose_wo.rotation @ np.array([0.0, 0.0, 1.0])

    def canonical_mesh(self) -> TriangleMesh:
        return self.grid.mesh()

    def world_mesh(self) -> TriangleMesh:
        return self.canonical_mesh().transformed(self.pose_wo)


@dataclass
class EllipsoidOccluder:
    center: np.ndarray
    semiaxes: np.ndarray  # (3,)
    rotation: np.ndarray  # (3, 3)


@dataclass
class PlaneOccluder:
    """Infinite plane n . p = offset (used for the ground)."""

    normal: np.ndarray
    offset: float


@dataclass
class SceneSpec:
    fruits: list[FruitInstance]
    occluders: list[EllipsoidOccluder] = field(default_factory=list)
    ground: PlaneOccluder | None = None
    world_bounds: tuple[float, float, float] = (0.5, 0.5, 0.4)


@dataclass
class SceneConfig:
    n_fruits: int = 5
    scale_range: tuple[float, float] = (0.7, 1.4)
    max_tilt_deg: float = 60.0  # hanging fruit: stem axis stays within a cone
    placement_halfwidth: tuple[float, float, float] = (0.25, 0.25, 0.15)
    grid_resolution: int = 64
    grid_margin: float = 1.18
    ground_z: float | None = -0.35
    occlusion_fraction: float = 0.0  # nominal per-fruit occluder coverage
    occluder_distance: float = 0.6  # fractional distance fruit -> camera ring
    max_placement_rejects: int = 1000


@dataclass
class TrajectorySpec:
    n_frames: int = 60
    orbit_radius: float = 0.55
    orbit_height: float = 0.1
    target: np.ndarray = field(default_factory=lambda: np.zeros(3))
    azimuth_start_deg: float = 0.0
    azimuth_end_deg: float = 300.0
    frame_rate: float = 15.0  # metadata only


@dataclass
class NoiseSpec:
    depth_sigma: float = 0.002  # absolute part, meters
    depth_sigma_rel: float = 0.01  # times depth
    depth_dropout: float = 0.0
    mask_boundary_px: int = 0
    mask_false_negative: float = 0.0
    pose_rot_deg: float = 0.0
    pose_trans_mm: float = 0.0

    @staticmethod
    def clean() -> "NoiseSpec":
        return NoiseSpec(depth_sigma=0.0, depth_sigma_rel=0.0)


@dataclass
class RgbdFrame:
    """One synthetic observation with ground-truth annotations."""

    index: int
    depth: np.ndarray  # (h, w) meters, 0 invalid
    masks: dict[int, np.ndarray]  # observed instance masks (noise applied)
    gt_masks: dict[int, np.ndarray]  # pre-occluder ground truth
    camera_true: CameraPose
    camera_reported: CameraPose  # pose perturbation applied
    visibility: dict[int, float]  # observed / ground-truth mask area


def parametric_field_grid(params: FruitParams, resolution: int = 64,
                          margin: float = 1.18) -> FieldGrid:
    half = fruit_bounding_radius(params) * margin
    spacing = 2 * half / (resolution - 1)
    ax = -half + spacing * np.arange(resolution)
    X, Y, Z = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    vals = fruit_implicit(params, pts).reshape(resolution, resolution, resolution)
    return FieldGrid(vals, np.array([-half] * 3), spacing)


def latent_field_grid(decoder, z: np.ndarray, bounding_radius: float,
                      resolution: int = 64, margin: float = 1.18) -> FieldGrid:
    half = bounding_radius * margin
    vol, origin, spacing = decoder_volume(decoder, z, resolution, half)
    return FieldGrid(vol, origin, spacing)


def _random_orientation(rng: np.random.Generator, max_tilt_deg: float) -> np.ndarray:
    """Rotation with the object z-axis tilted at most max_tilt from world z,
    uniform azimuth and uniform spin about the object axis."""
    azimuth = rng.uniform(0.0, 2 * np.pi)
    spin = rng.uniform(0.0, 2 * np.pi)
    cos_max = np.cos(np.deg2rad(max_tilt_deg))
    cos_tilt = rng.uniform(cos_max, 1.0)  # uniform on the spherical cap
    tilt = np.arccos(cos_tilt)
    rz_az = so3_exp(np.array([0.0, 0.0, azimuth]))
    ry_tilt = so3_exp(np.array([0.0, tilt, 0.0]))
    rz_spin = so3_exp(np.array([0.0, 0.0, spin]))
    return rz_az @ ry_tilt @ rz_spin


def generate_scene(seed: int, config: SceneConfig, prior=None) -> SceneSpec:
    """Reproducible scene: fruits drawn from the parametric family, or from
    the latent space of a trained prior when one is supplied (codes are
    blends of two training codes plus a small jitter).

    Raises RuntimeError when non-overlapping placement keeps failing.
    """
    rng = np.random.default_rng(seed)
    fruits: list[FruitInstance] = []
    hw = np.asarray(config.placement_halfwidth, float)

    for i in range(config.n_fruits):
        if prior is not None:
            a, b = rng.integers(0, len(prior.codes), size=2)
            t = rng.uniform(0.2, 0.8)
            z = (1 - t) * prior.codes[a] + t * prior.codes[b]
            z = z + rng.normal(0.0, 0.01, size=z.shape)
            probe = parametric_probe_radius(prior, z)
            grid = latent_field_grid(prior.decoder, z, probe, config.grid_resolution,
                                     config.grid_margin)
            radius = probe
            params = None
            latent = z
        else:
            params = sample_fruit_params(rng)
            grid = parametric_field_grid(params, config.grid_resolution, config.grid_margin)
            radius = fruit_bounding_radius(params)
            latent = None

        scale = rng.uniform(*config.scale_range)
        rotation = _random_orientation(rng, config.max_tilt_deg)
        placed = False
        for _ in range(config.max_placement_rejects):
            center = rng.uniform(-hw, hw)
            world_r = radius * scale
            ok = all(
                np.linalg.norm(center - f.center_world) > world_r + f.world_radius
                for f in fruits)
            if ok:
                placed = True
                break
        if not placed:
            raise RuntimeError(
                f"could not place fruit {i} without overlap after "
                f"{config.max_placement_rejects} attempts")
        pose_wo = Sim3Transform(scale, rotation, center)
        fruits.append(FruitInstance(
            instance_id=i + 1, pose_wo=pose_wo, grid=grid,
            bounding_radius=radius, params=params, latent=latent))

    ground = None
    if config.ground_z is not None:
        ground = PlaneOccluder(np.array([0.0, 0.0, 1.0]), config.ground_z)
    return SceneSpec(fruits=fruits, ground=ground,
                     world_bounds=tuple(config.placement_halfwidth))


def parametric_probe_radius(prior, z: np.ndarray, n_dirs: int = 128) -> float:
    """Bounding radius of a latent shape, probed by coarse sphere tracing of
    the decoder along radial directions."""
    rng = np.random.default_rng(0)
    dirs = rng.normal(size=(n_dirs, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    r = np.full(n_dirs, 0.02)
    for _ in range(24):
        v = prior.decoder(dirs * r[:, None], z)
        r = np.clip(r + v * 0.9, 0.005, 0.2)
    return float(np.max(r) * 1.1)


def attach_occluders(scene: SceneSpec, trajectory: TrajectorySpec,
                     config: SceneConfig) -> None:
    """Place one flattened ellipsoid per fruit between the fruit and the
    mid-trajectory camera, sized to cover roughly `occlusion_fraction` of the
    projected fruit disk."""
    if config.occlusion_fraction <= 0.0:
        return
    mid = 0.5 * (trajectory.azimuth_start_deg + trajectory.azimuth_end_deg)
    a = np.deg2rad(mid)
    cam = trajectory.target + np.array([
        trajectory.orbit_radius * np.cos(a),
        trajectory.orbit_radius * np.sin(a),
        trajectory.orbit_height,
    ])
    for fruit in scene.fruits:
        toward = cam - fruit.center_world
        dist = np.linalg.norm(toward)
        toward /= dist
        # slight lateral offset makes the occlusion one-sided like foliage
        lateral = np.cross(toward, [0.0, 0.0, 1.0])
        lateral /= max(np.linalg.norm(lateral), 1e-9)
        shadow_target = fruit.world_radius * np.sqrt(config.occlusion_fraction)
        center = (fruit.center_world + toward * dist * config.occluder_distance
                  + lateral * 0.35 * fruit.world_radius)
        # from the camera the disk magnifies onto the fruit by 1/(1 - f)
        disk_r = shadow_target * (1.0 - config.occluder_distance) + 0.001
        nz = toward
        nx = lateral
        ny = np.cross(nz, nx)
        scene.occluders.append(EllipsoidOccluder(
            center=center,
            semiaxes=np.array([disk_r, disk_r, 0.002]),
            rotation=np.column_stack([nx, ny, nz]),
        ))


def orbit_poses(trajectory: TrajectorySpec) -> list[CameraPose]:
    """Camera ring looking at the target; camera x right, y down, z forward."""
    poses = []
    azimuths = np.linspace(np.deg2rad(trajectory.azimuth_start_deg),
                           np.deg2rad(trajectory.azimuth_end_deg),
                           trajectory.n_frames)
    target = np.asarray(trajectory.target, float)
    for a in azimuths:
        pos = target + np.array([
            trajectory.orbit_radius * np.cos(a),
            trajectory.orbit_radius * np.sin(a),
            trajectory.orbit_height,
        ])
        poses.append(look_at(pos, target))
    return poses


def look_at(position: np.ndarray, target: np.ndarray,
            up: np.ndarray | None = None) -> CameraPose:
    z = np.asarray(target, float) - np.asarray(position, float)
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0]) if up is None else np.asarray(up, float)
    if abs(z @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(z, up)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return CameraPose(np.column_stack([x, y, z]), np.asarray(position, float))


def _pixel_dirs_world(K: CameraIntrinsics, camera: CameraPose,
                      xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    d = np.column_stack([
        (xs + 0.5 - K.cx) / K.fx,
        (ys + 0.5 - K.cy) / K.fy,
        np.ones(len(xs)),
    ])
    return d @ camera.rotation.T


def _ray_sphere_bracket(origin, dirs, center, radius):
    """z-depth interval where each unnormalized ray is inside the sphere."""
    oc = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4 * a * c
    hit = disc > 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    return hit & (t1 > 0), np.maximum(t0, 1e-4), t1


def render_frame(scene: SceneSpec, camera: CameraPose, K: CameraIntrinsics,
                 noise: NoiseSpec, rng: np.random.Generator,
                 index: int = 0) -> RgbdFrame:
    """Ray-cast one frame: nearest hit over fruits, ground, and occluders."""
    h, w = K.height, K.width
    depth_no_occ = np.full((h, w), np.inf)
    instance_no_occ = np.zeros((h, w), dtype=np.int32)

    # ground plane over the full image
    if scene.ground is not None:
        ys, xs = np.mgrid[0:h, 0:w]
        dirs = _pixel_dirs_world(K, camera, xs.ravel(), ys.ravel())
        denom = dirs @ scene.ground.normal
        num = scene.ground.offset - camera.center @ scene.ground.normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
        t = np.where(t > 0, t, np.inf).reshape(h, w)
        depth_no_occ = np.minimum(depth_no_occ, t)

    # fruits, restricted to their projected bounding boxes
    for fruit in scene.fruits:
        c_cam = camera.world_to_camera(fruit.center_world)
        if c_cam[2] <= 0.05:
            continue
        r_w = fruit.world_radius
        cx = K.fx * c_cam[0] / c_cam[2] + K.cx
        cy = K.fy * c_cam[1] / c_cam[2] + K.cy
        margin = max(K.fx, K.fy) * r_w / max(c_cam[2] - r_w, 1e-3) + 2.0
        x0, x1 = int(max(cx - margin, 0)), int(min(cx + margin + 1, w))
        y0, y1 = int(max(cy - margin, 0)), int(min(cy + margin + 1, h))
        if x0 >= x1 or y0 >= y1:
            continue
        ys, xs = np.mgrid[y0:y1, x0:x1]
        xs, ys = xs.ravel(), ys.ravel()
        dirs = _pixel_dirs_world(K, camera, xs, ys)
        hit, t0, t1 = _ray_sphere_bracket(camera.center, dirs, fruit.center_world, r_w)
        if not hit.any():
            continue
        xs, ys, dirs = xs[hit], ys[hit], dirs[hit]
        t0, t1 = t0[hit], t1[hit]
        # march in the canonical frame where the field grid lives
        T = fruit.pose_ow
        o_obj = T.apply(camera.center)
        d_obj = (T.scale * dirs) @ T.rotation.T
        # keep the object-space march step under 3/4 voxel for every ray
        step = fruit.grid.spacing * 0.75 / max(T.scale * np.linalg.norm(dirs, axis=1).max(), 1e-9)
        t_hit = fruit.grid.march(
            np.broadcast_to(o_obj, d_obj.shape).copy(), d_obj, t0, t1,
            step=step)
        ok = np.isfinite(t_hit)
        closer = ok & (t_hit < depth_no_occ[ys, xs])
        depth_no_occ[ys[closer], xs[closer]] = t_hit[closer]
        instance_no_occ[ys[closer], xs[closer]] = fruit.instance_id

    gt_masks = {f.instance_id: instance_no_occ == f.instance_id for f in scene.fruits}

    # composite occluders
    depth_final = depth_no_occ.copy()
    instance_final = instance_no_occ.copy()
    if scene.occluders:
        ys, xs = np.mgrid[0:h, 0:w]
        dirs = _pixel_dirs_world(K, camera, xs.ravel(), ys.ravel())
        for occ in scene.occluders:
            t = _ray_ellipsoid(camera.center, dirs, occ).reshape(h, w)
            in_front = t < depth_final
            depth_final[in_front] = t[in_front]
            instance_final[in_front] = 0

    masks = {f.instance_id: instance_final == f.instance_id for f in scene.fruits}
    visibility = {}
    for f in scene.fruits:
        gt_area = int(gt_masks[f.instance_id].sum())
        visibility[f.instance_id] = (
            float(masks[f.instance_id].sum()) / gt_area if gt_area else 0.0)

    depth = np.where(np.isfinite(depth_final), depth_final, 0.0)

    # sensor noise
    if noise.depth_sigma > 0 or noise.depth_sigma_rel > 0:
        sig = noise.depth_sigma + noise.depth_sigma_rel * depth
        depth = np.where(depth > 0, np.maximum(depth + rng.normal(0, 1, depth.shape) * sig, 1e-4), 0.0)
    if noise.depth_dropout > 0:
        drop = rng.random(depth.shape) < noise.depth_dropout
        depth = np.where(drop, 0.0, depth)
    noisy_masks = {}
    for fid, m in masks.items():
        if noise.mask_false_negative > 0 and rng.random() < noise.mask_false_negative:
            noisy_masks[fid] = np.zeros_like(m)
            continue
        if noise.mask_boundary_px > 0 and m.any():
            selem = ndimage.generate_binary_structure(2, 1)
            op = ndimage.binary_erosion if rng.random() < 0.5 else ndimage.binary_dilation
            noisy_masks[fid] = op(m, selem, iterations=noise.mask_boundary_px)
        else:
            noisy_masks[fid] = m

    cam_reported = camera
    if noise.pose_rot_deg > 0 or noise.pose_trans_mm > 0:
        w_rot = rng.normal(size=3)
        w_rot = w_rot / max(np.linalg.norm(w_rot), 1e-12) * np.deg2rad(noise.pose_rot_deg) * rng.random()
        dt = rng.normal(size=3)
        dt = dt / max(np.linalg.norm(dt), 1e-12) * noise.pose_trans_mm * 1e-3 * rng.random()
        cam_reported = CameraPose(so3_exp(w_rot) @ camera.rotation, camera.translation + dt)

    return RgbdFrame(
        index=index, depth=depth, masks=noisy_masks, gt_masks=gt_masks,
        camera_true=camera, camera_reported=cam_reported, visibility=visibility)


def _ray_ellipsoid(origin, dirs, occ: EllipsoidOccluder) -> np.ndarray:
    """First positive z-depth intersection with an ellipsoid; inf for miss."""
    o = (origin - occ.center) @ occ.rotation / occ.semiaxes
    d = dirs @ occ.rotation / occ.semiaxes
    a = np.einsum("ij,ij->i", d, d)
    b = 2.0 * d @ o
    c = o @ o - 1.0
    disc = b * b - 4 * a * c
    hit = disc > 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2 * a)
    t1 = (-b + sq) / (2 * a)
    t = np.where(t0 > 1e-4, t0, t1)
    return np.where(hit & (t > 1e-4), t, np.inf)


def render_sequence(scene: SceneSpec, trajectory: TrajectorySpec, noise: NoiseSpec,
                    K: CameraIntrinsics, seed: int = 0) -> list[RgbdFrame]:
    """Render every trajectory frame with per-frame seeded noise."""
    poses = orbit_poses(trajectory)
    root = np.random.SeedSequence(seed)
    frames = []
    for i, (pose, child) in enumerate(zip(poses, root.spawn(len(poses)))):
        frames.append(render_frame(scene, pose, K, noise,
                                   np.random.default_rng(child), index=i))
    return frames
