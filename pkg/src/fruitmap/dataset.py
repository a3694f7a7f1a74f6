"""On-disk dataset format.

    dataset/
      intrinsics.txt    fx fy cx cy width height
      poses.txt         one line per frame: index timestamp tx ty tz qw qx qy qz
                        (world-from-camera)
      depth/%06d.png    16-bit grayscale, millimeters, 0 = invalid
      masks/%06d.png    8-bit instance map, pixel value = instance id, 0 = none
      gt/manifest.txt   ground-truth poses / axes / mesh files per fruit
      gt/fruit_%03d.ply ground-truth meshes in world frame
      gt/visibility.txt frame index, fruit id, visible fraction

All text files use fixed %.9g float formatting so identical content yields
identical bytes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraIntrinsics, CameraPose, Sim3Transform, rotation_to_quaternion
from .meshes import TriangleMesh, load_ply, save_ply
from .synth import RgbdFrame, SceneSpec

DEPTH_SCALE = 1000.0  # millimeters per meter


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def quaternion_to_rotation(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def write_depth_png(path: Path, depth_m: np.ndarray) -> None:
    mm = np.clip(np.round(depth_m * DEPTH_SCALE), 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def read_depth_png(path: Path) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    return arr.astype(np.float64) / DEPTH_SCALE


def write_mask_png(path: Path, masks: dict[int, np.ndarray], shape: tuple[int, int]) -> None:
    out = np.zeros(shape, dtype=np.uint8)
    for fid in sorted(masks):
        if fid > 255:
            raise ValueError("instance ids above 255 are not representable")
        out[masks[fid]] = fid
    Image.fromarray(out).save(path)


def read_mask_png(path: Path) -> dict[int, np.ndarray]:
    arr = np.asarray(Image.open(path))
    return {int(fid): arr == fid for fid in np.unique(arr) if fid != 0}


def write_intrinsics(path: Path, K: CameraIntrinsics) -> None:
    path.write_text(" ".join([_fmt(K.fx), _fmt(K.fy), _fmt(K.cx), _fmt(K.cy),
                              str(K.width), str(K.height)]) + "\n")


def read_intrinsics(path: Path) -> CameraIntrinsics:
    tok = path.read_text().split()
    return CameraIntrinsics(fx=float(tok[0]), fy=float(tok[1]), cx=float(tok[2]),
                            cy=float(tok[3]), width=int(tok[4]), height=int(tok[5]))


def write_poses(path: Path, poses: list[CameraPose], frame_rate: float) -> None:
    with open(path, "w") as f:
        for i, pose in enumerate(poses):
            q = rotation_to_quaternion(pose.rotation)
            t = pose.translation
            fields = [str(i), _fmt(i / frame_rate)] + [_fmt(v) for v in t] + [_fmt(v) for v in q]
            f.write(" ".join(fields) + "\n")


def read_poses(path: Path) -> list[CameraPose]:
    poses = []
    for line in path.read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        t = np.array([float(x) for x in tok[2:5]])
        q = np.array([float(x) for x in tok[5:9]])
        poses.append(CameraPose(quaternion_to_rotation(q / np.linalg.norm(q)), t))
    return poses


@dataclass
class GroundTruthFruit:
    fruit_id: int
    pose_ow: Sim3Transform  # world -> canonical
    center_world: np.ndarray
    stem_axis_world: np.ndarray
    mesh_file: str

    def load_mesh(self, root: Path) -> TriangleMesh:
        return load_ply(root / self.mesh_file)


def write_ground_truth(out_dir: Path, scene: SceneSpec) -> None:
    """Manifest plus one world-frame PLY mesh per fruit."""
    gt_dir = out_dir / "gt"
    gt_dir.mkdir(parents=True, exist_ok=True)
    lines = []
    for fruit in scene.fruits:
        mesh_file = f"gt/fruit_{fruit.instance_id:03d}.ply"
        save_ply(fruit.world_mesh(), out_dir / mesh_file)
        T = fruit.pose_ow
        mat = T.matrix().reshape(-1)
        fields = ([f"fruit {fruit.instance_id}"]
                  + ["pose_ow"] + [_fmt(v) for v in mat]
                  + ["center"] + [_fmt(v) for v in fruit.center_world]
                  + ["axis"] + [_fmt(v) for v in fruit.stem_axis_world]
                  + ["mesh", mesh_file])
        lines.append(" ".join(fields))
    (gt_dir / "manifest.txt").write_text("\n".join(lines) + ("\n" if lines else ""))


def read_ground_truth(dataset_dir: Path) -> list[GroundTruthFruit]:
    path = Path(dataset_dir) / "gt" / "manifest.txt"
    if not path.exists():
        raise FileNotFoundError(f"ground-truth manifest not found: {path}")
    fruits = []
    for line in path.read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        fid = int(tok[1])
        i_pose = tok.index("pose_ow") + 1
        mat = np.array([float(x) for x in tok[i_pose:i_pose + 16]]).reshape(4, 4)
        scale = float(np.cbrt(np.linalg.det(mat[:3, :3])))
        i_c = tok.index("center") + 1
        center = np.array([float(x) for x in tok[i_c:i_c + 3]])
        i_a = tok.index("axis") + 1
        axis = np.array([float(x) for x in tok[i_a:i_a + 3]])
        mesh_file = tok[tok.index("mesh") + 1]
        fruits.append(GroundTruthFruit(
            fruit_id=fid,
            pose_ow=Sim3Transform(scale, mat[:3, :3] / scale, mat[:3, 3]),
            center_world=center,
            stem_axis_world=axis,
            mesh_file=mesh_file,
        ))
    return fruits


def write_dataset(out_dir: Path, frames: list[RgbdFrame], K: CameraIntrinsics,
                  scene: SceneSpec, frame_rate: float = 15.0) -> None:
    out_dir = Path(out_dir)
    (out_dir / "depth").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    write_intrinsics(out_dir / "intrinsics.txt", K)
    write_poses(out_dir / "poses.txt", [f.camera_reported for f in frames], frame_rate)
    vis_lines = []
    for f in frames:
        write_depth_png(out_dir / "depth" / f"{f.index:06d}.png", f.depth)
        write_mask_png(out_dir / "masks" / f"{f.index:06d}.png", f.masks, f.depth.shape)
        for fid in sorted(f.visibility):
            vis_lines.append(f"{f.index} {fid} {_fmt(f.visibility[fid])}")
    write_ground_truth(out_dir, scene)
    (out_dir / "gt" / "visibility.txt").write_text(
        "\n".join(vis_lines) + ("\n" if vis_lines else ""))


@dataclass
class LoadedFrame:
    index: int
    depth: np.ndarray
    masks: dict[int, np.ndarray]
    camera: CameraPose


class DatasetReader:
    """Iterates the frames of an exported dataset directory."""

    def __init__(self, dataset_dir: Path):
        self.root = Path(dataset_dir)
        if not (self.root / "intrinsics.txt").exists():
            raise FileNotFoundError(f"not a dataset directory: {dataset_dir}")
        self.intrinsics = read_intrinsics(self.root / "intrinsics.txt")
        self.poses = read_poses(self.root / "poses.txt")
        self.depth_files = sorted((self.root / "depth").glob("*.png"))

    def __len__(self) -> int:
        return len(self.depth_files)

    def frame(self, i: int) -> LoadedFrame:
        depth_path = self.depth_files[i]
        index = int(depth_path.stem)
        mask_path = self.root / "masks" / depth_path.name
        masks = read_mask_png(mask_path) if mask_path.exists() else {}
        return LoadedFrame(index=index, depth=read_depth_png(depth_path),
                           masks=masks, camera=self.poses[index])

    def frames(self):
        for i in range(len(self)):
            yield self.frame(i)
