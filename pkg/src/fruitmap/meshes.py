"""Triangle mesh container and the mesh operations shared across the toolkit:
watertightness checks, area-weighted surface sampling, exact point-to-mesh
signed distance, inside/outside by ray parity, isosurface extraction, and
OBJ/PLY file io. Units are meters throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from skimage import measure


@dataclass
class TriangleMesh:
    vertices: np.ndarray  # (nv, 3) float64
    faces: np.ndarray  # (nf, 3) int indices

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def triangles(self) -> np.ndarray:
        """(nf, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def face_normals(self) -> np.ndarray:
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        norm = np.linalg.norm(n, axis=1, keepdims=True)
        return n / np.maximum(norm, 1e-300)

    def face_areas(self) -> np.ndarray:
        tri = self.triangles()
        n = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        return 0.5 * np.linalg.norm(n, axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def vertex_normals(self) -> np.ndarray:
        """Area-weighted vertex normals."""
        tri = self.triangles()
        fn = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        vn = np.zeros_like(self.vertices)
        for k in range(3):
            np.add.at(vn, self.faces[:, k], fn)
        norm = np.linalg.norm(vn, axis=1, keepdims=True)
        return vn / np.maximum(norm, 1e-300)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def bounding_radius(self, center: np.ndarray | None = None) -> float:
        c = np.zeros(3) if center is None else np.asarray(center, float)
        return float(np.linalg.norm(self.vertices - c, axis=1).max())

    def volume(self) -> float:
        """Signed volume via the divergence theorem (positive for outward
        orientation)."""
        tri = self.triangles()
        return float(np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0)

    def transformed(self, transform) -> "TriangleMesh":
        """Apply a Sim3Transform (or any object with .apply) to the vertices."""
        return TriangleMesh(transform.apply(self.vertices), self.faces.copy())


def boundary_edge_count(mesh: TriangleMesh) -> int:
    """Number of undirected edges not shared by exactly two faces."""
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    und = np.sort(edges, axis=1)
    _, counts = np.unique(und, axis=0, return_counts=True)
    return int(np.sum(counts != 2))


def is_watertight(mesh: TriangleMesh) -> bool:
    """True when every undirected edge is shared by exactly two faces with
    opposite orientation (closed, consistently oriented 2-manifold)."""
    if mesh.is_empty():
        return False
    f = mesh.faces
    edges = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    und = np.sort(edges, axis=1)
    uniq, counts = np.unique(und, axis=0, return_counts=True)
    if np.any(counts != 2):
        return False
    # orientation: each directed edge must appear exactly once
    directed = edges[:, 0] * (mesh.n_vertices + 1) + edges[:, 1]
    return len(np.unique(directed)) == len(directed)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Unit icosahedron subdivided `subdivisions` times, vertices on the
    sphere of the given radius."""
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=float)
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)

    for _ in range(subdivisions):
        edge_mid: dict[tuple[int, int], int] = {}
        new_verts = list(verts)

        def midpoint(a: int, b: int) -> int:
            key = (a, b) if a < b else (b, a)
            idx = edge_mid.get(key)
            if idx is None:
                m = new_verts[a] + new_verts[b]
                m /= np.linalg.norm(m)
                idx = len(new_verts)
                new_verts.append(m)
                edge_mid[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.array(new_verts)
        faces = np.array(new_faces, dtype=np.int64)

    return TriangleMesh(verts * radius, faces)


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Area-weighted uniform surface samples (with replacement).

    Returns (points (n, 3), face indices (n,)).
    """
    if mesh.is_empty():
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    total = areas.sum()
    if total <= 0:
        raise ValueError("mesh has zero surface area")
    face_idx = rng.choice(len(areas), size=n, p=areas / total)
    tri = mesh.vertices[mesh.faces[face_idx]]
    # uniform barycentric coordinates via square-root trick
    r1 = np.sqrt(rng.random(n))
    r2 = rng.random(n)
    pts = (1 - r1)[:, None] * tri[:, 0] + (r1 * (1 - r2))[:, None] * tri[:, 1] + (r1 * r2)[:, None] * tri[:, 2]
    return pts, face_idx


def _closest_point_on_triangles(points: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Squared distance from each point to each triangle.

    points: (np, 3); tri: (nt, 3, 3). Returns (np, nt) squared distances.
    Standard barycentric region classification, vectorized.
    """
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    ab = b - a
    ac = c - a
    p = points[:, None, :]  # (np, 1, 3)
    ap = p - a[None, :, :]

    d1 = np.einsum("tk,ptk->pt", ab, ap)
    d2 = np.einsum("tk,ptk->pt", ac, ap)

    bp = p - b[None, :, :]
    d3 = np.einsum("tk,ptk->pt", ab, bp)
    d4 = np.einsum("tk,ptk->pt", ac, bp)

    cp = p - c[None, :, :]
    d5 = np.einsum("tk,ptk->pt", ab, cp)
    d6 = np.einsum("tk,ptk->pt", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    def _safe_div(num, den):
        safe = np.where(np.abs(den) > 1e-30, den, 1e-30)
        return np.clip(num / safe, 0.0, 1.0)

    v_edge_ab = _safe_div(d1, d1 - d3)
    w_edge_ac = _safe_div(d2, d2 - d6)
    w_edge_bc = _safe_div(d4 - d3, (d4 - d3) + (d5 - d6))

    denom = np.maximum(va + vb + vc, 1e-30)
    v_in = vb / denom
    w_in = vc / denom

    # assemble candidate closest points per region
    close = a[None] + v_in[..., None] * ab[None] + w_in[..., None] * ac[None]
    close = np.where(((vc <= 0) & (d1 >= 0) & (d3 <= 0))[..., None],
                     a[None] + v_edge_ab[..., None] * ab[None], close)
    close = np.where(((vb <= 0) & (d2 >= 0) & (d6 <= 0))[..., None],
                     a[None] + w_edge_ac[..., None] * ac[None], close)
    close = np.where(((va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0))[..., None],
                     b[None] + w_edge_bc[..., None] * (c - b)[None], close)
    close = np.where(((d1 <= 0) & (d2 <= 0))[..., None], np.broadcast_to(a[None], close.shape), close)
    close = np.where(((d3 >= 0) & (d4 <= d3))[..., None], np.broadcast_to(b[None], close.shape), close)
    close = np.where(((d6 >= 0) & (d5 <= d6))[..., None], np.broadcast_to(c[None], close.shape), close)

    diff = p - close
    return np.einsum("ptk,ptk->pt", diff, diff)


def point_mesh_distance(points: np.ndarray, mesh: TriangleMesh, chunk: int = 256) -> np.ndarray:
    """Unsigned exact distance from each point to the mesh surface."""
    points = np.atleast_2d(np.asarray(points, float))
    tri = mesh.triangles()
    out = np.empty(len(points))
    for s in range(0, len(points), chunk):
        d2 = _closest_point_on_triangles(points[s:s + chunk], tri)
        out[s:s + chunk] = np.sqrt(d2.min(axis=1))
    return out


def ray_triangle_hits(origins: np.ndarray, direction: np.ndarray, tri: np.ndarray,
                      eps: float = 1e-12) -> np.ndarray:
    """Count ray/triangle intersections for each origin along one shared
    direction (Moeller-Trumbore). Returns (np,) hit counts; grazing hits near
    edges are counted once but callers should treat ambiguous parity with a
    retry direction."""
    d = np.asarray(direction, float)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    e1 = b - a
    e2 = c - a
    pvec = np.cross(d, e2)  # (nt, 3)
    det = np.einsum("tk,tk->t", e1, pvec)
    ok = np.abs(det) > eps
    inv_det = np.where(ok, 1.0 / np.where(det == 0, 1.0, det), 0.0)

    counts = np.zeros(len(origins), dtype=np.int64)
    chunk = max(1, int(500_000 / max(len(tri), 1)))
    for s in range(0, len(origins), chunk):
        o = origins[s:s + chunk]
        tvec = o[:, None, :] - a[None, :, :]
        u = np.einsum("ptk,tk->pt", tvec, pvec) * inv_det[None, :]
        qvec = np.cross(tvec, e1[None, :, :])
        v = np.einsum("ptk,k->pt", qvec, d) * inv_det[None, :]
        t = np.einsum("ptk,tk->pt", qvec, e2) * inv_det[None, :]
        hit = ok[None, :] & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > eps)
        counts[s:s + chunk] = hit.sum(axis=1)
    return counts


def points_inside_mesh(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Inside test by ray-crossing parity on a watertight mesh.

    Uses a fixed irrational-ish direction and retries ambiguous points with
    alternates so results are deterministic.
    """
    points = np.atleast_2d(np.asarray(points, float))
    tri = mesh.triangles()
    directions = [
        np.array([0.57735027, 0.52573111, 0.62480505]),
        np.array([-0.285, 0.842, 0.456]),
        np.array([0.912, -0.173, 0.371]),
    ]
    counts = ray_triangle_hits(points, directions[0], tri)
    inside = (counts % 2).astype(bool)
    # near-surface points can graze edges; confirm with a second direction
    counts2 = ray_triangle_hits(points, directions[1], tri)
    inside2 = (counts2 % 2).astype(bool)
    disagree = inside != inside2
    if np.any(disagree):
        counts3 = ray_triangle_hits(points[disagree], directions[2], tri)
        inside3 = (counts3 % 2).astype(bool)
        # majority vote
        votes = inside[disagree].astype(int) + inside2[disagree].astype(int) + inside3.astype(int)
        inside[disagree] = votes >= 2
    return inside


def signed_distance(points: np.ndarray, mesh: TriangleMesh) -> np.ndarray:
    """Exact signed distance to a watertight mesh (negative inside)."""
    d = point_mesh_distance(points, mesh)
    sign = np.where(points_inside_mesh(points, mesh), -1.0, 1.0)
    return sign * d


def marching_cubes_mesh(volume: np.ndarray, level: float, origin: np.ndarray,
                        spacing: float, mask: np.ndarray | None = None) -> TriangleMesh:
    """Extract the `level` isosurface of a dense scalar grid.

    `origin` is the world position of voxel (0,0,0); `spacing` the voxel
    edge length. Returns an empty mesh when the level set is absent.
    """
    try:
        verts, faces, _, _ = measure.marching_cubes(
            volume, level=level, spacing=(spacing,) * 3, mask=mask)
    except (ValueError, RuntimeError):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    return TriangleMesh(verts + np.asarray(origin, float), faces.astype(np.int64))


def trilinear_interpolate(volume: np.ndarray, origin: np.ndarray, spacing: float,
                          points: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of a dense grid at world-space points.

    Points outside the grid are clamped to the border.
    """
    g = (np.atleast_2d(points) - np.asarray(origin, float)) / spacing
    shape = np.array(volume.shape)
    g = np.clip(g, 0.0, shape - 1)
    i0 = np.floor(g).astype(int)
    f = g - i0
    i1 = np.minimum(i0 + 1, shape - 1)
    c000 = volume[i0[:, 0], i0[:, 1], i0[:, 2]]
    c100 = volume[i1[:, 0], i0[:, 1], i0[:, 2]]
    c010 = volume[i0[:, 0], i1[:, 1], i0[:, 2]]
    c110 = volume[i1[:, 0], i1[:, 1], i0[:, 2]]
    c001 = volume[i0[:, 0], i0[:, 1], i1[:, 2]]
    c101 = volume[i1[:, 0], i0[:, 1], i1[:, 2]]
    c011 = volume[i0[:, 0], i1[:, 1], i1[:, 2]]
    c111 = volume[i1[:, 0], i1[:, 1], i1[:, 2]]
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = c000 * (1 - fx) + c100 * fx
    c10 = c010 * (1 - fx) + c110 * fx
    c01 = c001 * (1 - fx) + c101 * fx
    c11 = c011 * (1 - fx) + c111 * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def save_ply(mesh: TriangleMesh, path: str | Path) -> None:
    """ASCII PLY writer with fixed float formatting (byte-reproducible)."""
    path = Path(path)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {mesh.n_vertices}\n")
        f.write("property float64 x\nproperty float64 y\nproperty float64 z\n")
        f.write(f"element face {mesh.n_faces}\n")
        f.write("property list uchar int vertex_indices\nend_header\n")
        for v in mesh.vertices:
            f.write(f"{v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for face in mesh.faces:
            f.write(f"3 {face[0]} {face[1]} {face[2]}\n")


def load_ply(path: str | Path) -> TriangleMesh:
    """Minimal ASCII PLY reader (vertex xyz + triangular faces)."""
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n_verts = n_faces = 0
        fmt = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unexpected end of header")
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element" and tok[1] == "vertex":
                n_verts = int(tok[2])
            elif tok[0] == "element" and tok[1] == "face":
                n_faces = int(tok[2])
            elif tok[0] == "end_header":
                break
        if fmt != "ascii":
            raise ValueError(f"{path}: only ascii PLY is supported")
        verts = np.empty((n_verts, 3))
        for i in range(n_verts):
            verts[i] = [float(x) for x in f.readline().split()[:3]]
        faces = np.empty((n_faces, 3), dtype=np.int64)
        for i in range(n_faces):
            tok = f.readline().split()
            if int(tok[0]) != 3:
                raise ValueError(f"{path}: non-triangular face")
            faces[i] = [int(x) for x in tok[1:4]]
    return TriangleMesh(verts, faces)


def load_obj(path: str | Path) -> TriangleMesh:
    """Minimal OBJ reader (v and triangular f records)."""
    verts, faces = [], []
    with open(path) as f:
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                verts.append([float(x) for x in tok[1:4]])
            elif tok[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in tok[1:]]
                if len(idx) != 3:
                    raise ValueError(f"{path}: non-triangular face")
                faces.append(idx)
    return TriangleMesh(np.array(verts, dtype=float), np.array(faces, dtype=np.int64))


def load_mesh(path: str | Path) -> TriangleMesh:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        return load_ply(path)
    if path.suffix.lower() == ".obj":
        return load_obj(path)
    raise ValueError(f"unsupported mesh format: {path.suffix}")
