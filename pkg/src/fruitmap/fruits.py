"""Parametric family of fruit-like shapes used to train the shape prior and
to generate synthetic scenes.

Every family member is star-shaped about the origin: the surface is
``{ r(u) * u : u on the unit sphere }`` for a smooth radial function r built
from a superellipsoid profile with azimuthal lobes and a vertical taper.
Shapes are generated in the canonical pose (stem axis = +z, centered so the
origin is inside) at desk scale (centimeters).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .meshes import TriangleMesh, icosphere


@dataclass(frozen=True)
class FruitParams:
    """Radial-profile parameters of one family member."""

    semi_x: float  # xy semi-axes at the equator (meters)
    semi_y: float
    aspect: float  # height semi-axis as a multiple of the mean xy semi-axis
    exp_polar: float  # superellipsoid exponent along z (1 = ellipse profile)
    exp_azimuth: float  # superellipsoid exponent in the xy cross-section
    lobe_count: int
    lobe_depth: float  # fractional radius modulation of the lobes
    taper: float  # fractional narrowing at the stem end (+z)

    @property
    def semi_z(self) -> float:
        return self.aspect * 0.5 * (self.semi_x + self.semi_y)


def sample_fruit_params(rng: np.random.Generator) -> FruitParams:
    """Draw one family member. Aspect and taper ranges keep every shape
    clearly elongated and top/bottom asymmetric so that orientation is
    observable from geometry alone."""
    return FruitParams(
        semi_x=rng.uniform(0.034, 0.050),
        semi_y=rng.uniform(0.034, 0.050),
        aspect=rng.uniform(1.25, 1.60),
        exp_polar=rng.uniform(0.75, 1.10),
        exp_azimuth=rng.uniform(0.80, 1.15),
        lobe_count=int(rng.integers(3, 6)),
        lobe_depth=rng.uniform(0.02, 0.08),
        taper=rng.uniform(0.12, 0.30),
    )


def fruit_radius(params: FruitParams, directions: np.ndarray) -> np.ndarray:
    """Radial surface distance along (n, 3) unit directions."""
    u = np.atleast_2d(np.asarray(directions, float))
    ux, uy, uz = u[:, 0], u[:, 1], u[:, 2]
    # superellipsoid implicit, positively homogeneous of degree 1
    e1, e2 = params.exp_polar, params.exp_azimuth
    axy = (np.abs(ux / params.semi_x) ** (2.0 / e2)
           + np.abs(uy / params.semi_y) ** (2.0 / e2)) ** (e2 / e1)
    az = np.abs(uz / params.semi_z) ** (2.0 / e1)
    base = (axy + az) ** (-e1 / 2.0)

    phi = np.arctan2(uy, ux)
    ring = ux**2 + uy**2  # vanishes at the poles, keeps r smooth there
    lobes = 1.0 + params.lobe_depth * np.cos(params.lobe_count * phi) * ring
    narrowing = 1.0 - params.taper * 0.5 * (1.0 + uz)
    return base * lobes * narrowing


def fruit_implicit(params: FruitParams, points: np.ndarray) -> np.ndarray:
    """Inside/outside field g(x) = |x| - r(x / |x|); negative inside, zero on
    the surface. Not a distance, but its zero set is the exact surface."""
    p = np.atleast_2d(np.asarray(points, float))
    norm = np.linalg.norm(p, axis=1)
    safe = np.maximum(norm, 1e-12)
    r = fruit_radius(params, p / safe[:, None])
    return norm - r


def fruit_bounding_radius(params: FruitParams) -> float:
    up = (1.0 + params.lobe_depth)
    return max(params.semi_x, params.semi_y, params.semi_z) * up


def fruit_mesh(params: FruitParams, subdivisions: int = 3) -> TriangleMesh:
    """Watertight triangle mesh of the shape: an icosphere with each vertex
    pushed to the radial surface."""
    sphere = icosphere(subdivisions)
    r = fruit_radius(params, sphere.vertices)
    return TriangleMesh(sphere.vertices * r[:, None], sphere.faces)


def fruit_family(n: int, seed: int) -> list[FruitParams]:
    """Deterministic family of n members."""
    rng = np.random.default_rng(seed)
    return [sample_fruit_params(rng) for _ in range(n)]
