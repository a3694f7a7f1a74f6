"""Shape-prior training: SDF sample generation from watertight meshes and
auto-decoder training of the MLP decoder with per-shape latent codes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoders import MlpDecoder, ShapePriorModel
from .meshes import TriangleMesh, is_watertight, sample_surface, signed_distance

NEAR_SURFACE = 0
UNIFORM_SPHERE = 1


class PriorTrainingError(RuntimeError):
    """Raised when training diverges or the inputs are unusable."""


@dataclass
class SdfSampleSet:
    """Labelled SDF training points for one shape (canonical frame, meters)."""

    points: np.ndarray  # (n, 3)
    labels: np.ndarray  # (n,)
    provenance: np.ndarray  # (n,) NEAR_SURFACE or UNIFORM_SPHERE


@dataclass
class PriorTrainingConfig:
    latent_size: int = 32
    hidden: tuple[int, ...] = (64, 64, 64, 64)
    skip_layer: int = 2
    beta: float = 50.0
    point_scale: float = 10.0
    n_near: int = 12000
    n_uniform: int = 4000
    offsets: tuple[float, ...] = (0.002, 0.005)
    sphere_radius_factor: float = 1.5
    clamp: float = 0.025
    code_reg_weight: float = 1e-4
    code_init_std: float = 0.01
    learning_rate: float = 1.5e-3
    steps: int = 3000
    batch_per_shape: int = 96
    lr_decay_at: tuple[float, ...] = (0.6, 0.85)
    mesh_subdivisions: int = 3


def sample_sdf_training_points(mesh: TriangleMesh, n_near: int, n_uniform: int,
                               offsets: tuple[float, ...], sphere_radius: float,
                               rng: np.random.Generator) -> SdfSampleSet:
    """Draw near-surface and uniform-in-sphere SDF samples from a watertight
    mesh centered at the origin.

    Near-surface points are displaced along face normals by a signed offset,
    which is also their label. Uniform points get exact signed point-to-mesh
    distances with the sign from ray parity.
    """
    if not is_watertight(mesh):
        raise ValueError("training shape must be a watertight mesh")

    surf, face_idx = sample_surface(mesh, n_near, rng)
    normals = mesh.face_normals()[face_idx]
    mags = rng.choice(np.asarray(offsets, float), size=n_near)
    signs = np.where(rng.random(n_near) < 0.5, -1.0, 1.0)
    delta = mags * signs
    near_pts = surf + normals * delta[:, None]

    r = sphere_radius * rng.random(n_uniform) ** (1.0 / 3.0)
    dirs = rng.normal(size=(n_uniform, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    uni_pts = dirs * r[:, None]
    uni_labels = signed_distance(uni_pts, mesh)

    points = np.concatenate([near_pts, uni_pts])
    labels = np.concatenate([delta, uni_labels])
    provenance = np.concatenate([
        np.full(n_near, NEAR_SURFACE, dtype=np.uint8),
        np.full(n_uniform, UNIFORM_SPHERE, dtype=np.uint8),
    ])
    return SdfSampleSet(points, labels, provenance)


class _Adam:
    def __init__(self, arrays: list[np.ndarray], lr: float):
        self.arrays = arrays
        self.lr = lr
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]
        self.t = 0

    def step(self, grads: list[np.ndarray]) -> None:
        self.t += 1
        b1, b2, eps = 0.9, 0.999, 1e-8
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for a, g, m, v in zip(self.arrays, grads, self.m, self.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            a -= self.lr * (m / c1) / (np.sqrt(v / c2) + eps)


def _clamped_l1_residual(pred: np.ndarray, label: np.ndarray, clamp: float):
    """(loss per point, d loss / d pred)."""
    cp = np.clip(pred, -clamp, clamp)
    cl = np.clip(label, -clamp, clamp)
    e = cp - cl
    grad = np.sign(e) * (np.abs(pred) < clamp)
    return np.abs(e), grad


def train_prior(meshes: list[TriangleMesh], config: PriorTrainingConfig,
                seed: int = 0) -> ShapePriorModel:
    """Jointly optimize decoder weights and one latent code per shape with
    Adam on the clamped-L1 SDF regression loss plus a code-norm prior.
    """
    if not meshes:
        raise ValueError("need at least one training shape")
    root = np.random.SeedSequence(seed)
    sample_seed, init_seed, batch_seed = root.spawn(3)

    sample_rng = np.random.default_rng(sample_seed)
    sets = []
    for mesh in meshes:
        radius = mesh.bounding_radius() * config.sphere_radius_factor
        sets.append(sample_sdf_training_points(
            mesh, config.n_near, config.n_uniform, config.offsets, radius, sample_rng))
    points = np.stack([s.points for s in sets])  # (S, n, 3)
    labels = np.stack([s.labels for s in sets])  # (S, n)
    n_shapes, n_pts = labels.shape

    init_rng = np.random.default_rng(init_seed)
    decoder = MlpDecoder(
        latent_size=config.latent_size, hidden=config.hidden,
        skip_layer=config.skip_layer, beta=config.beta,
        point_scale=config.point_scale, rng=init_rng)
    codes = init_rng.normal(0.0, config.code_init_std, size=(n_shapes, config.latent_size))

    params = decoder.parameters() + [codes]
    opt = _Adam(params, config.learning_rate)
    decay_steps = {int(f * config.steps) for f in config.lr_decay_at}

    batch_rng = np.random.default_rng(batch_seed)
    B = config.batch_per_shape
    shape_ids = np.repeat(np.arange(n_shapes), B)
    losses = []
    for step in range(config.steps):
        if step in decay_steps:
            opt.lr *= 0.5
        idx = batch_rng.integers(0, n_pts, size=(n_shapes, B))
        px = points[np.arange(n_shapes)[:, None], idx].reshape(-1, 3)
        py = labels[np.arange(n_shapes)[:, None], idx].reshape(-1)
        zb = codes[shape_ids]

        pred = decoder(px, zb)
        l1, dpred = _clamped_l1_residual(pred, py, config.clamp)
        upstream = dpred / len(px)
        _, grads, dz = decoder.value_and_param_gradients(px, zb, upstream)

        code_grad = np.zeros_like(codes)
        np.add.at(code_grad, shape_ids, dz)
        code_grad += 2.0 * config.code_reg_weight * codes / n_shapes

        loss = float(l1.mean() + config.code_reg_weight * np.mean(np.sum(codes**2, axis=1)))
        if not np.isfinite(loss):
            raise PriorTrainingError(f"training loss diverged at step {step}")
        losses.append(loss)
        opt.step(grads + [code_grad])

    return ShapePriorModel(
        decoder=decoder,
        codes=codes,
        loss_history=np.asarray(losses),
        config={
            "latent_size": config.latent_size,
            "n_shapes": n_shapes,
            "clamp": config.clamp,
            "code_reg_weight": config.code_reg_weight,
            "steps": config.steps,
            "seed": seed,
        },
    )


def fit_latent_code(decoder: MlpDecoder, points: np.ndarray, labels: np.ndarray,
                    clamp: float = 0.025, code_reg_weight: float = 1e-4,
                    steps: int = 400, learning_rate: float = 2e-2,
                    batch: int = 2048, seed: int = 0) -> np.ndarray:
    """Optimize a latent code against labelled SDF samples with the decoder
    frozen (first-order; used for prior evaluation, not for in-map fits)."""
    rng = np.random.default_rng(seed)
    z = np.zeros(decoder.latent_size)
    opt = _Adam([z], learning_rate)
    n = len(points)
    for step in range(steps):
        idx = rng.integers(0, n, size=min(batch, n))
        px, py = points[idx], labels[idx]
        zb = np.broadcast_to(z, (len(px), decoder.latent_size))
        pred = decoder(px, zb)
        _, dpred = _clamped_l1_residual(pred, py, clamp)
        _, _, dz = decoder.value_and_param_gradients(px, zb, dpred / len(px))
        opt.step([dz.sum(axis=0) + 2.0 * code_reg_weight * z])
    return z
