"""Latent-conditioned signed-distance decoders.

Two variants share one calling convention:

  - ``MlpDecoder``: a small fully connected network mapping a 3D query point
    and a latent code to an SDF value, with a hand-written backward pass that
    yields analytic derivatives with respect to the point and the code.
  - ``SphereDecoder``: a closed-form oracle, v(x, z) = |x| - r0 * e^(z_1),
    exact for every latent; used to validate everything downstream.

A decoder evaluates batches of points against a single code or a per-point
code matrix. All math is float64.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .meshes import TriangleMesh, marching_cubes_mesh

PRIOR_MAGIC = b"FMPRIOR\x00"
PRIOR_VERSION = 1


def _softplus(a: np.ndarray, beta: float) -> np.ndarray:
    # max(a,0) + log1p(exp(-|beta a|))/beta, overflow-safe
    return np.maximum(a, 0.0) + np.log1p(np.exp(-np.abs(beta * a))) / beta


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


def _as_code_matrix(z: np.ndarray, n: int, latent_size: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.ndim == 1:
        if z.shape[0] != latent_size:
            raise ValueError(f"latent code has size {z.shape[0]}, expected {latent_size}")
        return np.broadcast_to(z, (n, latent_size))
    if z.shape != (n, latent_size):
        raise ValueError(f"code matrix shape {z.shape} does not match ({n}, {latent_size})")
    return z


class SphereDecoder:
    """Exact sphere SDF: v(x, z) = |x| - r0 * exp(z_1).

    Only the first latent entry acts (log-radius offset); the rest are inert,
    which makes the latent Jacobian trivial to verify.
    """

    def __init__(self, base_radius: float = 0.04, latent_size: int = 32):
        self.base_radius = float(base_radius)
        self.latent_size = int(latent_size)

    def __call__(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        zm = _as_code_matrix(z, len(x), self.latent_size)
        return np.linalg.norm(x, axis=1) - self.base_radius * np.exp(zm[:, 0])

    def jacobians(self, x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = np.atleast_2d(np.asarray(x, float))
        n = len(x)
        zm = _as_code_matrix(z, n, self.latent_size)
        norm = np.linalg.norm(x, axis=1)
        radius = self.base_radius * np.exp(zm[:, 0])
        v = norm - radius
        dv_dx = np.where(norm[:, None] > 1e-300, x / np.maximum(norm, 1e-300)[:, None], 0.0)
        dv_dz = np.zeros((n, self.latent_size))
        dv_dz[:, 0] = -radius
        return v, dv_dx, dv_dz


class MlpDecoder:
    """Fully connected SDF decoder with one mid-network input skip.

    Layer stack for hidden widths [w0, w1, w2, w3] and skip at layer 2:

        in = [x * point_scale, z]                  (size 3 + C)
        h0 = act(W0 in + b0)
        h1 = act(W1 h0 + b1)
        h2 = act(W2 [h1, in] + b2)                 <- skip concatenation
        h3 = act(W3 h2 + b3)
        v  = W4 h3 + b4                            (scalar, meters)

    The activation is softplus with slope `beta`, smooth everywhere so the
    point Jacobian is continuous.
    """

    def __init__(self, latent_size: int = 32, hidden: tuple[int, ...] = (64, 64, 64, 64),
                 skip_layer: int = 2, beta: float = 50.0, point_scale: float = 10.0,
                 rng: np.random.Generator | None = None):
        if skip_layer <= 0 or skip_layer >= len(hidden):
            raise ValueError("skip_layer must index an inner hidden layer")
        self.latent_size = int(latent_size)
        self.hidden = tuple(int(h) for h in hidden)
        self.skip_layer = int(skip_layer)
        self.beta = float(beta)
        self.point_scale = float(point_scale)
        self.in_dim = 3 + self.latent_size

        rng = rng if rng is not None else np.random.default_rng(0)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        fan_in = self.in_dim
        for i, w in enumerate(self.hidden):
            if i == self.skip_layer:
                fan_in += self.in_dim
            self.weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(w, fan_in)))
            self.biases.append(np.zeros(w))
            fan_in = w
        self.weights.append(rng.normal(0.0, np.sqrt(1.0 / fan_in), size=(1, fan_in)))
        self.biases.append(np.zeros(1))

    # -- parameter bookkeeping -------------------------------------------

    def parameters(self) -> list[np.ndarray]:
        out: list[np.ndarray] = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out

    def architecture(self) -> dict:
        return {
            "latent_size": self.latent_size,
            "hidden": list(self.hidden),
            "skip_layer": self.skip_layer,
            "beta": self.beta,
            "point_scale": self.point_scale,
        }

    @staticmethod
    def from_architecture(arch: dict) -> "MlpDecoder":
        return MlpDecoder(
            latent_size=arch["latent_size"], hidden=tuple(arch["hidden"]),
            skip_layer=arch["skip_layer"], beta=arch["beta"],
            point_scale=arch["point_scale"],
        )

    # -- forward / backward ----------------------------------------------

    def _inputs(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, float))
        zm = _as_code_matrix(z, len(x), self.latent_size)
        return np.concatenate([x * self.point_scale, zm], axis=1)

    def __call__(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        h = self._inputs(x, z)
        inp = h
        for i in range(len(self.hidden)):
            if i == self.skip_layer:
                h = np.concatenate([h, inp], axis=1)
            h = _softplus(h @ self.weights[i].T + self.biases[i], self.beta)
        return (h @ self.weights[-1].T + self.biases[-1])[:, 0]

    def jacobians(self, x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Value plus analytic d(v)/d(x) and d(v)/d(z), shapes (n,), (n,3), (n,C)."""
        inp = self._inputs(x, z)
        n = len(inp)

        h = inp
        gates: list[np.ndarray] = []
        for i in range(len(self.hidden)):
            if i == self.skip_layer:
                h = np.concatenate([h, inp], axis=1)
            a = h @ self.weights[i].T + self.biases[i]
            gates.append(_sigmoid(self.beta * a))
            h = _softplus(a, self.beta)
        v = (h @ self.weights[-1].T + self.biases[-1])[:, 0]

        # reverse sweep with scalar seed dv/dv = 1
        g = np.broadcast_to(self.weights[-1], (n, self.weights[-1].shape[1])).copy()
        g_inp = np.zeros((n, self.in_dim))
        for i in range(len(self.hidden) - 1, -1, -1):
            g = g * gates[i]  # through softplus
            g = g @ self.weights[i]
            if i == self.skip_layer:
                g_inp += g[:, -self.in_dim:]
                g = g[:, :-self.in_dim]
        g_inp += g
        dv_dx = g_inp[:, :3] * self.point_scale
        dv_dz = g_inp[:, 3:]
        return v, dv_dx, dv_dz

    def value_and_param_gradients(self, x: np.ndarray, z: np.ndarray,
                                  upstream: np.ndarray) -> tuple[np.ndarray, list[np.ndarray], np.ndarray]:
        """Training backward: d(sum upstream_i * v_i)/d(params) and /d(z_i).

        Returns (v, grads aligned with parameters(), dL_dz (n, C)).
        """
        inp = self._inputs(x, z)
        n = len(inp)
        h = inp
        layer_inputs: list[np.ndarray] = []
        gates: list[np.ndarray] = []
        for i in range(len(self.hidden)):
            if i == self.skip_layer:
                h = np.concatenate([h, inp], axis=1)
            layer_inputs.append(h)
            a = h @ self.weights[i].T + self.biases[i]
            gates.append(_sigmoid(self.beta * a))
            h = _softplus(a, self.beta)
        layer_inputs.append(h)
        v = (h @ self.weights[-1].T + self.biases[-1])[:, 0]

        u = np.asarray(upstream, float)[:, None]
        grads: list[np.ndarray | None] = [None] * (2 * len(self.weights))
        g = u @ self.weights[-1]  # (n, w_last)
        grads[-2] = u.T @ layer_inputs[-1]  # dW_out
        grads[-1] = u.sum(axis=0)  # db_out
        g_inp = np.zeros((n, self.in_dim))
        for i in range(len(self.hidden) - 1, -1, -1):
            g = g * gates[i]
            grads[2 * i] = g.T @ layer_inputs[i]
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i]
            if i == self.skip_layer:
                g_inp += g[:, -self.in_dim:]
                g = g[:, :-self.in_dim]
        g_inp += g
        return v, grads, g_inp[:, 3:]


def sdf_forward(decoder, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    """SDF value(s) at query point(s) for a latent code."""
    return decoder(x, z)


def sdf_forward_with_jacobian(decoder, x: np.ndarray, z: np.ndarray):
    """(v, dv_dx, dv_dz) with analytic derivatives."""
    return decoder.jacobians(x, z)


def reconstruct_mesh(decoder, z: np.ndarray, grid_resolution: int = 64,
                     bounds: float | tuple[np.ndarray, np.ndarray] = 0.09) -> TriangleMesh:
    """Marching-cubes mesh of the decoder's zero level set.

    `bounds` is either a half-extent (symmetric cube) or (lo, hi) corners.
    Returns an empty mesh when the level set does not cross the grid.
    """
    vol, origin, spacing = decoder_volume(decoder, z, grid_resolution, bounds)
    return marching_cubes_mesh(vol, 0.0, origin, spacing)


def decoder_volume(decoder, z: np.ndarray, grid_resolution: int,
                   bounds: float | tuple[np.ndarray, np.ndarray]):
    """Dense SDF sample grid: (volume, origin, spacing)."""
    if isinstance(bounds, (int, float)):
        lo = np.array([-bounds] * 3, dtype=float)
        hi = np.array([bounds] * 3, dtype=float)
    else:
        lo = np.asarray(bounds[0], float)
        hi = np.asarray(bounds[1], float)
    n = int(grid_resolution)
    spacing = float((hi - lo).max() / (n - 1))
    axes = [lo[k] + spacing * np.arange(n) for k in range(3)]
    X, Y, Z = np.meshgrid(*axes, indexing="ij")
    pts = np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])
    vol = np.empty(len(pts))
    chunk = 65536
    for s in range(0, len(pts), chunk):
        vol[s:s + chunk] = decoder(pts[s:s + chunk], z)
    return vol.reshape(n, n, n), lo, spacing


# -- prior model container and file format --------------------------------


@dataclass
class ShapePriorModel:
    """A trained decoder plus the per-training-shape latent code table."""

    decoder: MlpDecoder
    codes: np.ndarray  # (n_shapes, C)
    loss_history: np.ndarray  # per-epoch mean training loss
    config: dict

    @property
    def latent_size(self) -> int:
        return self.decoder.latent_size


def save_prior(model: ShapePriorModel, path: str | Path) -> None:
    """Versioned binary container; byte-reproducible for identical models."""
    arrays: list[tuple[str, np.ndarray]] = []
    for i, (W, b) in enumerate(zip(model.decoder.weights, model.decoder.biases)):
        arrays.append((f"W{i}", W))
        arrays.append((f"b{i}", b))
    arrays.append(("codes", model.codes))
    arrays.append(("loss_history", model.loss_history))
    header = {
        "architecture": model.decoder.architecture(),
        "config": model.config,
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(PRIOR_MAGIC)
        f.write(struct.pack("<II", PRIOR_VERSION, len(blob)))
        f.write(blob)
        for _, a in arrays:
            f.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_prior(path: str | Path) -> ShapePriorModel:
    with open(path, "rb") as f:
        magic = f.read(len(PRIOR_MAGIC))
        if magic != PRIOR_MAGIC:
            raise ValueError(f"{path}: not a prior model file")
        version, blob_len = struct.unpack("<II", f.read(8))
        if version != PRIOR_VERSION:
            raise ValueError(f"{path}: unsupported prior file version {version}")
        header = json.loads(f.read(blob_len).decode())
        arrays = {}
        for spec in header["arrays"]:
            shape = tuple(spec["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(8 * count), dtype="<f8").reshape(shape)
            arrays[spec["name"]] = data.copy()
    decoder = MlpDecoder.from_architecture(header["architecture"])
    for i in range(len(decoder.weights)):
        decoder.weights[i] = arrays[f"W{i}"]
        decoder.biases[i] = arrays[f"b{i}"]
    return ShapePriorModel(
        decoder=decoder,
        codes=arrays["codes"],
        loss_history=arrays["loss_history"],
        config=header["config"],
    )
