"""Joint Levenberg-Marquardt estimation of the 7-DoF pose tangent and the
latent shape code from four residual families: surface consistency, depth
rendering, mask rendering, and code regularization.

Parameter vector layout: [pose tangent (7) | latent code (C)]. The pose is
updated by left retraction T <- exp(delta) @ T, matching the analytic point
Jacobian; the code additively. Huber weights act as iteratively reweighted
least squares on the surface and depth families; acceptance tests compare
the robustified weighted objective.

Residual sign bookkeeping: residuals are stored as prediction errors
(r_s = v, r_d = depth_rendered - depth_measured, r_m = mask_rendered -
mask_target, r_r = z) and the gradient uses g = -J^T P r throughout, which
is the descent direction for every family.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import Sim3Transform, sim3_point_jacobians, sim3_retract
from .rendering import (
    PixelSampleSet,
    RayBracket,
    classify_occlusion,
    render_frame_pixels,
)


@dataclass(frozen=True)
class LossWeights:
    """Per-family loss weights (surface, depth, mask, code regularizer)."""

    surface: float = 1.0
    depth: float = 0.05
    mask: float = 0.0002
    code: float = 0.0005

    def as_dict(self) -> dict:
        return {"surface": self.surface, "depth": self.depth,
                "mask": self.mask, "code": self.code}


@dataclass(frozen=True)
class LmConfig:
    initial_lambda: float = 0.1
    max_iterations: int = 100
    step_tolerance: float = 1e-6
    relative_loss_tolerance: float = 1e-6
    loss_patience: int = 3
    huber_surface: float = 0.005
    huber_depth: float = 0.020
    accept_factor: float = 0.5
    reject_factor: float = 10.0
    max_consecutive_rejects: int = 8
    max_lambda: float = 1e14
    divergence_patience: int = 5


@dataclass
class FrameObservation:
    """One observing frame: camera, sampled pixels, and the ray bracket."""

    camera: object  # CameraPose
    intrinsics: object  # CameraIntrinsics
    samples: PixelSampleSet
    bracket: RayBracket


@dataclass
class FitProblem:
    points: np.ndarray  # submap point cloud, world frame (n, 3)
    frames: list[FrameObservation]
    decoder: object
    weights: LossWeights = field(default_factory=LossWeights)
    config: LmConfig = field(default_factory=LmConfig)
    sigma: float = 0.001
    occlusion_threshold: float = 0.03
    min_points: int = 50


@dataclass
class FitResult:
    pose: Sim3Transform  # world -> canonical object frame
    tangent: np.ndarray  # log of the pose
    code: np.ndarray
    loss_terms: dict  # unweighted per-term values plus the weighted total
    iterations: int
    converged: bool
    wall_time: float
    log_lines: list[str]
    message: str = ""


class FitError(RuntimeError):
    pass


def huber_weight(e: np.ndarray, tau: float) -> np.ndarray:
    """1 for |e| <= tau, else tau / |e|."""
    if tau <= 0:
        raise ValueError("huber threshold must be positive")
    e = np.abs(np.asarray(e, float))
    return np.where(e <= tau, 1.0, tau / np.maximum(e, 1e-300))


def huber_rho(e: np.ndarray, tau: float) -> np.ndarray:
    """Huber robust cost: e^2 inside the threshold, linear outside."""
    a = np.abs(np.asarray(e, float))
    return np.where(a <= tau, a * a, tau * (2.0 * a - tau))


def surface_residuals(points_w: np.ndarray, pose_ow: Sim3Transform, z: np.ndarray,
                      decoder) -> tuple[np.ndarray, np.ndarray]:
    """Per-point surface terms: b = -v(T p, z) and the Jacobian of v with
    respect to (pose tangent, code), one row per point."""
    p_o = pose_ow.apply(points_w)
    v, dv_dx, dv_dz = decoder.jacobians(p_o, z)
    jp = sim3_point_jacobians(p_o)
    J = np.concatenate([np.einsum("mk,mkj->mj", dv_dx, jp), dv_dz], axis=1)
    return -v, J


@dataclass
class FrameResiduals:
    """Depth and mask residual rows of one frame after occlusion handling."""

    frame_index: int
    b_depth: np.ndarray  # rendered - target (depth rows kept)
    J_depth: np.ndarray | None
    b_mask: np.ndarray  # rendered - target (mask rows kept)
    J_mask: np.ndarray | None
    occluded: np.ndarray  # bool per background pixel
    n_sampled: int  # fg + bg sample count of this frame (normalization G)
    depth_keep: np.ndarray  # indices into the frame's pixel list
    mask_keep: np.ndarray


def _frame_targets(samples: PixelSampleSet, d_max: float):
    """Depth / mask targets for the concatenated fg + bg pixel list."""
    depth_target = np.concatenate([samples.fg_depth,
                                   np.full(samples.n_bg, d_max)])
    mask_target = np.concatenate([np.ones(samples.n_fg), np.zeros(samples.n_bg)])
    return depth_target, mask_target


def rendering_residuals(frames: list[FrameObservation], pose_ow: Sim3Transform,
                        z: np.ndarray, decoder, sigma: float,
                        occlusion_threshold: float,
                        with_jacobians: bool = True) -> list[FrameResiduals]:
    """Render every frame's sampled pixels at the current state and build the
    rendering residual rows.

    Occluded background pixels (render more than the threshold behind the
    measurement, or invalid measurement) are dropped from both families;
    foreground pixels with invalid depth keep their mask row only. Usable
    background pixels take the bracket end as virtual depth target.
    """
    out = []
    for frame in frames:
        s = frame.samples
        pixels = np.concatenate([s.fg_pixels, s.bg_pixels]) if s.n_bg else s.fg_pixels
        res = render_frame_pixels(decoder, z, pose_ow, frame.camera, frame.intrinsics,
                                  pixels, frame.bracket, sigma,
                                  with_jacobians=with_jacobians)
        depth_target, mask_target = _frame_targets(s, frame.bracket.d_max)

        occluded_bg = (classify_occlusion(res.depth[s.n_fg:], s.bg_depth,
                                          occlusion_threshold)
                       if s.n_bg else np.zeros(0, dtype=bool))
        keep_pixel = np.concatenate([np.ones(s.n_fg, dtype=bool), ~occluded_bg])
        fg_depth_valid = s.fg_depth > 0.0
        keep_depth = keep_pixel & np.concatenate([fg_depth_valid, np.ones(s.n_bg, dtype=bool)])

        (depth_idx,) = np.nonzero(keep_depth)
        (mask_idx,) = np.nonzero(keep_pixel)
        out.append(FrameResiduals(
            frame_index=s.frame_index,
            b_depth=res.depth[depth_idx] - depth_target[depth_idx],
            J_depth=res.jac_depth[depth_idx] if with_jacobians else None,
            b_mask=res.mask[mask_idx] - mask_target[mask_idx],
            J_mask=res.jac_mask[mask_idx] if with_jacobians else None,
            occluded=occluded_bg,
            n_sampled=s.total,
            depth_keep=depth_idx,
            mask_keep=mask_idx,
        ))
    return out


def assemble_row_weights(surface_b: np.ndarray, frame_residuals: list[FrameResiduals],
                         code: np.ndarray, weights: LossWeights, config: LmConfig,
                         n_points: int) -> dict[str, np.ndarray]:
    """Diagonal entries of the weight matrix P per residual family: loss
    weight x Huber weight x size normalization."""
    k = max(len(frame_residuals), 1)
    rows = {
        "surface": weights.surface / max(n_points, 1)
                   * huber_weight(surface_b, config.huber_surface),
        "code": np.full(len(code), weights.code),
    }
    depth_rows, mask_rows = [], []
    for fr in frame_residuals:
        norm = 1.0 / (k * max(fr.n_sampled, 1))
        depth_rows.append(weights.depth * norm * huber_weight(fr.b_depth, config.huber_depth))
        mask_rows.append(np.full(len(fr.b_mask), weights.mask * norm))
    rows["depth"] = np.concatenate(depth_rows) if depth_rows else np.zeros(0)
    rows["mask"] = np.concatenate(mask_rows) if mask_rows else np.zeros(0)
    return rows


def lm_step(H: np.ndarray, g: np.ndarray, lam: float,
            max_retries: int = 5) -> tuple[np.ndarray, float]:
    """Solve (H + lambda diag(H)) dx = g by Cholesky, raising lambda tenfold
    on factorization failure. Returns (dx, lambda actually used)."""
    d = np.diag(H).copy()
    # tiny isotropic floor keeps unobserved directions solvable; their
    # gradient entries are equally tiny, so the step there stays ~0
    floor = 1e-12 * max(d.max(), 1.0)
    for attempt in range(max_retries + 1):
        A = H + lam * np.diag(d) + floor * np.eye(len(g))
        try:
            L = np.linalg.cholesky(A)
            dx = np.linalg.solve(L.T, np.linalg.solve(L, g))
            return dx, lam
        except np.linalg.LinAlgError:
            lam *= 10.0
    raise FitError("damped normal equations remained singular after retries")


def _objective(problem: FitProblem, pose: Sim3Transform, code: np.ndarray,
               active: list[FrameResiduals] | None) -> tuple[float, dict]:
    """Robustified weighted objective and the plain loss breakdown.

    `active` fixes the iteration's occlusion / validity row selection so a
    candidate is compared on the same objective as the current state.
    """
    w, cfg = problem.weights, problem.config
    v = problem.decoder(pose.apply(problem.points), code)
    n = len(v)
    loss_surface = float(np.mean(v**2))
    robust = w.surface * float(np.sum(huber_rho(v, cfg.huber_surface))) / n

    loss_depth = loss_mask = 0.0
    if active:
        k = len(active)
        for frame, fr in zip(problem.frames, active):
            s = frame.samples
            pixels = np.concatenate([s.fg_pixels, s.bg_pixels]) if s.n_bg else s.fg_pixels
            res = render_frame_pixels(problem.decoder, code, pose, frame.camera,
                                      frame.intrinsics, pixels, frame.bracket,
                                      problem.sigma)
            depth_target, mask_target = _frame_targets(s, frame.bracket.d_max)
            norm = 1.0 / (k * max(fr.n_sampled, 1))
            e_d = res.depth[fr.depth_keep] - depth_target[fr.depth_keep]
            e_m = res.mask[fr.mask_keep] - mask_target[fr.mask_keep]
            loss_depth += float(np.sum(e_d**2)) * norm
            loss_mask += float(np.sum(e_m**2)) * norm
            robust += w.depth * norm * float(np.sum(huber_rho(e_d, cfg.huber_depth)))
            robust += w.mask * norm * float(np.sum(e_m**2))

    loss_code = float(code @ code)
    robust += w.code * loss_code
    terms = {
        "surface": loss_surface,
        "depth": loss_depth,
        "mask": loss_mask,
        "code": loss_code,
        "total": (w.surface * loss_surface + w.depth * loss_depth
                  + w.mask * loss_mask + w.code * loss_code),
    }
    return robust, terms


def initialize_pose(points_w: np.ndarray) -> Sim3Transform:
    """Identity rotation, unit scale, translation moving the point cloud's
    bounding-box center to the origin."""
    lo = points_w.min(axis=0)
    hi = points_w.max(axis=0)
    return Sim3Transform(1.0, np.eye(3), -0.5 * (lo + hi))


def fit(problem: FitProblem) -> FitResult:
    """Run the joint pose/shape LM optimization from the documented
    initialization until convergence."""
    t_start = time.perf_counter()
    points = np.asarray(problem.points, float)
    if len(points) < problem.min_points:
        raise FitError(f"submap point cloud too small: {len(points)} < {problem.min_points}")

    cfg = problem.config
    w = problem.weights
    latent = problem.decoder.latent_size
    pose = initialize_pose(points)
    code = np.zeros(latent)

    lam = cfg.initial_lambda
    log_lines: list[str] = []
    converged = False
    message = ""
    rendering_active = True
    small_improvements = 0
    loss_increases = 0
    iterations = 0

    active = None
    prev_robust = None

    for it in range(cfg.max_iterations):
        iterations = it + 1
        # residuals, Jacobians and this iteration's occlusion classification
        b_s, J_s = surface_residuals(points, pose, code, problem.decoder)
        frame_res = rendering_residuals(problem.frames, pose, code, problem.decoder,
                                        problem.sigma, problem.occlusion_threshold)
        n_render_rows = sum(len(fr.b_mask) + len(fr.b_depth) for fr in frame_res)
        if problem.frames and n_render_rows == 0 and rendering_active:
            rendering_active = False
            log_lines.append("# all sampled pixels occluded; "
                             "continuing with surface and code terms only")
        active = frame_res if rendering_active else []

        rows = assemble_row_weights(-b_s, active, code, w, cfg, len(points))

        dim = 7 + latent
        H = np.zeros((dim, dim))
        g = np.zeros(dim)
        # surface family: b = -r already
        H += (J_s * rows["surface"][:, None]).T @ J_s
        g += J_s.T @ (rows["surface"] * b_s)
        # rendering families: r = rendered - target
        for fr, wd, wm in _iter_frame_rows(active, rows):
            if len(fr.b_depth):
                H += (fr.J_depth * wd[:, None]).T @ fr.J_depth
                g -= fr.J_depth.T @ (wd * fr.b_depth)
            if len(fr.b_mask):
                H += (fr.J_mask * wm[:, None]).T @ fr.J_mask
                g -= fr.J_mask.T @ (wm * fr.b_mask)
        # code regularizer: r = z, J = [0 | I]
        H[7:, 7:] += np.diag(rows["code"])
        g[7:] -= rows["code"] * code

        robust0, terms0 = _objective(problem, pose, code, active)
        if prev_robust is None:
            prev_robust = robust0

        accepted = False
        rejects = 0
        while not accepted and rejects <= cfg.max_consecutive_rejects and lam <= cfg.max_lambda:
            try:
                dx, lam = lm_step(H, g, lam)
            except FitError as err:
                return _finish(problem, pose, code, active, iterations, False,
                               t_start, log_lines, f"failed: {err}")
            step_norm = float(np.abs(dx).max())
            if step_norm < cfg.step_tolerance:
                # already stationary under the current damping
                converged = True
                message = "step tolerance reached"
                log_lines.append(
                    f"iter={it} lambda={lam:.3e} total={terms0['total']:.6e} "
                    f"|dx|={step_norm:.3e} accepted=0")
                break
            cand_pose = sim3_retract(pose, dx[:7])
            cand_code = code + dx[7:]
            robust1, terms1 = _objective(problem, cand_pose, cand_code, active)
            accepted = robust1 < robust0
            log_lines.append(
                f"iter={it} lambda={lam:.3e} L_s={terms1['surface']:.6e} "
                f"L_d={terms1['depth']:.6e} L_m={terms1['mask']:.6e} "
                f"L_r={terms1['code']:.6e} total={terms1['total']:.6e} "
                f"|dx|={step_norm:.3e} accepted={int(accepted)}")
            if accepted:
                pose, code = cand_pose, cand_code
                lam = max(lam * cfg.accept_factor, 1e-12)
                if robust1 > prev_robust:
                    loss_increases += 1
                    if loss_increases >= cfg.divergence_patience:
                        return _finish(problem, pose, code, active, iterations, False,
                                       t_start, log_lines, "failed: diverging loss")
                else:
                    loss_increases = 0
                rel_drop = (robust0 - robust1) / max(robust0, 1e-300)
                prev_robust = robust1
                if step_norm < cfg.step_tolerance:
                    converged = True
                    message = "step tolerance reached"
                elif rel_drop < cfg.relative_loss_tolerance:
                    small_improvements += 1
                    if small_improvements >= cfg.loss_patience:
                        converged = True
                        message = "loss plateau"
                else:
                    small_improvements = 0
            else:
                lam *= cfg.reject_factor
                rejects += 1
        if converged:
            break
        if not accepted:
            message = "no acceptable step found"
            break

    if not message:
        message = "iteration limit reached"
        converged = False
    return _finish(problem, pose, code, active, iterations, converged,
                   t_start, log_lines, message)


def _iter_frame_rows(frame_res: list[FrameResiduals], rows: dict):
    """Pair every frame's residuals with its slice of the weight rows."""
    off_d = off_m = 0
    for fr in frame_res:
        nd, nm = len(fr.b_depth), len(fr.b_mask)
        yield fr, rows["depth"][off_d:off_d + nd], rows["mask"][off_m:off_m + nm]
        off_d += nd
        off_m += nm


def _finish(problem, pose, code, active, iterations, converged, t_start,
            log_lines, message) -> FitResult:
    from .geometry import sim3_log

    _, terms = _objective(problem, pose, code, active)
    return FitResult(
        pose=pose,
        tangent=sim3_log(pose),
        code=code,
        loss_terms=terms,
        iterations=iterations,
        converged=converged,
        wall_time=time.perf_counter() - t_start,
        log_lines=log_lines,
        message=message,
    )
