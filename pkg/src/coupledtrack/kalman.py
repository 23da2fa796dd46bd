"""Coupled 2D-3D extended Kalman filter.

State layout (17 entries)::

    0..3    x2D, y2D, w2D, h2D          image box, center format (px)
    4..7    their rates                  (px/s)
    8..10   ground position, world       (m)
    11..13  velocity, world              (m/s)
    14..16  w3D, h3D, l3D                (m)

The 2D box and the 3D object are propagated independently with constant
velocity and then mixed: the box height with the projected 3D height and the
box footpoint with the projected ground position.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import block_diag

from .geometry import (BBox2D, BehindCameraError, CameraIntrinsics, EgoPose,
                       FrameContext, GeometryError, backproject_to_ground)
from .observations import Observation, SizeStats

DIM = 17
BOX = slice(0, 4)
BOX_VEL = slice(4, 8)
POS = slice(8, 11)
VEL = slice(11, 14)
SIZE = slice(14, 17)
MIN_SIZE = 1e-3
_PSD_FLOOR = -1e-9
_POSITIVE = (2, 3, 14, 15, 16)


class FrustumExit(BehindCameraError):
    """The tracked object is no longer in front of the camera."""


@dataclass(frozen=True)
class CouplingWeights:
    w_a: float = 0.7
    w_b: float = 0.3

    def __post_init__(self):
        for name in ("w_a", "w_b"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"coupling.{name} must lie in [0, 1]")
        if abs(self.w_a + self.w_b - 1.0) > 1e-9:
            raise ValueError("coupling.w_a + coupling.w_b must equal 1")

    @classmethod
    def decoupled(cls) -> "CouplingWeights":
        return cls(1.0, 0.0)


@dataclass(frozen=True)
class NoiseConfig:
    # process noise spectral densities
    q_box_center: float = 100.0     # px^2/s^3
    q_box_size: float = 50.0        # px^2/s^3
    q_position: float = 0.5         # m^2/s^3
    q_size: float = 0.01            # m^2/s
    # fused measurement
    r_box_center: float = 4.0       # px^2
    r_box_size: float = 4.0         # px^2
    r_pos_sigma0: float = 0.1       # m, along the ray: sigma = sigma0 + k z^2
    r_pos_k: float = 0.005          # 1/m
    r_pos_lateral: float = 0.1      # m, across the ray
    r_velocity: float = 0.25        # (m/s)^2
    r_size: float = 0.04            # m^2
    # partial observations
    partial_pos_sigma0: float = 1.0
    partial_pos_k: float = 0.005
    partial_pos_lateral: float = 0.3
    mean_size_var: float = 0.25
    # initial uncertainty of quantities that are not measured at birth
    p0_box_vel: float = 400.0
    p0_velocity: float = 4.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if name.endswith("_k"):
                if not value >= 0:
                    raise ValueError(f"noise.{name} must be >= 0")
            elif not value > 0:
                raise ValueError(f"noise.{name} must be > 0")
        for name in ("sigma0", "k", "lateral"):
            if getattr(self, f"partial_pos_{name}") < getattr(self, f"r_pos_{name}"):
                raise ValueError(f"noise.partial_pos_{name} must not be smaller than "
                                 f"noise.r_pos_{name}")

    def fused_pos_var(self, depth: float) -> float:
        """Variance along the viewing ray of a fused position at ``depth``."""
        return (self.r_pos_sigma0 + self.r_pos_k * depth * depth) ** 2

    def partial_pos_var(self, depth: float) -> float:
        """Variance along the viewing ray of a back-projected footpoint at ``depth``."""
        return (self.partial_pos_sigma0 + self.partial_pos_k * depth * depth) ** 2

    def fused_pos_cov(self, point, ctx: FrameContext | None) -> np.ndarray:
        if ctx is None:
            return np.eye(3) * max(self.r_pos_sigma0, self.r_pos_lateral) ** 2
        return ray_covariance(point, ctx, self.r_pos_lateral ** 2,
                              self.fused_pos_var(ctx.depth_of(point)))

    def partial_pos_cov(self, point, ctx: FrameContext) -> np.ndarray:
        return ray_covariance(point, ctx, self.partial_pos_lateral ** 2,
                              self.partial_pos_var(ctx.depth_of(point)))


def ray_covariance(point, ctx: FrameContext, lateral_var: float, ray_var: float) -> np.ndarray:
    """Covariance with ``ray_var`` along the camera ray through ``point`` and
    ``lateral_var`` across it; depth errors dominate stereo and back-projection."""
    ray = np.asarray(point, dtype=float) - ctx.ego.center
    n = np.linalg.norm(ray)
    if n == 0:
        return np.eye(3) * max(lateral_var, ray_var)
    ray /= n
    return lateral_var * np.eye(3) + (ray_var - lateral_var) * np.outer(ray, ray)


@dataclass(frozen=True, eq=False)
class CoupledState:
    mean: np.ndarray
    cov: np.ndarray

    @property
    def b2d(self) -> BBox2D:
        return BBox2D.from_array(self.mean[BOX])

    @property
    def b2d_vel(self) -> np.ndarray:
        return self.mean[BOX_VEL].copy()

    @property
    def position(self) -> np.ndarray:
        return self.mean[POS].copy()

    @property
    def velocity(self) -> np.ndarray:
        return self.mean[VEL].copy()

    @property
    def size3d(self) -> np.ndarray:
        return self.mean[SIZE].copy()

    @property
    def covariance(self) -> np.ndarray:
        return self.cov


def _clamp(mean):
    mean[list(_POSITIVE)] = np.maximum(mean[list(_POSITIVE)], MIN_SIZE)
    return mean


def _symmetrize(cov):
    cov = 0.5 * (cov + cov.T)
    w = np.linalg.eigvalsh(cov)
    if w[0] < _PSD_FLOOR:
        warnings.warn(f"covariance lost positive semi-definiteness (min eig {w[0]:.3g}); clamped",
                      RuntimeWarning, stacklevel=3)
        w_full, V = np.linalg.eigh(cov)
        cov = (V * np.maximum(w_full, 0.0)) @ V.T
        cov = 0.5 * (cov + cov.T)
    return cov


def init_state(obs: Observation, ctx: FrameContext, stats: SizeStats,
               noise: NoiseConfig) -> CoupledState:
    """Start a track from a single observation."""
    det = obs.detection
    mean = np.zeros(DIM)
    var = np.zeros(DIM)
    mean[BOX] = det.bbox.as_array()
    var[0:2] = noise.r_box_center
    var[2:4] = noise.r_box_size
    var[BOX_VEL] = noise.p0_box_vel
    if obs.fused:
        prop = obs.proposal
        mean[POS] = prop.position
        if prop.velocity is not None:
            mean[VEL] = prop.velocity
            var[VEL] = noise.r_velocity
        else:
            var[VEL] = noise.p0_velocity
        mean[SIZE] = prop.size3d
        var[SIZE] = noise.r_size
    else:
        try:
            p = backproject_to_ground(det.bbox.footpoint, ctx.intrinsics, ctx.ego, ctx.plane)
        except GeometryError as exc:
            raise ValueError(f"cannot initialize from a partial observation: {exc}") from exc
        mean[POS] = p
        var[VEL] = noise.p0_velocity
        mean[SIZE] = stats.mean[det.category]
        var[SIZE] = noise.mean_size_var
    cov = np.diag(var)
    cov[POS, POS] = (noise.fused_pos_cov(mean[POS], ctx) if obs.fused
                     else noise.partial_pos_cov(mean[POS], ctx))
    return CoupledState(_clamp(mean), cov)


# -- transition -------------------------------------------------------------

def _ego_step(x, intr: CameraIntrinsics, ego_prev: EgoPose, ego_curr: EgoPose):
    """Carry the box footpoint through the camera motion. Returns (x', J)."""
    J = np.eye(DIM)
    if ego_prev == ego_curr:
        return x, J
    f, u0, v0 = intr.f, intr.u0, intr.v0
    Rp, tp = ego_prev.rotation, ego_prev.translation
    Rc, tc = ego_curr.rotation, ego_curr.translation
    z = Rp[2] @ x[POS] + tp[2]
    if z <= 0:
        raise FrustumExit("object is behind the previous camera")
    ray = np.array([(x[0] - u0) / f, (x[1] + 0.5 * x[3] - v0) / f, 1.0])
    M = Rc @ Rp.T
    m = tc - M @ tp
    P = M @ (z * ray) + m
    if P[2] <= 0:
        raise FrustumExit("object left the camera frustum")
    out = x.copy()
    out[0] = f * P[0] / P[2] + u0
    out[1] = f * P[1] / P[2] + v0 - 0.5 * x[3]
    dpi = np.array([[f / P[2], 0.0, -f * P[0] / P[2] ** 2],
                    [0.0, f / P[2], -f * P[1] / P[2] ** 2]])
    A = dpi @ M
    J[0:2, :] = 0.0
    J[0:2, 0] = A[:, 0] * z / f
    J[0:2, 1] = A[:, 1] * z / f
    J[0:2, 3] = A[:, 1] * z / (2 * f)
    J[1, 3] -= 0.5
    J[0:2, POS] = A @ np.outer(ray, Rp[2])
    return out, J


def _cv_matrix(dt):
    F = np.eye(DIM)
    F[0:4, 4:8] = dt * np.eye(4)
    F[8:11, 11:14] = dt * np.eye(3)
    return F


def _mix_step(x, intr: CameraIntrinsics, ego: EgoPose, cw: CouplingWeights):
    """Blend box height/footpoint with the projected 3D state. Returns (x', J)."""
    wa, wb = cw.w_a, cw.w_b
    J = np.eye(DIM)
    if wb == 0.0 and wa == 1.0:
        return x, J
    f = intr.f
    R = ego.rotation
    Pc = R @ x[POS] + ego.translation
    d = Pc[2]
    if d <= 0:
        raise FrustumExit("object is behind the camera")
    h2, h3 = x[3], x[15]
    u = f * Pc[0] / d + intr.u0
    v = f * Pc[1] / d + intr.v0
    du = (f / d) * R[0] - (f * Pc[0] / d ** 2) * R[2]
    dv = (f / d) * R[1] - (f * Pc[1] / d ** 2) * R[2]

    out = x.copy()
    out[15] = wb * d / f * h2 + wa * h3
    out[3] = wa * h2 + wb * f / d * h3
    out[0] = wa * x[0] + wb * u
    # mixed footpoint minus half the mixed height; the 2D height cancels
    out[1] = wa * x[1] + wb * (v - 0.5 * f * h3 / d)

    J[15, 3] = wb * d / f
    J[15, 15] = wa
    J[15, POS] = wb * h2 / f * R[2]
    J[3, 3] = wa
    J[3, 15] = wb * f / d
    J[3, POS] = -wb * f * h3 / d ** 2 * R[2]
    J[0, 0] = wa
    J[0, POS] = wb * du
    J[1, 1] = wa
    J[1, 15] = -0.5 * wb * f / d
    J[1, POS] = wb * (dv + 0.5 * f * h3 / d ** 2 * R[2])
    return out, J


def transition(mean, dt: float, intr: CameraIntrinsics, ego_prev: EgoPose,
               ego_curr: EgoPose, cw: CouplingWeights):
    """Unclamped state transition and its Jacobian."""
    x1, J1 = _ego_step(np.asarray(mean, dtype=float), intr, ego_prev, ego_curr)
    F = _cv_matrix(dt)
    x2 = F @ x1
    x3, J3 = _mix_step(x2, intr, ego_curr, cw)
    return x3, J3 @ F @ J1


def process_noise(dt: float, noise: NoiseConfig) -> np.ndarray:
    Q = np.zeros((DIM, DIM))
    blocks = [(0, 4, noise.q_box_center), (1, 5, noise.q_box_center),
              (2, 6, noise.q_box_size), (3, 7, noise.q_box_size),
              (8, 11, noise.q_position), (9, 12, noise.q_position), (10, 13, noise.q_position)]
    for i, j, q in blocks:
        Q[i, i] = q * dt ** 3 / 3
        Q[i, j] = Q[j, i] = q * dt ** 2 / 2
        Q[j, j] = q * dt
    for i in range(14, 17):
        Q[i, i] = noise.q_size * dt
    return Q


def predict(state: CoupledState, dt: float, intr: CameraIntrinsics, ego_prev: EgoPose,
            ego_curr: EgoPose, cw: CouplingWeights, noise: NoiseConfig) -> CoupledState:
    """Ego-correct, propagate and couple; raises :class:`FrustumExit` when d_c <= 0."""
    if dt <= 0:
        raise ValueError("prediction step must be positive")
    x, J = transition(state.mean, dt, intr, ego_prev, ego_curr, cw)
    cov = J @ state.cov @ J.T + process_noise(dt, noise)
    return CoupledState(_clamp(x), 0.5 * (cov + cov.T))


def extrapolate(state: CoupledState, dt: float, noise: NoiseConfig) -> CoupledState:
    """3D-only constant-velocity step for tracks outside the frustum."""
    F = np.eye(DIM)
    F[8:11, 11:14] = dt * np.eye(3)
    Q = process_noise(dt, noise)
    Q[:8, :] = 0.0
    Q[:, :8] = 0.0
    Q[14:, 14:] = 0.0
    cov = F @ state.cov @ F.T + Q
    return CoupledState(F @ state.mean, 0.5 * (cov + cov.T))


# -- measurement updates ----------------------------------------------------

def kalman_update(state: CoupledState, idx, z, r) -> CoupledState:
    """Linear update observing state components ``idx``.

    ``r`` holds per-component variances or a full measurement covariance.
    """
    idx = np.asarray(idx)
    R = np.asarray(r, dtype=float)
    if R.ndim == 1:
        R = np.diag(R)
    P = state.cov
    PHt = P[:, idx]
    S = P[np.ix_(idx, idx)] + R
    K = np.linalg.solve(S, PHt.T).T
    innov = np.asarray(z, dtype=float) - state.mean[idx]
    mean = state.mean + K @ innov
    IKH = np.eye(DIM)
    IKH[:, idx] -= K
    cov = IKH @ P @ IKH.T + K @ R @ K.T
    return CoupledState(_clamp(mean), _symmetrize(cov))


def _box_measurement(bbox: BBox2D, noise: NoiseConfig):
    return ([0, 1, 2, 3], list(bbox.as_array()),
            [noise.r_box_center] * 2 + [noise.r_box_size] * 2)


def update_fused(state: CoupledState, obs: Observation, noise: NoiseConfig,
                 ctx: FrameContext | None = None) -> CoupledState:
    """Update with box, position, velocity (if measured) and size of a fused observation."""
    if not obs.fused:
        raise ValueError("update_fused needs an observation with a proposal")
    prop = obs.proposal
    idx, z, r = _box_measurement(obs.detection.bbox, noise)
    idx += [8, 9, 10]
    z += list(prop.position)
    blocks = [np.diag(r), noise.fused_pos_cov(prop.position, ctx)]
    if prop.velocity is not None:
        idx += [11, 12, 13]
        z += list(prop.velocity)
        blocks.append(np.eye(3) * noise.r_velocity)
    idx += [14, 15, 16]
    z += list(prop.size3d)
    blocks.append(np.eye(3) * noise.r_size)
    return kalman_update(state, idx, z, block_diag(*blocks))


def update_partial(state: CoupledState, obs: Observation, ctx: FrameContext,
                   stats: SizeStats, noise: NoiseConfig) -> CoupledState:
    """Update from a detection alone: box, footpoint back-projection, class-mean size."""
    if obs.fused:
        raise ValueError("update_partial needs a detection-only observation")
    det = obs.detection
    idx, z, r = _box_measurement(det.bbox, noise)
    try:
        p = backproject_to_ground(det.bbox.footpoint, ctx.intrinsics, ctx.ego, ctx.plane)
    except GeometryError:
        return kalman_update(state, idx, z, r)
    idx += [8, 9, 10, 14, 15, 16]
    z += list(p) + list(stats.mean[det.category])
    R = block_diag(np.diag(r), noise.partial_pos_cov(p, ctx), np.eye(3) * noise.mean_size_var)
    return kalman_update(state, idx, z, R)


def update_box_only(state: CoupledState, obs: Observation, noise: NoiseConfig) -> CoupledState:
    idx, z, r = _box_measurement(obs.detection.bbox, noise)
    return kalman_update(state, idx, z, r)


def camera_depth(state: CoupledState, ego: EgoPose) -> float:
    return float(ego.to_camera(state.mean[POS])[2])


def with_mean(state: CoupledState, mean) -> CoupledState:
    return replace(state, mean=np.asarray(mean, dtype=float))
