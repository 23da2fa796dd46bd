"""Synthetic street scenes with controllable detector and stereo noise.

The world frame is the first camera frame (x right, y down, z forward); the
road is the plane ``y = camera_height`` and the camera moves in it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (BBox2D, CameraIntrinsics, EgoPose,
                       FrameContext, GroundPlane, box3d_corners, project_many)
from .metrics import GTState, GTTrajectory
from .observations import CATEGORIES, Category, Detection2D, Proposal3D, SizeStats

KITTI_INTRINSICS = CameraIntrinsics(721.5377, 609.5593, 172.854, 1242, 375)
MIN_DEPTH = 0.5


@dataclass
class ObjectSpec:
    category: Category
    position: tuple            # (x, z) on the road, world frame
    velocity: tuple = (0.0, 0.0)
    profile: str = "constant"  # constant | turn
    yaw_rate: float = 0.0      # rad/s, used by "turn"
    size3d: tuple | None = None
    appearance: tuple | None = None

    def __post_init__(self):
        if isinstance(self.category, str):
            self.category = Category.parse(self.category)
        if self.profile not in ("constant", "turn"):
            raise ValueError(f"objects.profile must be 'constant' or 'turn', got {self.profile!r}")


@dataclass
class EgoSpec:
    kind: str = "static"       # static | straight | curve | poses
    speed: float = 0.0
    yaw_rate: float = 0.0
    poses: list = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("static", "straight", "curve", "poses"):
            raise ValueError(f"ego.kind must be static, straight, curve or poses, got {self.kind!r}")


@dataclass
class DetectionNoise:
    center_sigma: float = 0.0
    size_sigma: float = 0.0
    miss_base: float = 0.0
    miss_slope: float = 0.0
    fp_rate: float = 0.0
    confusion_prob: float = 0.0
    appearance_sigma: float = 0.0
    true_score: float = 1.0
    fp_score: tuple = (0.05, 0.4)

    def __post_init__(self):
        for name in ("miss_base", "confusion_prob"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"detection_noise.{name} must lie in [0, 1]")
        for name in ("center_sigma", "size_sigma", "miss_slope", "fp_rate", "appearance_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"detection_noise.{name} must be >= 0")

    def miss_probability(self, depth: float) -> float:
        return float(np.clip(self.miss_base + self.miss_slope * depth, 0.0, 1.0))


@dataclass
class ProposalNoise:
    lateral_sigma: float = 0.0
    depth_k: float = 0.0
    size_frac: float = 0.0
    z_max: float = math.inf
    points: int = 50
    velocity_sigma: float = 0.0
    no_flow: bool = False

    def __post_init__(self):
        if self.depth_k < 0:
            raise ValueError("proposal_noise.depth_k must be >= 0")
        if not self.z_max > 0:
            raise ValueError("proposal_noise.z_max must be > 0")
        if self.points < 1:
            raise ValueError("proposal_noise.points must be >= 1")
        for name in ("lateral_sigma", "size_frac", "velocity_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"proposal_noise.{name} must be >= 0")

    def depth_sigma(self, depth: float) -> float:
        return self.depth_k * depth * depth

    def availability(self, depth: float) -> float:
        return float(np.clip(1.0 - depth / self.z_max, 0.0, 1.0))


@dataclass
class ScenarioSpec:
    duration: int = 100
    frame_rate: float = 10.0
    objects: list = field(default_factory=list)
    ego: EgoSpec = field(default_factory=EgoSpec)
    detection_noise: DetectionNoise = field(default_factory=DetectionNoise)
    proposal_noise: ProposalNoise = field(default_factory=ProposalNoise)
    seed: int = 0
    intrinsics: CameraIntrinsics = KITTI_INTRINSICS
    camera_height: float = 1.65
    appearance_dim: int = 16
    occlusion: bool = False

    def __post_init__(self):
        if self.duration < 1:
            raise ValueError("duration must be >= 1")
        if not self.frame_rate > 0:
            raise ValueError("frame_rate must be > 0")


def _turn_integral(omega: float, t: float) -> np.ndarray:
    """Integral of the planar rotation rot(omega * s) for s in [0, t]."""
    if abs(omega) < 1e-12:
        return np.array([[t, 0.0], [0.0, t]])
    s, c = math.sin(omega * t), math.cos(omega * t)
    return np.array([[s, c - 1.0], [1.0 - c, s]]) / omega


def _rot(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def object_motion(obj: ObjectSpec, t: float):
    """Ground (x, z) position and velocity at time ``t``."""
    p0 = np.asarray(obj.position, dtype=float)
    v0 = np.asarray(obj.velocity, dtype=float)
    if obj.profile == "constant":
        return p0 + v0 * t, v0.copy()
    return p0 + _turn_integral(obj.yaw_rate, t) @ v0, _rot(obj.yaw_rate * t) @ v0


def ego_pose(ego: EgoSpec, t: float, frame: int) -> EgoPose:
    if ego.kind == "poses":
        return ego.poses[min(frame, len(ego.poses) - 1)]
    if ego.kind == "static":
        return EgoPose.identity()
    omega = ego.yaw_rate if ego.kind == "curve" else 0.0
    psi = omega * t
    # camera forward (0, 0, 1) points along (sin psi, cos psi) in world (x, z)
    if abs(omega) < 1e-12:
        cx, cz = 0.0, ego.speed * t
    else:
        cx = ego.speed / omega * (1.0 - math.cos(psi))
        cz = ego.speed / omega * math.sin(psi)
    c, s = math.cos(psi), math.sin(psi)
    R_cw = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    R = R_cw.T
    return EgoPose(R, -R @ np.array([cx, 0.0, cz]))


def _appearance(spec: ScenarioSpec, index: int, obj: ObjectSpec) -> np.ndarray:
    if obj.appearance is not None:
        a = np.asarray(obj.appearance, dtype=float)
        return a / a.sum()
    rng = np.random.default_rng([spec.seed, 7919, index])
    return rng.dirichlet(np.full(spec.appearance_dim, 0.5))


@dataclass
class SimTruth:
    """Extra per-object truth the detector/stereo models need."""
    size3d: np.ndarray
    appearance: np.ndarray
    velocity: dict = field(default_factory=dict)   # frame -> world velocity


def generate(spec: ScenarioSpec):
    """Ground-truth trajectories and per-frame contexts for a scenario.

    Returns ``(gt, contexts)``; each trajectory's ``truth`` holds size,
    appearance and velocities for the sensor models.
    """
    stats = SizeStats.default()
    plane = GroundPlane.from_camera_height(spec.camera_height)
    intr = spec.intrinsics
    contexts = []
    for k in range(spec.duration):
        t = k / spec.frame_rate
        contexts.append(FrameContext(k, t, intr, ego_pose(spec.ego, t, k), plane))

    gt = []
    for idx, obj in enumerate(spec.objects):
        size = np.asarray(obj.size3d if obj.size3d is not None else stats.mean[obj.category],
                          dtype=float)
        traj = GTTrajectory(idx, obj.category, truth=SimTruth(size, _appearance(spec, idx, obj)))
        for ctx in contexts:
            (x, z), (vx, vz) = object_motion(obj, ctx.timestamp)
            pos = np.array([x, spec.camera_height, z])
            traj.truth.velocity[ctx.frame] = np.array([vx, 0.0, vz])
            box, depth = _project_object(pos, size, ctx)
            if box is None:
                traj.frames[ctx.frame] = GTState(None, pos, depth, visible=False)
            else:
                traj.frames[ctx.frame] = GTState(box, pos, depth, visible=True)
        gt.append(traj)
    if spec.occlusion:
        _apply_occlusion(gt, contexts)
    return gt, contexts


def _project_object(pos, size, ctx: FrameContext):
    depth = ctx.depth_of(pos)
    corners = ctx.ego.to_camera(box3d_corners(pos, size, ctx.plane))
    if np.any(corners[:, 2] < MIN_DEPTH):
        return None, depth
    uv = project_many(corners, ctx.intrinsics)
    lo, hi = uv.min(axis=0), uv.max(axis=0)
    box = BBox2D.from_corners(lo[0], lo[1], hi[0], hi[1])
    intr = ctx.intrinsics
    if not (0 <= box.x <= intr.image_width and 0 <= box.y <= intr.image_height):
        return None, depth
    return box, depth


def _apply_occlusion(gt, contexts, covered: float = 0.5):
    """Hide objects whose box is mostly covered by a nearer visible object."""
    for ctx in contexts:
        vis = [g for g in gt if g.frames[ctx.frame].visible]
        vis.sort(key=lambda g: g.frames[ctx.frame].depth)
        kept = []
        for g in vis:
            s = g.frames[ctx.frame]
            l, t, r, b = s.bbox.corners()
            area = s.bbox.w * s.bbox.h
            hidden = False
            for o in kept:
                ol, ot, orr, ob = o.bbox.corners()
                iw = min(r, orr) - max(l, ol)
                ih = min(b, ob) - max(t, ot)
                if iw > 0 and ih > 0 and iw * ih / area >= covered:
                    hidden = True
                    break
            if hidden:
                s.visible = False
            else:
                kept.append(s)


def _ground_directions(pos, ctx: FrameContext):
    """Unit (lateral, depth) directions on the road as seen from the camera."""
    n = ctx.plane.normal
    ray = pos - ctx.ego.center
    ray = ray - (ray @ n) * n
    depth_dir = ray / np.linalg.norm(ray)
    return np.cross(n, depth_dir), depth_dir


def observe(gt, ctx: FrameContext, det_noise: DetectionNoise, prop_noise: ProposalNoise,
            seed: int, frame: int | None = None, fp_sizes=(30.0, 150.0)):
    """Noisy detections and proposals for one frame. Deterministic in (seed, frame)."""
    frame = ctx.frame if frame is None else frame
    rng = np.random.default_rng([seed, frame])
    intr = ctx.intrinsics
    dets, props = [], []
    for g in gt:
        s = g.frames.get(frame)
        if s is None or not s.visible:
            continue
        truth = g.truth
        z = s.depth
        if rng.random() >= det_noise.miss_probability(z):
            c = np.array([s.bbox.x, s.bbox.y]) + rng.normal(0.0, 1.0, 2) * det_noise.center_sigma
            wh = np.array([s.bbox.w, s.bbox.h]) + rng.normal(0.0, 1.0, 2) * det_noise.size_sigma
            wh = np.maximum(wh, 1.0)
            cat = g.category
            if rng.random() < det_noise.confusion_prob:
                others = [c_ for c_ in CATEGORIES if c_ != cat]
                cat = others[int(rng.integers(len(others)))]
            app = truth.appearance
            if det_noise.appearance_sigma > 0:
                app = np.clip(app + rng.normal(0.0, det_noise.appearance_sigma, app.shape), 0, None)
                app = app / app.sum()
            dets.append(Detection2D(BBox2D(c[0], c[1], wh[0], wh[1]), cat,
                                    det_noise.true_score, app))
        if rng.random() < prop_noise.availability(z):
            lat, dep = _ground_directions(s.position, ctx)
            e_lat = rng.normal(0.0, 1.0) * prop_noise.lateral_sigma
            e_dep = rng.normal(0.0, 1.0) * prop_noise.depth_sigma(z)
            pos = s.position + e_lat * lat + e_dep * dep
            size = truth.size3d * (1.0 + rng.normal(0.0, 1.0, 3) * prop_noise.size_frac)
            size = np.maximum(size, 0.05)
            vel = None
            if not prop_noise.no_flow:
                vel = truth.velocity[frame] + rng.normal(0.0, 1.0, 3) * prop_noise.velocity_sigma
                vel[1] = 0.0
            m = prop_noise.points
            props.append(Proposal3D(pos, size, 1.0, vel, range(g.id * m, g.id * m + m)))
    n_fp = int(math.floor(det_noise.fp_rate))
    if rng.random() < det_noise.fp_rate - n_fp:
        n_fp += 1
    for _ in range(n_fp):
        h = rng.uniform(*fp_sizes)
        w = h * rng.uniform(0.4, 1.2)
        x = rng.uniform(0.5 * w, intr.image_width - 0.5 * w)
        bottom = rng.uniform(intr.v0 + 5.0, intr.image_height)
        cat = CATEGORIES[int(rng.integers(3))]
        score = rng.uniform(*det_noise.fp_score)
        app = rng.dirichlet(np.full(len(gt[0].truth.appearance) if gt else 16, 0.5))
        dets.append(Detection2D(BBox2D(x, bottom - 0.5 * h, w, h), cat, score, app))
    return dets, props


def simulate(spec: ScenarioSpec, seed: int | None = None):
    """Generate truth and the full observation stream.

    Returns ``(gt, contexts, frames)`` with ``frames[k] = (detections, proposals)``.
    """
    seed = spec.seed if seed is None else seed
    gt, contexts = generate(spec)
    frames = [observe(gt, ctx, spec.detection_noise, spec.proposal_noise, seed)
              for ctx in contexts]
    return gt, contexts, frames


# lateral lane offsets (m) and the categories that may use them
_LANES = ((-3.5, (Category.CAR,)), (3.5, (Category.CAR,)),
          (-7.0, (Category.CAR, Category.CYCLIST)), (7.0, (Category.CAR, Category.CYCLIST)),
          (-10.0, (Category.PEDESTRIAN, Category.CYCLIST)),
          (10.0, (Category.PEDESTRIAN, Category.CYCLIST)))


def random_scenario(seed: int, n_objects: int = 5, duration: int = 100,
                    ego: EgoSpec | None = None,
                    detection_noise: DetectionNoise | None = None,
                    proposal_noise: ProposalNoise | None = None,
                    depth_range=(6.0, 35.0)) -> ScenarioSpec:
    """Seeded street scene with one object per lane, so objects never collide.

    Car speeds are drawn around the ego speed so traffic stays in view.
    """
    if not 1 <= n_objects <= len(_LANES):
        raise ValueError(f"n_objects must lie in [1, {len(_LANES)}]")
    rng = np.random.default_rng([seed, 104729])
    base = ego.speed if ego is not None and ego.kind != "static" else 0.0
    lanes = rng.permutation(len(_LANES))[:n_objects]
    objects = []
    for li in sorted(lanes):
        x, cats = _LANES[li]
        cat = cats[int(rng.integers(len(cats)))]
        z = rng.uniform(*depth_range)
        if cat == Category.CAR:
            vel = (0.0, base + rng.uniform(-3.0, 3.0))
        elif cat == Category.CYCLIST:
            vel = (0.0, rng.uniform(2.0, 5.0))
        else:
            vel = (rng.uniform(-0.3, 0.3), rng.uniform(-1.5, 1.5))
        objects.append(ObjectSpec(cat, (x, z), vel))
    return ScenarioSpec(duration=duration, objects=objects, ego=ego or EgoSpec(),
                        detection_noise=detection_noise or DetectionNoise(),
                        proposal_noise=proposal_noise or ProposalNoise(), seed=seed)
