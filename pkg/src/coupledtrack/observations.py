"""Detections, 3D proposals and their early fusion into observations."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .crf import EnergyGraph, solve_multibranch
from .geometry import (BBox2D, BehindCameraError, FrameContext, GeometryError,
                       backproject_to_ground, iou_matrix, projected_box)


class Category(str, enum.Enum):
    CAR = "Car"
    PEDESTRIAN = "Pedestrian"
    CYCLIST = "Cyclist"

    @property
    def index(self) -> int:
        return CATEGORIES.index(self)

    @classmethod
    def parse(cls, name: str) -> "Category":
        key = name.strip().lower()
        for c in cls:
            if c.value.lower() == key or c.name.lower() == key:
                return c
        raise ValueError(f"unknown category {name!r}")


CATEGORIES = (Category.CAR, Category.PEDESTRIAN, Category.CYCLIST)


@dataclass(frozen=True, eq=False)
class Detection2D:
    bbox: BBox2D
    category: Category
    score: float
    appearance: np.ndarray | None = None

    def __post_init__(self):
        if not np.isfinite(self.score):
            raise ValueError("detection score must be finite")


@dataclass(frozen=True, eq=False)
class Proposal3D:
    position: np.ndarray
    size3d: np.ndarray
    score: float = 0.0
    velocity: np.ndarray | None = None
    points: frozenset = frozenset()

    def __post_init__(self):
        p = np.asarray(self.position, dtype=float).reshape(3)
        s = np.asarray(self.size3d, dtype=float).reshape(3)
        if np.any(s <= 0):
            raise ValueError("proposal size components must be positive")
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "size3d", s)
        if self.velocity is not None:
            object.__setattr__(self, "velocity", np.asarray(self.velocity, dtype=float).reshape(3))
        object.__setattr__(self, "points", frozenset(int(i) for i in self.points))

    def without_velocity(self) -> "Proposal3D":
        return Proposal3D(self.position, self.size3d, self.score, None, self.points)


@dataclass(frozen=True, eq=False)
class Observation:
    """A detection, optionally fused with the proposal selected for it.

    ``frame`` and ``det_index`` identify the observation across hypotheses.
    """
    detection: Detection2D
    proposal: Proposal3D | None = None
    frame: int = 0
    det_index: int = 0
    prop_index: int | None = None

    @property
    def fused(self) -> bool:
        return self.proposal is not None

    @property
    def key(self) -> tuple[int, int]:
        return (self.frame, self.det_index)


@dataclass
class SizeStats:
    """Per-category mean and variance of (w3D, h3D, l3D)."""
    mean: dict = field(default_factory=dict)
    var: dict = field(default_factory=dict)

    def __post_init__(self):
        self.mean = {Category.parse(str(getattr(k, "value", k))): np.asarray(v, dtype=float)
                     for k, v in self.mean.items()}
        self.var = {Category.parse(str(getattr(k, "value", k))): np.asarray(v, dtype=float)
                    for k, v in self.var.items()}
        for c, v in self.var.items():
            if v.shape != (3,) or np.any(v <= 0):
                raise ValueError(f"size_stats.var.{c.value}: variances must be 3 positive values")

    @classmethod
    def default(cls) -> "SizeStats":
        mean = {
            Category.CAR: np.array([1.8, 1.6, 4.5]),
            Category.PEDESTRIAN: np.array([0.6, 1.75, 0.6]),
            Category.CYCLIST: np.array([0.6, 1.75, 1.8]),
        }
        return cls(mean, {c: (0.2 * m) ** 2 for c, m in mean.items()})


@dataclass
class FusionWeights:
    w1: float = 1.0
    w2: float = 1.0
    w3: float = 1.0
    w4: float = 1.0
    w5: float = 1.0
    gate_distance: float = 3.0
    gate_iou: float = 0.1
    # footpoint back-projection sigma = sigma0 + sigma_k * z^2
    sigma0: float = 0.1
    sigma_k: float = 0.005
    proposal_sigma: float = 0.3
    branches: int = 8

    def __post_init__(self):
        for name in ("w1", "w2", "w3", "w4", "w5", "gate_distance", "sigma0", "sigma_k"):
            if getattr(self, name) < 0:
                raise ValueError(f"fusion.{name} must be >= 0")
        if not 0 <= self.gate_iou <= 1:
            raise ValueError("fusion.gate_iou must lie in [0, 1]")
        if self.proposal_sigma <= 0:
            raise ValueError("fusion.proposal_sigma must be > 0")
        if self.branches < 1:
            raise ValueError("fusion.branches must be >= 1")


def footpoint_sigma(depth: float, sigma0: float, k: float) -> float:
    return sigma0 + k * depth * depth


def _footpoints(dets, ctx: FrameContext):
    """Ground back-projection of each detection footpoint (NaN rows when impossible)."""
    out = np.full((len(dets), 3), np.nan)
    for i, d in enumerate(dets):
        try:
            out[i] = backproject_to_ground(d.bbox.footpoint, ctx.intrinsics, ctx.ego, ctx.plane)
        except GeometryError:
            pass
    return out


def _proposal_boxes(props, ctx: FrameContext):
    out = np.full((len(props), 4), np.nan)
    for j, p in enumerate(props):
        try:
            out[j] = projected_box(p.position, p.size3d, ctx.intrinsics, ctx.ego,
                                   ctx.plane).as_array()
        except BehindCameraError:
            pass
    return out


@dataclass
class _PairTerms:
    distance: np.ndarray   # ground distance, inf where undefined
    iou: np.ndarray
    phi_size: np.ndarray
    phi_pos: np.ndarray


def _pair_terms(dets, props, stats: SizeStats, ctx: FrameContext, w: FusionWeights) -> _PairTerms:
    n, m = len(dets), len(props)
    if n == 0 or m == 0:
        z = np.zeros((n, m))
        return _PairTerms(np.full((n, m), np.inf), z, z.copy(), z.copy())
    foot = _footpoints(dets, ctx)
    ppos = np.array([p.position for p in props])
    diff = foot[:, None, :] - ppos[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    dist = np.where(np.isnan(dist), np.inf, dist)

    depth = ctx.ego.to_camera(np.nan_to_num(foot))[:, 2]
    sig = footpoint_sigma(depth, w.sigma0, w.sigma_k)
    var = sig[:, None] ** 2 + w.proposal_sigma ** 2
    phi_pos = np.exp(-0.5 * dist ** 2 / var)

    boxes = _proposal_boxes(props, ctx)
    det_boxes = np.array([d.bbox.as_array() for d in dets])
    valid = ~np.isnan(boxes[:, 0])
    iou = np.zeros((n, m))
    if valid.any():
        iou[:, valid] = iou_matrix(det_boxes, boxes[valid])

    sizes = np.array([p.size3d for p in props])
    phi_size = np.empty((n, m))
    for i, d in enumerate(dets):
        mu = stats.mean[d.category]
        var_c = stats.var[d.category]
        phi_size[i] = np.exp(-0.5 * (((sizes - mu) ** 2) / var_c).sum(axis=1))
    return _PairTerms(dist, iou, phi_size, phi_pos)


def gate_pairs(dets, props, ctx: FrameContext, w: FusionWeights,
               stats: SizeStats | None = None) -> list[tuple[int, int]]:
    """Candidate (detection, proposal) pairs that pass both geometric gates."""
    terms = _pair_terms(dets, props, stats or SizeStats.default(), ctx, w)
    ok = (terms.distance <= w.gate_distance) & (terms.iou >= w.gate_iou)
    return [(int(i), int(j)) for i, j in zip(*np.nonzero(ok))]


def fusion_unary(det: Detection2D, prop: Proposal3D, stats: SizeStats,
                 ctx: FrameContext, w: FusionWeights) -> float:
    """Association potential of one (detection, proposal) pair; lower is better."""
    t = _pair_terms([det], [prop], stats, ctx, w)
    return float(-w.w1 * t.phi_size[0, 0] - w.w2 * t.phi_pos[0, 0]
                 - w.w3 * t.iou[0, 0] + w.w4)


def point_overlap(a: Proposal3D, b: Proposal3D) -> float:
    if not a.points or not b.points:
        return 0.0
    return len(a.points & b.points) / min(len(a.points), len(b.points))


def _overlap_matrix(props) -> np.ndarray:
    n = len(props)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = point_overlap(props[i], props[j])
    return out


def fusion_pairwise(a, b, w: FusionWeights) -> tuple[float, bool]:
    """Interaction of two candidate ``(detection, proposal)`` pairs.

    Returns the soft point-overlap penalty and whether the pairs claim the
    same detection or proposal (never selectable together).
    """
    da, pa = a
    db, pb = b
    return w.w5 * point_overlap(pa, pb), (da is db or pa is pb)


@dataclass
class FusionResult:
    observations: list
    pairs: list
    selection: np.ndarray
    energy: float


def fuse_frame_detailed(dets, props, stats: SizeStats, ctx: FrameContext,
                        w: FusionWeights) -> FusionResult:
    for p in props:
        if abs(ctx.plane.signed_distance(p.position)) > 1e-6:
            raise ValueError("proposal position is not on the ground plane")
    terms = _pair_terms(dets, props, stats, ctx, w)
    gate = (terms.distance <= w.gate_distance) & (terms.iou >= w.gate_iou)
    pairs = [(int(i), int(j)) for i, j in zip(*np.nonzero(gate))]
    unary = np.array([-w.w1 * terms.phi_size[i, j] - w.w2 * terms.phi_pos[i, j]
                      - w.w3 * terms.iou[i, j] + w.w4 for i, j in pairs])
    pairwise, exclusions = {}, set()
    if pairs:
        I, J = np.array(pairs).T
        a, b = np.triu_indices(len(pairs), 1)
        clash = (I[a] == I[b]) | (J[a] == J[b])
        exclusions = set(zip(a[clash].tolist(), b[clash].tolist()))
        if w.w5 > 0:
            ov = _overlap_matrix(props)[J[a], J[b]]
            soft = ~clash & (ov > 0)
            pairwise = {(int(x), int(y)): w.w5 * float(v)
                        for x, y, v in zip(a[soft], b[soft], ov[soft])}
    sel = solve_multibranch(EnergyGraph(unary, pairwise, exclusions), w.branches)
    chosen = {pairs[k][0]: pairs[k][1] for k in sel.indices}
    obs = []
    for i, d in enumerate(dets):
        j = chosen.get(i)
        obs.append(Observation(d, props[j] if j is not None else None, ctx.frame, i, j))
    return FusionResult(obs, pairs, sel.selected, sel.energy)


def fuse_frame(dets, props, stats: SizeStats, ctx: FrameContext,
               w: FusionWeights) -> list[Observation]:
    """Select consistent detection/proposal associations for one frame.

    Every detection comes back exactly once, fused when a proposal was
    selected for it and partial otherwise.
    """
    return fuse_frame_detailed(dets, props, stats, ctx, w).observations
