"""Hypothesize-and-select multi-object tracker.

Every frame the tracker grows an over-complete set of trajectory hypotheses
(extension, branching, spawning, persistence outside the frustum) and then
picks a consistent subset by minimizing a pairwise energy over them.
"""
from __future__ import annotations

import collections
import copy
import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import kalman
from .crf import EnergyGraph, solve_multibranch
from .geometry import (BBox2D, FrameContext, GeometryError, backproject_to_ground,
                       iou_2d, iou_matrix)
from .kalman import (CouplingWeights, CoupledState, FrustumExit, NoiseConfig, POS)
from .observations import CATEGORIES, Category, Observation, SizeStats


def _default_confusion():
    return ((0.9, 0.05, 0.05), (0.05, 0.9, 0.05), (0.05, 0.05, 0.9))


@dataclass
class TrackerConfig:
    w_h_min: float = 0.3
    tau: float = 0.1
    w_c: float = 0.4
    gamma: float = 0.04
    w_h_ol: float = 1.0
    w_h_sh: float = 2.0
    min_affinity: float = 0.1
    # squared innovation Mahalanobis distance gate for association
    gate_mahalanobis: float = 9.21
    gate_iou: float = 0.5
    branch_pixels: float = 15.0
    branch_meters: float = 1.0
    branch_appearance: float = 0.7
    max_branches: int = 2
    t_extrap: int = 10
    n_prune: int = 15
    w_spawn: int = 3
    mature_inliers: int = 3
    appearance_alpha: float = 0.1
    # rows: true category, columns: detected category
    confusion: tuple = field(default_factory=_default_confusion)
    branches: int = 8
    two_d_only: bool = False

    def __post_init__(self):
        if not 0 <= self.w_c <= 1:
            raise ValueError("tracker.w_c must lie in [0, 1]")
        for name in ("tau", "gamma", "w_h_ol", "w_h_sh", "min_affinity", "gate_mahalanobis"):
            if getattr(self, name) < 0:
                raise ValueError(f"tracker.{name} must be >= 0")
        for name in ("t_extrap", "n_prune", "w_spawn", "branches"):
            if getattr(self, name) < 1:
                raise ValueError(f"tracker.{name} must be >= 1")
        if self.max_branches < 0:
            raise ValueError("tracker.max_branches must be >= 0")
        if not 0 < self.appearance_alpha <= 1:
            raise ValueError("tracker.appearance_alpha must lie in (0, 1]")
        conf = np.asarray(self.confusion, dtype=float)
        if conf.shape != (3, 3) or np.any(conf < 0) or np.any(conf.sum(axis=1) <= 0):
            raise ValueError("tracker.confusion must be a non-negative 3x3 matrix")
        self.confusion = tuple(tuple(float(v) for v in row) for row in conf)


@dataclass
class TrackHypothesis:
    id: int
    state: CoupledState
    born: int
    last_update: int
    inliers: dict = field(default_factory=dict)        # frame -> Observation
    scores: dict = field(default_factory=dict)         # frame -> s_det * affinity
    category_dist: np.ndarray = field(default_factory=lambda: np.full(3, 1.0 / 3))
    appearance: np.ndarray | None = None
    boxes: dict = field(default_factory=dict)          # frame -> box array
    extrapolating: bool = False
    extrap_frames: int = 0
    last_selected: int = -1

    @property
    def category(self) -> Category:
        return CATEGORIES[int(np.argmax(self.category_dist))]

    def inlier_keys(self) -> set:
        return {o.key for o in self.inliers.values()}


@dataclass
class TrackRow:
    track_id: int
    category: Category
    bbox: BBox2D
    position: np.ndarray
    size3d: np.ndarray
    score: float


class TrackReport:
    """Reported tracks, frame by frame."""

    def __init__(self):
        self.rows: dict[int, list[TrackRow]] = {}

    def add(self, frame: int, rows):
        self.rows[frame] = sorted(rows, key=lambda r: r.track_id)

    def frames(self):
        return sorted(self.rows)

    def __getitem__(self, frame):
        return self.rows.get(frame, [])

    def __len__(self):
        return sum(len(r) for r in self.rows.values())


def observation_position(obs: Observation, ctx: FrameContext):
    """Ground position carried by an observation, or None when unavailable."""
    if obs.fused:
        return obs.proposal.position
    try:
        return backproject_to_ground(obs.detection.bbox.footpoint, ctx.intrinsics,
                                     ctx.ego, ctx.plane)
    except GeometryError:
        return None


def histogram_intersection(a, b) -> float:
    return float(np.minimum(a, b).sum())


def category_compatible(obs: Observation, hyp: TrackHypothesis, cfg: TrackerConfig) -> bool:
    return (obs.detection.category == hyp.category
            or len(hyp.inliers) < cfg.mature_inliers)


def affinity(obs: Observation, hyp: TrackHypothesis, ctx: FrameContext,
             cfg: TrackerConfig, position=None) -> float:
    """Association affinity in [0, 1] between an observation and a predicted hypothesis."""
    if not category_compatible(obs, hyp, cfg):
        return 0.0
    det = obs.detection
    w_c = cfg.w_c
    if det.appearance is None or hyp.appearance is None:
        w_c, phi_c = 0.0, 0.0
    else:
        phi_c = histogram_intersection(det.appearance, hyp.appearance)
    pred_box = hyp.state.b2d
    if cfg.two_d_only:
        d = 0.0
        delta = det.bbox.as_array()[:2] - hyp.state.mean[:2]
        phi_m = math.exp(-0.5 * delta @ np.linalg.solve(hyp.state.cov[:2, :2], delta))
    else:
        if position is None:
            position = observation_position(obs, ctx)
        if position is None:
            d, phi_m = math.inf, 0.0
        else:
            d = max(ctx.depth_of(position), 0.0)
            delta = position - hyp.state.mean[POS]
            phi_m = math.exp(-0.5 * delta @ np.linalg.solve(hyp.state.cov[POS, POS], delta))
    w_m = (1.0 - w_c) * math.exp(-cfg.gamma * d)
    w_p = 1.0 - w_c - w_m
    phi_p = iou_2d(pred_box, det.bbox)
    return float(w_c * phi_c + w_m * phi_m + w_p * phi_p)


def decay_weight(t_now: int, t: int, tau: float) -> float:
    return math.exp(-tau * (t_now - t))


def hypothesis_unary(hyp: TrackHypothesis, t_now: int, cfg: TrackerConfig) -> float:
    if not hyp.scores:
        return cfg.w_h_min
    frames = np.fromiter(hyp.scores.keys(), dtype=float)
    vals = np.fromiter(hyp.scores.values(), dtype=float)
    return float(cfg.w_h_min - np.sum(np.exp(-cfg.tau * (t_now - frames)) * vals))


def box_overlap(h_i: TrackHypothesis, h_j: TrackHypothesis) -> float:
    """Sum over common frames of squared box IoU."""
    total = 0.0
    for t in h_i.boxes.keys() & h_j.boxes.keys():
        v = iou_2d(BBox2D.from_array(h_i.boxes[t]), BBox2D.from_array(h_j.boxes[t]))
        total += v * v
    return total


def hypothesis_pairwise(h_i: TrackHypothesis, h_j: TrackHypothesis, cfg: TrackerConfig) -> float:
    shared = len(h_i.inlier_keys() & h_j.inlier_keys())
    return cfg.w_h_ol * box_overlap(h_i, h_j) + cfg.w_h_sh * shared


def bayes_category(dist, detected: Category, confusion) -> np.ndarray:
    """One forward Bayes step on the category distribution."""
    post = np.asarray(dist, dtype=float) * np.asarray(confusion, dtype=float)[:, detected.index]
    s = post.sum()
    if s <= 0:
        return np.asarray(dist, dtype=float).copy()
    return post / s


@dataclass
class _FrameData:
    ctx: FrameContext
    observations: list
    positions: list
    _gate: tuple | None = None
    _boxes: np.ndarray | None = None

    @property
    def boxes(self) -> np.ndarray:
        if self._boxes is None:
            self._boxes = np.array([o.detection.bbox.as_array() for o in self.observations])
        return self._boxes

    def gate_terms(self, noise: NoiseConfig):
        """Stacked observation positions, their measurement covariances and a validity mask."""
        if self._gate is None:
            n = len(self.observations)
            pos = np.zeros((n, 3))
            cov = np.tile(np.eye(3), (n, 1, 1))
            ok = np.zeros(n, dtype=bool)
            for k, (o, p) in enumerate(zip(self.observations, self.positions)):
                if p is None:
                    continue
                pos[k] = p
                cov[k] = (noise.fused_pos_cov(p, self.ctx) if o.fused
                          else noise.partial_pos_cov(p, self.ctx))
                ok[k] = True
            self._gate = (pos, cov, ok)
        return self._gate


class HypothesisTracker:
    """Online tracker; feed one frame of fused observations at a time."""

    def __init__(self, config: TrackerConfig | None = None,
                 coupling: CouplingWeights | None = None,
                 noise: NoiseConfig | None = None,
                 size_stats: SizeStats | None = None):
        self.cfg = config or TrackerConfig()
        self.coupling = coupling or CouplingWeights()
        self.noise = noise or NoiseConfig()
        self.stats = size_stats or SizeStats.default()
        if self.cfg.two_d_only:
            self.coupling = CouplingWeights.decoupled()
        self.hypotheses: dict[int, TrackHypothesis] = {}
        self._next_id = 0
        self._window = collections.deque(maxlen=self.cfg.w_spawn)
        self._prev_ctx: FrameContext | None = None
        self._claims: dict[tuple, set] = {}
        self._pairs: dict[int, dict[int, list]] = {}   # id -> id -> [overlap, shared]
        self.last_selection: list[int] = []

    # -- bookkeeping ---------------------------------------------------------

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def _pair(self, a, b):
        return self._pairs[a].setdefault(b, self._pairs[b].setdefault(a, [0.0, 0]))

    def _register(self, hyp: TrackHypothesis):
        self.hypotheses[hyp.id] = hyp
        self._pairs[hyp.id] = {}
        for obs in hyp.inliers.values():
            self._claim(hyp.id, obs.key)

    def _claim(self, hid, key):
        owners = self._claims.setdefault(key, set())
        for other in owners:
            if other != hid:
                self._pair(hid, other)[1] += 1
        owners.add(hid)

    def _remove(self, hid):
        hyp = self.hypotheses.pop(hid)
        for obs in hyp.inliers.values():
            owners = self._claims.get(obs.key)
            if owners is not None:
                owners.discard(hid)
                if not owners:
                    del self._claims[obs.key]
        for other in self._pairs.pop(hid):
            self._pairs[other].pop(hid, None)

    def _init_overlaps(self, hyp: TrackHypothesis, before: int):
        """Past-frame box overlap of a new hypothesis with every other one."""
        past = {t: b for t, b in hyp.boxes.items() if t < before}
        if not past:
            return
        for other in self.hypotheses.values():
            if other.id == hyp.id:
                continue
            total = 0.0
            for t in past.keys() & other.boxes.keys():
                v = iou_2d(BBox2D.from_array(past[t]), BBox2D.from_array(other.boxes[t]))
                total += v * v
            if total > 0:
                self._pair(hyp.id, other.id)[0] += total

    # -- filtering -----------------------------------------------------------

    def _init_state(self, obs: Observation, ctx: FrameContext):
        try:
            return kalman.init_state(obs, ctx, self.stats, self.noise)
        except ValueError:
            if not self.cfg.two_d_only:
                return None
        # 2D-only tracking does not need a ground intersection
        mean = np.zeros(kalman.DIM)
        mean[kalman.BOX] = obs.detection.bbox.as_array()
        mean[kalman.SIZE] = self.stats.mean[obs.detection.category]
        var = np.ones(kalman.DIM)
        var[0:4] = self.noise.r_box_center
        var[4:8] = self.noise.p0_box_vel
        return CoupledState(mean, np.diag(var))

    def _update(self, state: CoupledState, obs: Observation, ctx: FrameContext):
        if self.cfg.two_d_only:
            return kalman.update_box_only(state, obs, self.noise)
        if obs.fused:
            return kalman.update_fused(state, obs, self.noise, ctx)
        return kalman.update_partial(state, obs, ctx, self.stats, self.noise)

    def _predict(self, hyp: TrackHypothesis, prev: FrameContext, ctx: FrameContext):
        dt = ctx.timestamp - prev.timestamp
        if hyp.extrapolating:
            hyp.state = kalman.extrapolate(hyp.state, dt, self.noise)
            hyp.extrap_frames += 1
            return
        ego_prev = ctx.ego if self.cfg.two_d_only else prev.ego
        try:
            hyp.state = kalman.predict(hyp.state, dt, ctx.intrinsics, ego_prev, ctx.ego,
                                       self.coupling, self.noise)
        except FrustumExit:
            self._start_extrapolation(hyp)

    @staticmethod
    def _start_extrapolation(hyp: TrackHypothesis):
        hyp.extrapolating = True
        hyp.extrap_frames = 1

    @staticmethod
    def _in_image(state: CoupledState, ctx: FrameContext) -> bool:
        x, y = state.mean[0], state.mean[1]
        intr = ctx.intrinsics
        return 0 <= x <= intr.image_width and 0 <= y <= intr.image_height

    def _observe(self, hyp: TrackHypothesis, obs: Observation, aff: float, ctx: FrameContext):
        hyp.state = self._update(hyp.state, obs, ctx)
        t = ctx.frame
        hyp.inliers[t] = obs
        hyp.scores[t] = obs.detection.score * aff
        hyp.last_update = t
        hyp.category_dist = bayes_category(hyp.category_dist, obs.detection.category,
                                           self.cfg.confusion)
        app = obs.detection.appearance
        if app is not None:
            if hyp.appearance is None:
                hyp.appearance = np.asarray(app, dtype=float).copy()
            else:
                a = self.cfg.appearance_alpha
                mixed = (1 - a) * hyp.appearance + a * np.asarray(app, dtype=float)
                hyp.appearance = mixed / mixed.sum()

    # -- association ---------------------------------------------------------

    def _candidates(self, hyp: TrackHypothesis, frame: _FrameData):
        """Gated observations sorted by decreasing affinity: [(aff, index)]."""
        if not frame.observations:
            return []
        cfg = self.cfg
        st = hyp.state
        boxes = frame.boxes
        ious = iou_matrix(st.mean[None, :4], boxes)[0]
        S = st.cov[:2, :2] + self.noise.r_box_center * np.eye(2)
        delta = boxes[:, :2] - st.mean[:2]
        maha = np.einsum("ij,ij->i", delta @ np.linalg.inv(S), delta)
        if not cfg.two_d_only:
            maha3 = np.full(len(boxes), np.inf)
            pos, cov, ok = frame.gate_terms(self.noise)
            if ok.any():
                delta = pos[ok] - st.mean[POS]
                S = st.cov[POS, POS][None] + cov[ok]
                sol = np.linalg.solve(S, delta[..., None])[..., 0]
                maha3[ok] = np.einsum("ij,ij->i", delta, sol)
            # an observation without a ground position is judged in the image alone
            maha = np.maximum(maha, np.where(ok, maha3, 0.0))
        out = []
        for k in np.flatnonzero((maha <= cfg.gate_mahalanobis) | (ious >= cfg.gate_iou)):
            a = affinity(frame.observations[k], hyp, frame.ctx, cfg, frame.positions[k])
            if a >= cfg.min_affinity:
                out.append((a, int(k)))
        out.sort(key=lambda c: (-c[0], c[1]))
        return out

    def _branch_close(self, hyp: TrackHypothesis, frame: _FrameData, k: int) -> bool:
        cfg = self.cfg
        obs = frame.observations[k]
        st = hyp.state
        if np.hypot(*(obs.detection.bbox.as_array()[:2] - st.mean[:2])) > cfg.branch_pixels:
            return False
        if not cfg.two_d_only:
            p = frame.positions[k]
            if p is None or np.linalg.norm(p - st.mean[POS]) > cfg.branch_meters:
                return False
        app = obs.detection.appearance
        if app is not None and hyp.appearance is not None:
            if histogram_intersection(app, hyp.appearance) < cfg.branch_appearance:
                return False
        return True

    def _clone(self, hyp: TrackHypothesis, before: int) -> TrackHypothesis:
        c = copy.copy(hyp)
        c.id = self._new_id()
        c.inliers = dict(hyp.inliers)
        c.scores = dict(hyp.scores)
        c.boxes = dict(hyp.boxes)
        c.category_dist = hyp.category_dist.copy()
        c.appearance = None if hyp.appearance is None else hyp.appearance.copy()
        self._register(c)
        n_past = sum(1 for t in hyp.boxes if t < before)
        for other, (ov, _) in list(self._pairs[hyp.id].items()):
            if other != c.id:
                self._pair(c.id, other)[0] += ov
        if n_past:
            self._pair(c.id, hyp.id)[0] += float(n_past)
        return c

    def _spawn(self, frame_data: _FrameData, k: int, replay: list) -> TrackHypothesis | None:
        obs = frame_data.observations[k]
        state = self._init_state(obs, frame_data.ctx)
        if state is None:
            return None
        t0 = frame_data.ctx.frame
        hyp = TrackHypothesis(id=self._new_id(), state=state, born=t0, last_update=t0,
                              last_selected=t0)
        aff = affinity(obs, hyp, frame_data.ctx, self.cfg, frame_data.positions[k])
        hyp.inliers[t0] = obs
        hyp.scores[t0] = obs.detection.score * aff
        hyp.category_dist = bayes_category(hyp.category_dist, obs.detection.category,
                                           self.cfg.confusion)
        if obs.detection.appearance is not None:
            hyp.appearance = np.asarray(obs.detection.appearance, dtype=float).copy()
        hyp.boxes[t0] = hyp.state.mean[:4].copy()
        prev = frame_data.ctx
        for later in replay:
            self._predict(hyp, prev, later.ctx)
            prev = later.ctx
            if hyp.extrapolating:
                continue
            cands = self._candidates(hyp, later)
            if cands:
                a, j = cands[0]
                self._observe(hyp, later.observations[j], a, later.ctx)
            elif not self._in_image(hyp.state, later.ctx):
                self._start_extrapolation(hyp)
                continue
            hyp.boxes[later.ctx.frame] = hyp.state.mean[:4].copy()
        self._register(hyp)
        return hyp

    # -- main loop -----------------------------------------------------------

    def advance_frame(self, observations, ctx: FrameContext) -> list[TrackRow]:
        """Process one frame; returns the reported tracks for it."""
        cfg = self.cfg
        t = ctx.frame
        positions = [None if cfg.two_d_only else observation_position(o, ctx)
                     for o in observations]
        frame = _FrameData(ctx, list(observations), positions)
        self._window.append(frame)

        # predict and extend
        prev = self._prev_ctx
        for hid in sorted(self.hypotheses):
            hyp = self.hypotheses[hid]
            if prev is not None:
                self._predict(hyp, prev, ctx)
            if hyp.extrapolating:
                if hyp.extrap_frames > cfg.t_extrap:
                    self._remove(hid)
                continue
            cands = self._candidates(hyp, frame)
            if cands:
                close = [c for c in cands[1:] if self._branch_close(hyp, frame, c[1])]
                if close and self._branch_close(hyp, frame, cands[0][1]):
                    for a, k in close[:cfg.max_branches]:
                        branch = self._clone(hyp, t)
                        self._observe(branch, frame.observations[k], a, ctx)
                        self._claim(branch.id, frame.observations[k].key)
                        branch.boxes[t] = branch.state.mean[:4].copy()
                a, k = cands[0]
                self._observe(hyp, frame.observations[k], a, ctx)
                self._claim(hid, frame.observations[k].key)
            elif not self._in_image(hyp.state, ctx):
                # left the image without a matching observation
                self._start_extrapolation(hyp)
                continue
            hyp.boxes[t] = hyp.state.mean[:4].copy()
        self._prev_ctx = ctx

        # spawn from unclaimed observations in the recent window
        window = list(self._window)
        for w_idx, fd in enumerate(window):
            for k, obs in enumerate(fd.observations):
                if obs.key in self._claims:
                    continue
                hyp = self._spawn(fd, k, window[w_idx + 1:])
                if hyp is not None and fd.ctx.frame < t:
                    self._init_overlaps(hyp, t)

        # current-frame box overlaps
        live = [h for h in sorted(self.hypotheses.values(), key=lambda h: h.id) if t in h.boxes]
        if len(live) > 1:
            ious = iou_matrix(np.array([h.boxes[t] for h in live]),
                              np.array([h.boxes[t] for h in live]))
            ii, jj = np.nonzero(np.triu(ious, 1) > 0)
            for i, j in zip(ii, jj):
                self._pair(live[i].id, live[j].id)[0] += ious[i, j] ** 2

        selected = self._select(t)

        # prune
        for hid in selected:
            self.hypotheses[hid].last_selected = t
        seen = {}
        for hid in sorted(self.hypotheses):
            hyp = self.hypotheses[hid]
            key = frozenset(hyp.inlier_keys())
            if key in seen:
                keep = seen[key]
                if hid in selected and keep not in selected:
                    self._remove(keep)
                    seen[key] = hid
                else:
                    self._remove(hid)
                continue
            seen[key] = hid
        for hid in sorted(self.hypotheses):
            hyp = self.hypotheses[hid]
            if t - hyp.last_selected > cfg.n_prune or t - hyp.last_update > cfg.n_prune:
                self._remove(hid)

        rows = []
        for hid in sorted(selected):
            hyp = self.hypotheses.get(hid)
            if hyp is None or hyp.extrapolating:
                continue
            rows.append(TrackRow(hid, hyp.category, hyp.state.b2d, hyp.state.position,
                                 hyp.state.size3d, -hypothesis_unary(hyp, t, cfg)))
        return rows

    def selection_graph(self, t: int):
        """Energy graph over the current hypothesis set and its node order."""
        cfg = self.cfg
        ids = sorted(self.hypotheses)
        index = {h: i for i, h in enumerate(ids)}
        unary = [hypothesis_unary(self.hypotheses[h], t, cfg) for h in ids]
        pairwise = {}
        for a in ids:
            for b, (ov, sh) in self._pairs[a].items():
                if a < b:
                    v = cfg.w_h_ol * ov + cfg.w_h_sh * sh
                    if v != 0:
                        pairwise[(index[a], index[b])] = v
        exclusions = set()
        for key, owners in self._claims.items():
            if key[0] == t and len(owners) > 1:
                for a, b in itertools.combinations(sorted(owners), 2):
                    exclusions.add((index[a], index[b]))
        return EnergyGraph(unary, pairwise, exclusions), ids

    def _select(self, t: int) -> list[int]:
        if not self.hypotheses:
            self.last_selection = []
            return []
        graph, ids = self.selection_graph(t)
        sel = solve_multibranch(graph, self.cfg.branches)
        self.last_selection = [ids[i] for i in sel.indices]
        return self.last_selection


def advance_frame(tracker: HypothesisTracker, observations, ctx: FrameContext):
    """Functional wrapper: returns (hypotheses, report rows) after one frame."""
    rows = tracker.advance_frame(observations, ctx)
    return tracker.hypotheses, rows
