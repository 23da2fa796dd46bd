"""CLEAR-MOT evaluation in the image (box IoU) and on the ground plane."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import BBox2D, iou_matrix
from .observations import Category

DISTANCE_RANGES = ((0.0, 10.0), (10.0, 20.0), (20.0, 30.0), (30.0, 50.0), (50.0, math.inf))
MT_RATIO = 0.8
ML_RATIO = 0.2


@dataclass
class GTState:
    bbox: BBox2D
    position: np.ndarray
    depth: float
    visible: bool = True


@dataclass
class GTTrajectory:
    id: int
    category: Category
    frames: dict = field(default_factory=dict)   # frame -> GTState
    truth: object = None                          # simulator extras

    def __post_init__(self):
        self.frames = dict(sorted(self.frames.items()))


@dataclass
class RangeStats:
    lo: float
    hi: float
    n_tp: int = 0
    sum_iou: float = 0.0
    sum_dist: float = 0.0

    @property
    def motp2d(self) -> float:
        return self.sum_iou / self.n_tp if self.n_tp else math.nan

    @property
    def motp3d(self) -> float:
        return self.sum_dist / self.n_tp if self.n_tp else math.nan


@dataclass
class MotReport:
    mota: float
    motp2d: float
    motp3d: float
    id_switches: int
    fragmentations: int
    mostly_tracked: int
    partly_tracked: int
    mostly_lost: int
    tp: int
    fp: int
    fn: int
    n_gt: int
    by_range: list = field(default_factory=list)

    def summary(self) -> list[tuple[str, float]]:
        return [("mota", self.mota), ("motp2d", self.motp2d), ("motp3d", self.motp3d),
                ("id_switches", self.id_switches), ("fragmentations", self.fragmentations),
                ("mostly_tracked", self.mostly_tracked), ("partly_tracked", self.partly_tracked),
                ("mostly_lost", self.mostly_lost), ("tp", self.tp), ("fp", self.fp),
                ("fn", self.fn), ("n_gt", self.n_gt)]

    def range_motp3d(self, max_depth: float) -> float:
        """TP-weighted MOTP-3D over all ranges ending at or below ``max_depth``."""
        rs = [r for r in self.by_range if r.hi <= max_depth]
        n = sum(r.n_tp for r in rs)
        return sum(r.sum_dist for r in rs) / n if n else math.nan


def match_frame(gt_boxes, track_boxes, iou_threshold: float = 0.5,
                gt_ids=None, track_ids=None, previous=None):
    """CLEAR-MOT correspondences for one frame.

    Correspondences from the previous frame (``previous`` maps gt id to track
    id) are kept while their IoU stays above threshold; the remaining boxes
    are matched by maximum total IoU. Returns ``[(gt_index, track_index, iou)]``.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    gt = np.asarray(gt_boxes, dtype=float).reshape(-1, 4)
    trk = np.asarray(track_boxes, dtype=float).reshape(-1, 4)
    if len(gt) == 0 or len(trk) == 0:
        return []
    iou = iou_matrix(gt, trk)
    matches = []
    used_g, used_t = set(), set()
    if previous and gt_ids is not None and track_ids is not None:
        t_index = {tid: j for j, tid in enumerate(track_ids)}
        for i, gid in enumerate(gt_ids):
            j = t_index.get(previous.get(gid))
            if j is not None and j not in used_t and iou[i, j] >= iou_threshold:
                matches.append((i, j, float(iou[i, j])))
                used_g.add(i)
                used_t.add(j)
    rg = [i for i in range(len(gt)) if i not in used_g]
    rt = [j for j in range(len(trk)) if j not in used_t]
    if rg and rt:
        sub = iou[np.ix_(rg, rt)]
        weight = np.where(sub >= iou_threshold, sub, 0.0)
        rows, cols = linear_sum_assignment(weight, maximize=True)
        for r, c in zip(rows, cols):
            if weight[r, c] > 0:
                matches.append((rg[r], rt[c], float(sub[r, c])))
    return sorted(matches)


def evaluate(gt, report, iou_threshold: float = 0.5, category: Category | None = None,
             frames=None, ranges=DISTANCE_RANGES) -> MotReport:
    """CLEAR-MOT scores of a :class:`~coupledtrack.tracker.TrackReport` against ground truth."""
    gt = [g for g in gt if category is None or g.category == category]
    gt_frames = {t for g in gt for t, s in g.frames.items() if s.visible}
    if frames is None:
        frames = sorted(gt_frames | set(report.frames()))
    else:
        frames = sorted(frames)
        extra = set(report.frames()) - set(frames)
        if extra:
            raise ValueError(f"report has frames outside the evaluated sequence: {sorted(extra)[:5]}")

    stats = [RangeStats(lo, hi) for lo, hi in ranges]
    tp = fp = fn = idsw = 0
    last_match: dict[int, int] = {}
    previous: dict[int, int] = {}
    history: dict[int, list[bool]] = {g.id: [] for g in gt}
    for t in frames:
        items = [(g, g.frames[t]) for g in gt if t in g.frames and g.frames[t].visible]
        rows = [r for r in report[t] if category is None or r.category == category]
        matches = match_frame([s.bbox.as_array() for _, s in items],
                              [r.bbox.as_array() for r in rows], iou_threshold,
                              [g.id for g, _ in items], [r.track_id for r in rows], previous)
        previous = {}
        matched_g = set()
        for i, j, iou in matches:
            g, s = items[i]
            row = rows[j]
            matched_g.add(i)
            if g.id in last_match and last_match[g.id] != row.track_id:
                idsw += 1
            last_match[g.id] = row.track_id
            previous[g.id] = row.track_id
            dist = float(np.linalg.norm(np.asarray(row.position) - s.position))
            for rs in stats:
                if rs.lo <= s.depth < rs.hi:
                    rs.n_tp += 1
                    rs.sum_iou += iou
                    rs.sum_dist += dist
                    break
        for i, (g, _) in enumerate(items):
            history[g.id].append(i in matched_g)
        tp += len(matches)
        fn += len(items) - len(matches)
        fp += len(rows) - len(matches)

    frag = mt = pt = ml = 0
    for flags in history.values():
        if not flags:
            continue
        was, gap = False, False
        for m in flags:
            if m and was and gap:
                frag += 1
            if m:
                was, gap = True, False
            elif was:
                gap = True
        ratio = sum(flags) / len(flags)
        if ratio >= MT_RATIO:
            mt += 1
        elif ratio <= ML_RATIO:
            ml += 1
        else:
            pt += 1

    n_gt = tp + fn
    n_tp = sum(r.n_tp for r in stats)
    return MotReport(
        mota=1.0 - (fn + fp + idsw) / n_gt if n_gt else math.nan,
        motp2d=sum(r.sum_iou for r in stats) / n_tp if n_tp else math.nan,
        motp3d=sum(r.sum_dist for r in stats) / n_tp if n_tp else math.nan,
        id_switches=idsw, fragmentations=frag, mostly_tracked=mt, partly_tracked=pt,
        mostly_lost=ml, tp=tp, fp=fp, fn=fn, n_gt=n_gt, by_range=stats)
