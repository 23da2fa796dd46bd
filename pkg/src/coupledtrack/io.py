"""Sequence directories, KITTI-style label files and result files.

A sequence directory holds::

    calib.txt        P2: <3x4 row-major>, image_size: W H, ground_plane: nx ny nz offset
    poses.txt        one 3x4 row-major camera-to-world matrix per frame
    times.txt        one timestamp (s) per frame (optional, default 10 Hz)
    detections.txt   KITTI tracking lines (18 fields, id = -1)
    proposals.txt    optional, see PROPOSALS_HEADER
    appearance.txt   optional, "frame det_index h_1 ... h_D" per detection
    gt.txt           optional ground truth, KITTI tracking labels (17 fields)

Ground-plane and proposal coordinates are world coordinates (the first camera
frame); KITTI label locations are bottom centers in that frame's camera frame.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .geometry import BBox2D, CameraIntrinsics, EgoPose, FrameContext, GroundPlane
from .metrics import GTState, GTTrajectory
from .observations import Category, Detection2D, Proposal3D
from .tracker import TrackReport, TrackRow

PROPOSALS_HEADER = "# coupledtrack proposals v1"
PROPOSALS_COLUMNS = "# frame x y z vx vy vz w h l score n_points point_ids..."
# classes found in KITTI label files that the tracker ignores
IGNORED_TYPES = {"Van", "Truck", "Person_sitting", "Tram", "Misc", "DontCare", "Person"}
PLANE_SNAP = 1e-3


class FormatError(ValueError):
    """Malformed input file; the message carries file name and line number."""


def _f(x: float) -> str:
    return f"{x:.6f}"


def _lines(path: Path):
    with open(path, encoding="utf-8") as fh:
        for no, line in enumerate(fh, 1):
            line = line.strip()
            if line and not line.startswith("#"):
                yield no, line


def _floats(parts, path, no):
    try:
        return [float(p) for p in parts]
    except ValueError:
        raise FormatError(f"{path}:{no}: expected numbers, got {' '.join(parts)!r}") from None


# -- calibration, poses, times ------------------------------------------------

def read_calib(path) -> tuple[CameraIntrinsics, GroundPlane]:
    path = Path(path)
    entries = {}
    for no, line in _lines(path):
        key, _, rest = line.partition(":")
        entries[key.strip()] = (no, rest.split())
    for key in ("P2", "image_size"):
        if key not in entries:
            raise FormatError(f"{path}: missing {key}")
    no, parts = entries["P2"]
    P = _floats(parts, path, no)
    if len(P) != 12:
        raise FormatError(f"{path}:{no}: P2 needs 12 values, got {len(P)}")
    if abs(P[0] - P[5]) > 1e-6 * abs(P[0]):
        raise FormatError(f"{path}:{no}: P2 must have equal focal lengths")
    no, parts = entries["image_size"]
    size = _floats(parts, path, no)
    if len(size) != 2:
        raise FormatError(f"{path}:{no}: image_size needs 2 values")
    try:
        intr = CameraIntrinsics(P[0], P[2], P[6], int(size[0]), int(size[1]))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if "ground_plane" in entries:
        no, parts = entries["ground_plane"]
        g = _floats(parts, path, no)
        if len(g) != 4:
            raise FormatError(f"{path}:{no}: ground_plane needs 4 values")
        try:
            plane = GroundPlane(np.array(g[:3]), g[3])
        except ValueError as exc:
            raise FormatError(f"{path}:{no}: {exc}") from exc
    else:
        plane = GroundPlane.from_camera_height(1.65)
    return intr, plane


def write_calib(path, intr: CameraIntrinsics, plane: GroundPlane):
    P = [intr.f, 0, intr.u0, 0, 0, intr.f, intr.v0, 0, 0, 0, 1, 0]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("P2: " + " ".join(_f(v) for v in P) + "\n")
        fh.write(f"image_size: {intr.image_width} {intr.image_height}\n")
        fh.write("ground_plane: " + " ".join(_f(v) for v in (*plane.normal, plane.offset)) + "\n")


def read_poses(path) -> list[EgoPose]:
    path = Path(path)
    poses = []
    for no, line in _lines(path):
        vals = _floats(line.split(), path, no)
        if len(vals) != 12:
            raise FormatError(f"{path}:{no}: pose needs 12 values, got {len(vals)}")
        try:
            poses.append(EgoPose.from_camera_to_world(np.reshape(vals, (3, 4))))
        except ValueError as exc:
            raise FormatError(f"{path}:{no}: {exc}") from exc
    return poses


def write_poses(path, poses):
    with open(path, "w", encoding="utf-8") as fh:
        for p in poses:
            fh.write(" ".join(_f(v) for v in p.camera_to_world().reshape(-1)) + "\n")


def read_times(path) -> list[float]:
    path = Path(path)
    out = []
    for no, line in _lines(path):
        vals = _floats(line.split(), path, no)
        if len(vals) != 1:
            raise FormatError(f"{path}:{no}: expected one timestamp")
        if out and not vals[0] > out[-1]:
            raise FormatError(f"{path}:{no}: timestamps must increase strictly")
        out.append(vals[0])
    return out


# -- KITTI label lines ----------------------------------------------------------

def _parse_label(parts, path, no, with_score: bool):
    n = 18 if with_score else 17
    if len(parts) != n:
        raise FormatError(f"{path}:{no}: expected {n} fields, got {len(parts)}")
    kind = parts[2]
    vals = _floats(parts[:2] + parts[3:], path, no)
    frame, tid = vals[0], vals[1]
    if frame != int(frame) or frame < 0 or tid != int(tid):
        raise FormatError(f"{path}:{no}: frame and id must be integers")
    l, t, r, b = vals[5:9]
    if not (r >= l and b >= t):
        raise FormatError(f"{path}:{no}: box corners out of order")
    return {
        "frame": int(frame), "id": int(tid), "type": kind,
        "bbox": BBox2D.from_corners(l, t, r, b),
        "hwl": np.array(vals[9:12]), "loc": np.array(vals[12:15]),
        "score": vals[16] if with_score else None,
    }


def _category(kind, path, no):
    if kind in IGNORED_TYPES:
        return None
    try:
        return Category.parse(kind)
    except ValueError:
        raise FormatError(f"{path}:{no}: unknown object type {kind!r}") from None


def _label_line(frame, tid, cat, bbox: BBox2D, hwl, loc, score=None) -> str:
    l, t, r, b = bbox.corners()
    fields = [str(frame), str(tid), cat.value, "0", "0", _f(0.0), _f(l), _f(t), _f(r), _f(b),
              *(_f(v) for v in hwl), *(_f(v) for v in loc), _f(0.0)]
    if score is not None:
        fields.append(_f(score))
    return " ".join(fields)


def read_detections(path, n_frames: int, appearance: dict | None = None):
    path = Path(path)
    frames = [[] for _ in range(n_frames)]
    for no, line in _lines(path):
        rec = _parse_label(line.split(), path, no, with_score=True)
        cat = _category(rec["type"], path, no)
        if cat is None:
            continue
        if rec["frame"] >= n_frames:
            raise FormatError(f"{path}:{no}: frame {rec['frame']} beyond the {n_frames} poses")
        k = rec["frame"]
        app = None if appearance is None else appearance.get((k, len(frames[k])))
        frames[k].append(Detection2D(rec["bbox"], cat, rec["score"], app))
    return frames


_NO_HWL = (-1.0, -1.0, -1.0)
_NO_LOC = (-1000.0, -1000.0, -1000.0)


def write_detections(path, frames):
    with open(path, "w", encoding="utf-8") as fh:
        for k, dets in enumerate(frames):
            for d in dets:
                fh.write(_label_line(k, -1, d.category, d.bbox, _NO_HWL, _NO_LOC, d.score) + "\n")


def read_appearance(path) -> dict:
    path = Path(path)
    out = {}
    for no, line in _lines(path):
        vals = _floats(line.split(), path, no)
        if len(vals) < 3:
            raise FormatError(f"{path}:{no}: expected frame, det_index and a histogram")
        h = np.array(vals[2:])
        if np.any(h < 0) or h.sum() <= 0:
            raise FormatError(f"{path}:{no}: histogram must be non-negative and non-zero")
        out[(int(vals[0]), int(vals[1]))] = h / h.sum()
    return out


def write_appearance(path, frames):
    with open(path, "w", encoding="utf-8") as fh:
        for k, dets in enumerate(frames):
            for i, d in enumerate(dets):
                if d.appearance is not None:
                    fh.write(f"{k} {i} " + " ".join(_f(v) for v in d.appearance) + "\n")


# -- proposals ----------------------------------------------------------------

def read_proposals(path, n_frames: int, plane: GroundPlane):
    path = Path(path)
    frames = [[] for _ in range(n_frames)]
    with open(path, encoding="utf-8") as fh:
        first = fh.readline().strip()
    if first != PROPOSALS_HEADER:
        raise FormatError(f"{path}:1: expected header {PROPOSALS_HEADER!r}")
    for no, line in _lines(path):
        parts = line.split()
        if len(parts) < 12:
            raise FormatError(f"{path}:{no}: expected at least 12 fields, got {len(parts)}")
        vals = _floats(parts, path, no)
        frame, n_pts = vals[0], vals[11]
        if frame != int(frame) or not 0 <= frame < n_frames:
            raise FormatError(f"{path}:{no}: invalid frame {parts[0]}")
        if n_pts != int(n_pts) or n_pts < 0 or len(parts) != 12 + int(n_pts):
            raise FormatError(f"{path}:{no}: point count does not match the id list")
        pos = np.array(vals[1:4])
        dist = float(plane.signed_distance(pos))
        if abs(dist) > PLANE_SNAP:
            raise FormatError(f"{path}:{no}: proposal is {dist:.3g} m off the ground plane")
        pos = pos - dist * plane.normal
        vel = np.array(vals[4:7])
        if np.all(np.isnan(vel)):
            vel = None
        elif np.any(np.isnan(vel)):
            raise FormatError(f"{path}:{no}: velocity must be all numbers or all nan")
        try:
            prop = Proposal3D(pos, np.array(vals[7:10]), vals[10], vel,
                              [int(v) for v in vals[12:]])
        except ValueError as exc:
            raise FormatError(f"{path}:{no}: {exc}") from exc
        frames[int(frame)].append(prop)
    return frames


def write_proposals(path, frames):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(PROPOSALS_HEADER + "\n" + PROPOSALS_COLUMNS + "\n")
        for k, props in enumerate(frames):
            for p in props:
                vel = p.velocity if p.velocity is not None else (math.nan,) * 3
                pts = sorted(p.points)
                fields = [str(k), *(_f(v) for v in p.position), *(_f(v) for v in vel),
                          *(_f(v) for v in p.size3d), _f(p.score), str(len(pts)),
                          *(str(i) for i in pts)]
                fh.write(" ".join(fields) + "\n")


# -- sequences ------------------------------------------------------------------

@dataclass
class Sequence:
    detections: list       # per frame: list of Detection2D
    proposals: list        # per frame: list of Proposal3D
    contexts: list         # per frame: FrameContext

    @property
    def frames(self):
        return list(zip(self.detections, self.proposals))


def read_sequence(path) -> Sequence:
    """Parse a sequence directory. Missing proposals give an all-partial sequence."""
    path = Path(path)
    for name in ("calib.txt", "poses.txt", "detections.txt"):
        if not (path / name).is_file():
            raise FormatError(f"{path}: missing {name}")
    intr, plane = read_calib(path / "calib.txt")
    poses = read_poses(path / "poses.txt")
    n = len(poses)
    if (path / "times.txt").is_file():
        times = read_times(path / "times.txt")
        if len(times) != n:
            raise FormatError(f"{path}: times.txt has {len(times)} entries for {n} poses")
    else:
        times = [k / 10.0 for k in range(n)]
    contexts = [FrameContext(k, times[k], intr, poses[k], plane) for k in range(n)]
    appearance = None
    if (path / "appearance.txt").is_file():
        appearance = read_appearance(path / "appearance.txt")
    dets = read_detections(path / "detections.txt", n, appearance)
    if (path / "proposals.txt").is_file():
        props = read_proposals(path / "proposals.txt", n, plane)
    else:
        props = [[] for _ in range(n)]
    return Sequence(dets, props, contexts)


def write_sequence(path, detections, proposals, contexts, gt=None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    ctx0 = contexts[0]
    write_calib(path / "calib.txt", ctx0.intrinsics, ctx0.plane)
    write_poses(path / "poses.txt", [c.ego for c in contexts])
    with open(path / "times.txt", "w", encoding="utf-8") as fh:
        for c in contexts:
            fh.write(_f(c.timestamp) + "\n")
    write_detections(path / "detections.txt", detections)
    write_appearance(path / "appearance.txt", detections)
    write_proposals(path / "proposals.txt", proposals)
    if gt is not None:
        write_gt(path / "gt.txt", gt, contexts)


# -- ground truth and results ----------------------------------------------------

def write_gt(path, gt, contexts):
    """Visible ground-truth states as 17-field KITTI labels, ordered by frame then id."""
    lines = []
    for ctx in contexts:
        for g in sorted(gt, key=lambda g: g.id):
            s = g.frames.get(ctx.frame)
            if s is None or not s.visible:
                continue
            w, h, l = g.truth.size3d if g.truth is not None else (0.0, 0.0, 0.0)
            loc = ctx.ego.to_camera(s.position)
            lines.append(_label_line(ctx.frame, g.id, g.category, s.bbox, (h, w, l), loc))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))


def read_gt(path) -> list[GTTrajectory]:
    """Ground truth with camera-frame positions (distances match world ones)."""
    path = Path(path)
    trajs: dict[int, GTTrajectory] = {}
    for no, line in _lines(path):
        rec = _parse_label(line.split(), path, no, with_score=False)
        cat = _category(rec["type"], path, no)
        if cat is None:
            continue
        g = trajs.setdefault(rec["id"], GTTrajectory(rec["id"], cat))
        if rec["frame"] in g.frames:
            raise FormatError(f"{path}:{no}: duplicate id {rec['id']} in frame {rec['frame']}")
        g.frames[rec["frame"]] = GTState(rec["bbox"], rec["loc"], float(rec["loc"][2]))
    for g in trajs.values():
        g.frames = dict(sorted(g.frames.items()))
    return [trajs[k] for k in sorted(trajs)]


def write_results(report: TrackReport, path, contexts):
    """KITTI tracking result lines (18 fields), locations in each frame's camera frame."""
    by_frame = {c.frame: c for c in contexts}
    lines = []
    for frame in report.frames():
        ctx = by_frame.get(frame)
        if ctx is None:
            raise ValueError(f"no frame context for reported frame {frame}")
        for row in sorted(report[frame], key=lambda r: r.track_id):
            w, h, l = row.size3d
            loc = ctx.ego.to_camera(row.position)
            lines.append(_label_line(frame, row.track_id, row.category, row.bbox,
                                     (h, w, l), loc, row.score))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("".join(line + "\n" for line in lines))


def read_results(path) -> TrackReport:
    """Result file as a report with camera-frame positions."""
    path = Path(path)
    rows: dict[int, list] = {}
    for no, line in _lines(path):
        rec = _parse_label(line.split(), path, no, with_score=True)
        cat = _category(rec["type"], path, no)
        if cat is None:
            continue
        h, w, l = rec["hwl"]
        rows.setdefault(rec["frame"], []).append(
            TrackRow(rec["id"], cat, rec["bbox"], rec["loc"], np.array([w, h, l]), rec["score"]))
    report = TrackReport()
    for frame in sorted(rows):
        report.add(frame, rows[frame])
    return report


def write_observations(path, observations):
    """Fused observation dump: frame, detection index, proposal index (-1 if partial)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# frame det_index prop_index fused\n")
        for obs_frame in observations:
            for o in obs_frame:
                j = -1 if o.prop_index is None else o.prop_index
                fh.write(f"{o.frame} {o.det_index} {j} {int(o.fused)}\n")
