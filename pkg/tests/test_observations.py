import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coupledtrack.crf import EnergyGraph, solve_exhaustive
from coupledtrack.geometry import BBox2D, backproject_to_ground, iou_2d, projected_box
from coupledtrack.observations import (Category, Detection2D, FusionWeights, Proposal3D,
                                       SizeStats, footpoint_sigma, fuse_frame,
                                       fuse_frame_detailed, fusion_pairwise, fusion_unary,
                                       gate_pairs)
from coupledtrack.simulator import DetectionNoise, ProposalNoise, random_scenario, simulate

from conftest import make_ctx

STATS = SizeStats.default()
CAR = np.array([1.8, 1.6, 4.5])


def car_at(x, z, ctx, **kw):
    return Proposal3D([x, 1.65, z], CAR, 1.0, **kw)


def det_over(prop, ctx, cat=Category.CAR, score=1.0):
    return Detection2D(projected_box(prop.position, prop.size3d, ctx.intrinsics, ctx.ego,
                                     ctx.plane), cat, score)


def det_with_footpoint_at(point, ctx, w=80.0, h=60.0):
    p = ctx.ego.to_camera(point)
    u = ctx.intrinsics.f * p[0] / p[2] + ctx.intrinsics.u0
    v = ctx.intrinsics.f * p[1] / p[2] + ctx.intrinsics.v0
    return Detection2D(BBox2D(u, v - h / 2, w, h), Category.CAR, 1.0)


def sim_frames(seed, n=20, **noise):
    det = DetectionNoise(center_sigma=3, size_sigma=3, fp_rate=0.5, appearance_sigma=0.02)
    prop = ProposalNoise(lateral_sigma=0.2, depth_k=0.005, size_frac=0.05, velocity_sigma=0.3)
    gt, ctxs, frames = simulate(random_scenario(seed, n_objects=6, duration=n,
                                                detection_noise=det, proposal_noise=prop))
    return ctxs, frames


# -- oracles ------------------------------------------------------------------

def test_gate_examples(ctx):
    w = FusionWeights()
    p = car_at(0.5, 15, ctx)
    d = det_over(p, ctx)
    assert gate_pairs([d], [], ctx, w) == []
    assert gate_pairs([d], [p], ctx, w) == [(0, 0)]
    far = car_at(0.5, 65, ctx)
    assert gate_pairs([d], [far], ctx, FusionWeights(gate_distance=3.0)) == []


def test_unary_perfect_match_terms(ctx):
    p = car_at(1.0, 12, ctx)
    d = det_over(p, ctx)
    w = FusionWeights(w1=0.7, w2=0.0, w3=1.3, w4=0.4)
    # size at class mean and the detection is the projected box: phi_size = IoU = 1
    assert fusion_unary(d, p, STATS, ctx, w) == pytest.approx(-0.7 - 1.3 + 0.4, abs=1e-12)
    d2 = det_with_footpoint_at(p.position, ctx)
    w = FusionWeights(w1=0.0, w2=0.9, w3=0.0, w4=0.4)
    assert fusion_unary(d2, p, STATS, ctx, w) == pytest.approx(-0.9 + 0.4, abs=1e-9)


def test_unary_far_mismatch(ctx):
    p = Proposal3D([8.0, 1.65, 40.0], CAR * 2.0, 1.0)      # size 5 sigma from the mean
    d = Detection2D(BBox2D(100, 300, 40, 40), Category.CAR, 1.0)
    w = FusionWeights(w4=0.8)
    assert fusion_unary(d, p, STATS, ctx, w) == pytest.approx(0.8, abs=1e-6)


def test_unary_mahalanobis_one(ctx):
    w = FusionWeights(w1=1.0, w2=1.0, w3=1.0, w4=1.0)
    foot = np.array([0.0, 1.65, 15.0])
    d = det_with_footpoint_at(foot, ctx, w=120, h=90)
    back = backproject_to_ground(d.bbox.footpoint, ctx.intrinsics, ctx.ego, ctx.plane)
    sig = footpoint_sigma(back[2], w.sigma0, w.sigma_k)
    p = Proposal3D(back + np.array([math.sqrt(sig ** 2 + w.proposal_sigma ** 2), 0, 0]), CAR)
    iou = iou_2d(d.bbox, projected_box(p.position, p.size3d, ctx.intrinsics, ctx.ego, ctx.plane))
    expect = -1.0 - math.exp(-0.5) - iou + 1.0
    assert fusion_unary(d, p, STATS, ctx, w) == pytest.approx(expect, abs=1e-12)


def test_pairwise_examples():
    w = FusionWeights(w5=2.0)
    da, db = (Detection2D(BBox2D(10, 10, 5, 5), Category.CAR, 1.0) for _ in range(2))
    pa = Proposal3D([0, 1.65, 5], CAR, points=range(0, 20))
    pb = Proposal3D([1, 1.65, 5], CAR, points=range(10, 50))
    pc = Proposal3D([2, 1.65, 5], CAR, points=range(100, 120))
    assert fusion_pairwise((da, pa), (db, pc), w) == (0.0, False)
    assert fusion_pairwise((da, pa), (da, pc), w)[1] is True
    assert fusion_pairwise((da, pa), (db, pa), w)[1] is True
    assert fusion_pairwise((da, pa), (db, pb), w) == (pytest.approx(2.0 * 0.5), False)


def test_fuse_without_proposals(ctx):
    dets = [Detection2D(BBox2D(100 + 50 * i, 250, 40, 40), Category.CAR, 1.0) for i in range(3)]
    obs = fuse_frame(dets, [], STATS, ctx, FusionWeights())
    assert [o.fused for o in obs] == [False] * 3
    assert [o.det_index for o in obs] == [0, 1, 2]


def test_fuse_single_match(ctx):
    p = car_at(0.0, 10, ctx)
    obs = fuse_frame([det_over(p, ctx)], [p], STATS, ctx, FusionWeights())
    assert len(obs) == 1 and obs[0].fused and obs[0].proposal is p


def test_fuse_competing_detections_matches_exhaustive(ctx):
    p = car_at(0.0, 12, ctx)
    good = det_over(p, ctx)
    shifted = Detection2D(BBox2D(good.bbox.x + 12, good.bbox.y, good.bbox.w, good.bbox.h),
                          Category.CAR, 1.0)
    w = FusionWeights()
    res = fuse_frame_detailed([shifted, good], [p], STATS, ctx, w)
    assert sorted(res.pairs) == [(0, 0), (1, 0)]
    u = [fusion_unary([shifted, good][i], p, STATS, ctx, w) for i, _ in res.pairs]
    exact = solve_exhaustive(EnergyGraph(u, {}, {(0, 1)}))
    assert res.energy == pytest.approx(exact.energy, abs=1e-12)
    assert [o.fused for o in res.observations] == [False, True]


def test_off_plane_proposal_rejected(ctx):
    p = Proposal3D([0, 1.0, 10], CAR)
    with pytest.raises(ValueError):
        fuse_frame([], [p], STATS, ctx, FusionWeights())


def test_weights_validated():
    with pytest.raises(ValueError):
        FusionWeights(w3=-1)
    with pytest.raises(ValueError):
        FusionWeights(gate_iou=1.5)


# -- frozen values --------------------------------------------------------------

def test_frozen_fusion_frame():
    ctxs, frames = sim_frames(11)
    res = fuse_frame_detailed(*frames[5], STATS, ctxs[5], FusionWeights())
    fused = [(o.det_index, o.prop_index) for o in res.observations if o.fused]
    assert fused == FROZEN_PAIRS
    assert res.energy == pytest.approx(FROZEN_ENERGY, abs=1e-9)


FROZEN_PAIRS = [(0, 0), (1, 1), (5, 5)]
FROZEN_ENERGY = -2.787821782418705


# -- properties -------------------------------------------------------------------

@given(st.integers(0, 10_000))
def test_fusion_exclusive_and_complete(seed):
    ctxs, frames = sim_frames(seed, n=3)
    for (dets, props), ctx in zip(frames, ctxs):
        obs = fuse_frame(dets, props, STATS, ctx, FusionWeights())
        assert len(obs) == len(dets)
        assert sorted(o.det_index for o in obs) == list(range(len(dets)))
        used = [o.prop_index for o in obs if o.fused]
        assert len(used) == len(set(used))
        assert all(o.fused == (o.proposal is not None) for o in obs)


@given(st.integers(0, 10_000), st.floats(0.2, 3.0), st.floats(0.1, 0.6))
def test_shrinking_gates(seed, gd, gi):
    ctxs, frames = sim_frames(seed, n=2)
    (dets, props), ctx = frames[1], ctxs[1]
    wide = FusionWeights()
    narrow = replace(wide, gate_distance=gd, gate_iou=gi)
    assert set(gate_pairs(dets, props, ctx, narrow)) <= set(gate_pairs(dets, props, ctx, wide))
    n_wide = sum(o.fused for o in fuse_frame(dets, props, STATS, ctx, wide))
    n_narrow = sum(o.fused for o in fuse_frame(dets, props, STATS, ctx, narrow))
    assert n_narrow <= n_wide


@given(st.floats(-3, 3), st.floats(0.0, 4.0), st.floats(0.01, 2.0))
def test_unary_monotone_in_distance(x, extra, step):
    ctx = make_ctx()
    w = FusionWeights(w1=0.0, w3=0.0)
    p = car_at(x, 18, ctx)
    d = det_with_footpoint_at(p.position, ctx)
    near = Proposal3D(p.position + [extra, 0, 0], CAR)
    far = Proposal3D(p.position + [extra + step, 0, 0], CAR)
    assert fusion_unary(d, far, STATS, ctx, w) >= fusion_unary(d, near, STATS, ctx, w)


@given(st.lists(st.tuples(st.floats(-40, 40), st.floats(-20, 20), st.floats(40, 200)),
                min_size=2, max_size=6))
def test_unary_monotone_in_projection_overlap(shifts):
    ctx = make_ctx()
    w = FusionWeights(w1=0.0, w2=0.0)
    p = car_at(0.0, 14, ctx)
    box = projected_box(p.position, p.size3d, ctx.intrinsics, ctx.ego, ctx.plane)
    dets = [Detection2D(BBox2D(box.x + dx, box.y + dy, s, s * 0.8), Category.CAR, 1.0)
            for dx, dy, s in shifts]
    ious = [iou_2d(d.bbox, box) for d in dets]
    unary = [fusion_unary(d, p, STATS, ctx, w) for d in dets]
    for a in range(len(dets)):
        for b in range(len(dets)):
            if ious[a] > ious[b]:
                assert unary[a] <= unary[b]
