import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coupledtrack.geometry import BBox2D, EgoPose, backproject_to_ground
from coupledtrack.kalman import (DIM, CoupledState, CouplingWeights, FrustumExit, NoiseConfig,
                                 init_state, kalman_update, predict, transition, update_fused,
                                 update_partial)
from coupledtrack.observations import Category, Detection2D, Observation, Proposal3D, SizeStats
from coupledtrack.simulator import EgoSpec, ego_pose

from conftest import KITTI, make_ctx, rot_y
from kalman_oracles import (PlainBoxFilter, PlainObjectFilter, consistent_observation,
                            textbook_update)

STATS = SizeStats.default()
NOISE = NoiseConfig()
SIZE = np.array([1.8, 1.6, 4.5])


def fused_obs(pos, vel=None, size=SIZE, box=None, ctx=None):
    ctx = ctx or make_ctx()
    o = consistent_observation(np.asarray(pos, float), vel, np.asarray(size, float), ctx)
    if box is not None:
        o = dataclasses.replace(o, detection=dataclasses.replace(o.detection, bbox=box))
    return o


def partial_obs(box, cat=Category.CAR):
    return Observation(Detection2D(box, cat, 1.0))


def random_state(rng, ctx):
    pos = np.array([rng.uniform(-8, 8), 1.65, rng.uniform(5, 60)])
    o = fused_obs(pos, rng.normal(0, 2, 3) * [1, 0, 1], SIZE * rng.uniform(0.5, 1.5, 3), ctx=ctx)
    s = init_state(o, ctx, STATS, NOISE)
    mean = s.mean.copy()
    mean[:4] += rng.normal(0, 5, 4) * [1, 1, 0.2, 0.2]
    mean[4:8] = rng.normal(0, 20, 4)
    A = rng.normal(0, 0.3, (DIM, DIM))
    return CoupledState(mean, s.cov + A @ A.T)


# -- init_state -----------------------------------------------------------------

def test_init_fused_copies_velocity(ctx):
    s = init_state(fused_obs([0, 1.65, 15], [1, 0, 0]), ctx, STATS, NOISE)
    assert np.array_equal(s.velocity, [1, 0, 0])
    assert np.allclose(s.position, [0, 1.65, 15])


def test_init_partial(ctx):
    box = BBox2D(650, 220, 30, 60)
    s = init_state(partial_obs(box, Category.PEDESTRIAN), ctx, STATS, NOISE)
    assert np.array_equal(s.size3d, STATS.mean[Category.PEDESTRIAN])
    expect = backproject_to_ground(box.footpoint, ctx.intrinsics, ctx.ego, ctx.plane)
    assert np.allclose(s.position, expect, atol=1e-9)
    assert np.array_equal(s.velocity, np.zeros(3))


def test_init_partial_above_horizon(ctx):
    with pytest.raises(ValueError):
        init_state(partial_obs(BBox2D(600, 100, 30, 40)), ctx, STATS, NOISE)


# -- predict --------------------------------------------------------------------

def test_predict_substitution_example():
    from coupledtrack.geometry import CameraIntrinsics
    intr = CameraIntrinsics(100.0, 50.0, 50.0, 200, 200)
    mean = np.zeros(DIM)
    mean[0:4] = [50, 60, 15, 20]
    mean[8:11] = [0, 1.5, 10]
    mean[14:17] = [1.0, 1.8, 2.0]
    s = CoupledState(mean, np.eye(DIM))
    out = predict(s, 0.1, intr, EgoPose.identity(), EgoPose.identity(),
                  CouplingWeights(0.5, 0.5), NOISE)
    assert out.mean[15] == pytest.approx(1.9, abs=1e-12)
    assert out.mean[3] == pytest.approx(19.0, abs=1e-12)


def test_predict_full_coupling_limit():
    rng = np.random.default_rng(3)
    ctx = make_ctx()
    s = random_state(rng, ctx)
    mean = s.mean.copy()
    mean[7] = 0.0
    mean[11:14] = 0.0
    s = CoupledState(mean, s.cov)
    d = s.mean[10]
    out = predict(s, 0.1, KITTI, EgoPose.identity(), EgoPose.identity(),
                  CouplingWeights(0.0, 1.0), NOISE)
    assert out.mean[15] == pytest.approx(d / KITTI.f * s.mean[3], rel=1e-12)
    assert out.mean[3] == pytest.approx(KITTI.f / d * s.mean[15], rel=1e-12)


def test_predict_decoupled_is_constant_velocity():
    rng = np.random.default_rng(4)
    s = random_state(rng, make_ctx())
    out = predict(s, 0.2, KITTI, EgoPose.identity(), EgoPose.identity(),
                  CouplingWeights.decoupled(), NOISE)
    expect = s.mean.copy()
    expect[0:4] += 0.2 * s.mean[4:8]
    expect[8:11] += 0.2 * s.mean[11:14]
    assert np.allclose(out.mean, expect, rtol=0, atol=1e-12)


def test_predict_behind_camera():
    s = init_state(fused_obs([0, 1.65, 3]), make_ctx(), STATS, NOISE)
    ahead = EgoPose(np.eye(3), [0, 0, -10])
    with pytest.raises(FrustumExit):
        predict(s, 0.1, KITTI, EgoPose.identity(), ahead, CouplingWeights(), NOISE)
    with pytest.raises(ValueError):
        predict(s, 0.0, KITTI, EgoPose.identity(), EgoPose.identity(), CouplingWeights(), NOISE)


def test_coupling_weights_validated():
    with pytest.raises(ValueError):
        CouplingWeights(0.6, 0.6)
    with pytest.raises(ValueError):
        CouplingWeights(1.2, -0.2)


def test_noise_config_validated():
    with pytest.raises(ValueError):
        NoiseConfig(r_box_center=0)
    with pytest.raises(ValueError):
        NoiseConfig(partial_pos_sigma0=0.05)       # below the fused value


# -- updates ----------------------------------------------------------------------

def test_update_equal_to_prediction(ctx):
    s = init_state(fused_obs([1, 1.65, 20], [0, 0, 1]), ctx, STATS, NOISE)
    z = Observation(Detection2D(s.b2d, Category.CAR, 1.0),
                    Proposal3D(s.position, s.size3d, 1.0, s.velocity))
    out = update_fused(s, z, NOISE, ctx)
    assert np.allclose(out.mean, s.mean, atol=1e-12)
    assert np.trace(out.cov) < np.trace(s.cov)


def test_update_zero_noise_limit(ctx):
    tiny = NoiseConfig(r_box_center=1e-12, r_box_size=1e-12, r_pos_sigma0=1e-7, r_pos_k=0.0,
                       r_pos_lateral=1e-7, r_velocity=1e-12, r_size=1e-12)
    s = random_state(np.random.default_rng(5), ctx)
    o = fused_obs([2, 1.65, 25], [1, 0, 2], SIZE * 1.1, ctx=ctx)
    out = update_fused(s, o, tiny, ctx)
    z = np.concatenate([o.detection.bbox.as_array(), o.proposal.position, o.proposal.velocity,
                        o.proposal.size3d])
    got = np.concatenate([out.mean[0:4], out.mean[8:17]])
    assert np.allclose(got, z, atol=1e-5)


def test_update_matches_dense_oracle(ctx):
    rng = np.random.default_rng(6)
    for _ in range(20):
        s = random_state(rng, ctx)
        o = fused_obs(s.position + rng.normal(0, 0.5, 3) * [1, 0, 1], rng.normal(0, 1, 3),
                      SIZE * rng.uniform(0.8, 1.2, 3), ctx=ctx)
        out = update_fused(s, o, NOISE, ctx)
        H = np.zeros((13, DIM))
        for row, col in enumerate([0, 1, 2, 3, 8, 9, 10, 11, 12, 13, 14, 15, 16]):
            H[row, col] = 1.0
        R = np.zeros((13, 13))
        R[:4, :4] = np.diag([NOISE.r_box_center] * 2 + [NOISE.r_box_size] * 2)
        R[4:7, 4:7] = NOISE.fused_pos_cov(o.proposal.position, ctx)
        R[7:10, 7:10] = np.eye(3) * NOISE.r_velocity
        R[10:, 10:] = np.eye(3) * NOISE.r_size
        z = np.concatenate([o.detection.bbox.as_array(), o.proposal.position,
                            o.proposal.velocity, o.proposal.size3d])
        x, P = textbook_update(s.mean, s.cov, H, z, R)
        assert np.allclose(out.mean, x, rtol=0, atol=1e-9)
        assert np.allclose(out.cov, P, rtol=0, atol=1e-9)


def test_update_without_velocity_skips_it(ctx):
    s = init_state(fused_obs([0, 1.65, 15], [2, 0, 2]), ctx, STATS, NOISE)
    o = fused_obs([0.2, 1.65, 15.1], None, ctx=ctx)
    out = update_fused(s, o, NOISE, ctx)
    # velocity is uncorrelated with everything right after initialization, so an
    # update without a velocity measurement leaves its mean and covariance alone
    assert np.array_equal(out.velocity, s.velocity)
    assert np.array_equal(out.cov[11:14, 11:14], s.cov[11:14, 11:14])


def test_partial_converges_to_backprojection(ctx):
    box = BBox2D(700, 210, 60, 50)
    target = backproject_to_ground(box.footpoint, ctx.intrinsics, ctx.ego, ctx.plane)
    s0 = init_state(fused_obs(target + [1.5, 0, 2.0]), ctx, STATS, NOISE)
    P0 = s0.cov[8:11, 8:11]
    R = NOISE.partial_pos_cov(target, ctx)
    e0 = s0.position - target
    s = s0
    for n in range(1, 201):
        s = update_partial(s, partial_obs(box), ctx, STATS, NOISE)
        if n in (1, 2, 10, 200):
            # n identical measurements fuse like one with covariance R / n
            expect = np.linalg.solve(np.linalg.inv(P0) + n * np.linalg.inv(R),
                                     np.linalg.solve(P0, e0))
            assert np.allclose(s.position - target, expect, atol=1e-9)
    assert np.linalg.norm(s.position - target) < 0.1 * np.linalg.norm(e0)


def test_partial_gain_smaller_than_fused(ctx):
    box = BBox2D(700, 210, 60, 50)
    p = backproject_to_ground(box.footpoint, ctx.intrinsics, ctx.ego, ctx.plane)
    s = init_state(fused_obs(p + [1.0, 0, 1.0]), ctx, STATS, NOISE)
    fused = Observation(Detection2D(box, Category.CAR, 1.0), Proposal3D(p, s.size3d, 1.0))
    moved_f = np.linalg.norm(update_fused(s, fused, NOISE, ctx).position - s.position)
    moved_p = np.linalg.norm(update_partial(s, partial_obs(box), ctx, STATS, NOISE).position
                             - s.position)
    assert moved_p < moved_f


def test_partial_above_horizon_updates_box_only(ctx):
    s = init_state(fused_obs([0, 1.65, 15]), ctx, STATS, NOISE)
    out = update_partial(s, partial_obs(BBox2D(600, 100, 30, 40)), ctx, STATS, NOISE)
    assert np.array_equal(out.mean[8:], s.mean[8:])
    assert not np.allclose(out.mean[0:4], s.mean[0:4])
    with pytest.raises(ValueError):
        update_partial(s, fused_obs([0, 1.65, 15]), ctx, STATS, NOISE)


def test_update_accepts_variances_or_matrix(ctx):
    s = random_state(np.random.default_rng(7), ctx)
    a = kalman_update(s, [0, 1], [600.0, 200.0], [4.0, 9.0])
    b = kalman_update(s, [0, 1], [600.0, 200.0], np.diag([4.0, 9.0]))
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov)


# -- decoupled limit ----------------------------------------------------------------

def test_decoupled_matches_plain_filters():
    rng = np.random.default_rng(8)
    cw = CouplingWeights.decoupled()
    ctx0 = make_ctx(0)
    pos, vel = np.array([2.0, 1.65, 20.0]), np.array([0.5, 0.0, 1.0])
    s = init_state(fused_obs(pos, vel, ctx=ctx0), ctx0, STATS, NOISE)
    box_f = PlainBoxFilter(s.mean[:8], s.cov[:8, :8], NOISE)
    obj_f = PlainObjectFilter(s.mean[8:], s.cov[8:, 8:], NOISE)
    for k in range(1, 101):
        ctx = make_ctx(k)
        p = pos + vel * k * 0.1 + rng.normal(0, 0.3, 3) * [1, 0, 1]
        o = fused_obs(p, vel + rng.normal(0, 0.2, 3), SIZE * (1 + rng.normal(0, 0.05, 3)),
                      ctx=ctx)
        b = o.detection.bbox
        o = fused_obs(p, o.proposal.velocity, o.proposal.size3d, ctx=ctx,
                      box=BBox2D(b.x + rng.normal(0, 3), b.y + rng.normal(0, 3), b.w, b.h))
        s = update_fused(predict(s, 0.1, KITTI, ctx0.ego, ctx.ego, cw, NOISE), o, NOISE, ctx)
        box_f.predict(0.1)
        box_f.update(o.detection.bbox.as_array())
        obj_f.predict(0.1)
        obj_f.update(o.proposal.position, o.proposal.velocity, o.proposal.size3d, ctx.ego.center)
        assert np.abs(s.mean[:8] - box_f.x).max() <= 1e-12
        assert np.abs(s.mean[8:] - obj_f.x).max() <= 1e-12


# -- properties ------------------------------------------------------------------

@given(st.integers(0, 2**32 - 1))
def test_jacobian_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    ctx = make_ctx()
    s = random_state(rng, ctx)
    prev = EgoPose(rot_y(rng.uniform(-0.05, 0.05)), rng.normal(0, 0.3, 3) * [1, 0, 1])
    curr = EgoPose(rot_y(rng.uniform(-0.05, 0.05)), rng.normal(0, 0.3, 3) * [1, 0, 1])
    cw = CouplingWeights(*(lambda a: (a, 1 - a))(rng.uniform(0, 1)))
    _, J = transition(s.mean, 0.1, KITTI, prev, curr, cw)
    h = 1e-6
    num = np.zeros((DIM, DIM))
    for i in range(DIM):
        e = np.zeros(DIM)
        e[i] = h * max(1.0, abs(s.mean[i]))
        num[:, i] = (transition(s.mean + e, 0.1, KITTI, prev, curr, cw)[0]
                     - transition(s.mean - e, 0.1, KITTI, prev, curr, cw)[0]) / (2 * e[i])
    assert np.linalg.norm(J - num) / np.linalg.norm(num) < 1e-5


@given(st.integers(0, 2**32 - 1))
def test_covariance_stays_psd(seed):
    rng = np.random.default_rng(seed)
    spec = EgoSpec("curve", speed=rng.uniform(0, 8), yaw_rate=rng.uniform(-0.05, 0.05))
    ctx = make_ctx(0, ego_pose(spec, 0.0, 0))
    p0 = np.array([rng.uniform(-3, 3), 1.65, rng.uniform(10, 30)])
    vel = np.array([0.0, 0.0, spec.speed])
    s = init_state(fused_obs(p0, vel, ctx=ctx), ctx, STATS, NOISE)
    cw = CouplingWeights()
    prev = ctx
    for k in range(1, 51):
        ctx = make_ctx(k, ego_pose(spec, k * 0.1, k))
        s = predict(s, 0.1, KITTI, prev.ego, ctx.ego, cw, NOISE)
        truth = p0 + vel * k * 0.1
        o = fused_obs(truth, vel, ctx=ctx)
        b = o.detection.bbox
        box = BBox2D(b.x + rng.normal(0, 4), b.y + rng.normal(0, 4),
                     max(5.0, b.w + rng.normal(0, 3)), max(5.0, b.h + rng.normal(0, 3)))
        if rng.random() < 0.5:
            p = truth + rng.normal(0, 0.5, 3) * [1, 0, 1]
            o = Observation(Detection2D(box, Category.CAR, 1.0),
                            Proposal3D(p, SIZE * rng.uniform(0.8, 1.2, 3), 1.0,
                                       vel + rng.normal(0, 1, 3) if rng.random() < 0.7 else None))
            s = update_fused(s, o, NOISE, ctx)
        else:
            s = update_partial(s, partial_obs(box), ctx, STATS, NOISE)
        assert np.array_equal(s.cov, s.cov.T)
        assert np.linalg.eigvalsh(s.cov).min() >= -1e-9
        assert np.all(s.mean[[2, 3, 14, 15, 16]] >= 1e-3)
        prev = ctx


def test_noise_free_position_error_decays():
    ctx0 = make_ctx(0)
    pos0, vel = np.array([-4.0, 1.65, 20.0]), np.array([1.5, 0.0, 0.0])
    s = init_state(fused_obs(pos0 + [0.8, 0, 1.5], vel + [0.5, 0, -1], SIZE * 1.1, ctx=ctx0),
                   ctx0, STATS, NOISE)
    errs = []
    for k in range(1, 51):
        ctx = make_ctx(k)
        p = pos0 + vel * k * 0.1
        s = predict(s, 0.1, KITTI, ctx0.ego, ctx.ego, CouplingWeights(), NOISE)
        s = update_fused(s, fused_obs(p, vel, SIZE, ctx=ctx), NOISE, ctx)
        errs.append(np.linalg.norm(s.position - p))
    errs = np.array(errs)
    rms = np.sqrt((errs.reshape(5, 10) ** 2).mean(axis=1))
    assert np.all(np.diff(rms) < 0)
    assert np.all(np.diff(errs) < 0)
    assert errs[-1] < 0.05 * errs[0]


# -- frozen values -----------------------------------------------------------------

def test_frozen_prediction():
    ctx = make_ctx()
    s = init_state(fused_obs([1.0, 1.65, 18.0], [0.5, 0, 3.0]), ctx, STATS, NOISE)
    curr = EgoPose(rot_y(0.02), [0.0, 0.0, -0.5])
    out = predict(s, 0.1, KITTI, ctx.ego, curr, CouplingWeights(), NOISE)
    assert np.allclose(out.mean[[0, 1, 2, 3, 15]], FROZEN_MEAN, rtol=0, atol=1e-9)
    assert np.trace(out.cov) == pytest.approx(FROZEN_TRACE, rel=1e-12)


FROZEN_MEAN = [666.0981312853633, 208.4429272565335, 72.15377, 64.3798671123332,
               1.594009107252543]
FROZEN_TRACE = 1669.3940727326165
