import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coupledtrack.observations import Category
from coupledtrack.simulator import (DetectionNoise, EgoSpec, ObjectSpec, ProposalNoise,
                                    ScenarioSpec, generate, observe, random_scenario, simulate)

CAR = Category.CAR


def one_object(position, velocity=(0.0, 0.0), **kw):
    return ScenarioSpec(objects=[ObjectSpec(CAR, position, velocity, size3d=kw.pop("size3d", None))],
                        **kw)


def test_static_object_static_camera():
    gt, _ = generate(one_object((1.0, 12.0), duration=15))
    boxes = {tuple(s.bbox.as_array()) for s in gt[0].frames.values()}
    assert len(boxes) == 1


def test_optical_axis_box_is_centered():
    # a cube centered on the optical axis: the ground sits half a side below the camera
    spec = one_object((0.0, 20.0), size3d=(1.5, 1.5, 1.5), camera_height=0.75, duration=1)
    gt, contexts = generate(spec)
    b = gt[0].frames[0].bbox
    intr = contexts[0].intrinsics
    assert b.x == pytest.approx(intr.u0, abs=1e-9)
    assert b.y == pytest.approx(intr.v0, abs=1e-9)


@given(st.floats(-10, 10), st.floats(5, 40), st.floats(-5, 5), st.floats(-5, 5))
def test_constant_velocity_is_a_line(x, z, vx, vz):
    gt, _ = generate(one_object((x, z), (vx, vz), duration=30))
    pts = np.array([s.position for s in gt[0].frames.values()])
    centered = pts - pts.mean(axis=0)
    direction = np.linalg.svd(centered)[2][0]
    residual = centered - np.outer(centered @ direction, direction)
    assert np.abs(residual).max() < 1e-12


def test_outside_frustum_is_invisible():
    gt, _ = generate(one_object((0.0, -5.0), duration=1))
    assert not gt[0].frames[0].visible


def test_zero_noise_observations_equal_truth():
    spec = random_scenario(4, n_objects=4, duration=10, ego=EgoSpec("curve", 5.0, 0.1))
    gt, contexts, frames = simulate(spec)
    for ctx, (dets, props) in zip(contexts, frames):
        visible = [g for g in gt if g.frames[ctx.frame].visible]
        assert len(dets) == len(props) == len(visible)
        for g, d, p in zip(visible, dets, props):
            s = g.frames[ctx.frame]
            assert np.array_equal(d.bbox.as_array(), s.bbox.as_array())
            assert np.array_equal(p.position, s.position)
            assert np.array_equal(p.velocity, g.truth.velocity[ctx.frame])
            assert d.category == g.category


def test_depth_sigma_formula():
    assert ProposalNoise(depth_k=0.01).depth_sigma(20.0) == pytest.approx(4.0)


def test_no_proposal_beyond_z_max():
    spec = one_object((0.0, 40.0), duration=1, proposal_noise=ProposalNoise(z_max=30.0))
    gt, contexts = generate(spec)
    for seed in range(1000):
        _, props = observe(gt, contexts[0], spec.detection_noise, spec.proposal_noise, seed)
        assert props == []


def test_seed_determinism():
    noise = DetectionNoise(center_sigma=3, miss_base=0.2, fp_rate=1.5, confusion_prob=0.1,
                           appearance_sigma=0.02)
    spec = random_scenario(9, duration=20, detection_noise=noise,
                           proposal_noise=ProposalNoise(0.2, 0.005, 0.1, 40.0, velocity_sigma=0.3))

    def stream(s):
        out = []
        for dets, props in simulate(s)[2]:
            out.append([d.bbox.as_array().tobytes() + d.appearance.tobytes() for d in dets])
            out.append([p.position.tobytes() + p.size3d.tobytes() for p in props])
        return out

    assert stream(spec) == stream(spec)
    assert stream(spec) != stream(random_scenario(10, duration=20, detection_noise=noise))


def _depth_errors(z, k, n):
    spec = one_object((0.0, z), duration=1, proposal_noise=ProposalNoise(depth_k=k))
    gt, contexts = generate(spec)
    truth = gt[0].frames[0].position
    errs = []
    for seed in range(n):
        _, props = observe(gt, contexts[0], spec.detection_noise, spec.proposal_noise, seed)
        errs.append(props[0].position[2] - truth[2])
    return np.array(errs)


@pytest.mark.parametrize("z", [10.0, 20.0, 30.0])
def test_depth_error_std(z):
    k = 0.005
    errs = _depth_errors(z, k, 10_000)
    assert abs(errs.std() / (k * z * z) - 1.0) < 0.10


def _within_binomial(count, n, p):
    return abs(count - n * p) <= 3 * math.sqrt(n * p * (1 - p))


def test_miss_and_false_positive_rates():
    noise = DetectionNoise(miss_base=0.1, miss_slope=0.005, fp_rate=0.3)
    spec = one_object((0.0, 20.0), duration=1, detection_noise=noise)
    gt, contexts = generate(spec)
    n, misses, fps = 10_000, 0, 0
    for seed in range(n):
        dets, _ = observe(gt, contexts[0], noise, spec.proposal_noise, seed)
        true = [d for d in dets if d.score == noise.true_score]
        misses += not true
        fps += len(dets) - len(true)
    assert _within_binomial(misses, n, noise.miss_probability(20.0))
    assert _within_binomial(fps, n, 0.3)


@settings(max_examples=20)
@given(st.floats(0, 1), st.floats(0, 0.2), st.floats(1, 100))
def test_probabilities_clamped(base, slope, z_max):
    assert 0 <= DetectionNoise(miss_base=base, miss_slope=slope).miss_probability(50) <= 1
    pn = ProposalNoise(z_max=z_max)
    assert [pn.availability(z) for z in (0.0, z_max, 2 * z_max)] == [1.0, 0.0, 0.0]


def test_invalid_specs():
    with pytest.raises(ValueError):
        ScenarioSpec(duration=0)
    with pytest.raises(ValueError):
        DetectionNoise(miss_base=1.5)
    with pytest.raises(ValueError):
        ProposalNoise(z_max=0)
    with pytest.raises(ValueError):
        ProposalNoise(points=0)
    with pytest.raises(ValueError):
        EgoSpec("teleport")


def test_curved_ego_keeps_camera_on_road():
    gt, contexts = generate(one_object((0.0, 20.0), duration=50,
                                       ego=EgoSpec("curve", 8.0, 0.2)))
    for ctx in contexts:
        assert abs(float(ctx.plane.signed_distance(ctx.ego.center))) == pytest.approx(1.65, abs=1e-9)
        assert np.allclose(ctx.ego.rotation @ ctx.ego.rotation.T, np.eye(3), atol=1e-12)


def test_occlusion_switch_hides_far_object():
    spec = ScenarioSpec(duration=1, occlusion=True,
                        objects=[ObjectSpec(CAR, (0.0, 10.0)), ObjectSpec(CAR, (0.0, 20.0))])
    gt, _ = generate(spec)
    assert gt[0].frames[0].visible and not gt[1].frames[0].visible
