import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from choreoflow.errors import DegenerateInput, DimensionError
from choreoflow.representation import (
    ContinuousMotion, MotionCodec, MotionSequence, NormStats, angle_to_sincos, decode_sequence,
    denormalize, encode_frames, encode_sequence, euler_to_matrix, fit_norm_stats, matrix_to_6d,
    matrix_to_euler, normalize, sincos_to_angle, sixd_to_matrix, sixd_to_matrix_safe,
)
from choreoflow.schema import dim_layout

from conftest import random_native
from oracles import euler_quat, quat_to_matrix, random_rotation

ORDERS = ["XYZ", "XZY", "YXZ", "YZX", "ZXY", "ZYX"]
angle = st.floats(-np.pi, np.pi, allow_nan=False)


@pytest.mark.parametrize("order", ORDERS)
def test_zero_angles_identity(order):
    assert np.allclose(euler_to_matrix([0, 0, 0], order), np.eye(3), atol=0)


def test_quarter_turn_about_x_maps_y_to_z():
    R = euler_to_matrix([np.pi / 2, 0, 0], "XYZ")
    assert np.allclose(R @ [0, 1, 0], [0, 0, 1], atol=1e-15)
    assert np.allclose(R, quat_to_matrix(euler_quat([np.pi / 2, 0, 0], "XYZ")), atol=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(ORDERS), st.tuples(angle, angle, angle))
def test_euler_matches_quaternion_oracle(order, angles):
    R = euler_to_matrix(np.array(angles), order)
    assert np.abs(R - quat_to_matrix(euler_quat(angles, order))).max() < 1e-12
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1) < 1e-12


@settings(max_examples=100, deadline=None)
@given(st.sampled_from(ORDERS), st.tuples(angle, angle, angle), st.tuples(angle, angle, angle))
def test_composition_matches_quaternion_product(order, a, b):
    from oracles import quat_mul
    lhs = euler_to_matrix(np.array(a), order) @ euler_to_matrix(np.array(b), order)
    rhs = quat_to_matrix(quat_mul(euler_quat(a, order), euler_quat(b, order)))
    assert np.abs(lhs - rhs).max() < 1e-12


@pytest.mark.parametrize("order", ORDERS)
def test_matrix_euler_roundtrip_including_gimbal(order):
    rng = np.random.default_rng(1)
    angles = rng.uniform(-np.pi, np.pi, (500, 3))
    angles[:50, 1] = np.pi / 2
    angles[50:100, 1] = -np.pi / 2
    R = euler_to_matrix(angles, order)
    back = euler_to_matrix(matrix_to_euler(R, order), order)
    assert np.abs(back - R).max() < 1e-9
    e = matrix_to_euler(R, order)
    assert np.all(e > -np.pi) and np.all(e <= np.pi)


def test_6d_examples():
    assert np.allclose(matrix_to_6d(np.eye(3)), [1, 0, 0, 0, 1, 0])
    assert np.allclose(sixd_to_matrix([1, 0, 0, 0, 1, 0]), np.eye(3))
    assert np.allclose(sixd_to_matrix([2, 0, 0, 1, 1, 0]), np.eye(3), atol=1e-15)
    with pytest.raises(DegenerateInput):
        sixd_to_matrix([0, 0, 0, 0, 1, 0])
    with pytest.raises(DegenerateInput):
        sixd_to_matrix([1, 0, 0, 3, 0, 0])


def test_6d_roundtrip_random_rotations():
    rng = np.random.default_rng(0)
    R = np.stack([random_rotation(rng) for _ in range(1000)])
    assert np.abs(sixd_to_matrix(matrix_to_6d(R)) - R).max() < 1e-10
    assert np.allclose(np.linalg.norm(matrix_to_6d(R)[:, :3], axis=-1), 1)


@settings(max_examples=300, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_sixd_output_orthonormal(v):
    R, bad = sixd_to_matrix_safe(v)
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-10
    assert abs(np.linalg.det(R) - 1) < 1e-10


def test_safe_fallback_is_identity():
    R, bad = sixd_to_matrix_safe(np.zeros((2, 6)))
    assert bad.all() and np.allclose(R, np.eye(3))


def test_sincos_examples():
    assert np.allclose(angle_to_sincos(0.0), (1, 0))
    assert np.allclose(angle_to_sincos(np.pi / 2), (0, 1))
    c, s = angle_to_sincos(-np.pi)
    assert np.allclose((c, s), (-1, 0))
    assert sincos_to_angle(c, s)[0] == pytest.approx(np.pi)
    assert sincos_to_angle(1.0, 0.0) == (0.0, False)
    assert sincos_to_angle(0.5, 0.5)[0] == pytest.approx(np.pi / 4)
    assert sincos_to_angle(0.0, 0.0) == (0.0, True)


@settings(max_examples=300, deadline=None)
@given(angle, st.floats(1e-3, 1e3))
def test_sincos_unit_and_scale_invariant(theta, k):
    c, s = angle_to_sincos(theta)
    assert abs(c * c + s * s - 1) < 1e-15
    assert -1 <= c <= 1 and -1 <= s <= 1
    assert sincos_to_angle(k * c, k * s)[0] == pytest.approx(sincos_to_angle(c, s)[0], abs=1e-14)
    # power-of-two scales round nothing, so the angle is bit-identical
    assert sincos_to_angle(4.0 * c, 4.0 * s)[0] == sincos_to_angle(c, s)[0]


def test_zero_pose_encoding(mhr):
    m = MotionSequence("mhr260", 30.0, np.zeros((1, 136)))
    c = encode_sequence(m, mhr)
    assert c.frames.shape == (1, 260)
    assert np.all(c.frames[0, :6] == 0)
    for j in mhr.canonical_joints:
        if j.group == "jaw":
            continue
        blk = c.frames[0, mhr.continuous_slices[j.name]]
        assert blk.tolist() == ([1, 0, 0, 0, 1, 0] if j.dof == 3 else [1, 0])
    assert np.array_equal(decode_sequence(c, mhr).frames, m.frames)


def _matrices(frames, schema):
    from choreoflow.kinematics import rotations_from_native
    import torch
    return rotations_from_native(torch.as_tensor(frames), schema).numpy()


def test_roundtrip_1000_poses(mhr):
    rng = np.random.default_rng(7)
    f = random_native(mhr, 1000, rng)
    m = MotionSequence("mhr260", 30.0, f)
    back = decode_sequence(encode_sequence(m, mhr), mhr)
    assert np.array_equal(back.frames[:, :6], f[:, :6])
    err = np.abs(_matrices(back.frames, mhr) - _matrices(f, mhr)).max()
    assert err < 1e-8
    assert back.diagnostics.total == 0


def test_encoding_frame_permutation(mhr):
    rng = np.random.default_rng(3)
    f = random_native(mhr, 9, rng)
    perm = rng.permutation(9)
    assert np.array_equal(encode_frames(f, mhr)[perm], encode_frames(f[perm], mhr))


def test_encoding_bounded(mhr):
    f = random_native(mhr, 200, np.random.default_rng(4), scale=10.0)
    c = encode_frames(f, mhr)
    assert np.abs(c[:, 6:]).max() <= 1.0


def test_dimension_mismatch(mhr):
    with pytest.raises(DimensionError):
        encode_sequence(MotionSequence("mhr260", 30.0, np.zeros((2, 10))), mhr)


def test_off_manifold_decode(mhr):
    c = ContinuousMotion("mhr260", 30.0, np.full((4, 260), 0.5), False)
    m = decode_sequence(c, mhr)
    assert np.isfinite(m.frames).all()
    assert m.diagnostics.projection_applied
    assert m.diagnostics.total > 0  # 6D blocks with parallel columns fall back


def test_scaled_6d_blocks_decode_the_same(mhr):
    f = random_native(mhr, 5, np.random.default_rng(5))
    c = encode_frames(f, mhr)
    scaled = c.copy()
    lay = dim_layout(mhr)
    scaled[:, lay.rotation] *= 3
    a = decode_sequence(ContinuousMotion("m", 30.0, c, False), mhr).frames
    b = decode_sequence(ContinuousMotion("m", 30.0, scaled, False), mhr).frames
    assert np.abs(_matrices(a, mhr) - _matrices(b, mhr)).max() < 1e-12


@pytest.mark.parametrize("k", [0, 1, 2])
def test_continuity_across_pi(mhr, k):
    """A 1e-4 step across the +-pi branch cut barely moves the encoding."""
    base = np.zeros((2, 136))
    s3 = mhr.native_slices["l_shoulder"]
    s1 = mhr.native_slices["l_elbow"]
    base[0, s3.start + k] = np.pi - 5e-5
    base[1, s3.start + k] = -np.pi + 5e-5
    base[0, s1.start] = np.pi - 5e-5
    base[1, s1.start] = -np.pi + 5e-5
    c = encode_frames(base, mhr)
    assert np.abs(base[1] - base[0]).max() > 6  # raw angle jumps by ~2 pi
    assert np.linalg.norm(c[1] - c[0]) < 1e-3


def test_norm_stats_two_point():
    frames = np.zeros((4, 8))
    frames[:, 6:] = np.array([[1, -1], [-1, 1], [1, 1], [-1, -1]])
    st_ = fit_norm_stats([ContinuousMotion("x", 1.0, frames, False)])
    assert st_.sigma_rot == pytest.approx(1.0)
    assert np.all(st_.trans_std == 1e-8)


def test_normalize_examples():
    stats = NormStats(2.0, np.zeros(6), np.ones(6), 1)
    c = ContinuousMotion("x", 1.0, np.array([[0, 0, 0, 0, 0, 0, 1.0, 0.0]]), False)
    assert normalize(c, stats).frames[0, 6:].tolist() == [0.5, 0.0]
    ident = NormStats(1.0, np.zeros(6), np.ones(6), 1)
    assert np.array_equal(normalize(c, ident).frames, c.frames)


def test_normalize_roundtrip_and_angle_invariance(mhr):
    rng = np.random.default_rng(11)
    motions = [MotionSequence("mhr260", 30.0, random_native(mhr, 20, rng)) for _ in range(3)]
    cs = [encode_sequence(m, mhr) for m in motions]
    stats = fit_norm_stats(cs)
    n = normalize(cs[0], stats)
    assert np.abs(denormalize(n, stats).frames - cs[0].frames).max() < 1e-10
    s = mhr.continuous_slices["l_elbow"]
    before, _ = sincos_to_angle(cs[0].frames[:, s.start], cs[0].frames[:, s.start + 1])
    after, _ = sincos_to_angle(n.frames[:, s.start], n.frames[:, s.start + 1])
    assert np.abs(before - after).max() < 1e-14


@pytest.mark.parametrize("mode", ["hybrid", "zscore136"])
def test_codec_modes_roundtrip(mhr, mode):
    rng = np.random.default_rng(2)
    motions = [MotionSequence("mhr260", 30.0, random_native(mhr, 10, rng, scale=2.0)) for _ in range(2)]
    codec = MotionCodec(mhr, mode).fit(motions)
    x = codec.to_target(motions[0].frames)
    assert x.shape == (10, codec.dim)
    back = codec.from_target(x, 30.0)
    assert np.abs(_matrices(back.frames, mhr) - _matrices(motions[0].frames, mhr)).max() < 1e-8
