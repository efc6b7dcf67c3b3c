import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demorefine import benchmark, demonstrator as dm, retarget as rt, simenv
from demorefine.retarget import DegenerateFrameError, RetargetConfig


def random_rotation(rng):
    q, r = np.linalg.qr(rng.standard_normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] *= -1
    return q


def hand_with_width(width, c=(0.0, 0.1, 0.0)):
    """Wrist at the origin, thumb at (0.1, 0, 0), fingers centred on ``c``
    and placed so the thumb-to-centroid distance is ``width``."""
    b = np.array([0.1, 0.0, 0.0])
    c = np.asarray(c, dtype=float)
    c = b + (c - b) * (width / np.linalg.norm(c - b))
    spread = np.array([[0.0, 0.0, 0.01], [0.0, 0.0, -0.01], [0.0, 0.0, 0.0]])
    return np.vstack([np.zeros(3), b, c + spread])


def test_reference_pose():
    h = np.array([[0, 0, 0], [0.1, 0, 0], [0, 0.1, 0.01], [0, 0.1, -0.01], [0, 0.1, 0]], dtype=float)
    pos, frame, grip = rt.retarget_pose(h)
    assert np.array_equal(pos, np.zeros(3))
    assert np.allclose(frame, np.eye(3), atol=1e-15)
    assert np.linalg.norm(h[1] - h[2:].mean(0)) == pytest.approx(0.141421356, abs=1e-8)
    assert grip == rt.GRIP_OPEN


def test_closes_below_threshold():
    _, _, grip = rt.retarget_pose(hand_with_width(0.063))
    assert grip == rt.GRIP_CLOSED


def test_grasp_step_is_exactly_at_threshold():
    threshold = 0.8 * 0.08
    below = np.nextafter(threshold, 0.0)
    assert rt.retarget_pose(hand_with_width(threshold))[2] == rt.GRIP_OPEN
    # widths straddling the step by a few ulps
    for w in (threshold * (1 - 1e-12), below - 1e-15):
        assert rt.retarget_pose(hand_with_width(w))[2] == rt.GRIP_CLOSED
    widths = np.linspace(0.0, 0.12, 2001)[1:]
    grips = [rt.retarget_pose(hand_with_width(w))[2] for w in widths]
    flips = np.flatnonzero(np.diff(grips))
    assert len(flips) == 1
    assert widths[flips[0]] < threshold <= widths[flips[0] + 1]


def test_collinear_pose_is_degenerate():
    h = np.array([[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.2, 0, 0], [0.2, 0, 0]], dtype=float)
    with pytest.raises(DegenerateFrameError):
        rt.retarget_pose(h)


def test_frames_orthonormal_over_random_poses():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(10_000):
        h = rng.uniform(-1, 1, (5, 3))
        try:
            _, f, _ = rt.retarget_pose(h)
        except DegenerateFrameError:
            continue
        worst = max(worst, float(np.max(np.abs(f @ f.T - np.eye(3)))))
        assert np.linalg.det(f) > 0
    assert worst < 1e-9


def test_rigid_motion_equivariance():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h = rng.uniform(-0.2, 0.2, (5, 3))
        rot, shift = random_rotation(rng), rng.uniform(-1, 1, 3)
        p0, f0, g0 = rt.retarget_pose(h)
        p1, f1, g1 = rt.retarget_pose(h @ rot.T + shift)
        assert np.max(np.abs(p1 - (rot @ p0 + shift))) < 1e-8
        assert np.max(np.abs(f1 - f0 @ rot.T)) < 1e-8
        assert g0 == g1


def test_wrist_to_effector_transform():
    tf = np.eye(4)
    tf[:3, 3] = [0.0, 0.0, 0.05]
    h = np.array([[0, 0, 0], [0.1, 0, 0], [0, 0.1, 0.01], [0, 0.1, -0.01], [0, 0.1, 0]], dtype=float)
    pos, frame, _ = rt.retarget_pose(h, RetargetConfig(wrist_to_effector=tf))
    assert np.allclose(pos, [0, 0, 0.05])
    assert np.allclose(frame, np.eye(3))


def test_thumb_index_mode_uses_index_tip():
    h = hand_with_width(0.1)
    h[2] = h[1] + np.array([0.0, 0.03, 0.0])  # index tip close to the thumb
    assert rt.retarget_pose(h)[2] == rt.GRIP_OPEN
    assert rt.retarget_pose(h, RetargetConfig(finger_mode="thumb_index"))[2] == rt.GRIP_CLOSED


@pytest.mark.parametrize("kwargs", [dict(grasp_threshold_fraction=0.0), dict(grasp_threshold_fraction=1.0),
                                    dict(gripper_max_width=0.0), dict(finger_mode="pinky")])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        RetargetConfig(**kwargs)


def test_zero_gap_demo_reproduces_expert_trace():
    task = benchmark.EVAL_TASKS["pick_place"]
    ep = dm.scripted_robot_expert(task, 3)
    demo = dm.demo_from_episode(ep, dm.EmbodimentGap.zero(), 3)
    traj = rt.retarget_trajectory(demo)
    assert len(traj) == len(demo)
    assert np.array_equal(traj.positions, np.stack([s.effector for s in ep.states]))
    assert np.array_equal(traj.gripper, [s.aperture for s in ep.states])


def test_default_gap_positions_are_wrist_trace():
    task = benchmark.EVAL_TASKS["pick_place"]
    demo = dm.scripted_human_demo(task, dm.EmbodimentGap(), 4)
    traj = rt.retarget_trajectory(demo)
    assert np.array_equal(traj.positions, demo.poses[:, 0])


def test_degenerate_frame_mid_trajectory_reuses_previous():
    task = benchmark.EVAL_TASKS["reach"]
    demo = dm.scripted_human_demo(task, dm.EmbodimentGap.zero(), 0)
    poses = demo.poses.copy()
    w = poses[5, 0]
    poses[5, 1:] = w + np.outer([1, 2, 2, 2], [0.05, 0, 0])
    traj = rt.retarget_trajectory(dm.HandDemo(demo.task_id, poses))
    assert np.array_equal(traj.frames[5], traj.frames[4])
    bad = poses.copy()
    bad[0] = poses[5]
    with pytest.raises(DegenerateFrameError):
        rt.retarget_trajectory(dm.HandDemo(demo.task_id, bad))


def test_zero_gap_replay_solves_the_unperturbed_scene():
    for name, task in benchmark.EVAL_TASKS.items():
        for seed in range(3):
            demo = dm.scripted_human_demo(task, dm.EmbodimentGap.zero(), seed)
            final, states = rt.replay_open_loop(task, rt.retarget_trajectory(demo), simenv.reset(task, seed))
            assert simenv.success(final, task), (name, seed)
            assert len(states) == len(demo)


def test_action_sequence_matches_replay():
    task = benchmark.EVAL_TASKS["pick_place"]
    traj = rt.retarget_trajectory(dm.scripted_human_demo(task, dm.EmbodimentGap(), 7))
    acts = rt.action_sequence(traj, pad=10)
    assert acts.shape == (len(traj) - 1 + 10, 4)
    _, states = rt.replay_open_loop(task, traj, simenv.reset(task, 7))
    for t in range(len(traj) - 1):
        expected = simenv.clamp_norm(traj.positions[t + 1] - states[t].effector)
        assert np.array_equal(acts[t, :3], expected)
        assert acts[t, 3] == traj.gripper[t + 1]
    assert np.all(acts[len(traj) - 1:, 3] == traj.gripper[-1])


def test_tracking_chunk_reproduces_replay_commands():
    task = benchmark.EVAL_TASKS["pick_place"]
    traj = rt.retarget_trajectory(dm.scripted_human_demo(task, dm.EmbodimentGap(), 5))
    _, states = rt.replay_open_loop(task, traj, simenv.reset(task, 5))
    acts = rt.action_sequence(traj, pad=10)
    for t in (0, 8, 16, len(traj) - 3):
        chunk = rt.tracking_chunk(traj, t, states[t].effector, 10)
        assert np.array_equal(chunk, acts[t:t + 10])


def test_tracking_chunk_reanchors_on_effector():
    task = benchmark.EVAL_TASKS["reach"]
    traj = rt.retarget_trajectory(dm.scripted_human_demo(task, dm.EmbodimentGap.zero(), 0))
    here = traj.positions[3] + np.array([0.01, 0.0, 0.0])
    chunk = rt.tracking_chunk(traj, 3, here, 4)
    assert np.allclose(chunk[0, :3], simenv.clamp_norm(traj.positions[4] - here))
    # near the end every row targets the final pose, so the offset is closed
    t = len(traj) - 3
    here = traj.positions[t] + np.array([0.01, 0.0, 0.0])
    q = here
    for row in rt.tracking_chunk(traj, t, here, 10):
        q = simenv.move_effector(q, row[:3])
    assert np.allclose(q, traj.positions[-1], atol=1e-12)


def test_trajectory_export(tmp_path):
    task = benchmark.EVAL_TASKS["pick_lift"]
    traj = rt.retarget_trajectory(dm.scripted_human_demo(task, dm.EmbodimentGap(), 1))
    path = tmp_path / "traj.jsonl"
    rt.save_trajectory(traj, path)
    lines = path.read_text().splitlines()
    header = json.loads(lines[0])
    assert header["T"] == len(traj) == len(lines) - 1
    rec = json.loads(lines[3])
    assert rec["t"] == 2 and len(rec["position"]) == 3 and len(rec["frame"]) == 9
    assert np.allclose(rec["position"], traj.positions[2])


@settings(max_examples=200, deadline=None)
@given(width=st.floats(1e-4, 0.2), frac=st.floats(0.05, 0.95), max_w=st.floats(0.01, 0.2))
def test_threshold_rule(width, frac, max_w):
    cfg = RetargetConfig(grasp_threshold_fraction=frac, gripper_max_width=max_w)
    h = hand_with_width(width)
    measured = np.linalg.norm(h[1] - h[2:].mean(0))
    expected = rt.GRIP_CLOSED if measured < frac * max_w else rt.GRIP_OPEN
    assert rt.retarget_pose(h, cfg)[2] == expected
