"""Hand keypoints to effector targets, plus open-loop replay."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import simenv
from .demonstrator import HandDemo
from .simenv import RobotAction, TaskSpec, WorldState

FINGER_MODES = ("all_fingers", "thumb_index")
GRIP_OPEN = 1.0
GRIP_CLOSED = 0.0


class DegenerateFrameError(ValueError):
    pass


@dataclass(frozen=True)
class RetargetConfig:
    grasp_threshold_fraction: float = 0.8
    gripper_max_width: float = 0.08
    finger_mode: str = "all_fingers"
    # 4x4 homogeneous transform applied to the wrist pose
    wrist_to_effector: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __post_init__(self):
        if not (0.0 < self.grasp_threshold_fraction < 1.0):
            raise ValueError("grasp_threshold_fraction must lie in (0, 1)")
        if self.gripper_max_width <= 0:
            raise ValueError("gripper_max_width must be positive")
        if self.finger_mode not in FINGER_MODES:
            raise ValueError(f"finger_mode must be one of {FINGER_MODES}")


@dataclass
class RetargetedTrajectory:
    positions: np.ndarray  # (T, 3)
    frames: np.ndarray  # (T, 3, 3), rows are the x, y, z axes
    gripper: np.ndarray  # (T,), 1 open / 0 closed
    demo: HandDemo | None = None

    def __len__(self) -> int:
        return len(self.positions)


def _grasp_point(h: np.ndarray, cfg: RetargetConfig) -> np.ndarray:
    if cfg.finger_mode == "thumb_index":
        return h[2]
    return h[2:].mean(axis=0)


def retarget_pose(h, cfg: RetargetConfig = RetargetConfig()):
    """Return ``(position, frame, gripper)`` for one hand pose.

    The frame's x axis follows wrist->thumb, its z axis is normal to the
    wrist/thumb/finger-centroid plane. The gripper closes (0) when the thumb
    is within ``fraction * max_width`` of the grasp point.
    """
    h = np.asarray(h, dtype=np.float64)
    a, b = h[0], h[1]
    c_frame = h[2:].mean(axis=0)
    ab = b - a
    z = np.cross(ab, c_frame - a)
    zn = np.linalg.norm(z)
    if zn <= 1e-9 or np.linalg.norm(ab) <= 1e-12:
        raise DegenerateFrameError("wrist, thumb and finger centroid are collinear")
    x = ab / np.linalg.norm(ab)
    z = z / zn
    y = np.cross(z, x)
    frame = np.vstack([x, y, z])
    position, frame = _to_effector(a, frame, cfg)
    return position, frame, _grip(h, cfg)


def retarget_trajectory(demo: HandDemo, cfg: RetargetConfig = RetargetConfig()) -> RetargetedTrajectory:
    n = len(demo)
    positions = np.empty((n, 3))
    frames = np.empty((n, 3, 3))
    gripper = np.empty(n)
    for t, h in enumerate(demo.poses):
        try:
            positions[t], frames[t], gripper[t] = retarget_pose(h, cfg)
        except DegenerateFrameError:
            if t == 0:
                raise
            # keep the previous orientation; position and grasp are still defined
            positions[t], frames[t] = _to_effector(h[0], frames[t - 1], cfg)
            gripper[t] = _grip(h, cfg)
    return RetargetedTrajectory(positions, frames, gripper, demo)


def _to_effector(wrist, frame, cfg):
    tf = np.asarray(cfg.wrist_to_effector, dtype=np.float64)
    if np.array_equal(tf, np.eye(4)):
        return wrist.copy(), frame
    return wrist + frame.T @ tf[:3, 3], tf[:3, :3].T @ frame


def _grip(h, cfg):
    width = np.linalg.norm(h[1] - _grasp_point(h, cfg))
    return GRIP_CLOSED if width < cfg.grasp_threshold_fraction * cfg.gripper_max_width else GRIP_OPEN


def action_sequence(traj: RetargetedTrajectory, pad: int = 0) -> np.ndarray:
    """Retargeted actions ``(T - 1 + pad, 4)``: clamped deltas and gripper bits.

    Row ``t`` is the command ``replay_open_loop`` issues at step ``t``. The
    effector's motion never depends on the objects, so these are fixed by the
    trajectory alone; the ``pad`` extra rows keep tracking the final pose.
    """
    last = len(traj) - 1
    n = last + pad
    out = np.empty((n, 4))
    q = traj.positions[0]
    for t in range(n):
        idx = min(t + 1, last)
        dp = simenv.clamp_norm(traj.positions[idx] - q)
        out[t, :3] = dp
        out[t, 3] = traj.gripper[idx]
        q = simenv.move_effector(q, dp)
    return out


def tracking_chunk(traj: RetargetedTrajectory, t: int, effector, horizon: int) -> np.ndarray:
    """Actions ``(horizon, 4)`` that track demo poses ``t+1 .. t+horizon`` from ``effector``.

    Each row is the clamped step toward the next demo pose from where the
    previous rows would leave the effector, so the chunk re-anchors on the
    robot's actual position every control cycle. Past the end of the demo the
    final pose is repeated. Executing row ``k`` at step ``t + k`` issues exactly
    the command ``replay_open_loop`` would.
    """
    last = len(traj) - 1
    out = np.empty((horizon, 4))
    q = np.asarray(effector, dtype=np.float64)
    for k in range(horizon):
        idx = min(t + k + 1, last)
        dp = simenv.clamp_norm(traj.positions[idx] - q)
        out[k, :3] = dp
        out[k, 3] = traj.gripper[idx]
        q = simenv.move_effector(q, dp)
    return out


def replay_open_loop(task: TaskSpec, traj: RetargetedTrajectory, state: WorldState):
    """Teleport to the first target and track the rest with clamped deltas.

    ``state`` is the (possibly perturbed) scene to execute in. Returns the
    terminal state and the per-step states.
    """
    if len(traj) < 1:
        raise ValueError("empty trajectory")
    state = simenv.teleport(state, traj.positions[0])
    states = [state]
    for t in range(len(traj) - 1):
        dp = simenv.clamp_norm(traj.positions[t + 1] - state.effector)
        state = simenv.step(state, RobotAction(dp, traj.gripper[t + 1]))
        states.append(state)
    return state, states


def save_trajectory(traj: RetargetedTrajectory, path) -> None:
    with open(path, "w") as fh:
        header = {"T": len(traj), "task_id": traj.demo.task_id if traj.demo else None}
        fh.write(json.dumps(header) + "\n")
        for t in range(len(traj)):
            rec = {"t": t, "position": traj.positions[t].tolist(),
                   "frame": traj.frames[t].reshape(-1).tolist(), "gripper": int(traj.gripper[t])}
            fh.write(json.dumps(rec) + "\n")
