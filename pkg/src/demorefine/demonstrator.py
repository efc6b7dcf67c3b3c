"""Scripted expert data in two embodiments.

The robot expert is a waypoint follower with a closed-loop pushing phase.
Hand demonstrations are synthesized by running the same expert in a private
copy of the scene and dressing its effector trace up as five hand keypoints
(wrist, thumb tip, index, middle, ring tips) with a deliberate embodiment gap.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import simenv
from .simenv import RobotAction, TaskSpec, WorldState

log = logging.getLogger(__name__)

NUM_KEYPOINTS = 5
GRIPPER_MAX_WIDTH = 0.08
HOVER_Z = 0.10
LIFT_Z = 0.12
DWELL_STEPS = 3
PREPUSH_DIST = 0.07
PUSH_DEPTH = 0.02

# Hand frame: e1 points from the wrist toward the fingers, e2 runs from the
# finger centroid toward the thumb, e3 completes the frame.
_HAND_AXES = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
FINGER_REACH = 0.08
# Fingertip offsets from their centroid, in (e1, e2, e3) coordinates; they sum
# to zero so the centroid sits exactly at FINGER_REACH * e1.
_FINGER_OFFSETS = np.array([
    [0.000, -0.020, 0.055],   # index
    [0.005, 0.010, -0.020],   # middle
    [-0.005, 0.010, -0.035],  # ring
])


class ExpertFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class EmbodimentGap:
    wrist_offset: tuple = (0.028, -0.02, 0.012)
    aperture_scale: float = 1.3
    jitter: float = 0.002
    grasp_lag: int = 2

    def __post_init__(self):
        vals = list(self.wrist_offset) + [self.aperture_scale, self.jitter]
        if not all(math.isfinite(v) for v in vals) or self.jitter < 0 or self.grasp_lag < 0:
            raise ValueError(f"invalid embodiment gap {self}")

    @classmethod
    def zero(cls) -> "EmbodimentGap":
        return cls(wrist_offset=(0.0, 0.0, 0.0), aperture_scale=1.0, jitter=0.0, grasp_lag=0)


@dataclass
class HandDemo:
    task_id: int
    poses: np.ndarray  # (T + 1, 5, 3)
    seed: int | None = None
    gap: EmbodimentGap = field(default_factory=EmbodimentGap)

    def __post_init__(self):
        self.poses = np.asarray(self.poses, dtype=np.float64)
        if self.poses.ndim != 3 or self.poses.shape[1:] != (NUM_KEYPOINTS, 3):
            raise ValueError(f"hand poses must be (T, 5, 3), got {self.poses.shape}")
        if len(self.poses) < 2 or not np.all(np.isfinite(self.poses)):
            raise ValueError("hand demo needs at least two finite poses")

    def __len__(self) -> int:
        return len(self.poses)

    @property
    def num_steps(self) -> int:
        return len(self.poses) - 1


@dataclass
class ExpertEpisode:
    task: TaskSpec
    seed: int
    states: list[WorldState]  # T + 1 states
    actions: list[RobotAction]  # T actions
    success: bool

    def observations(self) -> np.ndarray:
        return np.stack([simenv.observe(s) for s in self.states[:-1]])

    def action_array(self) -> np.ndarray:
        return np.array([list(a.dp) + [a.gripper] for a in self.actions])


# -- scripted robot expert ----------------------------------------------------

class _Move:
    def __init__(self, target, grip):
        self.target = np.asarray(target, dtype=np.float64)
        self.grip = grip

    def action(self, state, expert):
        d = self.target - state.effector
        if float(d @ d) < 1e-18:
            return None
        return RobotAction(simenv.clamp_norm(d), self.grip)


class _Dwell:
    def __init__(self, n, grip):
        self.left = n
        self.grip = grip

    def action(self, state, expert):
        if self.left <= 0:
            return None
        self.left -= 1
        return RobotAction(np.zeros(3), self.grip)


class _Hold:
    def __init__(self, grip):
        self.grip = grip

    def action(self, state, expert):
        return RobotAction(np.zeros(3), self.grip)


class _Push:
    """Closed-loop pusher: stay behind the object on the line to the target."""

    def __init__(self, target_xy, tol, max_steps=200):
        self.target = np.asarray(target_xy, dtype=np.float64)
        self.tol = tol
        self.left = max_steps

    def action(self, state, expert):
        obj = state.objects[0]
        to_goal = self.target - obj.center[:2]
        dist = math.hypot(to_goal[0], to_goal[1])
        if dist < self.tol or self.left <= 0:
            return None
        self.left -= 1
        u = to_goal / dist
        rho = simenv.EFFECTOR_RADIUS + obj.radius
        back = rho - min(PUSH_DEPTH, dist)
        target = np.array([*(obj.center[:2] - u * back), obj.radius])
        return RobotAction(simenv.clamp_norm(target - state.effector), 0.0)


def _plan(task: TaskSpec, state: WorldState) -> list:
    obj = state.objects[0]
    o = obj.center
    g = state.goal.center
    fam = task.family
    if fam == "reach":
        return [_Move(g, 1.0), _Hold(1.0)]
    if fam in ("pick_lift", "pick_place"):
        plan = [_Move((o[0], o[1], HOVER_Z), 1.0), _Move(o, 1.0), _Dwell(DWELL_STEPS, 0.0),
                _Move((o[0], o[1], LIFT_Z), 0.0)]
        if fam == "pick_lift":
            return plan + [_Hold(0.0)]
        return plan + [_Move((g[0], g[1], LIFT_Z), 0.0), _Move((g[0], g[1], obj.radius), 0.0),
                       _Dwell(DWELL_STEPS, 1.0), _Move((g[0], g[1], LIFT_Z), 1.0), _Hold(1.0)]
    if fam == "push_to_goal":
        target, tol = g[:2], 0.01
    else:  # slide_close: push along +x until just past the wall line
        target, tol = np.array([g[0] + 0.02, g[1]]), 0.005
    u = target - o[:2]
    u = u / np.linalg.norm(u)
    pre = o[:2] - u * PREPUSH_DIST
    return [_Move((pre[0], pre[1], HOVER_Z), 1.0), _Move((pre[0], pre[1], obj.radius), 1.0),
            _Dwell(DWELL_STEPS, 0.0), _Push(target, tol),
            _MoveUp(HOVER_Z, 0.0), _Hold(0.0)]


class _MoveUp:
    def __init__(self, z, grip):
        self.z = z
        self.grip = grip
        self.inner = None

    def action(self, state, expert):
        if self.inner is None:
            p = state.effector
            self.inner = _Move((p[0], p[1], self.z), self.grip)
        return self.inner.action(state, expert)


class ScriptedExpert:
    def __init__(self, task: TaskSpec, state: WorldState):
        self.task = task
        self.phases = _plan(task, state)
        self.i = 0

    @property
    def finished(self) -> bool:
        return isinstance(self.phases[self.i], _Hold)

    def act(self, state: WorldState) -> RobotAction:
        while True:
            a = self.phases[self.i].action(state, self)
            if a is not None:
                return a
            self.i += 1


def run_expert(task: TaskSpec, state: WorldState, seed: int = 0) -> ExpertEpisode:
    expert = ScriptedExpert(task, state)
    states, actions = [state], []
    for _ in range(task.max_steps):
        a = expert.act(state)
        state = simenv.step(state, a)
        states.append(state)
        actions.append(a)
    ok = simenv.success(state, task) and expert.finished
    return ExpertEpisode(task, seed, states, actions, ok)


def scripted_robot_expert(task: TaskSpec, seed) -> ExpertEpisode:
    """Expert rollout from ``reset(task, seed)``; raises if it fails the task."""
    ep = run_expert(task, simenv.reset(task, seed), seed)
    if not ep.success:
        raise ExpertFailure(f"scripted expert failed {task.family} with seed {seed}")
    return ep


def generate_expert_dataset(tasks: list[TaskSpec], num_episodes: int, seed: int,
                            max_attempts_factor: int = 3) -> list[ExpertEpisode]:
    """Round-robin over ``tasks`` until ``num_episodes`` successful episodes exist."""
    episodes: list[ExpertEpisode] = []
    attempts = 0
    while len(episodes) < num_episodes:
        if attempts >= max_attempts_factor * num_episodes:
            raise ExpertFailure(f"only {len(episodes)} / {num_episodes} expert episodes succeeded")
        task = tasks[attempts % len(tasks)]
        ep_seed = int(np.random.SeedSequence([seed, attempts]).generate_state(1)[0])
        attempts += 1
        try:
            episodes.append(scripted_robot_expert(task, ep_seed))
        except ExpertFailure as exc:
            log.info("skipping episode: %s", exc)
    return episodes


# -- synthetic hand demonstrations --------------------------------------------

def hand_keypoints(wrist: np.ndarray, width: float) -> np.ndarray:
    """Rigid hand with thumb-to-finger-centroid distance ``width``."""
    e1, e2, e3 = _HAND_AXES
    centroid = wrist + FINGER_REACH * e1
    thumb = centroid + width * e2
    fingers = centroid + _FINGER_OFFSETS @ _HAND_AXES
    return np.vstack([wrist, thumb, fingers])


def keypoints_from_trace(effector: np.ndarray, aperture: np.ndarray, gap: EmbodimentGap,
                         rng: np.random.Generator) -> np.ndarray:
    n = len(effector)
    offset = np.asarray(gap.wrist_offset, dtype=np.float64)
    poses = np.empty((n, NUM_KEYPOINTS, 3))
    for t in range(n):
        g = aperture[max(t - gap.grasp_lag, 0)]
        poses[t] = hand_keypoints(effector[t] + offset, gap.aperture_scale * g * GRIPPER_MAX_WIDTH)
    if gap.jitter > 0:
        poses += rng.normal(0.0, gap.jitter, size=poses.shape)
    return poses


def demo_from_episode(ep: ExpertEpisode, gap: EmbodimentGap, seed) -> HandDemo:
    effector = np.stack([s.effector for s in ep.states])
    aperture = np.array([s.aperture for s in ep.states])
    rng = np.random.default_rng(seed)
    poses = keypoints_from_trace(effector, aperture, gap, rng)
    return HandDemo(ep.task.task_id, poses, seed=seed, gap=gap)


def scripted_human_demo(task: TaskSpec, gap: EmbodimentGap, seed) -> HandDemo:
    """Hand demo of the expert solving ``reset(task, seed)``."""
    ep = scripted_robot_expert(task, seed)
    return demo_from_episode(ep, gap, seed)


def perturb_keypoints(demo: HandDemo, magnitude: float, seed) -> HandDemo:
    """Shift the whole demo by one random vector of length ``magnitude``."""
    if magnitude < 0:
        raise ValueError("magnitude must be non-negative")
    if magnitude == 0:
        return replace(demo, poses=demo.poses.copy())
    rng = np.random.default_rng(seed)
    d = rng.normal(size=3)
    d *= magnitude / np.linalg.norm(d)
    return replace(demo, poses=demo.poses + d)


# -- file formats -------------------------------------------------------------

def save_demo(demo: HandDemo, path) -> None:
    with open(path, "w") as fh:
        header = {"task_id": demo.task_id, "T": len(demo), "seed": demo.seed,
                  "gap": asdict(demo.gap)}
        fh.write(json.dumps(header) + "\n")
        for t, h in enumerate(demo.poses):
            fh.write(json.dumps({"t": t, "k": [float(v) for v in h.reshape(-1)]}) + "\n")


def load_demo(path) -> HandDemo:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    poses = np.array([json.loads(line)["k"] for line in lines[1:]]).reshape(-1, NUM_KEYPOINTS, 3)
    if len(poses) != header["T"]:
        raise ValueError(f"{path}: header says {header['T']} poses, found {len(poses)}")
    gap = header["gap"]
    gap["wrist_offset"] = tuple(gap["wrist_offset"])
    return HandDemo(header["task_id"], poses, seed=header["seed"], gap=EmbodimentGap(**gap))
