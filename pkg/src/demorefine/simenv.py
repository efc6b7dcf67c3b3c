"""Kinematic tabletop simulator with a point effector and a parallel gripper.

Units are meters. The table top is the plane ``z = 0`` and the workspace is
``[0, 1] x [0, 1] x [0, 0.5]``. Objects are spheres that rest on the table
unless held. Physics is deliberately kinematic:

* a closed gripper is a solid sphere of radius ``EFFECTOR_RADIUS`` that pushes
  overlapping objects out along the (horizontal) contact normal; an open
  gripper straddles objects and does not push;
* closing the gripper attaches the nearest object whose center lies within
  ``GRASP_RADIUS`` of the effector; the held object then moves rigidly with it;
* opening releases the object, which drops straight down to the table.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

TASK_FAMILIES = ("reach", "push_to_goal", "pick_lift", "pick_place", "slide_close")
NUM_TASKS = len(TASK_FAMILIES)

WORKSPACE_LO = np.array([0.0, 0.0, 0.0])
WORKSPACE_HI = np.array([1.0, 1.0, 0.5])
MAX_STEP = 0.03
EFFECTOR_RADIUS = 0.02
GRASP_RADIUS = 0.03
# fraction of the effector's tangential motion an object picks up at contact
PUSH_FRICTION = 0.6
LIFT_HEIGHT = 0.10


class SimError(ValueError):
    pass


class UnreachableError(SimError):
    pass


@dataclass(frozen=True)
class SphereObject:
    center: np.ndarray
    radius: float
    attached: bool = False
    grip_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))


@dataclass(frozen=True)
class GoalRegion:
    center: np.ndarray
    radius: float


@dataclass(frozen=True)
class WorldState:
    effector: np.ndarray
    aperture: float
    objects: tuple[SphereObject, ...]
    goal: GoalRegion
    task_id: int
    step_count: int = 0
    horizon: int = 1
    goal_visible: bool = True


@dataclass(frozen=True)
class RobotAction:
    dp: np.ndarray
    gripper: float


@dataclass(frozen=True)
class TaskSpec:
    """One task family with its initial-state and goal distributions.

    Boxes are ``((x_lo, y_lo), (x_hi, y_hi))`` on the table; ``goal_z`` is the
    height range used by ``reach`` (other families put goals on the table).
    ``goal_offset`` bounds the distance between object and goal (``reach``
    measures it from the home pose); for ``slide_close`` it bounds the slide
    length along +x.
    """

    family: str
    object_box: tuple = ((0.2, 0.2), (0.8, 0.8))
    goal_box: tuple = ((0.1, 0.1), (0.9, 0.9))
    goal_z: tuple = (0.05, 0.2)
    goal_offset: tuple = (0.2, 0.6)
    goal_radius: float = 0.05
    object_radius: tuple = (0.018, 0.025)
    home: tuple = (0.5, 0.1, 0.15)
    max_steps: int = 60
    goal_visible: bool = True

    def __post_init__(self):
        if self.family not in TASK_FAMILIES:
            raise SimError(f"unknown task family {self.family!r}")

    @property
    def task_id(self) -> int:
        return TASK_FAMILIES.index(self.family)


def clamp_norm(v: np.ndarray, limit: float = MAX_STEP) -> np.ndarray:
    n = math.sqrt(float(v @ v))
    if n > limit:
        return v * (limit / n)
    return v


def move_effector(p: np.ndarray, dp: np.ndarray) -> np.ndarray:
    """Effector kinematics: clamp the step, then clamp to the workspace.

    Shared by the simulator and by anything that needs to predict where the
    effector ends up (it never depends on the objects).
    """
    return np.minimum(np.maximum(p + clamp_norm(np.asarray(dp, dtype=np.float64)),
                                 WORKSPACE_LO), WORKSPACE_HI)


def _sample_goal(task: TaskSpec, obj_xy: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    (gx0, gy0), (gx1, gy1) = task.goal_box
    lo, hi = task.goal_offset
    home = np.asarray(task.home, dtype=np.float64)
    for _ in range(10000):
        if task.family == "slide_close":
            x = obj_xy[0] + rng.uniform(lo, hi)
            g = np.array([x, obj_xy[1], 0.0])
            if gx0 <= x <= gx1:
                return g
            continue
        if task.family == "reach":
            g = np.array([rng.uniform(gx0, gx1), rng.uniform(gy0, gy1),
                          rng.uniform(*task.goal_z)])
            if lo <= np.linalg.norm(g - home) <= hi:
                return g
            continue
        g = np.array([rng.uniform(gx0, gx1), rng.uniform(gy0, gy1), 0.0])
        if lo <= np.linalg.norm(g[:2] - obj_xy) <= hi:
            return g
    raise SimError(f"could not sample a goal for {task.family} (boxes too tight)")


def reset(task: TaskSpec, seed) -> WorldState:
    """Deterministic initial state for ``(task, seed)``."""
    rng = np.random.default_rng(seed)
    (x0, y0), (x1, y1) = task.object_box
    radius = float(rng.uniform(*task.object_radius))
    obj_xy = np.array([rng.uniform(x0, x1), rng.uniform(y0, y1)])
    goal_center = _sample_goal(task, obj_xy, rng)
    obj = SphereObject(np.array([obj_xy[0], obj_xy[1], radius]), radius)
    return WorldState(
        effector=np.asarray(task.home, dtype=np.float64).copy(),
        aperture=1.0,
        objects=(obj,),
        goal=GoalRegion(goal_center, float(task.goal_radius)),
        task_id=task.task_id,
        step_count=0,
        horizon=int(task.max_steps),
        goal_visible=task.goal_visible,
    )


def perturb_objects(state: WorldState, magnitude: float, rng: np.random.Generator) -> WorldState:
    """Shift every resting object by a uniform offset in ``[-m, m]^2`` on the table."""
    objs = []
    for o in state.objects:
        d = rng.uniform(-magnitude, magnitude, size=2)
        c = o.center.copy()
        c[:2] = np.clip(c[:2] + d, WORKSPACE_LO[:2], WORKSPACE_HI[:2])
        objs.append(replace(o, center=c))
    return replace(state, objects=tuple(objs))


def teleport(state: WorldState, position) -> WorldState:
    p = np.minimum(np.maximum(np.asarray(position, dtype=np.float64), WORKSPACE_LO), WORKSPACE_HI)
    return replace(state, effector=p)


def _push(center: np.ndarray, radius: float, p: np.ndarray, motion: np.ndarray) -> np.ndarray:
    """Slide an overlapped object along the contact normal until it just touches ``p``.

    The normal points from the effector's position before the move to the
    object centre, so a fast effector cannot tunnel through an object and drag
    it backwards. The normal component of the push is transmitted in full and
    the tangential one in part (``PUSH_FRICTION``), so an off-centre push
    deflects the object sideways instead of carrying it along rigidly.
    """
    reach = EFFECTOR_RADIUS + radius
    dz = p[2] - center[2]
    if abs(dz) >= reach:
        return center
    rho = math.sqrt(reach * reach - dz * dz)
    d = center[:2] - p[:2]
    if math.hypot(d[0], d[1]) >= rho:
        return center
    back = center[:2] - (p[:2] - motion[:2])
    dist = math.hypot(back[0], back[1])
    if dist > 1e-12:
        n = back / dist
    else:
        m = math.hypot(motion[0], motion[1])
        n = motion[:2] / m if m > 1e-12 else np.array([1.0, 0.0])
    # smallest lam >= 0 with |d + lam n| = rho
    dn = float(d @ n)
    lam = -dn + math.sqrt(max(dn * dn - float(d @ d) + rho * rho, 0.0))
    tangent = motion[:2] - float(motion[:2] @ n) * n
    out = center.copy()
    out[:2] = center[:2] + lam * n + PUSH_FRICTION * tangent
    out[:2] = np.clip(out[:2], WORKSPACE_LO[:2], WORKSPACE_HI[:2])
    return out


def step(state: WorldState, action: RobotAction) -> WorldState:
    """Deterministic successor state. Actions are clamped, never rejected."""
    cmd = min(max(float(action.gripper), 0.0), 1.0)
    objects = list(state.objects)
    aperture = state.aperture
    p = state.effector

    if cmd < 0.5:
        if aperture >= 0.5:
            aperture = 0.0
            if not any(o.attached for o in objects):
                best, best_d = None, GRASP_RADIUS
                for i, o in enumerate(objects):
                    d = float(np.linalg.norm(o.center - p))
                    if d <= best_d:
                        best, best_d = i, d
                if best is not None:
                    o = objects[best]
                    objects[best] = replace(o, attached=True, grip_offset=o.center - p)
    elif aperture < 0.5:
        aperture = 1.0
        for i, o in enumerate(objects):
            if o.attached:
                c = o.center.copy()
                c[2] = o.radius
                objects[i] = SphereObject(c, o.radius)

    p_new = move_effector(p, action.dp)
    motion = p_new - p
    for i, o in enumerate(objects):
        if o.attached:
            c = p_new + o.grip_offset
            c = np.minimum(np.maximum(c, WORKSPACE_LO), WORKSPACE_HI)
            c[2] = max(c[2], o.radius)
            objects[i] = replace(o, center=c)
        elif aperture < 0.5:
            c = _push(o.center, o.radius, p_new, motion)
            if c is not o.center:
                objects[i] = replace(o, center=c)

    return replace(state, effector=p_new, aperture=aperture, objects=tuple(objects),
                   step_count=state.step_count + 1)


def obs_dim(n_objects: int = 1, n_tasks: int = NUM_TASKS) -> int:
    return 3 + 1 + 4 * n_objects + 3 + n_tasks + 1


def observe(state: WorldState) -> np.ndarray:
    """Flat observation: effector, aperture, objects (center, radius), goal,
    task one-hot, phase ``t / T``. The goal slots read zero when the goal
    marker is not visible to the robot."""
    parts = [state.effector, [state.aperture]]
    for o in state.objects:
        parts.append(o.center)
        parts.append([o.radius])
    parts.append(state.goal.center if state.goal_visible else np.zeros(3))
    onehot = np.zeros(NUM_TASKS)
    onehot[state.task_id] = 1.0
    parts.append(onehot)
    parts.append([state.step_count / state.horizon])
    return np.concatenate([np.asarray(x, dtype=np.float64) for x in parts])


def num_objects(dim: int, n_tasks: int = NUM_TASKS) -> int:
    """Object count implied by an observation dimension; inverse of :func:`obs_dim`."""
    n, rem = divmod(dim - (3 + 1 + 3 + n_tasks + 1), 4)
    if rem or n < 0:
        raise SimError(f"{dim} is not a valid observation dimension")
    return n


def object_offsets(obs) -> np.ndarray:
    """Object center minus effector for every object slot of ``obs`` (``(..., 3 n)``)."""
    obs = np.asarray(obs, dtype=np.float64)
    n = num_objects(obs.shape[-1])
    eff = obs[..., 0:3]
    return np.concatenate([obs[..., 4 + 4 * i:7 + 4 * i] - eff for i in range(n)], axis=-1)


def success(state: WorldState, task: TaskSpec) -> bool:
    goal = state.goal
    if task.family == "reach":
        return bool(np.linalg.norm(state.effector - goal.center) <= goal.radius)
    obj = state.objects[0]
    if task.family == "pick_lift":
        return bool(obj.center[2] > LIFT_HEIGHT)
    if obj.attached:
        return False
    if task.family == "slide_close":
        return bool(goal.center[0] <= obj.center[0] <= goal.center[0] + goal.radius
                    and abs(obj.center[1] - goal.center[1]) <= goal.radius)
    # push_to_goal, pick_place
    return bool(np.hypot(*(obj.center[:2] - goal.center[:2])) <= goal.radius)


def state_to_dict(state: WorldState) -> dict:
    return {
        "effector": state.effector.tolist(),
        "aperture": state.aperture,
        "objects": [{"center": o.center.tolist(), "radius": o.radius, "attached": o.attached}
                    for o in state.objects],
        "goal": {"center": state.goal.center.tolist(), "radius": state.goal.radius},
        "task_id": state.task_id,
        "step_count": state.step_count,
    }


def states_equal(a: WorldState, b: WorldState) -> bool:
    """Bit-exact comparison of two states."""
    if (a.aperture != b.aperture or a.step_count != b.step_count or a.task_id != b.task_id
            or len(a.objects) != len(b.objects) or not np.array_equal(a.effector, b.effector)):
        return False
    return all(oa.attached == ob.attached and oa.radius == ob.radius
               and np.array_equal(oa.center, ob.center)
               for oa, ob in zip(a.objects, b.objects))


def obs_hash(obs: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(obs, dtype="<f8").tobytes()).hexdigest()[:16]


def write_episode_log(path, states, actions) -> None:
    """One JSON record per step: pre-step state, action, observation hash."""
    with open(path, "w") as fh:
        for s, a in zip(states, actions):
            rec = {"state": state_to_dict(s), "action": list(map(float, a.dp)) + [float(a.gripper)],
                   "obs_hash": obs_hash(observe(s))}
            fh.write(json.dumps(rec) + "\n")


# -- planar two-link arm, used for the IK stand-in ---------------------------

def arm_fk(q, lengths) -> np.ndarray:
    q1, q2 = float(q[0]), float(q[1])
    l1, l2 = float(lengths[0]), float(lengths[1])
    return np.array([l1 * math.cos(q1) + l2 * math.cos(q1 + q2),
                     l1 * math.sin(q1) + l2 * math.sin(q1 + q2)])


def arm_jacobian(q, lengths) -> np.ndarray:
    q1, q2 = float(q[0]), float(q[1])
    l1, l2 = float(lengths[0]), float(lengths[1])
    s1, c1 = math.sin(q1), math.cos(q1)
    s12, c12 = math.sin(q1 + q2), math.cos(q1 + q2)
    return np.array([[-l1 * s1 - l2 * s12, -l2 * s12],
                     [l1 * c1 + l2 * c12, l2 * c12]])


def _dls(target, lengths, q, damping, max_iters, step_cap, tol):
    lam2 = damping * damping
    for _ in range(max_iters):
        err = target - arm_fk(q, lengths)
        if float(err @ err) < tol * tol:
            return q, True
        jac = arm_jacobian(q, lengths)
        dq = jac.T @ np.linalg.solve(jac @ jac.T + lam2 * np.eye(2), err)
        n = float(np.linalg.norm(dq))
        if n > step_cap:
            dq *= step_cap / n
        q = q + dq
    err = target - arm_fk(q, lengths)
    return q, float(err @ err) < tol * tol


def arm_ik(target, lengths, q_init=None, damping: float = 1e-3,
           max_iters: int = 200, step_cap: float = 0.2, tol: float = 1e-9) -> np.ndarray:
    """Damped least squares IK for the planar two-link arm.

    Starts from ``q_init`` (default: pointed at the target with a bent elbow).
    Should a run stall, typically folded up against the elbow singularity, it
    restarts from a few fixed elbow-up/elbow-down guesses; every run is capped
    at ``max_iters`` iterations. Returns the best configuration found.
    """
    target = np.asarray(target, dtype=np.float64)
    l1, l2 = float(lengths[0]), float(lengths[1])
    r = float(np.linalg.norm(target))
    if r > l1 + l2 + 1e-12 or r < abs(l1 - l2) - 1e-12:
        raise UnreachableError(f"target at distance {r:.4f} outside [{abs(l1 - l2)}, {l1 + l2}]")
    heading = math.atan2(target[1], target[0])
    starts = [] if q_init is None else [np.asarray(q_init, dtype=np.float64)]
    starts += [np.array([heading - 0.5 * b, b]) for b in (1.0, -1.0, 2.5, -2.5)]
    best, best_err = None, math.inf
    for q0 in starts:
        q, ok = _dls(target, lengths, q0.copy(), damping, max_iters, step_cap, tol)
        if ok:
            return q
        e = float(np.linalg.norm(target - arm_fk(q, lengths)))
        if e < best_err:
            best, best_err = q, e
    return best
