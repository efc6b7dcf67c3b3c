"""Demonstration-guided refinement and closed-loop execution.

Every control cycle retargets the next ``H`` demo steps into an action chunk,
noises it part of the way up the diffusion chain, lets the policy denoise it
under the current observation, and executes the first ``K`` actions. With
``r = 0`` this is open-loop replay of the retargeted demo; with ``r = 1`` it is
a plain rollout of the base policy.
"""

from __future__ import annotations

import logging
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import diffmath, retarget, simenv
from .demonstrator import HandDemo
from .policy import FlowPolicy, Policy, denoise, flow_refine_chunks, sample_chunks, standard_normal_rows
from .retarget import RetargetConfig, RetargetedTrajectory
from .simenv import RobotAction, TaskSpec, WorldState

log = logging.getLogger(__name__)

METHODS = ("retarget", "base_policy", "demodiffusion", "flow_variant")
PERTURB_STREAM = 1


class RefineError(ValueError):
    pass


@dataclass(frozen=True)
class RefineConfig:
    r: float = 0.2
    open_loop_horizon: int = 8
    horizon: int = 10
    budget: int = 20
    flow: bool = False

    def __post_init__(self):
        if not (0.0 <= self.r <= 1.0) or math.isnan(self.r):
            raise RefineError(f"noise level r must lie in [0, 1], got {self.r}")
        if not (1 <= self.open_loop_horizon <= self.horizon):
            raise RefineError("need 1 <= open_loop_horizon <= horizon")
        if self.budget < 1:
            raise RefineError("budget must be >= 1")

    @property
    def method(self) -> str:
        if self.r == 0.0:
            return "retarget"
        if self.r == 1.0 and not self.flow:
            return "base_policy"
        return "flow_variant" if self.flow else "demodiffusion"


@dataclass
class EpisodeResult:
    task_id: int
    method: str
    r: float
    seed: int
    success: bool
    length: int
    final_state: WorldState | None = None
    states: list | None = field(default=None, repr=False)
    actions: list | None = field(default=None, repr=False)
    error: str | None = None


def start_step(r: float, num_steps: int) -> int:
    """``s* = round(r S)`` clamped to ``[1, S - 1]`` (interior noise levels only)."""
    return min(max(diffmath.round_half_up(r * num_steps), 1), num_steps - 1)


def cycle_seed(episode_seed: int, t: int) -> list[int]:
    """Noise stream for the control cycle starting at demo step ``t``."""
    return [int(episode_seed), int(t)]


def refine_chunks(policy: Policy, chunks, obs_histories, r: float, seeds, budget: int | None = None):
    """Batched :func:`refine_chunk`."""
    chunks = np.asarray(chunks, dtype=np.float64)
    if not (0.0 <= r <= 1.0):
        raise RefineError(f"noise level r must lie in [0, 1], got {r}")
    if r == 0.0 and policy is None:
        return chunks
    cfg = policy.config
    if chunks.ndim != 3 or chunks.shape[1:] != (cfg.horizon, cfg.action_dim):
        raise RefineError(f"chunk shape {chunks.shape[1:]} != ({cfg.horizon}, {cfg.action_dim})")
    if r == 0.0:
        return chunks
    S = cfg.num_train_steps
    if r == 1.0:
        out = sample_chunks(policy, obs_histories, seeds, budget=budget)
    else:
        s_star = start_step(r, S)
        noise = standard_normal_rows(seeds, cfg.chunk_size)
        x0 = policy.normalize_actions(chunks).reshape(len(chunks), -1)
        x = diffmath.q_sample(x0, s_star, policy.schedule, noise)
        x = denoise(policy, x, policy.cond(obs_histories), s_star, budget)
        out = policy.denormalize_actions(x.reshape(chunks.shape))
    return out


def refine_chunk(policy: Policy, chunk, obs_history, r: float, seed, budget: int | None = None):
    """Noise the retargeted ``chunk`` to ``s* = round(r S)`` and denoise it.

    ``r = 0`` returns ``chunk`` itself; ``r = 1`` ignores it and samples the
    base policy from pure noise.
    """
    return refine_chunks(policy, np.asarray(chunk)[None], np.asarray(obs_history)[None],
                         r, [seed], budget)[0]


def choose_noise_level(base_policy_success_rate: float) -> float:
    """Prefer the demonstration (0.2) when the policy alone never succeeds."""
    rate = float(base_policy_success_rate)
    if not (0.0 <= rate <= 1.0):
        raise RefineError(f"success rate must lie in [0, 1], got {rate}")
    return 0.2 if rate == 0.0 else 0.4


# -- episodes ---------------------------------------------------------------------

def episode_scene(task: TaskSpec, seed: int, perturbation: float) -> WorldState:
    """Initial state for an evaluation episode, with objects nudged after the demo was taken."""
    state = simenv.reset(task, seed)
    if perturbation > 0:
        state = simenv.perturb_objects(state, perturbation,
                                       np.random.default_rng([int(seed), PERTURB_STREAM]))
    return state


class _History:
    def __init__(self, n: int, obs: np.ndarray):
        self.buf = deque([obs] * n, maxlen=n)

    def push(self, obs):
        self.buf.append(obs)

    def array(self) -> np.ndarray:
        return np.stack(self.buf)


def _act(state, row) -> tuple[WorldState, RobotAction]:
    a = RobotAction(np.array(row[:3]), float(row[3]))
    return simenv.step(state, a), a


def run_episodes(task: TaskSpec, policy, trajs: list[RetargetedTrajectory], scenes: list[WorldState],
                 seeds: list[int], cfg: RefineConfig, keep_states: bool = False) -> list[EpisodeResult]:
    """Run several episodes in lockstep so every denoiser call is batched.

    ``trajs[i]`` is the retargeted demo for ``scenes[i]``; each episode lasts as
    many steps as its demo and draws cycle noise from ``seeds[i]``.
    """
    if not (len(trajs) == len(scenes) == len(seeds)):
        raise RefineError("trajs, scenes and seeds must have equal length")
    # open-loop replay never touches the network, so it may run without a policy
    n_obs = policy.config.n_obs if policy is not None else 2
    H, K = cfg.horizon, cfg.open_loop_horizon
    states = [simenv.teleport(s, tr.positions[0]) for s, tr in zip(scenes, trajs)]
    hists = [_History(n_obs, simenv.observe(s)) for s in states]
    logs = [[s] for s in states] if keep_states else None
    acts = [[] for _ in states] if keep_states else None
    lengths = [len(tr) - 1 for tr in trajs]
    errors: list[str | None] = [None] * len(states)
    t = 0
    while True:
        live = [i for i in range(len(states)) if t < lengths[i] and errors[i] is None]
        if not live:
            break
        hat = np.stack([retarget.tracking_chunk(trajs[i], t, states[i].effector, H) for i in live])
        obs = np.stack([hists[i].array() for i in live])
        try:
            if cfg.flow:
                chunks = flow_refine_chunks(policy, obs, hat, cfg.r,
                                            [cycle_seed(seeds[i], t) for i in live], cfg.budget)
            else:
                chunks = refine_chunks(policy, hat, obs, cfg.r,
                                       [cycle_seed(seeds[i], t) for i in live], cfg.budget)
            if not np.all(np.isfinite(chunks)):
                raise FloatingPointError("non-finite action chunk")
        except (ValueError, FloatingPointError) as exc:
            log.warning("refinement failed at t=%d: %s", t, exc)
            for i in live:
                errors[i] = f"{type(exc).__name__}: {exc}"
            break
        for j, i in enumerate(live):
            for k in range(min(K, lengths[i] - t)):
                states[i], a = _act(states[i], chunks[j, k])
                hists[i].push(simenv.observe(states[i]))
                if keep_states:
                    logs[i].append(states[i])
                    acts[i].append(a)
        t += K
    return [EpisodeResult(task.task_id, cfg.method, cfg.r, int(seeds[i]),
                          errors[i] is None and simenv.success(states[i], task),
                          states[i].step_count, states[i],
                          logs[i] if keep_states else None, acts[i] if keep_states else None,
                          errors[i])
            for i in range(len(states))]


def run_episode(task: TaskSpec, policy, demo: HandDemo, cfg: RefineConfig, seed: int,
                retarget_cfg: RetargetConfig = RetargetConfig(), perturbation: float = 0.0,
                keep_states: bool = False) -> EpisodeResult:
    """Retarget ``demo`` and execute it with refinement in the perturbed scene."""
    traj = retarget.retarget_trajectory(demo, retarget_cfg)
    scene = episode_scene(task, seed, perturbation)
    return run_episodes(task, policy, [traj], [scene], [seed], cfg, keep_states)[0]


def rollout_base_policy(task: TaskSpec, policy: Policy, scene: WorldState, start, num_steps: int,
                        seed: int, open_loop_horizon: int = 8, budget: int | None = None):
    """Plain policy rollout: sample a chunk from noise, execute ``K`` actions, repeat.

    Starts from the effector pose ``start`` so it is comparable with demo-guided
    runs. Returns ``(final_state, success)``.
    """
    state = simenv.teleport(scene, start)
    hist = _History(policy.config.n_obs, simenv.observe(state))
    t = 0
    while t < num_steps:
        chunk = sample_chunks(policy, hist.array()[None], [cycle_seed(seed, t)], budget=budget)[0]
        for k in range(min(open_loop_horizon, num_steps - t)):
            state, _ = _act(state, chunk[k])
            hist.push(simenv.observe(state))
        t += open_loop_horizon
    return state, simenv.success(state, task)
