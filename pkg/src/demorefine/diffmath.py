"""Noise schedules, forward noising and reverse steps.

Step indices run over ``0..S``: ``s = 0`` is clean data, ``s = S`` is pure
noise. Tables are stored with a leading entry for ``s = 0`` so that
``alpha_bars[0] == 1`` and ``betas[s]`` is the rate of step ``s``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    num_steps: int
    betas: np.ndarray  # (S + 1,), betas[0] = 0
    alphas: np.ndarray  # (S + 1,), alphas[0] = 1
    alpha_bars: np.ndarray  # (S + 1,), alpha_bars[0] = 1
    beta_start: float = float("nan")
    beta_end: float = float("nan")

    def alpha_bar(self, s: int) -> float:
        check_step(s, self.num_steps)
        return float(self.alpha_bars[s])


def check_step(s: int, num_steps: int) -> None:
    if not (0 <= s <= num_steps):
        raise ScheduleError(f"step index {s} outside [0, {num_steps}]")


def make_linear_schedule(num_steps: int = 1000, beta_start: float = 1e-4,
                         beta_end: float = 0.02) -> NoiseSchedule:
    """Linear beta schedule with endpoints included, in float64."""
    if num_steps < 1 or not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need S >= 1 and 0 < beta_start <= beta_end < 1, got "
            f"S={num_steps}, beta_start={beta_start}, beta_end={beta_end}")
    betas = np.zeros(num_steps + 1)
    betas[1:] = np.linspace(beta_start, beta_end, num_steps, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(num_steps, betas, alphas, alpha_bars,
                         float(beta_start), float(beta_end))


def q_sample(x0, s: int, schedule: NoiseSchedule, noise):
    """Forward marginal: sqrt(ab) * x0 + sqrt(1 - ab) * noise."""
    x0 = np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if x0.shape != noise.shape:
        raise ScheduleError(f"shape mismatch: x0 {x0.shape} vs noise {noise.shape}")
    check_step(s, schedule.num_steps)
    if s == 0:
        return x0.copy()
    ab = schedule.alpha_bars[s]
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * noise


def ddpm_reverse_step(eps_pred, x_s, s: int, schedule: NoiseSchedule, noise):
    """Ancestral step s -> s-1 with the posterior variance (sigma_1 = 0)."""
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    x_s = np.asarray(x_s, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if not (eps_pred.shape == x_s.shape == noise.shape):
        raise ScheduleError("eps_pred, x_s and noise must share a shape")
    if s < 1 or s > schedule.num_steps:
        raise ScheduleError(f"reverse step needs 1 <= s <= S, got {s}")
    beta = schedule.betas[s]
    ab = schedule.alpha_bars[s]
    mean = (x_s - (beta / math.sqrt(1.0 - ab)) * eps_pred) / math.sqrt(schedule.alphas[s])
    if s == 1:
        return mean
    sigma = math.sqrt(beta * (1.0 - schedule.alpha_bars[s - 1]) / (1.0 - ab))
    return mean + sigma * noise


def ddim_reverse_step(eps_pred, x_s, s_from: int, s_to: int, schedule: NoiseSchedule,
                      clip: float | None = None):
    """Deterministic (eta = 0) jump from ``s_from`` down to ``s_to``.

    With ``clip`` set, the clean-sample estimate is clamped to ``[-clip, clip]``
    and the noise estimate is re-derived from it, which keeps early steps
    (where ``1 / sqrt(ab)`` is huge) from flinging samples far off the data.
    """
    if not (0 <= s_to < s_from <= schedule.num_steps):
        raise ScheduleError(f"need 0 <= s_to < s_from <= S, got {s_from} -> {s_to}")
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    x_s = np.asarray(x_s, dtype=np.float64)
    if eps_pred.shape != x_s.shape:
        raise ScheduleError("eps_pred and x_s must share a shape")
    ab_from = schedule.alpha_bars[s_from]
    x0_hat = (x_s - math.sqrt(1.0 - ab_from) * eps_pred) / math.sqrt(ab_from)
    if clip is not None:
        x0_hat = np.clip(x0_hat, -clip, clip)
        eps_pred = (x_s - math.sqrt(ab_from) * x0_hat) / math.sqrt(1.0 - ab_from)
    if s_to == 0:
        return x0_hat
    ab_to = schedule.alpha_bars[s_to]
    return math.sqrt(ab_to) * x0_hat + math.sqrt(1.0 - ab_to) * eps_pred


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def num_plan_steps(num_steps: int, num_inference_steps: int, start: int) -> int:
    return max(1, round_half_up(num_inference_steps * start / num_steps))


def make_stride_plan(num_steps: int, num_inference_steps: int, start: int) -> list[int]:
    """Evenly spaced, strictly decreasing step indices from ``start`` toward 0.

    The plan has ``round(num_inference_steps * start / S)`` entries (at least
    one); the final jump of a sampler goes from ``plan[-1]`` to 0.
    """
    if num_steps < 1 or not (1 <= num_inference_steps <= num_steps):
        raise ScheduleError(
            f"need 1 <= num_inference_steps <= S, got {num_inference_steps} / {num_steps}")
    if not (0 < start <= num_steps):
        raise ScheduleError(f"start step {start} outside (0, {num_steps}]")
    n = num_plan_steps(num_steps, num_inference_steps, start)
    plan = [round_half_up(start * (n - i) / n) for i in range(n)]
    return plan


def plan_pairs(plan: list[int]) -> list[tuple[int, int]]:
    """(s_from, s_to) jumps for a stride plan, ending at 0."""
    return list(zip(plan, plan[1:] + [0]))
