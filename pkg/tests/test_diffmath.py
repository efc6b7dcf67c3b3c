import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from demorefine import diffmath
from demorefine.diffmath import ScheduleError

S = 1000
SCHED = diffmath.make_linear_schedule()

# Cumulative products computed with exact rational arithmetic, then rounded.
ALPHA_BAR_ORACLE = {
    1: 0.9999,
    100: 0.8970181456749604,
    200: 0.6590385082317941,
    250: 0.5240853738253605,
    400: 0.1951464449334324,
    500: 0.07858724288177824,
    600: 0.0258793894233349,
    750: 0.00335055043893678,
    1000: 4.0358297653756835e-05,
}


def test_linear_schedule_endpoints():
    assert SCHED.betas[1] == pytest.approx(1e-4, abs=1e-15)
    assert SCHED.betas[S] == pytest.approx(0.02, abs=1e-15)
    assert SCHED.alpha_bars[0] == 1.0
    assert len(SCHED.betas) == S + 1


@pytest.mark.parametrize("s,expected", sorted(ALPHA_BAR_ORACLE.items()))
def test_alpha_bar_matches_exact_product(s, expected):
    assert SCHED.alpha_bar(s) == pytest.approx(expected, rel=1e-12)


def test_alpha_bars_strictly_decreasing():
    assert np.all(np.diff(SCHED.alpha_bars) < 0)
    assert np.all((SCHED.alpha_bars > 0) & (SCHED.alpha_bars <= 1))


@pytest.mark.parametrize("kwargs", [dict(num_steps=0), dict(beta_start=0.0),
                                    dict(beta_start=0.03, beta_end=0.02), dict(beta_end=1.0)])
def test_bad_schedule_rejected(kwargs):
    with pytest.raises(ScheduleError):
        diffmath.make_linear_schedule(**kwargs)


def test_step_index_checked():
    with pytest.raises(ScheduleError):
        SCHED.alpha_bar(S + 1)
    with pytest.raises(ScheduleError):
        diffmath.q_sample(np.zeros(3), -1, SCHED, np.zeros(3))


def test_q_sample_at_zero_is_identity():
    x0 = np.array([0.3, -1.2, 5.0])
    out = diffmath.q_sample(x0, 0, SCHED, np.ones(3))
    assert np.array_equal(out, x0)
    assert out is not x0


def test_q_sample_shape_mismatch():
    with pytest.raises(ScheduleError):
        diffmath.q_sample(np.zeros(3), 10, SCHED, np.zeros(4))


@pytest.mark.parametrize("s", [100, 400, 900])
def test_q_sample_moments(s):
    rng = np.random.default_rng(s)
    x0 = np.array([1.5, -0.7, 0.0, 2.0])
    n = 10_000
    noise = rng.standard_normal((n, x0.size))
    xs = diffmath.q_sample(np.broadcast_to(x0, noise.shape), s, SCHED, noise)
    ab = SCHED.alpha_bar(s)
    tol = 4 * math.sqrt((1 - ab) / n)
    assert np.all(np.abs(xs.mean(axis=0) - math.sqrt(ab) * x0) < tol)
    assert np.all(np.abs(xs.var(axis=0) / (1 - ab) - 1) < 0.05)


def test_ddpm_step_with_true_noise_at_step_one_recovers_x0():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(5)
    eps = rng.standard_normal(5)
    x1 = diffmath.q_sample(x0, 1, SCHED, eps)
    out = diffmath.ddpm_reverse_step(eps, x1, 1, SCHED, rng.standard_normal(5))
    assert np.allclose(out, x0, atol=1e-12)


def test_ddpm_posterior_variance():
    # sigma_s^2 = beta_s (1 - ab_{s-1}) / (1 - ab_s), checked through the noise coefficient
    s = 300
    x = np.zeros(2)
    a = diffmath.ddpm_reverse_step(np.zeros(2), x, s, SCHED, np.ones(2))
    b = diffmath.ddpm_reverse_step(np.zeros(2), x, s, SCHED, np.zeros(2))
    beta, ab, ab_prev = SCHED.betas[s], SCHED.alpha_bars[s], SCHED.alpha_bars[s - 1]
    assert (a - b)[0] == pytest.approx(math.sqrt(beta * (1 - ab_prev) / (1 - ab)), rel=1e-12)


def test_ddim_step_argument_checks():
    with pytest.raises(ScheduleError):
        diffmath.ddim_reverse_step(np.zeros(2), np.zeros(2), 10, 10, SCHED)
    with pytest.raises(ScheduleError):
        diffmath.ddim_reverse_step(np.zeros(2), np.zeros(3), 10, 0, SCHED)


@pytest.mark.parametrize("start", [S // 4, S // 2, S])
def test_perfect_denoiser_round_trip(start):
    rng = np.random.default_rng(start)
    x0 = rng.standard_normal(40)
    eps = rng.standard_normal(40)
    x = diffmath.q_sample(x0, start, SCHED, eps)
    for s_from, s_to in diffmath.plan_pairs(diffmath.make_stride_plan(S, 20, start)):
        x = diffmath.ddim_reverse_step(eps, x, s_from, s_to, SCHED)
    assert np.max(np.abs(x - x0)) < 1e-10


def test_clip_leaves_in_range_estimates_alone():
    rng = np.random.default_rng(1)
    x0 = rng.uniform(-1, 1, 8)
    eps = rng.standard_normal(8)
    x = diffmath.q_sample(x0, 700, SCHED, eps)
    a = diffmath.ddim_reverse_step(eps, x, 700, 0, SCHED, clip=3.0)
    assert np.allclose(a, x0, atol=1e-10)
    b = diffmath.ddim_reverse_step(eps + 5.0, x, 700, 0, SCHED, clip=3.0)
    assert np.max(np.abs(b)) <= 3.0


@pytest.mark.parametrize("start,expected", [
    (1000, [1000, 950, 900, 850, 800, 750, 700, 650, 600, 550,
            500, 450, 400, 350, 300, 250, 200, 150, 100, 50]),
    (200, [200, 150, 100, 50]),
    (400, [400, 350, 300, 250, 200, 150, 100, 50]),
    (10, [10]),
    (1, [1]),
])
def test_stride_plan_values(start, expected):
    assert diffmath.make_stride_plan(S, 20, start) == expected


def test_plan_pairs_end_at_zero():
    assert diffmath.plan_pairs([200, 150, 100, 50]) == [(200, 150), (150, 100), (100, 50), (50, 0)]


def test_stride_plan_rejects_bad_arguments():
    with pytest.raises(ScheduleError):
        diffmath.make_stride_plan(S, 0, 100)
    with pytest.raises(ScheduleError):
        diffmath.make_stride_plan(S, 20, 0)


@settings(max_examples=200, deadline=None)
@given(n_inf=st.integers(1, 100), start=st.integers(1, S))
def test_stride_plan_properties(n_inf, start):
    plan = diffmath.make_stride_plan(S, n_inf, start)
    assert plan[0] == start
    assert len(plan) == max(1, diffmath.round_half_up(n_inf * start / S))
    assert all(a > b for a, b in zip(plan, plan[1:]))
    assert plan[-1] >= 1


@settings(max_examples=100, deadline=None)
@given(s=st.integers(1, S), seed=st.integers(0, 2**32 - 1))
def test_one_ddim_jump_to_zero_inverts_q_sample(s, seed):
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal((2, 6))
    x = diffmath.q_sample(x0, s, SCHED, eps)
    out = diffmath.ddim_reverse_step(eps, x, s, 0, SCHED)
    assert np.allclose(out, x0, atol=1e-8 * (1 + 1 / math.sqrt(SCHED.alpha_bar(s))))
