"""Frozen task distributions for training and evaluation.

The policy is trained on broad scenes without seeing the goal, so it learns
how to approach, grasp and move objects but has no way to know where a given
episode wants them. Evaluation scenes draw goals the policy cannot infer; only
the human demonstration carries that information.
"""

from __future__ import annotations

from .simenv import TaskSpec

TRAIN_TASKS: dict[str, TaskSpec] = {
    "reach": TaskSpec("reach", goal_box=((0.2, 0.3), (0.8, 0.9)), goal_offset=(0.15, 0.7),
                      max_steps=40, goal_visible=False),
    "push_to_goal": TaskSpec("push_to_goal", object_box=((0.3, 0.3), (0.7, 0.7)),
                             goal_box=((0.15, 0.15), (0.85, 0.85)), goal_offset=(0.15, 0.45),
                             max_steps=72, goal_visible=False),
    "pick_lift": TaskSpec("pick_lift", max_steps=40, goal_visible=False),
    "pick_place": TaskSpec("pick_place", goal_offset=(0.2, 0.6), goal_radius=0.06,
                           max_steps=72, goal_visible=False),
    "slide_close": TaskSpec("slide_close", object_box=((0.15, 0.2), (0.55, 0.8)),
                            goal_box=((0.3, 0.0), (0.9, 1.0)), goal_offset=(0.12, 0.35),
                            max_steps=60, goal_visible=False),
}

EVAL_TASKS: dict[str, TaskSpec] = {
    "reach": TaskSpec("reach", goal_box=((0.2, 0.3), (0.8, 0.9)), goal_offset=(0.15, 0.7),
                      max_steps=40, goal_visible=False),
    "push_to_goal": TaskSpec("push_to_goal", object_box=((0.35, 0.3), (0.5, 0.7)),
                             goal_box=((0.6, 0.2), (0.85, 0.8)), goal_offset=(0.15, 0.45),
                             max_steps=72, goal_visible=False),
    "pick_lift": TaskSpec("pick_lift", object_box=((0.3, 0.3), (0.7, 0.7)), max_steps=40,
                          goal_visible=False),
    "pick_place": TaskSpec("pick_place", object_box=((0.3, 0.3), (0.5, 0.7)),
                           goal_box=((0.6, 0.2), (0.9, 0.8)), goal_radius=0.06,
                           max_steps=72, goal_visible=False),
    "slide_close": TaskSpec("slide_close", object_box=((0.35, 0.3), (0.5, 0.7)),
                            goal_box=((0.6, 0.0), (0.8, 1.0)), goal_offset=(0.15, 0.35),
                            max_steps=60, goal_visible=False),
}

# The headline comparison: the goal is hidden from the policy and success
# hinges on a precise grasp, so neither the policy alone nor open-loop replay
# of the demo suffices.
HEADLINE_TASKS = ("pick_place",)

PERTURBATION = 0.02
