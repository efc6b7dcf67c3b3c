"""Demonstration-guided refinement of a diffusion policy on a toy tabletop benchmark.

Modules: ``diffmath`` (schedules and reverse steps), ``tinynet`` (MLP and
backprop), ``simenv`` (simulator), ``demonstrator`` (scripted experts and hand
demos), ``retarget`` (hand to effector), ``policy`` (diffusion policy),
``refine`` (noise-then-denoise refinement) and ``harness``/``cli`` (experiments).
"""

__version__ = "0.1.0"
