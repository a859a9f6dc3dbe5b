"""Deterministic mode.

Set ``SEGATTACK_DETERMINISTIC=1`` (any of 1/true/yes/on) to force
single-threaded reductions and torch's deterministic kernels. Together with the
explicit seeds carried by every config this makes reruns bit-identical.
"""

from __future__ import annotations

import os

import torch

ENV_VAR = "SEGATTACK_DETERMINISTIC"


def deterministic_requested() -> bool:
    return os.environ.get(ENV_VAR, "").strip().lower() in ("1", "true", "yes", "on")


def enable_deterministic() -> None:
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


def apply_env() -> bool:
    """Enable deterministic mode if the environment asks for it; returns the mode."""
    on = deterministic_requested()
    if on:
        enable_deterministic()
    return on
