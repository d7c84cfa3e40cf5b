"""Adaptive subdivision control driven by screen-space gradient statistics.

Gradient norms from the finest-level renders accumulate on the finest
leaves between growth events; every ``step_k`` optimizer iterations, leaves
whose per-view mean signal exceeds ``epsilon`` are split (depth permitting)
and all accumulators reset.  A separate coarse-to-fine cap keeps early
training shallow and is relaxed every ``cap_schedule`` iterations until
``max_level`` is reached.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import SplatError
from .forest import Forest


class GrowthError(SplatError):
    pass


@dataclass
class GrowthConfig:
    step_k: int = 50
    epsilon: float = 2e-4
    max_level: int = 4
    cap_schedule: int = 500
    initial_cap: int = 1
    # True thresholds the per-view mean of the accumulated signal; False
    # thresholds the raw sum (deviation knob, kept for experiments).
    normalize_by_views: bool = True

    def __post_init__(self):
        if self.step_k < 1:
            raise GrowthError("step_k must be >= 1")
        if self.epsilon < 0:
            raise GrowthError("epsilon must be >= 0")
        if self.initial_cap < 1:
            raise GrowthError("initial_cap must be >= 1")
        if self.max_level < self.initial_cap:
            raise GrowthError("max_level must be >= initial_cap")
        if self.cap_schedule < 1:
            raise GrowthError("cap_schedule must be >= 1")


def accumulate(forest: Forest, render_outputs) -> None:
    """Fold one iteration's finest-level render gradients into the forest.

    For every finest-level leaf, ``grad_accum`` grows by the 2D-mean
    gradient norm of its Gaussian summed over the given views and
    ``grad_samples`` by the number of views where it was actually projected
    (culled views contribute neither).
    """
    finest = forest.leaves_at_finest()
    grad_maps = [out.per_gaussian_grad2d() for out in render_outputs]
    for nid in finest:
        node = forest.node(nid)
        for grads in grad_maps:
            if nid in grads:
                node.grad_accum += grads[nid]
                node.grad_samples += 1


def growth_step(forest: Forest, config: GrowthConfig) -> list[int]:
    """Subdivide qualifying finest-level leaves and reset all accumulators.

    A leaf qualifies when it has been seen at least once, its signal
    (per-view mean by default) strictly exceeds ``epsilon``, and its level
    is below the current depth cap.  Returns the subdivided ids ascending.
    """
    cap = min(forest.current_depth_cap, config.max_level)
    selected = []
    for nid in forest.leaves_at_finest():
        node = forest.node(nid)
        if node.grad_samples == 0 or node.level >= cap:
            continue
        signal = node.grad_accum
        if config.normalize_by_views:
            signal /= node.grad_samples
        if signal > config.epsilon:
            selected.append(nid)
    selected.sort()
    for nid in selected:
        forest.subdivide(nid)
    for node in forest.nodes:
        node.grad_accum = 0.0
        node.grad_samples = 0
    return selected


def advance_cap(forest: Forest, config: GrowthConfig, iteration: int) -> int:
    """Depth cap at a given iteration: ``initial_cap`` plus one per
    ``cap_schedule`` iterations, saturating at ``max_level``."""
    cap = min(config.max_level, config.initial_cap + iteration // config.cap_schedule)
    forest.current_depth_cap = cap
    return cap
