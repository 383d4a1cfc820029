"""Alignment plans and routing masks for padding a length-l volume to t slices.

Two placements are supported. ``plan_identity`` keeps the originals at the
front and holds the last slice through the tail. ``plan_aligned`` spreads the
originals over equidistant positions of ``[0, t-1]`` and fills every gap with
a copy of the nearest preceding original. In both cases the mask is 1 exactly
where an original sits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import PlanError, ShapeError

ROUTING_MODES = ("aligned", "first-l", "none")


@dataclass(frozen=True)
class AlignmentPlan:
    t: int
    l: int
    positions: tuple[int, ...]
    sources: tuple[int, ...]
    mask: tuple[int, ...]

    def mask_array(self) -> np.ndarray:
        return np.asarray(self.mask, dtype=np.float64)


def _check(l: int, t: int) -> None:
    if not 1 <= l <= t:
        raise PlanError(f"need 1 <= l <= t, got l={l}, t={t}")


def _plan_from_positions(l: int, t: int, positions: list[int]) -> AlignmentPlan:
    mask = np.zeros(t, dtype=int)
    mask[positions] = 1
    # each padded slot copies the latest original at or before it
    sources = np.cumsum(mask) - 1
    return AlignmentPlan(t, l, tuple(positions), tuple(int(s) for s in sources), tuple(int(m) for m in mask))


def plan_identity(l: int, t: int) -> AlignmentPlan:
    _check(l, t)
    return _plan_from_positions(l, t, list(range(l)))


def aligned_positions(l: int, t: int) -> list[int]:
    """``round(i * (t-1) / (l-1))`` with round-half-up, in exact integer arithmetic."""
    if l == 1:
        return [0]
    num, den = t - 1, l - 1
    return [(2 * i * num + den) // (2 * den) for i in range(l)]


def plan_aligned(l: int, t: int) -> AlignmentPlan:
    _check(l, t)
    return _plan_from_positions(l, t, aligned_positions(l, t))


def make_plan(mode: str, l: int, t: int) -> AlignmentPlan:
    """Plan for a routing mode; ``none`` uses the identity placement."""
    if mode == "aligned":
        return plan_aligned(l, t)
    if mode in ("first-l", "none"):
        return plan_identity(l, t)
    raise PlanError(f"unknown routing mode {mode!r}; expected one of {ROUTING_MODES}")


def apply_plan(slices: np.ndarray, plan: AlignmentPlan) -> np.ndarray:
    """Expand an ``(l, ...)`` stack to ``(t, ...)`` by duplicating originals per ``plan.sources``."""
    slices = getattr(slices, "slices", slices)
    if len(slices) != plan.l:
        raise PlanError(f"volume has {len(slices)} slices, plan expects {plan.l}")
    return np.asarray(slices)[list(plan.sources)]


def mask_features(F: np.ndarray, plan: AlignmentPlan) -> np.ndarray:
    F = np.asarray(F)
    if F.ndim < 1 or F.shape[0] != plan.t:
        raise ShapeError(f"feature matrix needs {plan.t} rows, got shape {F.shape}")
    keep = np.asarray(plan.mask, dtype=bool).reshape((plan.t,) + (1,) * (F.ndim - 1))
    return np.where(keep, F, 0.0)
