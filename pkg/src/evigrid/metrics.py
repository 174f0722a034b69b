"""Enrichment evaluation metrics and multi-task loss utilities.

All functions here are pure; the loss helpers exist so external trainers can
evaluate the task-uncertainty-weighted objective and its exact gradients
without pulling in any neural machinery.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .fusion import FusedBeliefs


@dataclass(frozen=True)
class LossWeights:
    """Task-uncertainty scalars: map regression, evidences, localization, classification."""

    sigma1: float = 1.0
    sigma2: float = 1.0
    sigma3: float = 1.0
    sigma4: float = 1.0

    def __post_init__(self) -> None:
        for name in ("sigma1", "sigma2", "sigma3", "sigma4"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class EvalReport:
    """Per-layer L1/L2 means plus belief contradiction metrics."""

    layer_l1: dict[str, float] = field(default_factory=dict)
    layer_l2: dict[str, float] = field(default_factory=dict)
    false_occupied: Optional[float] = None
    false_free: Optional[float] = None
    cells_used: int = 0

    def rows(self) -> list[tuple[str, str, float]]:
        out = []
        for name in self.layer_l1:
            out.append((name, "l1", self.layer_l1[name]))
            out.append((name, "l2", self.layer_l2[name]))
        if self.false_occupied is not None:
            out.append(("beliefs", "false_occupied", self.false_occupied))
        if self.false_free is not None:
            out.append(("beliefs", "false_free", self.false_free))
        return out

    def to_csv_text(self) -> str:
        lines = ["layer,metric,value,cells"]
        for layer, metric, value in self.rows():
            lines.append(f"{layer},{metric},{value:.9g},{self.cells_used}")
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        width = max((len(layer) for layer, _, _ in self.rows()), default=5)
        lines = [f"cells evaluated: {self.cells_used}"]
        for layer, metric, value in self.rows():
            lines.append(f"  {layer:<{width}}  {metric:<14}  {value:.6g}")
        return "\n".join(lines)


def _masked(values: np.ndarray, mask: Optional[np.ndarray]) -> np.ndarray:
    if mask is None:
        return values.ravel()
    mask = np.asarray(mask)
    if mask.shape != values.shape:
        raise ValueError(f"mask shape {mask.shape} != layer shape {values.shape}")
    selected = values[mask > 0]
    if selected.size == 0:
        raise ValueError("mask selects no cells")
    return selected


def layer_error(target: np.ndarray, estimate: np.ndarray,
                mask: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Mean absolute and mean squared difference over (masked) cells."""
    target = np.asarray(target, dtype=np.float64)
    estimate = np.asarray(estimate, dtype=np.float64)
    if target.shape != estimate.shape:
        raise ValueError(f"layer shapes differ: {target.shape} vs {estimate.shape}")
    delta = _masked(estimate - target, mask)
    return float(np.mean(np.abs(delta))), float(np.mean(delta * delta))


def false_belief_metrics(est: FusedBeliefs, tgt: FusedBeliefs,
                         mask: Optional[np.ndarray] = None) -> tuple[float, float]:
    """Mean false-occupied and false-free contradiction between estimate and target.

    Per cell: false_occupied = max(0, est_occupied + tgt_free - 1) and
    false_free = max(0, tgt_occupied + est_free - 1). Both vanish when the
    estimate equals any valid target triple.
    """
    if est.bel_occupied.shape != tgt.bel_occupied.shape:
        raise ValueError(f"belief shapes differ: {est.bel_occupied.shape} "
                         f"vs {tgt.bel_occupied.shape}")
    false_occ = np.maximum(0.0, est.bel_occupied + tgt.bel_free - 1.0)
    false_free = np.maximum(0.0, tgt.bel_occupied + est.bel_free - 1.0)
    return float(np.mean(_masked(false_occ, mask))), float(np.mean(_masked(false_free, mask)))


def loss_mask(bel_unknown: np.ndarray, k: float = 0.9) -> np.ndarray:
    """Per-cell loss weight 1 - k * bel_unknown, suppressing uncertain target cells."""
    if not 0.0 <= k <= 1.0:
        raise ValueError(f"k must lie in [0, 1], got {k}")
    bel = np.asarray(bel_unknown, dtype=np.float64)
    if bel.size and (bel.min() < -1e-9 or bel.max() > 1 + 1e-9):
        raise ValueError("bel_unknown values must lie in [0, 1]")
    return 1.0 - k * bel


@dataclass(frozen=True)
class CombinedLoss:
    """Total and enrichment loss values with exact partials w.r.t. each sigma."""

    total: float
    enrichment: float
    d_sigma1: float
    d_sigma2: float
    d_sigma3: float
    d_sigma4: float

    def gradient(self) -> tuple[float, float, float, float]:
        return (self.d_sigma1, self.d_sigma2, self.d_sigma3, self.d_sigma4)


def combined_loss(l_gm: float, l_ev: float, l_loc: float, l_cls: float,
                  w: LossWeights = LossWeights()) -> CombinedLoss:
    """Task-uncertainty-weighted multi-task loss.

    enrichment = l_gm / (2 s1^2) + l_ev / s2^2 + log s1 + log s2
    total = enrichment + l_loc / (2 s3^2) + l_cls / s4^2 + log s3 + log s4

    The detector terms l_loc and l_cls are opaque non-negative scalars.
    """
    for name, v in (("l_gm", l_gm), ("l_ev", l_ev), ("l_loc", l_loc), ("l_cls", l_cls)):
        if v < 0:
            raise ValueError(f"{name} must be non-negative, got {v}")
    s1, s2, s3, s4 = w.sigma1, w.sigma2, w.sigma3, w.sigma4
    enrichment = l_gm / (2 * s1 * s1) + l_ev / (s2 * s2) + math.log(s1) + math.log(s2)
    total = enrichment + l_loc / (2 * s3 * s3) + l_cls / (s4 * s4) + math.log(s3) + math.log(s4)
    return CombinedLoss(
        total=total,
        enrichment=enrichment,
        d_sigma1=-l_gm / s1 ** 3 + 1.0 / s1,
        d_sigma2=-2.0 * l_ev / s2 ** 3 + 1.0 / s2,
        d_sigma3=-l_loc / s3 ** 3 + 1.0 / s3,
        d_sigma4=-2.0 * l_cls / s4 ** 3 + 1.0 / s4,
    )
