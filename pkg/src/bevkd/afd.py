"""Activation-based feature distillation on low-level BEV features.

Cells are split by where the student (radar) and teacher (LiDAR) maps are
active: AR = both active, IR = student active but teacher not. AR cells pull
the student toward the teacher with weight alpha; IR cells push it toward
zero with weight rho * beta, rho = N_AR / N_IR, so the total IR weight scales
with the AR area rather than the (much larger) IR area. Cells where the
student is inactive carry no loss at all.

Masks, partitions and weights are constants under differentiation: no
gradient flows through the activation thresholding or the region counts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ShapeError
from .tensor import Array, FeatureMap, GradPair

DEFAULT_ALPHA = 3e-4
DEFAULT_BETA = 5e-5


@dataclass
class ActiveMask:
    """Per-cell flag: channel sum strictly positive."""

    bits: np.ndarray

    def __post_init__(self) -> None:
        self.bits = np.ascontiguousarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ShapeError(f"mask must be 2-d, got {self.bits.shape}")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def active_ratio(self) -> float:
        return float(self.bits.mean())


@dataclass
class LowRegionPartition:
    ar: np.ndarray
    ir: np.ndarray
    n_ar: int
    n_ir: int
    rho: float


@dataclass
class AfdWeights:
    alpha: float
    beta: float
    weights: np.ndarray  # (H, W), >= 0


def active_mask(f: FeatureMap) -> ActiveMask:
    """Cells whose channel sum is positive; requires a rectified (nonnegative) map."""
    if (f.values < 0).any():
        raise DomainError(
            "active_mask requires a rectified map; negative channels would let the "
            "channel sum cancel and corrupt the activity test"
        )
    return ActiveMask(f.values.sum(axis=0) > 0.0)


def partition_low(radar_mask: ActiveMask, lidar_mask: ActiveMask) -> LowRegionPartition:
    if radar_mask.bits.shape != lidar_mask.bits.shape:
        raise ShapeError(
            f"mask shapes differ: {radar_mask.bits.shape} vs {lidar_mask.bits.shape}"
        )
    ar = radar_mask.bits & lidar_mask.bits
    ir = radar_mask.bits & ~lidar_mask.bits
    n_ar = int(ar.sum())
    n_ir = int(ir.sum())
    rho = n_ar / n_ir if n_ir > 0 else 0.0
    return LowRegionPartition(ar=ar, ir=ir, n_ar=n_ar, n_ir=n_ir, rho=rho)


def afd_weights(p: LowRegionPartition, alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA) -> AfdWeights:
    if alpha < 0 or beta < 0:
        raise DomainError(f"alpha/beta must be >= 0, got {alpha}, {beta}")
    weights = np.zeros(p.ar.shape)
    weights[p.ar] = alpha
    weights[p.ir] = p.rho * beta
    return AfdWeights(alpha=alpha, beta=beta, weights=weights)


def afd_loss(
    f_lidar: FeatureMap,
    f_radar: FeatureMap,
    w: AfdWeights,
    *,
    normalize: bool = False,
) -> GradPair:
    """Weighted squared error summed over channels and cells, with the gradient
    w.r.t. the student features. The teacher side never receives a gradient.

    ``normalize`` divides by the element count C*H*W (off by default: the loss
    definition sums, with balancing left entirely to the region weights).
    """
    if f_lidar.shape != f_radar.shape:
        raise ShapeError(f"feature shapes differ: {f_lidar.shape} vs {f_radar.shape}")
    if w.weights.shape != f_radar.shape[1:]:
        raise ShapeError(
            f"weight grid {w.weights.shape} does not match spatial dims {f_radar.shape[1:]}"
        )
    diff = f_lidar.values - f_radar.values
    scale = 1.0 / diff.size if normalize else 1.0
    value = float((w.weights * (diff * diff).sum(axis=0)).sum()) * scale
    grad = -2.0 * scale * w.weights[None, :, :] * diff
    return GradPair(value=value, grad=grad)


@dataclass(frozen=True)
class AfdTotal:
    """Mean of the per-level losses with one gradient per student feature level."""

    value: float
    grad_first: Array
    grad_second: Array
    partitions: tuple[LowRegionPartition, LowRegionPartition]


def afd_total(
    f_lidar: FeatureMap,
    f_radar_first: FeatureMap,
    f_radar_second: FeatureMap,
    alpha: float = DEFAULT_ALPHA,
    beta: float = DEFAULT_BETA,
    *,
    normalize: bool = False,
) -> AfdTotal:
    """Average the two per-level losses; each level derives its own mask,
    partition and weights from its own student features against the shared
    teacher mask."""
    lidar_mask = active_mask(f_lidar)
    losses = []
    grads = []
    partitions = []
    for f_radar in (f_radar_first, f_radar_second):
        p = partition_low(active_mask(f_radar), lidar_mask)
        w = afd_weights(p, alpha, beta)
        pair = afd_loss(f_lidar, f_radar, w, normalize=normalize)
        losses.append(pair.value)
        grads.append(pair.grad * 0.5)
        partitions.append(p)
    return AfdTotal(
        value=(losses[0] + losses[1]) / 2.0,
        grad_first=grads[0],
        grad_second=grads[1],
        partitions=(partitions[0], partitions[1]),
    )
