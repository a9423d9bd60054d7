"""Proposal-based feature distillation on high-level BEV features.

Heatmap cells are labeled by thresholding the ground-truth and predicted
class heatmaps at sigma: TP (both above), FP (prediction above, truth below),
FN (truth above, prediction below). TP and FN cells share one weight budget
lambda1, FP cells share lambda2, each spread uniformly over its region. The
features themselves are compared after a per-cell channel softmax, which
cancels the magnitude-scale gap between the two branches, under an L1
penalty.

Regions and weights are recomputed from the current prediction each step and
treated as constants under differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, NumericError, ShapeError
from .heatmap import Heatmap
from .tensor import Array, FeatureMap, GradPair

DEFAULT_LAMBDA1 = 5.0
DEFAULT_LAMBDA2 = 1.0
DEFAULT_SIGMA = 0.1


@dataclass
class HighRegionPartition:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    n_tp: int
    n_fp: int
    n_fn: int
    sigma: float


@dataclass
class ProposalWeights:
    lambda1: float
    lambda2: float
    weights: np.ndarray  # (H, W), >= 0


def partition_high(h_gt: Heatmap, h_pred: Heatmap, sigma: float = DEFAULT_SIGMA) -> HighRegionPartition:
    """Per-class threshold truth table, then per-cell union across classes.

    A multi-class cell can satisfy different rows of the truth table on
    different channels; unions are made disjoint with precedence
    TP > FN > FP (a cell containing a matched object is a match first).
    Cells equal to sigma on either map belong to no region for that class.
    """
    if h_gt.values.shape != h_pred.values.shape:
        raise ShapeError(f"heatmap shapes differ: {h_gt.values.shape} vs {h_pred.values.shape}")
    if not (0.0 < sigma < 1.0):
        raise DomainError(f"sigma must lie in (0, 1), got {sigma}")
    gt, pred = h_gt.values, h_pred.values
    tp = ((gt > sigma) & (pred > sigma)).any(axis=0)
    fn = ((gt > sigma) & (pred < sigma)).any(axis=0) & ~tp
    fp = ((gt < sigma) & (pred > sigma)).any(axis=0) & ~tp & ~fn
    return HighRegionPartition(
        tp=tp, fp=fp, fn=fn,
        n_tp=int(tp.sum()), n_fp=int(fp.sum()), n_fn=int(fn.sum()),
        sigma=sigma,
    )


def proposal_weights(
    p: HighRegionPartition,
    lambda1: float = DEFAULT_LAMBDA1,
    lambda2: float = DEFAULT_LAMBDA2,
) -> ProposalWeights:
    """lambda1 spread over TP+FN cells, lambda2 over FP cells; empty regions
    contribute no weight and no division."""
    if lambda1 < 0 or lambda2 < 0:
        raise DomainError(f"lambda1/lambda2 must be >= 0, got {lambda1}, {lambda2}")
    weights = np.zeros(p.tp.shape)
    matched = p.tp | p.fn
    n_matched = p.n_tp + p.n_fn
    if n_matched > 0:
        weights[matched] = lambda1 / n_matched
    if p.n_fp > 0:
        weights[p.fp] = lambda2 / p.n_fp
    return ProposalWeights(lambda1=lambda1, lambda2=lambda2, weights=weights)


def channel_softmax(f: FeatureMap) -> FeatureMap:
    """Per-cell distribution over channels, computed with max-subtraction."""
    if not np.isfinite(f.values).all():
        raise NumericError("channel_softmax requires finite inputs")
    return f.like(_softmax(f.values))


def _softmax(x: Array) -> Array:
    shifted = x - x.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=0, keepdims=True)


def _softmax_vjp(s: Array, gs: Array) -> Array:
    return s * (gs - (gs * s).sum(axis=0, keepdims=True))


def channel_softmax_backward(s: Array, gs: Array) -> Array:
    """Vector-Jacobian product of the per-cell softmax, given its output ``s``."""
    return _softmax_vjp(s, gs)


def pfd_loss(f_lidar: FeatureMap, f_radar: FeatureMap, w: ProposalWeights) -> GradPair:
    """Weighted L1 between channel-softmaxed features; gradient w.r.t. the raw
    student features (the L1 subgradient, sign(0) = 0, composed with the
    softmax Jacobian). The teacher side never receives a gradient."""
    if f_lidar.shape != f_radar.shape:
        raise ShapeError(f"feature shapes differ: {f_lidar.shape} vs {f_radar.shape}")
    if w.weights.shape != f_radar.shape[1:]:
        raise ShapeError(
            f"weight grid {w.weights.shape} does not match spatial dims {f_radar.shape[1:]}"
        )
    s_lidar = _softmax(f_lidar.values)
    s_radar = _softmax(f_radar.values)
    diff = s_lidar - s_radar
    value = float((w.weights * np.abs(diff).sum(axis=0)).sum())
    gs = -w.weights[None, :, :] * np.sign(diff)
    grad = _softmax_vjp(s_radar, gs)
    return GradPair(value=value, grad=grad)


@dataclass(frozen=True)
class PfdTotal:
    """Mean of the two per-level losses with one gradient per student level."""

    value: float
    grad_first: Array
    grad_second: Array


def pfd_total(
    teacher_pair: tuple[FeatureMap, FeatureMap],
    student_pair: tuple[FeatureMap, FeatureMap],
    w: ProposalWeights,
) -> PfdTotal:
    """Average over both high-level feature levels under one shared weight grid."""
    losses = []
    grads = []
    for f_teacher, f_student in zip(teacher_pair, student_pair):
        pair = pfd_loss(f_teacher, f_student, w)
        losses.append(pair.value)
        grads.append(pair.grad * 0.5)
    return PfdTotal(value=(losses[0] + losses[1]) / 2.0, grad_first=grads[0], grad_second=grads[1])
