"""Dense BEV tensors, the differentiable-op contract, and finite-difference checking.

Every differentiable operation in this package hand-implements its backward
pass as an exact vector-Jacobian product. ``finite_diff_check`` is the single
oracle those backward passes are validated against: central differences in
double precision, compared elementwise against the analytic gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol, Sequence, Union, runtime_checkable

import numpy as np

from .errors import NumericError, ShapeError

Array = np.ndarray


@dataclass
class FeatureMap:
    """A channel-major C x H x W grid of float64 values with BEV metadata.

    ``stride`` is the downsampling factor relative to the stride-1 pillar
    grid, so one cell of this map covers ``stride * meters_per_cell`` meters
    on the ground plane.
    """

    values: Array
    stride: int = 1
    meters_per_cell: float = 0.45

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3:
            raise ShapeError(f"feature map must be 3-d (C,H,W), got ndim={self.values.ndim}")
        if min(self.values.shape) < 1:
            raise ShapeError(f"feature map dimensions must be >= 1, got {self.values.shape}")
        if int(self.stride) < 1:
            raise ShapeError(f"stride must be >= 1, got {self.stride}")
        self.stride = int(self.stride)
        if not self.meters_per_cell > 0:
            raise ShapeError(f"meters_per_cell must be > 0, got {self.meters_per_cell}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def _check_index(self, c: int, i: int, j: int) -> None:
        # Negative indices are rejected: no silent wraparound.
        if not (0 <= c < self.channels and 0 <= i < self.height and 0 <= j < self.width):
            raise IndexError(
                f"index (c={c}, i={i}, j={j}) out of range for shape {self.shape}"
            )

    def at(self, c: int, i: int, j: int) -> float:
        """Bounds-checked element read."""
        self._check_index(c, i, j)
        return float(self.values[c, i, j])

    def put(self, c: int, i: int, j: int, value: float) -> None:
        """Bounds-checked element write."""
        self._check_index(c, i, j)
        self.values[c, i, j] = value

    def like(self, values: Array, stride: int | None = None) -> "FeatureMap":
        """New map carrying this map's metadata (optionally a new stride)."""
        return FeatureMap(values, self.stride if stride is None else stride, self.meters_per_cell)

    def copy(self) -> "FeatureMap":
        return FeatureMap(self.values.copy(), self.stride, self.meters_per_cell)


def tensor_new(
    channels: int,
    height: int,
    width: int,
    fill: float = 0.0,
    *,
    stride: int = 1,
    meters_per_cell: float = 0.45,
) -> FeatureMap:
    """Allocate a constant-filled feature map at stride ``stride``."""
    for name, dim in (("channels", channels), ("height", height), ("width", width)):
        if int(dim) < 1:
            raise ShapeError(f"{name} must be >= 1, got {dim}")
    values = np.full((channels, height, width), float(fill), dtype=np.float64)
    return FeatureMap(values, stride=stride, meters_per_cell=meters_per_cell)


@dataclass(frozen=True)
class GradPair:
    """A scalar result together with the gradient of that scalar w.r.t. one input."""

    value: float
    grad: Array


Upstream = Union[float, Array, tuple]


@runtime_checkable
class DiffOp(Protocol):
    """Contract for a differentiable operation over raw arrays.

    ``forward`` must be deterministic. ``backward`` must implement the exact
    vector-Jacobian product of ``forward``: given the upstream gradient (a
    float for scalar outputs, an array or tuple of arrays matching the output
    structure otherwise) it returns one gradient per input, each shaped like
    the corresponding input.
    """

    name: str

    def forward(self, inputs: Sequence[Array]) -> Upstream: ...

    def backward(self, inputs: Sequence[Array], upstream: Upstream) -> list[Array]: ...


class ScalarizedOp:
    """A tensor-output op composed with a fixed random linear functional.

    Checking every output element of a tensor-valued op is quadratic in size;
    probing through one fixed functional f(x) = sum_k <w_k, out_k(x)> checks
    the same Jacobian information at scalar cost.
    """

    def __init__(self, inner, weights: tuple[Array, ...], name: str | None = None):
        self.inner = inner
        self.weights = weights
        self.name = name if name is not None else getattr(inner, "name", "scalarized")

    def forward(self, inputs: Sequence[Array]) -> float:
        outs = _as_output_tuple(self.inner.forward(inputs))
        if len(outs) != len(self.weights):
            raise ShapeError(
                f"{self.name}: expected {len(self.weights)} outputs, got {len(outs)}"
            )
        return float(sum(np.vdot(w, o) for w, o in zip(self.weights, outs)))

    def backward(self, inputs: Sequence[Array], upstream: float = 1.0) -> list[Array]:
        ws = tuple(np.asarray(upstream, dtype=np.float64) * w for w in self.weights)
        return self.inner.backward(inputs, ws if len(ws) > 1 else ws[0])


def _as_output_tuple(out: Upstream) -> tuple[Array, ...]:
    if isinstance(out, tuple):
        return tuple(np.asarray(o, dtype=np.float64) for o in out)
    return (np.asarray(out, dtype=np.float64),)


def with_linear_functional(op, inputs: Sequence[Array], seed: int = 0) -> ScalarizedOp:
    """Wrap ``op`` so its (possibly tuple of) tensor outputs become one scalar."""
    outs = _as_output_tuple(op.forward(list(inputs)))
    rng = np.random.default_rng(seed)
    weights = tuple(rng.standard_normal(o.shape) for o in outs)
    return ScalarizedOp(op, weights)


@dataclass(frozen=True)
class CheckReport:
    """Result of one finite-difference validation run."""

    op_name: str
    max_rel_error: float
    passed: bool
    n_checked: int
    epsilon: float
    tolerance: float
    worst: tuple[int, int, float, float] | None = None  # (input idx, flat idx, analytic, numeric)

    def to_dict(self) -> dict:
        return {
            "op": self.op_name,
            "max_rel_error": self.max_rel_error,
            "passed": self.passed,
            "n_checked": self.n_checked,
            "epsilon": self.epsilon,
            "tolerance": self.tolerance,
        }


# Relative-error denominator floor; avoids division blow-ups at true-zero gradients.
REL_ERROR_FLOOR = 1e-8


def finite_diff_check(
    op,
    inputs: Sequence[Union[Array, "FeatureMap"]],
    epsilon: float = 1e-5,
    tolerance: float = 1e-5,
) -> CheckReport:
    """Validate ``op.backward`` against central finite differences.

    ``op.forward`` must return a scalar (wrap tensor-output ops with
    ``with_linear_functional`` first). Every element of every input is
    perturbed by +/- epsilon; the central-difference estimate
    (f(x+eps e) - f(x-eps e)) / (2 eps) is compared against the analytic
    gradient with relative error |a - n| / max(|a|, |n|, 1e-8).
    """
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    arrays = [x.values if isinstance(x, FeatureMap) else np.asarray(x, np.float64) for x in inputs]

    def evaluate() -> float:
        value = op.forward(arrays)
        value = float(value)
        if not math.isfinite(value):
            raise NumericError(f"{getattr(op, 'name', 'op')}: non-finite forward value {value}")
        return value

    evaluate()  # fail fast on a broken base point
    analytic = op.backward(arrays, 1.0)
    if len(analytic) != len(arrays):
        raise ShapeError(
            f"backward returned {len(analytic)} gradients for {len(arrays)} inputs"
        )

    max_rel = 0.0
    worst = None
    n_checked = 0
    for k, arr in enumerate(arrays):
        grad_k = np.asarray(analytic[k], dtype=np.float64)
        if grad_k.shape != arr.shape:
            raise ShapeError(
                f"gradient {k} has shape {grad_k.shape}, input has shape {arr.shape}"
            )
        flat = arr.reshape(-1)
        gflat = grad_k.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = evaluate()
            flat[i] = orig - epsilon
            f_minus = evaluate()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(gflat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERROR_FLOOR)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (k, i, a, numeric)

    return CheckReport(
        op_name=getattr(op, "name", op.__class__.__name__),
        max_rel_error=max_rel,
        passed=max_rel <= tolerance,
        n_checked=n_checked,
        epsilon=epsilon,
        tolerance=tolerance,
        worst=worst,
    )
