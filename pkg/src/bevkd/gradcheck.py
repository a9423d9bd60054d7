"""Registered differentiable ops and their finite-difference fixtures.

Each registered op gets a deterministic fixture builder: given a seed it
returns a scalar-valued DiffOp plus the input arrays to perturb. Tensor-output
ops are composed with a fixed random linear functional. Fixtures are screened
away from non-differentiable points (rectifier kinks, L1 kinks of the softmax
difference): the analytic subgradient convention is only required to match
central differences where the loss is actually differentiable, so the builder
advances to a derived seed until every pre-activation clears a small margin.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .afd import afd_loss, afd_weights, active_mask, partition_low
from .blocks import (
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    rectify_backward,
    rectify_forward,
    split_channels,
    tconv2d_backward,
    tconv2d_forward,
)
from .errors import ShapeError
from .heatmap import Heatmap
from .networks import ClassHead, Densifier, DenseEncoder, SparseEncoder
from .pfd import (
    _softmax,
    channel_softmax_backward,
    partition_high,
    pfd_loss,
    proposal_weights,
)
from .tensor import (
    Array,
    CheckReport,
    FeatureMap,
    finite_diff_check,
    with_linear_functional,
)
from .training import det_loss

# Pre-activations closer than this to a rectifier kink (or softmax differences
# closer than this to an L1 kink) make the fixture non-differentiable at the
# probe scale; the builder reseeds past them.
KINK_MARGIN = 2e-3
MAX_SCREEN_ATTEMPTS = 200
_RESEED = 104729  # prime stride through the seed space

# Deep assemblies are piecewise linear in every single element, so a larger
# probe step loses no truncation accuracy while shrinking the roundoff of the
# central difference on their many small-magnitude parameter gradients.
EPSILON_OVERRIDES = {"sparse_enc": 1e-4, "cma": 1e-4, "dense_enc": 1e-4, "center_head": 1e-4}


class ConvOp:
    name = "conv2d"

    def __init__(self, stride: int = 1, padding: int = 1):
        self.stride, self.padding = stride, padding

    def forward(self, inputs: Sequence[Array]):
        x, kernel, bias = inputs
        return conv2d_forward(x, kernel, bias, self.stride, self.padding)

    def backward(self, inputs: Sequence[Array], upstream):
        x, kernel, _ = inputs
        return list(conv2d_backward(x, kernel, self.stride, self.padding, upstream))


class TConvOp:
    name = "tconv2d"

    def __init__(self, stride: int = 2, padding: int = 0):
        self.stride, self.padding = stride, padding

    def forward(self, inputs: Sequence[Array]):
        x, kernel, bias = inputs
        return tconv2d_forward(x, kernel, bias, self.stride, self.padding)

    def backward(self, inputs: Sequence[Array], upstream):
        x, kernel, _ = inputs
        return list(tconv2d_backward(x, kernel, self.stride, self.padding, upstream))


class RectifyOp:
    name = "rectify"

    def forward(self, inputs: Sequence[Array]):
        return rectify_forward(inputs[0])

    def backward(self, inputs: Sequence[Array], upstream):
        return [rectify_backward(inputs[0], upstream)]


class AggregateOp:
    """concat two maps on channels, then a 1x1 convolution."""

    name = "aggregate"

    def forward(self, inputs: Sequence[Array]):
        a, b, kernel, bias = inputs
        return conv2d_forward(concat_channels(a, b), kernel, bias, 1, 0)

    def backward(self, inputs: Sequence[Array], upstream):
        a, b, kernel, _ = inputs
        gcat, gk, gb = conv2d_backward(concat_channels(a, b), kernel, 1, 0, upstream)
        ga, gb_map = split_channels(gcat, a.shape[0])
        return [ga, gb_map, gk, gb]


class ChannelSoftmaxOp:
    name = "channel_softmax"

    def forward(self, inputs: Sequence[Array]):
        return _softmax(inputs[0])

    def backward(self, inputs: Sequence[Array], upstream):
        return [channel_softmax_backward(_softmax(inputs[0]), upstream)]


class AssemblyOp:
    """Adapter exposing an assembly's input map and parameters as one flat
    input list, so the checker perturbs features and weights alike."""

    def __init__(self, name: str, assembly, template: FeatureMap, params: dict):
        self.name = name
        self.assembly = assembly
        self.template = template
        self.param_names = sorted(params)

    def pack_inputs(self, params: dict) -> list[Array]:
        return [self.template.values.copy()] + [params[n].copy() for n in self.param_names]

    def _unpack(self, inputs: Sequence[Array]):
        x = self.template.like(np.asarray(inputs[0]))
        return x, dict(zip(self.param_names, inputs[1:]))

    @staticmethod
    def _out_arrays(out) -> tuple[Array, ...]:
        if isinstance(out, tuple):
            return tuple(o.values for o in out)
        return (out.values,)

    def forward(self, inputs: Sequence[Array]):
        x, params = self._unpack(inputs)
        arrays = self._out_arrays(self.assembly.apply(params, x))
        return arrays if len(arrays) > 1 else arrays[0]

    def backward(self, inputs: Sequence[Array], upstream):
        x, params = self._unpack(inputs)
        out, cache = self.assembly.apply_with_cache(params, x)
        n_out = len(self._out_arrays(out))
        up = upstream if n_out > 1 else (upstream if not isinstance(upstream, tuple) else upstream[0])
        grads, gx = self.assembly.grads(params, cache, up)
        return [gx] + [grads[n] for n in self.param_names]


class PrecomputedLossOp:
    """Scalar loss with one differentiated input and a closed-form gradient."""

    def __init__(self, name: str, fn: Callable[[Array], "object"]):
        self.name = name
        self._fn = fn

    def forward(self, inputs: Sequence[Array]):
        return self._fn(inputs[0]).value

    def backward(self, inputs: Sequence[Array], upstream):
        return [np.asarray(upstream, dtype=np.float64) * self._fn(inputs[0]).grad]


def _signed_uniform(rng: np.random.Generator, low: float, high: float, shape) -> Array:
    return rng.uniform(low, high, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _screen(seed: int, build: Callable[[np.random.Generator], tuple]):
    """Walk derived seeds until the fixture clears every kink margin."""
    for attempt in range(MAX_SCREEN_ATTEMPTS):
        rng = np.random.default_rng(seed + _RESEED * attempt)
        result = build(rng)
        if result is not None:
            return result
    raise RuntimeError(f"could not build a kink-free fixture from seed {seed}")


def _build_conv(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 6, 6))
    kernel = 0.5 * rng.standard_normal((2, 3, 3, 3))
    bias = 0.1 * rng.standard_normal(2)
    op = ConvOp(stride=1 + seed % 2, padding=1)
    return with_linear_functional(op, [x, kernel, bias], seed + 555), [x, kernel, bias]


def _build_tconv(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4, 4))
    kernel = 0.5 * rng.standard_normal((2, 3, 2, 2))
    bias = 0.1 * rng.standard_normal(2)
    op = TConvOp(stride=2, padding=0)
    return with_linear_functional(op, [x, kernel, bias], seed + 555), [x, kernel, bias]


def _build_rectify(seed: int):
    rng = np.random.default_rng(seed)
    x = _signed_uniform(rng, 0.2, 1.5, (4, 6, 6))
    op = RectifyOp()
    return with_linear_functional(op, [x], seed + 555), [x]


def _build_aggregate(seed: int):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((3, 5, 5))
    b = rng.standard_normal((2, 5, 5))
    kernel = 0.5 * rng.standard_normal((3, 5, 1, 1))
    bias = 0.1 * rng.standard_normal(3)
    op = AggregateOp()
    return with_linear_functional(op, [a, b, kernel, bias], seed + 555), [a, b, kernel, bias]


def _build_channel_softmax(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((4, 5, 5))
    op = ChannelSoftmaxOp()
    return with_linear_functional(op, [x], seed + 555), [x]


def _assembly_fixture(name: str, seed: int, make, spatial: tuple[int, int]):
    def build(rng: np.random.Generator):
        assembly, in_channels = make()
        params = assembly.init_params(rng)
        x = FeatureMap(rng.uniform(0.25, 1.75, size=(in_channels, *spatial)), stride=8)
        _, cache = assembly.apply_with_cache(params, x)
        if assembly.rectify_margin(cache) <= KINK_MARGIN:
            return None
        op = AssemblyOp(name, assembly, x, params)
        inputs = op.pack_inputs(params)
        return with_linear_functional(op, inputs, seed + 555), inputs

    return _screen(seed, build)


def _build_sparse_enc(seed: int):
    return _assembly_fixture(
        "sparse_enc", seed, lambda: (SparseEncoder(2, 2, prefix="sparse_enc"), 2), (8, 8)
    )


def _build_cma(seed: int):
    return _assembly_fixture(
        "cma", seed, lambda: (Densifier(2, widths=(2, 3), prefix="cma"), 2), (4, 4)
    )


def _build_dense_enc(seed: int):
    return _assembly_fixture(
        "dense_enc", seed, lambda: (DenseEncoder(2, mid=2, prefix="dense_enc"), 2), (4, 4)
    )


def _build_center_head(seed: int):
    return _assembly_fixture(
        "center_head", seed, lambda: (ClassHead(2, 2, head_channels=3, prefix="head"), 2), (6, 6)
    )


def _build_afd_loss(seed: int):
    rng = np.random.default_rng(seed)
    f_lidar = FeatureMap(np.maximum(rng.standard_normal((3, 6, 6)), 0.0), stride=8)
    # strictly positive student features: the activity mask cannot flip under
    # the +/- epsilon probes, matching the masks-are-constants convention
    f_radar = rng.uniform(0.5, 1.5, size=(3, 6, 6))
    weights = afd_weights(
        partition_low(active_mask(FeatureMap(f_radar, stride=8)), active_mask(f_lidar))
    )

    def fn(values: Array):
        return afd_loss(f_lidar, f_lidar.like(values), weights)

    return PrecomputedLossOp("afd_loss", fn), [f_radar]


def _build_pfd_loss(seed: int):
    def build(rng: np.random.Generator):
        gt = Heatmap(rng.uniform(0.0, 1.0, size=(2, 6, 6)))
        pred = Heatmap(rng.uniform(0.0, 1.0, size=(2, 6, 6)))
        weights = proposal_weights(partition_high(gt, pred, 0.1))
        f_lidar = FeatureMap(rng.standard_normal((3, 6, 6)), stride=8)
        f_radar = rng.standard_normal((3, 6, 6))
        delta = np.abs(_softmax(f_lidar.values) - _softmax(f_radar))
        if delta[:, weights.weights > 0].size and delta[:, weights.weights > 0].min() <= 1e-4:
            return None  # too close to an L1 kink on a weighted cell

        def fn(values: Array):
            return pfd_loss(f_lidar, f_lidar.like(values), weights)

        return PrecomputedLossOp("pfd_loss", fn), [f_radar]

    return _screen(seed, build)


def _build_det_loss(seed: int):
    rng = np.random.default_rng(seed)
    # background targets capped at 0.85: the (1-t)^4 down-weight keeps every
    # gradient component large enough that the central difference is not
    # dominated by roundoff
    gt_values = rng.uniform(0.0, 0.85, size=(2, 6, 6))
    centers = rng.random(size=gt_values.shape) < 0.1
    gt_values[centers] = 1.0
    gt = Heatmap(gt_values)
    pred = rng.uniform(0.05, 0.95, size=(2, 6, 6))

    def fn(values: Array):
        return det_loss(Heatmap(values), gt)

    return PrecomputedLossOp("det_loss", fn), [pred]


# Registered DiffOps: each builder returns (scalar op, inputs) for one seed.
REGISTRY: dict[str, Callable[[int], tuple]] = {
    "conv2d": _build_conv,
    "tconv2d": _build_tconv,
    "rectify": _build_rectify,
    "aggregate": _build_aggregate,
    "sparse_enc": _build_sparse_enc,
    "cma": _build_cma,
    "dense_enc": _build_dense_enc,
    "center_head": _build_center_head,
    "channel_softmax": _build_channel_softmax,
    "afd_loss": _build_afd_loss,
    "pfd_loss": _build_pfd_loss,
    "det_loss": _build_det_loss,
}


def run_gradient_suite(
    seeds: Sequence[int] = range(10),
    epsilon: float = 1e-5,
    tolerance: float = 1e-5,
    registry: dict[str, Callable[[int], tuple]] | None = None,
) -> dict[str, list[CheckReport]]:
    """Run finite-difference checks for every registered op over ``seeds``."""
    registry = REGISTRY if registry is None else registry
    results: dict[str, list[CheckReport]] = {}
    for name, build in registry.items():
        reports = []
        for seed in seeds:
            op, inputs = build(seed)
            reports.append(finite_diff_check(op, inputs, epsilon, tolerance))
        results[name] = reports
    return results


def suite_summary(results: dict[str, list[CheckReport]]) -> dict:
    ops = {}
    for name, reports in results.items():
        ops[name] = {
            "max_rel_error": max(r.max_rel_error for r in reports),
            "passed": all(r.passed for r in reports),
            "seeds": len(reports),
        }
    return {
        "passed": all(v["passed"] for v in ops.values()),
        "failed_ops": sorted(n for n, v in ops.items() if not v["passed"]),
        "ops": ops,
    }
