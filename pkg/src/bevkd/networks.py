"""Network assemblies over the differentiable blocks.

Four assemblies make up each detection branch:

* ``SparseEncoder``  -- three stride-2 conv+rectify stages, pillar features
  (stride 1) down to stride-8 BEV features. Biases start at zero so all-zero
  input regions stay zero.
* ``Densifier``      -- the dilating down/up/aggregate topology that widens the
  active footprint of sparse stride-8 features and emits two same-stride maps.
  Registered under the op name ``cma``.
* ``DenseEncoder``   -- a stride-2 conv block stack, upsampled back and fused
  with its input through a second six-layer block; emits two stride-8 maps.
* ``ClassHead``      -- 3x3 conv + rectify + 1x1 conv + per-class logistic.

Every assembly hand-implements its backward pass; parameters live in a flat
name->array store so a teacher can hand matching weights to a student.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blocks import (
    concat_channels,
    conv2d_backward,
    conv2d_forward,
    logistic_backward,
    logistic_forward,
    rectify_backward,
    rectify_forward,
    scale_bias_backward,
    scale_bias_forward,
    split_channels,
    tconv2d_backward,
    tconv2d_forward,
)
from .errors import SceneParseError, ShapeError
from .heatmap import Heatmap
from .tensor import Array, FeatureMap

ParamStore = dict[str, Array]


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "kaiming" | "zero" | "one"
    fan_in: int = 0


def init_params(specs: list[ParamSpec], rng: np.random.Generator) -> ParamStore:
    """Kaiming-uniform fan-in kernels, zero biases, unit scales; draw order is spec order."""
    params: ParamStore = {}
    for spec in specs:
        if spec.init == "kaiming":
            bound = np.sqrt(6.0 / spec.fan_in)
            params[spec.name] = rng.uniform(-bound, bound, size=spec.shape)
        elif spec.init == "zero":
            params[spec.name] = np.zeros(spec.shape)
        elif spec.init == "one":
            params[spec.name] = np.ones(spec.shape)
        else:
            raise ValueError(f"unknown init {spec.init!r}")
    return params


class Conv:
    def __init__(self, name, in_ch, out_ch, kernel=3, stride=1, padding=None, bias=True):
        self.name = name
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.with_bias = bias

    def param_specs(self) -> list[ParamSpec]:
        k = self.kernel
        specs = [
            ParamSpec(f"{self.name}/kernel", (self.out_ch, self.in_ch, k, k), "kaiming", self.in_ch * k * k)
        ]
        if self.with_bias:
            specs.append(ParamSpec(f"{self.name}/bias", (self.out_ch,), "zero"))
        return specs

    def forward(self, params: ParamStore, x: Array) -> tuple[Array, Array]:
        bias = params[f"{self.name}/bias"] if self.with_bias else None
        return conv2d_forward(x, params[f"{self.name}/kernel"], bias, self.stride, self.padding), x

    def backward(self, params: ParamStore, cache: Array, gy: Array):
        gx, gk, gb = conv2d_backward(cache, params[f"{self.name}/kernel"], self.stride, self.padding, gy)
        grads = {f"{self.name}/kernel": gk}
        if self.with_bias:
            grads[f"{self.name}/bias"] = gb
        return grads, gx


class TConv:
    def __init__(self, name, in_ch, out_ch, kernel=2, stride=2, padding=0):
        self.name = name
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding

    def param_specs(self) -> list[ParamSpec]:
        k = self.kernel
        return [
            ParamSpec(f"{self.name}/kernel", (self.out_ch, self.in_ch, k, k), "kaiming", self.in_ch * k * k),
            ParamSpec(f"{self.name}/bias", (self.out_ch,), "zero"),
        ]

    def forward(self, params: ParamStore, x: Array) -> tuple[Array, Array]:
        y = tconv2d_forward(
            x, params[f"{self.name}/kernel"], params[f"{self.name}/bias"], self.stride, self.padding
        )
        return y, x

    def backward(self, params: ParamStore, cache: Array, gy: Array):
        gx, gk, gb = tconv2d_backward(cache, params[f"{self.name}/kernel"], self.stride, self.padding, gy)
        return {f"{self.name}/kernel": gk, f"{self.name}/bias": gb}, gx


class Rectify:
    margin_tracked = True

    def param_specs(self) -> list[ParamSpec]:
        return []

    def forward(self, params: ParamStore, x: Array) -> tuple[Array, Array]:
        return rectify_forward(x), x

    def backward(self, params: ParamStore, cache: Array, gy: Array):
        return {}, rectify_backward(cache, gy)


class ScaleBias:
    """Per-channel affine y[c] = g[c] x[c] + b[c]; the batch-norm stand-in."""

    def __init__(self, name, channels):
        self.name = name
        self.channels = channels

    def param_specs(self) -> list[ParamSpec]:
        return [
            ParamSpec(f"{self.name}/scale", (self.channels,), "one"),
            ParamSpec(f"{self.name}/shift", (self.channels,), "zero"),
        ]

    def forward(self, params: ParamStore, x: Array) -> tuple[Array, Array]:
        return scale_bias_forward(x, params[f"{self.name}/scale"], params[f"{self.name}/shift"]), x

    def backward(self, params: ParamStore, cache: Array, gy: Array):
        gx, gscale, gshift = scale_bias_backward(cache, params[f"{self.name}/scale"], gy)
        return {f"{self.name}/scale": gscale, f"{self.name}/shift": gshift}, gx


class Chain:
    def __init__(self, layers: list):
        self.layers = layers

    def param_specs(self) -> list[ParamSpec]:
        return [s for layer in self.layers for s in layer.param_specs()]

    def forward(self, params: ParamStore, x: Array) -> tuple[Array, list]:
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(params, x)
            caches.append(cache)
        return x, caches

    def backward(self, params: ParamStore, caches: list, gy: Array):
        grads: ParamStore = {}
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            layer_grads, gy = layer.backward(params, cache, gy)
            grads.update(layer_grads)
        return grads, gy

    def rectify_margin(self, caches: list) -> float:
        """Smallest |pre-activation| across rectify layers; inf if none."""
        margin = np.inf
        for layer, cache in zip(self.layers, caches):
            if getattr(layer, "margin_tracked", False):
                margin = min(margin, float(np.abs(cache).min()))
        return margin


def _conv_rectify(prefix: str, in_ch: int, out_ch: int, stride: int = 1) -> list:
    return [Conv(f"{prefix}", in_ch, out_ch, kernel=3, stride=stride), Rectify()]


def _conv_sb_rectify(prefix: str, in_ch: int, out_ch: int, stride: int = 1) -> list:
    # Conv carries no bias of its own; the scale-bias affine supplies it.
    return [
        Conv(f"{prefix}", in_ch, out_ch, kernel=3, stride=stride, bias=False),
        ScaleBias(f"{prefix}/sb", out_ch),
        Rectify(),
    ]


def _merge(*grad_dicts: ParamStore) -> ParamStore:
    out: ParamStore = {}
    for d in grad_dicts:
        out.update(d)
    return out


class SparseEncoder:
    """Pillar features (stride 1) -> stride-8 low-level BEV features."""

    def __init__(self, in_channels: int, channels: int, prefix: str = "sparse_enc"):
        self.in_channels = in_channels
        self.channels = channels
        layers: list = []
        ch = in_channels
        for i in range(3):
            layers += _conv_rectify(f"{prefix}/stage{i}", ch, channels, stride=2)
            ch = channels
        self.chain = Chain(layers)
        self.stride_factor = 8

    def param_specs(self) -> list[ParamSpec]:
        return self.chain.param_specs()

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        return init_params(self.param_specs(), rng)

    def apply_with_cache(self, params: ParamStore, x: FeatureMap):
        if x.channels != self.in_channels:
            raise ShapeError(f"expected {self.in_channels} input channels, got {x.channels}")
        y, caches = self.chain.forward(params, x.values)
        return x.like(y, stride=x.stride * self.stride_factor), caches

    def apply(self, params: ParamStore, x: FeatureMap) -> FeatureMap:
        return self.apply_with_cache(params, x)[0]

    def grads(self, params: ParamStore, caches, gy: Array):
        return self.chain.backward(params, caches, gy)

    def rectify_margin(self, caches) -> float:
        return self.chain.rectify_margin(caches)


class Densifier:
    """Dilating down/up/aggregate topology over stride-8 features (op name ``cma``).

    Trunk: two down blocks (stride-2 conv + two conv-rectify each), two
    transposed-conv up steps, with an aggregation (concat + 1x1 conv) fusing
    the mid-resolution skip. Two side pathways from the input feed the final
    aggregations that emit the first and second densified maps, both
    rectified, both at the input's stride.
    """

    def __init__(self, channels: int, widths: tuple[int, int] | None = None, prefix: str = "cma"):
        w1, w2 = widths if widths is not None else (2 * channels, 4 * channels)
        self.channels = channels
        self.w1 = w1
        self.side1 = Chain(_conv_rectify(f"{prefix}/side1", channels, channels))
        self.side2 = Chain(_conv_rectify(f"{prefix}/side2", channels, channels))
        self.down1 = Chain(
            _conv_rectify(f"{prefix}/down1/pool", channels, w1, stride=2)
            + _conv_rectify(f"{prefix}/down1/conv0", w1, w1)
            + _conv_rectify(f"{prefix}/down1/conv1", w1, w1)
        )
        self.down2 = Chain(
            _conv_rectify(f"{prefix}/down2/pool", w1, w2, stride=2)
            + _conv_rectify(f"{prefix}/down2/conv0", w2, w2)
            + _conv_rectify(f"{prefix}/down2/conv1", w2, w2)
        )
        self.up2 = Chain([TConv(f"{prefix}/up2", w2, w1)])
        self.agg_mid = Chain([Conv(f"{prefix}/agg_mid", 2 * w1, w1, kernel=1)])
        self.up1 = Chain([TConv(f"{prefix}/up1", w1, channels)])
        self.agg1 = Chain([Conv(f"{prefix}/agg1", 2 * channels, channels, kernel=1)])
        self.agg2 = Chain([Conv(f"{prefix}/agg2", 2 * channels, channels, kernel=1)])
        self._parts = [
            self.side1, self.side2, self.down1, self.down2,
            self.up2, self.agg_mid, self.up1, self.agg1, self.agg2,
        ]

    def param_specs(self) -> list[ParamSpec]:
        return [s for part in self._parts for s in part.param_specs()]

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        return init_params(self.param_specs(), rng)

    def apply_with_cache(self, params: ParamStore, f: FeatureMap):
        x = f.values
        s1, c_s1 = self.side1.forward(params, x)
        s2, c_s2 = self.side2.forward(params, x)
        d1, c_d1 = self.down1.forward(params, x)
        d2, c_d2 = self.down2.forward(params, d1)
        u2, c_u2 = self.up2.forward(params, d2)
        am, c_am = self.agg_mid.forward(params, concat_channels(d1, u2))
        u1, c_u1 = self.up1.forward(params, am)
        a1, c_a1 = self.agg1.forward(params, concat_channels(s1, u1))
        l1 = rectify_forward(a1)
        a2, c_a2 = self.agg2.forward(params, concat_channels(l1, s2))
        l2 = rectify_forward(a2)
        cache = {
            "s1": c_s1, "s2": c_s2, "d1": c_d1, "d2": c_d2, "u2": c_u2,
            "am": c_am, "u1": c_u1, "a1": c_a1, "a2": c_a2,
            "a1_pre": a1, "a2_pre": a2,
        }
        return (f.like(l1), f.like(l2)), cache

    def apply(self, params: ParamStore, f: FeatureMap) -> tuple[FeatureMap, FeatureMap]:
        return self.apply_with_cache(params, f)[0]

    def grads(self, params: ParamStore, cache, upstream: tuple[Array, Array]):
        g1, g2 = upstream
        ch = self.channels
        ga2 = rectify_backward(cache["a2_pre"], g2)
        gr_a2, gcat2 = self.agg2.backward(params, cache["a2"], ga2)
        gl1_from2, gs2 = split_channels(gcat2, ch)
        ga1 = rectify_backward(cache["a1_pre"], g1 + gl1_from2)
        gr_a1, gcat1 = self.agg1.backward(params, cache["a1"], ga1)
        gs1, gu1 = split_channels(gcat1, ch)
        gr_u1, gam = self.up1.backward(params, cache["u1"], gu1)
        gr_am, gmid = self.agg_mid.backward(params, cache["am"], gam)
        gd1_skip, gu2 = split_channels(gmid, self.w1)
        gr_u2, gd2 = self.up2.backward(params, cache["u2"], gu2)
        gr_d2, gd1_trunk = self.down2.backward(params, cache["d2"], gd2)
        gr_d1, gx_trunk = self.down1.backward(params, cache["d1"], gd1_skip + gd1_trunk)
        gr_s1, gx_s1 = self.side1.backward(params, cache["s1"], gs1)
        gr_s2, gx_s2 = self.side2.backward(params, cache["s2"], gs2)
        grads = _merge(gr_a2, gr_a1, gr_u1, gr_am, gr_u2, gr_d2, gr_d1, gr_s1, gr_s2)
        return grads, gx_trunk + gx_s1 + gx_s2

    def rectify_margin(self, cache) -> float:
        margin = min(
            self.side1.rectify_margin(cache["s1"]),
            self.side2.rectify_margin(cache["s2"]),
            self.down1.rectify_margin(cache["d1"]),
            self.down2.rectify_margin(cache["d2"]),
        )
        margin = min(margin, float(np.abs(cache["a1_pre"]).min()))
        margin = min(margin, float(np.abs(cache["a2_pre"]).min()))
        return margin


class DenseEncoder:
    """Stride-8 features -> two stride-8 high-level maps (first upsampled, second fused)."""

    def __init__(self, channels: int, mid: int | None = None, prefix: str = "dense_enc"):
        mid = mid if mid is not None else 2 * channels
        self.channels = channels
        self.pre = Chain(_conv_sb_rectify(f"{prefix}/pre", channels, mid, stride=2))
        block_a: list = []
        for i in range(6):
            block_a += _conv_sb_rectify(f"{prefix}/blockA{i}", mid, mid)
        self.block_a = Chain(block_a)
        self.up = Chain([TConv(f"{prefix}/up", mid, channels)])
        block_b = _conv_sb_rectify(f"{prefix}/blockB0", 2 * channels, channels)
        for i in range(1, 6):
            block_b += _conv_sb_rectify(f"{prefix}/blockB{i}", channels, channels)
        self.block_b = Chain(block_b)
        self._parts = [self.pre, self.block_a, self.up, self.block_b]

    def param_specs(self) -> list[ParamSpec]:
        return [s for part in self._parts for s in part.param_specs()]

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        return init_params(self.param_specs(), rng)

    def apply_with_cache(self, params: ParamStore, f: FeatureMap):
        x = f.values
        p, c_pre = self.pre.forward(params, x)
        a, c_a = self.block_a.forward(params, p)
        h1, c_up = self.up.forward(params, a)
        h2, c_b = self.block_b.forward(params, concat_channels(h1, x))
        cache = {"pre": c_pre, "a": c_a, "up": c_up, "b": c_b}
        return (f.like(h1), f.like(h2)), cache

    def apply(self, params: ParamStore, f: FeatureMap) -> tuple[FeatureMap, FeatureMap]:
        return self.apply_with_cache(params, f)[0]

    def grads(self, params: ParamStore, cache, upstream: tuple[Array, Array]):
        gh1, gh2 = upstream
        gr_b, gcat = self.block_b.backward(params, cache["b"], gh2)
        gh1_fused, gx_skip = split_channels(gcat, self.channels)
        gr_up, ga = self.up.backward(params, cache["up"], gh1 + gh1_fused)
        gr_a, gp = self.block_a.backward(params, cache["a"], ga)
        gr_pre, gx = self.pre.backward(params, cache["pre"], gp)
        return _merge(gr_b, gr_up, gr_a, gr_pre), gx + gx_skip

    def rectify_margin(self, cache) -> float:
        return min(
            self.pre.rectify_margin(cache["pre"]),
            self.block_a.rectify_margin(cache["a"]),
            self.block_b.rectify_margin(cache["b"]),
        )


class ClassHead:
    """3x3 conv + rectify + 1x1 conv + logistic squashing per class channel."""

    def __init__(self, channels: int, n_classes: int, head_channels: int | None = None, prefix: str = "head"):
        hc = head_channels if head_channels is not None else channels
        self.n_classes = n_classes
        self.trunk = Chain(
            [Conv(f"{prefix}/conv", channels, hc, kernel=3), Rectify(), Conv(f"{prefix}/logits", hc, n_classes, kernel=1)]
        )

    def param_specs(self) -> list[ParamSpec]:
        return self.trunk.param_specs()

    def init_params(self, rng: np.random.Generator) -> ParamStore:
        return init_params(self.param_specs(), rng)

    def apply_with_cache(self, params: ParamStore, f: FeatureMap):
        z, c_trunk = self.trunk.forward(params, f.values)
        y = logistic_forward(z)
        return Heatmap(y), {"trunk": c_trunk, "y": y}

    def apply(self, params: ParamStore, f: FeatureMap) -> Heatmap:
        return self.apply_with_cache(params, f)[0]

    def grads(self, params: ParamStore, cache, gy: Array):
        gz = logistic_backward(cache["y"], gy)
        return self.trunk.backward(params, cache["trunk"], gz)

    def rectify_margin(self, cache) -> float:
        return self.trunk.rectify_margin(cache["trunk"])


# Parameter checkpoint container, little-endian:
#   magic b"BKDP", u16 version=1, u32 n_entries, then per entry (name-sorted):
#   u16 name_len, utf-8 name, u8 ndim, ndim * u32 dims, f64 data.

PARAM_MAGIC = b"BKDP"
PARAM_VERSION = 1


def save_params(path: str | Path, params: ParamStore) -> None:
    blob = bytearray()
    blob += struct.pack("<4sHI", PARAM_MAGIC, PARAM_VERSION, len(params))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype=np.float64)
        encoded = name.encode("utf-8")
        blob += struct.pack("<H", len(encoded))
        blob += encoded
        blob += struct.pack("<B", arr.ndim)
        blob += struct.pack(f"<{arr.ndim}I", *arr.shape)
        blob += arr.astype("<f8").tobytes()
    Path(path).write_bytes(bytes(blob))


def load_params(path: str | Path) -> ParamStore:
    data = Path(path).read_bytes()
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(data):
            raise SceneParseError(
                f"truncated checkpoint: needed {n} bytes for {what} at byte {offset}"
            )
        out = data[offset : offset + n]
        offset += n
        return out

    magic, version, count = struct.unpack("<4sHI", take(10, "header"))
    if magic != PARAM_MAGIC:
        raise SceneParseError(f"bad checkpoint magic {magic!r} at byte 0")
    if version != PARAM_VERSION:
        raise SceneParseError(f"unsupported checkpoint version {version}")
    params: ParamStore = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        n_values = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        raw = take(8 * n_values, f"values of {name}")
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
    if offset != len(data):
        raise SceneParseError(f"trailing garbage at byte {offset}")
    return params
