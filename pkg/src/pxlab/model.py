"""Prunable ReLU networks: layer specs, Kaiming-normal building, masks.

A :class:`Network` owns a flat parameter vector ``params`` and a flat binary
``mask`` of the same length, plus a layout mapping each layer to its
(offset, extent) slice. Dense biases follow the appended-constant-input
convention: the weight block is ``(out, in + 1)`` with the bias as the last
column, consumed by augmenting the input with a column of ones. Conv biases
are stored as per-output-channel entries appended after the kernel block.
Either way biases live inside the flat vector, so the mask covers them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor
from .tensor import Rng

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int
    bias: bool = False


@dataclass(frozen=True)
class Conv2D:
    in_channels: int
    out_channels: int
    kh: int
    kw: int
    stride: int = 1
    padding: int = 0
    bias: bool = False


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class AvgPool:
    k: int
    stride: int


@dataclass(frozen=True)
class Flatten:
    pass


LayerSpec = Dense | Conv2D | ReLU | AvgPool | Flatten

_SPEC_TYPES = {"Dense": Dense, "Conv2D": Conv2D, "ReLU": ReLU, "AvgPool": AvgPool, "Flatten": Flatten}


def spec_to_dict(spec: LayerSpec) -> dict:
    d = {"type": type(spec).__name__}
    d.update(vars(spec))
    return d


def spec_from_dict(d: dict) -> LayerSpec:
    kind = _SPEC_TYPES[d["type"]]
    return kind(**{k: v for k, v in d.items() if k != "type"})


def param_extent(spec: LayerSpec) -> int:
    if isinstance(spec, Dense):
        return spec.out_features * (spec.in_features + (1 if spec.bias else 0))
    if isinstance(spec, Conv2D):
        return spec.out_channels * (spec.in_channels * spec.kh * spec.kw + (1 if spec.bias else 0))
    return 0


def infer_shapes(layers: list[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple[int, ...]]:
    """Per-layer output shapes (batch axis excluded); raises on mismatch."""
    shapes = []
    cur = tuple(input_shape)
    for idx, spec in enumerate(layers):
        if isinstance(spec, Dense):
            if len(cur) != 1 or cur[0] != spec.in_features:
                raise tensor.ShapeError(f"layer {idx}: Dense expects ({spec.in_features},), got {cur}")
            cur = (spec.out_features,)
        elif isinstance(spec, Conv2D):
            if len(cur) != 3 or cur[0] != spec.in_channels:
                raise tensor.ShapeError(f"layer {idx}: Conv2D expects ({spec.in_channels}, H, W), got {cur}")
            c, h, w = cur
            out_h = (h + 2 * spec.padding - spec.kh) // spec.stride + 1
            out_w = (w + 2 * spec.padding - spec.kw) // spec.stride + 1
            if h + 2 * spec.padding < spec.kh or out_h <= 0 or out_w <= 0:
                raise tensor.ShapeError(f"layer {idx}: nonpositive conv output extent from {cur}")
            cur = (spec.out_channels, out_h, out_w)
        elif isinstance(spec, AvgPool):
            if len(cur) != 3:
                raise tensor.ShapeError(f"layer {idx}: AvgPool expects (C, H, W), got {cur}")
            c, h, w = cur
            if h < spec.k or w < spec.k:
                raise tensor.ShapeError(f"layer {idx}: pool window {spec.k} exceeds input {cur}")
            cur = (c, (h - spec.k) // spec.stride + 1, (w - spec.k) // spec.stride + 1)
        elif isinstance(spec, Flatten):
            cur = (int(np.prod(cur)),)
        elif isinstance(spec, ReLU):
            pass
        else:
            raise TypeError(f"unknown layer spec {spec!r}")
        shapes.append(cur)
    return shapes


@dataclass
class Network:
    """Layer list + flat parameters + flat binary mask.

    Immutable after build except for explicit mask replacement
    (:meth:`with_mask`) and in-place parameter updates by the training loop.
    """

    layers: list[LayerSpec]
    params: np.ndarray
    mask: np.ndarray
    layout: list[tuple[int, int]]
    input_shape: tuple[int, ...]
    shapes: list[tuple[int, ...]] = field(repr=False, default_factory=list)

    @property
    def m(self) -> int:
        return self.params.size

    @property
    def density(self) -> float:
        return float(np.count_nonzero(self.mask)) / self.m

    @property
    def output_dim(self) -> int:
        return int(np.prod(self.shapes[-1]))

    def masked_params(self) -> np.ndarray:
        """Elementwise product of parameters and mask."""
        return self.params * self.mask

    def layer_params(self, idx: int, flat: np.ndarray) -> np.ndarray:
        off, ext = self.layout[idx]
        return flat[off:off + ext]

    def with_mask(self, mask: np.ndarray) -> "Network":
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (self.m,):
            raise tensor.ShapeError(f"mask length {mask.size} != parameter count {self.m}")
        if not np.all((mask == 0.0) | (mask == 1.0)):
            raise ValueError("mask entries must be exactly 0 or 1")
        return replace(self, mask=mask)

    def copy(self) -> "Network":
        return replace(self, params=self.params.copy(), mask=self.mask.copy())


def build(specs: list[LayerSpec], rng: Rng, input_shape: tuple[int, ...] | None = None) -> Network:
    """Build a network with Kaiming-normal weights, zero biases, all-ones mask.

    Weight std is sqrt(2 / fan_in) with fan_in excluding the bias input. The
    input shape is inferred for Dense-first networks and must be given
    explicitly (C, H, W) when the first layer is convolutional.
    """
    if not specs:
        raise ValueError("empty layer list")
    if input_shape is None:
        first = specs[0]
        if isinstance(first, Dense):
            input_shape = (first.in_features,)
        else:
            raise ValueError("input_shape is required when the first layer is not Dense")
    shapes = infer_shapes(specs, input_shape)

    layout: list[tuple[int, int]] = []
    offset = 0
    for spec in specs:
        ext = param_extent(spec)
        layout.append((offset, ext))
        offset += ext
    params = np.zeros(offset, dtype=np.float64)

    for idx, spec in enumerate(specs):
        off, ext = layout[idx]
        if isinstance(spec, Dense):
            std = float(np.sqrt(2.0 / spec.in_features))
            w = rng.normal((spec.out_features, spec.in_features), 0.0, std)
            if spec.bias:
                w = np.concatenate([w, np.zeros((spec.out_features, 1))], axis=1)
            params[off:off + ext] = w.ravel()
        elif isinstance(spec, Conv2D):
            fan_in = spec.in_channels * spec.kh * spec.kw
            std = float(np.sqrt(2.0 / fan_in))
            k = rng.normal((spec.out_channels, spec.in_channels, spec.kh, spec.kw), 0.0, std)
            block = k.ravel()
            if spec.bias:
                block = np.concatenate([block, np.zeros(spec.out_channels)])
            params[off:off + ext] = block

    mask = np.ones(offset, dtype=np.float64)
    return Network(list(specs), params, mask, layout, tuple(input_shape), shapes)


def masked_params(net: Network) -> np.ndarray:
    return net.masked_params()


def _dense_weight(net: Network, idx: int, flat: np.ndarray) -> np.ndarray:
    spec = net.layers[idx]
    cols = spec.in_features + (1 if spec.bias else 0)
    return net.layer_params(idx, flat).reshape(spec.out_features, cols)


def _conv_kernel_bias(net: Network, idx: int, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    spec = net.layers[idx]
    block = net.layer_params(idx, flat)
    ksz = spec.out_channels * spec.in_channels * spec.kh * spec.kw
    kernel = block[:ksz].reshape(spec.out_channels, spec.in_channels, spec.kh, spec.kw)
    bias = block[ksz:] if spec.bias else None
    return kernel, bias


def active_output_units(net: Network) -> list[int]:
    """Active output units per parameterized layer, under the current mask.

    Dense: output neurons with at least one unmasked incoming weight.
    Conv2D: (out_ch x in_ch) kernels with at least one unmasked tap; a fully
    pruned kernel reduces the count by one. Bias entries are not kernels and
    do not contribute to conv counts.
    """
    counts = []
    for idx, spec in enumerate(net.layers):
        if isinstance(spec, Dense):
            w_mask = _dense_weight(net, idx, net.mask)
            counts.append(int(np.count_nonzero(w_mask.any(axis=1))))
        elif isinstance(spec, Conv2D):
            k_mask, _ = _conv_kernel_bias(net, idx, net.mask)
            per_kernel = k_mask.reshape(spec.out_channels * spec.in_channels, -1)
            counts.append(int(np.count_nonzero(per_kernel.any(axis=1))))
    return counts


def total_output_units(net: Network) -> list[int]:
    """Unit totals matching :func:`active_output_units` (dense mask)."""
    totals = []
    for spec in net.layers:
        if isinstance(spec, Dense):
            totals.append(spec.out_features)
        elif isinstance(spec, Conv2D):
            totals.append(spec.out_channels * spec.in_channels)
    return totals


def parameterized_layer_indices(net: Network) -> list[int]:
    return [i for i, s in enumerate(net.layers) if isinstance(s, (Dense, Conv2D))]


def check_connectivity(net: Network) -> bool:
    """True iff some input->output path has every weight unmasked.

    Computed by forward-propagating a reachability bitmask through the layer
    graph: the mask itself is used as the weights, ReLU is treated as
    identity, and pooling/conv keep their exact spatial wiring. Constant
    (bias) inputs carry no input information and are excluded.
    """
    reach = np.ones((1,) + net.input_shape, dtype=np.float64)
    for idx, spec in enumerate(net.layers):
        if isinstance(spec, Dense):
            w_mask = _dense_weight(net, idx, net.mask)[:, :spec.in_features]
            reach = (w_mask @ reach[0] > 0).astype(np.float64)[None, :]
        elif isinstance(spec, Conv2D):
            k_mask, _ = _conv_kernel_bias(net, idx, net.mask)
            reach = (tensor.conv2d(reach, k_mask, spec.stride, spec.padding) > 0).astype(np.float64)
        elif isinstance(spec, AvgPool):
            reach = (tensor.avg_pool2d(reach, spec.k, spec.stride) > 0).astype(np.float64)
        elif isinstance(spec, Flatten):
            reach = reach.reshape(1, -1)
    return bool(np.any(reach > 0))


def mlp6(in_features: int, num_classes: int, width: int = 32, bias: bool = True) -> list[LayerSpec]:
    """Reference MLP-6: six dense layers, ReLU between, width <= 64."""
    specs: list[LayerSpec] = [Dense(in_features, width, bias), ReLU()]
    for _ in range(4):
        specs += [Dense(width, width, bias), ReLU()]
    specs += [Dense(width, num_classes, bias)]
    return specs


def convnet4(in_channels: int, num_classes: int, hw: int = 8, channels: int = 8) -> list[LayerSpec]:
    """Reference ConvNet-4: three strided convs + one dense head.

    Strided convs stand in for pooling so the path formalism applies
    verbatim to every layer. Expects (in_channels, hw, hw) inputs with hw a
    multiple of 8.
    """
    if hw % 8 != 0:
        raise ValueError(f"hw must be a multiple of 8, got {hw}")
    final = (hw // 8) ** 2 * (2 * channels)
    return [
        Conv2D(in_channels, channels, 3, 3, stride=2, padding=1), ReLU(),
        Conv2D(channels, channels, 3, 3, stride=2, padding=1), ReLU(),
        Conv2D(channels, 2 * channels, 3, 3, stride=2, padding=1), ReLU(),
        Flatten(),
        Dense(final, num_classes, bias=True),
    ]


def save_checkpoint(net: Network, path) -> None:
    """Write a versioned container holding the spec list, params, and mask."""
    meta = {
        "version": CHECKPOINT_VERSION,
        "layers": [spec_to_dict(s) for s in net.layers],
        "input_shape": list(net.input_shape),
    }
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             params=net.params, mask=net.mask)


def load_checkpoint(path) -> Network:
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        layers = [spec_from_dict(d) for d in meta["layers"]]
        input_shape = tuple(meta["input_shape"])
        params = np.asarray(data["params"], dtype=np.float64)
        mask = np.asarray(data["mask"], dtype=np.float64)
    shapes = infer_shapes(layers, input_shape)
    layout = []
    offset = 0
    for spec in layers:
        ext = param_extent(spec)
        layout.append((offset, ext))
        offset += ext
    if params.size != offset or mask.size != offset:
        raise ValueError("checkpoint parameter block does not match the spec list")
    return Network(layers, params, mask, layout, input_shape, shapes)
