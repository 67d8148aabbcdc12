"""Shared backbone features at multiple image scales, RoI pooling, and the
stride-reduction (dilation) transform that halves a backbone's feature stride."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import (
    ConvParams,
    LayerGrad,
    ShapeError,
    Tensor,
    conv2d_backward,
    conv2d_forward,
    effective_extent,
    relu,
    relu_backward,
)


class RoiError(ValueError):
    """A region projects to an empty window on the feature map."""


# --- backbone layers ---

@dataclass
class ConvLayer:
    params: ConvParams

    @property
    def stride(self) -> int:
        return self.params.stride

    def clone(self) -> "ConvLayer":
        # Weight arrays are shared; hyperparameters are per-clone.
        return ConvLayer(replace(self.params))


@dataclass
class ReluLayer:
    stride: int = 1

    def clone(self) -> "ReluLayer":
        return ReluLayer()


@dataclass
class MaxPoolLayer:
    kernel: int = 2
    stride: int = 2
    dilation: int = 1

    def clone(self) -> "MaxPoolLayer":
        return MaxPoolLayer(self.kernel, self.stride, self.dilation)


def max_pool_forward(x: Tensor, kernel: int, stride: int, dilation: int = 1):
    """Unpadded max pooling; returns (out, argmax of flat spatial indices)."""
    c, h, w = x.shape
    eff = effective_extent(kernel, dilation)
    if h < eff or w < eff:
        raise ShapeError(f"max_pool: input {h}x{w} smaller than effective window {eff}")
    win = np.lib.stride_tricks.sliding_window_view(x, (eff, eff), axis=(1, 2))
    win = win[:, ::stride, ::stride, ::dilation, ::dilation]
    _, oh, ow, _, _ = win.shape
    flat = win.reshape(c, oh, ow, kernel * kernel)
    idx = flat.argmax(axis=3)  # ties resolve to the smallest in-window flat index
    out = np.take_along_axis(flat, idx[..., None], axis=3)[..., 0].astype(np.float32)
    ys = (stride * np.arange(oh))[None, :, None]
    xs = (stride * np.arange(ow))[None, None, :]
    abs_y = ys + (idx // kernel) * dilation
    abs_x = xs + (idx % kernel) * dilation
    return out, (abs_y * w + abs_x).astype(np.int64)


def max_pool_backward(d_output: Tensor, argmax: np.ndarray, input_shape) -> Tensor:
    c, h, w = input_shape
    d_input = np.zeros((c, h * w), dtype=np.float32)
    flat_idx = argmax.reshape(c, -1)
    np.add.at(d_input, (np.arange(c)[:, None], flat_idx), d_output.reshape(c, -1))
    return d_input.reshape(c, h, w)


@dataclass
class Backbone:
    """Ordered conv/relu/maxpool stack with a known cumulative feature stride."""

    layers: list

    @property
    def stride(self) -> int:
        s = 1
        for layer in self.layers:
            s *= layer.stride
        return s

    @property
    def out_channels(self) -> int:
        for layer in reversed(self.layers):
            if isinstance(layer, ConvLayer):
                return layer.params.out_channels
        raise ValueError("backbone has no conv layer")

    @property
    def in_channels(self) -> int:
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                return layer.params.in_channels
        raise ValueError("backbone has no conv layer")

    def clone(self) -> "Backbone":
        return Backbone([layer.clone() for layer in self.layers])

    def min_input_extent(self) -> int:
        """Smallest square input extent the layer stack accepts."""
        for n in range(1, 512):
            if self._extent_after(n) >= 1:
                return n
        raise ValueError("backbone accepts no input up to extent 512")

    def _extent_after(self, n: int) -> int:
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                k = layer.params.kernel.shape[2]
                n = (n + 2 * layer.params.padding - effective_extent(k, layer.params.dilation)) // layer.params.stride + 1
            elif isinstance(layer, MaxPoolLayer):
                n = (n - effective_extent(layer.kernel, layer.dilation)) // layer.stride + 1
            if n < 1:
                return 0
        return n

    def forward(self, image: Tensor) -> Tensor:
        out, _ = forward_layers(self.layers, image)
        return out

    def parameters(self):
        out = []
        for layer in self.layers:
            if isinstance(layer, ConvLayer):
                out.extend([layer.params.kernel, layer.params.bias])
        return out


def forward_layers(layers, x: Tensor):
    """Run a layer stack keeping per-layer caches for backprop."""
    caches = []
    for layer in layers:
        if isinstance(layer, ConvLayer):
            caches.append(("conv", x, layer.params))
            x = conv2d_forward(x, layer.params)
        elif isinstance(layer, ReluLayer):
            caches.append(("relu", x, None))
            x = relu(x)
        elif isinstance(layer, MaxPoolLayer):
            out, argmax = max_pool_forward(x, layer.kernel, layer.stride, layer.dilation)
            caches.append(("pool", (x.shape, argmax), None))
            x = out
        else:
            raise TypeError(f"unknown layer {layer!r}")
    return x, caches


def backward_layers(layers, caches, d_out: Tensor):
    """Backprop a layer stack; returns (d_input, per-conv-layer LayerGrad map)."""
    grads: dict[int, LayerGrad] = {}
    for i in range(len(layers) - 1, -1, -1):
        kind, cache, params = caches[i]
        if kind == "conv":
            g = conv2d_backward(cache, params, d_out)
            grads[i] = g
            d_out = g.d_input
        elif kind == "relu":
            d_out = relu_backward(cache, d_out)
        else:
            in_shape, argmax = cache
            d_out = max_pool_backward(d_out, argmax, in_shape)
    return d_out, grads


def make_backbone(rng: np.random.Generator, in_channels: int = 1, channels: int = 32,
                  weight_scale: float = 0.5) -> Backbone:
    """Two 3x3 conv + relu + 2x2 pool blocks; cumulative stride 4."""
    def conv(cin, cout):
        k = (rng.standard_normal((cout, cin, 3, 3)) * weight_scale / np.sqrt(cin * 9.0)).astype(np.float32)
        return ConvLayer(ConvParams(kernel=k, bias=np.zeros(cout, dtype=np.float32), stride=1, padding=1))

    return Backbone([
        conv(in_channels, channels), ReluLayer(), MaxPoolLayer(),
        conv(channels, channels), ReluLayer(), MaxPoolLayer(),
    ])


# --- feature pyramid ---

@dataclass
class PyramidLevel:
    scale: float
    feature_map: Tensor
    stride: int


@dataclass
class FeaturePyramid:
    levels: list[PyramidLevel]
    source_size: tuple[int, int]

    def __len__(self) -> int:
        return len(self.levels)

    def pool(self, level_index: int, region: "Region", m: int) -> "PooledFeature":
        """RoI-pool a region (image coordinates) from one pyramid level."""
        level = self.levels[level_index]
        scaled = Region(region.x1 * level.scale, region.y1 * level.scale,
                        region.x2 * level.scale, region.y2 * level.scale)
        return roi_pool(level.feature_map, scaled, level.stride, m)


def bilinear_resize(image: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resample with half-pixel centers, clamped at the borders."""
    c, h, w = image.shape
    sy = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0.0, h - 1.0)
    sx = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0.0, w - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0).astype(np.float32)[None, :, None]
    wx = (sx - x0).astype(np.float32)[None, None, :]
    tl = image[:, y0[:, None], x0[None, :]]
    tr = image[:, y0[:, None], x1[None, :]]
    bl = image[:, y1[:, None], x0[None, :]]
    br = image[:, y1[:, None], x1[None, :]]
    top = tl * (1 - wx) + tr * wx
    bot = bl * (1 - wx) + br * wx
    return (top * (1 - wy) + bot * wy).astype(np.float32)


def build_pyramid(image: Tensor, backbone: Backbone, scales) -> FeaturePyramid:
    """Resize the image to each scale and run the shared backbone."""
    scales = list(scales)
    if not scales:
        raise ValueError("scales must be non-empty")
    if any(s <= 0 for s in scales):
        raise ValueError(f"scales must be positive, got {scales}")
    if any(b <= a for a, b in zip(scales, scales[1:])):
        raise ValueError(f"scales must be strictly increasing, got {scales}")
    _, h, w = image.shape
    min_extent = backbone.min_input_extent()
    levels = []
    for s in scales:
        rh, rw = int(np.floor(s * h)), int(np.floor(s * w))
        if rh < min_extent or rw < min_extent:
            raise ValueError(
                f"scale {s} resizes {h}x{w} to {rh}x{rw}, below the backbone's minimum input extent {min_extent}"
            )
        resized = bilinear_resize(image, rh, rw) if (rh, rw) != (h, w) else image
        levels.append(PyramidLevel(scale=float(s), feature_map=backbone.forward(resized), stride=backbone.stride))
    return FeaturePyramid(levels=levels, source_size=(h, w))


# --- regions and RoI pooling ---

@dataclass
class Region:
    """Axis-aligned box in image pixels, inclusive-exclusive corners."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate region ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def clipped(self, width: int, height: int) -> "Region":
        return Region(max(0.0, min(self.x1, width - 1.0)), max(0.0, min(self.y1, height - 1.0)),
                      max(1.0, min(self.x2, float(width))), max(1.0, min(self.y2, float(height))))

    def as_tuple(self):
        return (self.x1, self.y1, self.x2, self.y2)


def select_scale(region: Region, pyramid: FeaturePyramid, target_extent: float = 64.0) -> int:
    """Level whose scaled region extent is closest to the target; ties pick the smaller scale."""
    if not pyramid.levels:
        raise ValueError("empty pyramid")
    extent = float(np.sqrt(region.area))
    best, best_dist = 0, None
    for i, level in enumerate(pyramid.levels):
        dist = abs(level.scale * extent - target_extent)
        if best_dist is None or dist < best_dist:
            best, best_dist = i, dist
    return best


def select_adjacent_scales(region: Region, pyramid: FeaturePyramid, target_extent: float = 64.0):
    """The two consecutive levels around the single best scale choice."""
    n = len(pyramid.levels)
    if n < 2:
        raise ValueError("adjacent-scale selection needs >= 2 pyramid levels; use single-scale mode")
    best = select_scale(region, pyramid, target_extent)
    if best == 0:
        return 0, 1
    if best == n - 1:
        return n - 2, n - 1
    extent = float(np.sqrt(region.area))
    d_prev = abs(pyramid.levels[best - 1].scale * extent - target_extent)
    d_next = abs(pyramid.levels[best + 1].scale * extent - target_extent)
    if d_prev <= d_next:  # ties pick the smaller neighbouring scale
        return best - 1, best
    return best, best + 1


@dataclass
class PooledFeature:
    """Fixed m x m pooled region with per-cell argmax provenance for backprop."""

    data: Tensor
    argmax: np.ndarray  # flat spatial index into the source map, per channel and cell
    map_shape: tuple[int, int, int]


def roi_pool(feature_map: Tensor, region: Region, stride: int, m: int) -> PooledFeature:
    """Max-pool a projected region into an m x m grid per channel.

    Projection: floor for the start coordinate, ceil for the end; bin i covers
    [floor(i*w/m), ceil((i+1)*w/m)) of the projected window.  Argmax ties take
    the smallest flat spatial index so the backward scatter is deterministic.
    """
    if m < 1:
        raise ValueError(f"pool resolution m must be >= 1, got {m}")
    c, h, w = feature_map.shape
    px1 = max(0, int(np.floor(region.x1 / stride)))
    py1 = max(0, int(np.floor(region.y1 / stride)))
    px2 = min(w, int(np.ceil(region.x2 / stride)))
    py2 = min(h, int(np.ceil(region.y2 / stride)))
    pw, ph = px2 - px1, py2 - py1
    if pw < 1 or ph < 1:
        raise RoiError(f"region {region.as_tuple()} projects to an empty window at stride {stride}")

    data = np.empty((c, m, m), dtype=np.float32)
    argmax = np.empty((c, m, m), dtype=np.int64)
    chans = np.arange(c)
    for by in range(m):
        y0 = py1 + (by * ph) // m
        y1 = py1 + -((-(by + 1) * ph) // m)
        for bx in range(m):
            x0 = px1 + (bx * pw) // m
            x1 = px1 + -((-(bx + 1) * pw) // m)
            patch = feature_map[:, y0:y1, x0:x1]
            flat = patch.reshape(c, -1)
            idx = flat.argmax(axis=1)
            data[:, by, bx] = flat[chans, idx]
            argmax[:, by, bx] = (y0 + idx // (x1 - x0)) * w + (x0 + idx % (x1 - x0))
    return PooledFeature(data=data, argmax=argmax, map_shape=(c, h, w))


def roi_pool_backward(pooled: PooledFeature, d_pooled: Tensor, map_shape) -> Tensor:
    """Scatter-add pooled cotangents to their recorded argmax source cells."""
    c, h, w = map_shape
    if tuple(d_pooled.shape) != tuple(pooled.data.shape):
        raise ShapeError(f"roi_pool_backward: d_pooled shape {tuple(d_pooled.shape)} != pooled {tuple(pooled.data.shape)}")
    if tuple(map_shape) != tuple(pooled.map_shape):
        raise ShapeError(f"roi_pool_backward: map shape {tuple(map_shape)} != recorded {pooled.map_shape}")
    d_map = np.zeros((c, h * w), dtype=np.float32)
    np.add.at(d_map, (np.arange(c)[:, None], pooled.argmax.reshape(c, -1)), d_pooled.reshape(c, -1))
    return d_map.reshape(c, h, w)


# --- stride reduction via dilation ---

def atrous_transform(backbone: Backbone) -> Backbone:
    """Turn the last stride-2 layer into stride 1 and dilate everything after it.

    The transformed map restricted to the original (even) stride grid equals the
    untransformed map; the cumulative feature stride halves.
    """
    out = backbone.clone()
    last = None
    for i, layer in enumerate(out.layers):
        if layer.stride == 2:
            last = i
    if last is None:
        raise ValueError("atrous_transform: backbone has no stride-2 layer")
    target = out.layers[last]
    if isinstance(target, ConvLayer):
        target.params.stride = 1
    else:
        target.stride = 1
    for layer in out.layers[last + 1:]:
        if isinstance(layer, ConvLayer):
            layer.params.dilation *= 2
            layer.params.padding *= 2
        elif isinstance(layer, MaxPoolLayer):
            layer.dilation *= 2
    return out
