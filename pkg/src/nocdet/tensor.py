"""Dense float32 tensor ops with analytic forward and backward passes.

Layout conventions: feature maps are channels x height x width, conv kernels
are out x in x kh x kw, fc weights are out x in.  Values are stored as 32-bit
floats; reductions (conv/fc matmuls, softmax) accumulate in 64-bit so gradient
checks stay tight.
"""

from __future__ import annotations

import struct
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

Tensor = np.ndarray

MAGIC = b"NOCT"

_CHECKED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names the offending dimension."""


def set_checked(flag: bool) -> None:
    """Toggle finite-value validation at tensor construction (on by default)."""
    global _CHECKED
    _CHECKED = bool(flag)


def is_checked() -> bool:
    return _CHECKED


@contextmanager
def unchecked():
    """Temporarily disable finite-value validation (benchmark mode)."""
    global _CHECKED
    prev = _CHECKED
    _CHECKED = False
    try:
        yield
    finally:
        _CHECKED = prev


def as_tensor(values, shape=None) -> Tensor:
    """Coerce to a contiguous float32 array, validating finiteness in checked mode."""
    arr = np.ascontiguousarray(values, dtype=np.float32)
    if shape is not None:
        arr = arr.reshape(shape)
    if _CHECKED and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


def zeros(shape) -> Tensor:
    return np.zeros(shape, dtype=np.float32)


def effective_extent(kernel: int, dilation: int) -> int:
    return (kernel - 1) * dilation + 1


def out_extent(n: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (n + 2 * padding - effective_extent(kernel, dilation)) // stride + 1


@dataclass
class ConvParams:
    """Cross-correlation parameters: kernel (out x in x kh x kw), bias (out)."""

    kernel: Tensor
    bias: Tensor
    stride: int = 1
    padding: int = 0
    dilation: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-d (out x in x kh x kw), got rank {self.kernel.ndim}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.kernel.shape[0]:
            raise ShapeError(
                f"conv bias length {self.bias.shape} must match kernel output channels {self.kernel.shape[0]}"
            )
        if self.stride < 1:
            raise ValueError(f"stride must be >= 1, got {self.stride}")
        if self.padding < 0:
            raise ValueError(f"padding must be >= 0, got {self.padding}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be >= 1, got {self.dilation}")

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    def out_shape(self, input_shape) -> tuple[int, int, int]:
        c, h, w = input_shape
        if c != self.in_channels:
            raise ShapeError(f"conv2d: input channels {c} != kernel input channels {self.in_channels}")
        oh = out_extent(h, self.kernel.shape[2], self.stride, self.padding, self.dilation)
        ow = out_extent(w, self.kernel.shape[3], self.stride, self.padding, self.dilation)
        if oh < 1:
            raise ShapeError(f"conv2d: output height {oh} < 1 for input height {h}")
        if ow < 1:
            raise ShapeError(f"conv2d: output width {ow} < 1 for input width {w}")
        return self.out_channels, oh, ow


@dataclass
class LayerGrad:
    """Gradients mirroring a layer's forward operands."""

    d_input: Tensor
    d_weights: Tensor
    d_bias: Tensor


def _pad2d(x: Tensor, padding: int) -> Tensor:
    if padding == 0:
        return x
    c, h, w = x.shape
    out = np.zeros((c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
    out[:, padding:padding + h, padding:padding + w] = x
    return out


def _im2col(x: Tensor, p: ConvParams):
    """Unfold padded input into (in*kh*kw, oh*ow) columns."""
    _, oh, ow = p.out_shape(x.shape)
    kh, kw = p.kernel.shape[2], p.kernel.shape[3]
    xp = _pad2d(x, p.padding)
    win = np.lib.stride_tricks.sliding_window_view(
        xp, (effective_extent(kh, p.dilation), effective_extent(kw, p.dilation)), axis=(1, 2)
    )
    win = win[:, ::p.stride, ::p.stride, ::p.dilation, ::p.dilation]
    cols = win.transpose(0, 3, 4, 1, 2).reshape(x.shape[0] * kh * kw, oh * ow)
    return cols, oh, ow


def conv2d_forward(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlate a CxHxW map with stride, zero padding and dilation."""
    cols, oh, ow = _im2col(x, p)
    k2 = p.kernel.reshape(p.out_channels, -1).astype(np.float64)
    out = k2 @ cols.astype(np.float64) + p.bias.astype(np.float64)[:, None]
    return out.reshape(p.out_channels, oh, ow).astype(np.float32)


def conv2d_backward(x: Tensor, p: ConvParams, d_output: Tensor) -> LayerGrad:
    """Analytic gradients of conv2d_forward w.r.t. input, kernel and bias."""
    expected = p.out_shape(x.shape)
    if tuple(d_output.shape) != expected:
        raise ShapeError(f"conv2d_backward: d_output shape {tuple(d_output.shape)} != forward output {expected}")
    c, h, w = x.shape
    o, _, kh, kw = p.kernel.shape
    cols, oh, ow = _im2col(x, p)
    d_flat = d_output.reshape(o, oh * ow).astype(np.float64)

    d_kernel = (d_flat @ cols.astype(np.float64).T).reshape(p.kernel.shape).astype(np.float32)
    d_bias = d_flat.sum(axis=1).astype(np.float32)

    # d_input: scatter kernel-weighted cotangents back through the unfolding.
    d_cols = p.kernel.reshape(o, -1).astype(np.float64).T @ d_flat  # (c*kh*kw, oh*ow)
    d_cols = d_cols.reshape(c, kh, kw, oh, ow)
    hp, wp = h + 2 * p.padding, w + 2 * p.padding
    d_pad = np.zeros((c, hp, wp), dtype=np.float64)
    ys = p.stride * np.arange(oh)
    xs = p.stride * np.arange(ow)
    for i in range(kh):
        for j in range(kw):
            d_pad[:, ys[:, None] + i * p.dilation, xs[None, :] + j * p.dilation] += d_cols[:, i, j]
    d_input = d_pad[:, p.padding:p.padding + h, p.padding:p.padding + w].astype(np.float32)
    return LayerGrad(d_input=d_input, d_weights=d_kernel, d_bias=d_bias)


def fc_forward(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Affine map weights @ x + bias over a flattened input."""
    if x.ndim != 1:
        x = x.reshape(-1)
    if weights.shape[1] != x.shape[0]:
        raise ShapeError(f"fc: input length {x.shape[0]} != weight input dimension {weights.shape[1]}")
    if bias.shape[0] != weights.shape[0]:
        raise ShapeError(f"fc: bias length {bias.shape[0]} != weight output dimension {weights.shape[0]}")
    out = weights.astype(np.float64) @ x.astype(np.float64) + bias.astype(np.float64)
    return out.astype(np.float32)


def fc_backward(x: Tensor, weights: Tensor, d_output: Tensor) -> LayerGrad:
    if x.ndim != 1:
        x = x.reshape(-1)
    if d_output.shape[0] != weights.shape[0]:
        raise ShapeError(f"fc backward: d_output length {d_output.shape[0]} != weight output dimension {weights.shape[0]}")
    d64 = d_output.astype(np.float64)
    d_input = (weights.astype(np.float64).T @ d64).astype(np.float32)
    d_weights = np.outer(d64, x.astype(np.float64)).astype(np.float32)
    d_bias = d_output.astype(np.float32).copy()
    return LayerGrad(d_input=d_input, d_weights=d_weights, d_bias=d_bias)


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0.0).astype(np.float32)


def relu_backward(x: Tensor, d_output: Tensor) -> Tensor:
    """Masked cotangent; the subgradient at exactly 0 is taken as 0."""
    return (d_output * (x > 0)).astype(np.float32)


def softmax_xent(logits: Tensor, label: int):
    """Stabilized softmax cross-entropy; returns (loss, d_logits = p - onehot)."""
    n = logits.shape[0]
    if not 0 <= label < n:
        raise ValueError(f"label {label} out of range [0, {n - 1}]")
    z = logits.astype(np.float64)
    z = z - z.max()
    lse = np.log(np.exp(z).sum())
    loss = lse - z[label]
    d = np.exp(z - lse)
    d[label] -= 1.0
    return float(loss), d.astype(np.float32)


def elementwise_max(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise_max: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")
    return np.maximum(a, b).astype(np.float32)


def elementwise_max_backward(a: Tensor, b: Tensor, d_output: Tensor):
    """Route each cotangent to the larger source; ties go to the first operand."""
    if a.shape != b.shape or d_output.shape != a.shape:
        raise ShapeError(
            f"elementwise_max backward: shapes {tuple(a.shape)}, {tuple(b.shape)}, {tuple(d_output.shape)} differ"
        )
    first = a >= b
    d_a = np.where(first, d_output, 0.0).astype(np.float32)
    d_b = np.where(first, 0.0, d_output).astype(np.float32)
    return d_a, d_b


# --- binary serialization: magic "NOCT", u32 rank, u32 extents, raw f32 LE ---

def write_tensor(fh, arr: Tensor) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    fh.write(MAGIC)
    fh.write(struct.pack("<I", arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    fh.write(arr.tobytes())


def read_tensor(fh) -> Tensor:
    magic = fh.read(4)
    if magic != MAGIC:
        raise ValueError(f"bad tensor blob magic {magic!r}")
    (rank,) = struct.unpack("<I", fh.read(4))
    shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise ValueError("truncated tensor blob")
    arr = np.frombuffer(raw, dtype="<f4", count=count).reshape(shape)
    return as_tensor(arr)


def save_tensor(path, arr: Tensor) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> Tensor:
    with open(path, "rb") as fh:
        return read_tensor(fh)


def save_tensors(path, arrays) -> None:
    """Write several tensors back to back into one blob file."""
    with open(path, "wb") as fh:
        for arr in arrays:
            write_tensor(fh, arr)


def load_tensors(path) -> list[Tensor]:
    out = []
    with open(path, "rb") as fh:
        while True:
            head = fh.read(4)
            if not head:
                break
            if head != MAGIC:
                raise ValueError(f"bad tensor blob magic {head!r}")
            (rank,) = struct.unpack("<I", fh.read(4))
            shape = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(shape, dtype=np.int64)) if rank else 1
            raw = fh.read(4 * count)
            if len(raw) != 4 * count:
                raise ValueError("truncated tensor blob")
            out.append(as_tensor(np.frombuffer(raw, dtype="<f4", count=count).reshape(shape)))
    return out
