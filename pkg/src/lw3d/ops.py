"""Neural operators on rank-5 tensors.

3D convolution ships as two independent implementations with identical
contracts: ``conv3d_direct`` accumulates shifted input slices per kernel
offset, ``conv3d_lowered`` builds a patch matrix and multiplies.  Both
accumulate in float64 and store float32, so their outputs agree to well
under 1e-4 and each serves as an oracle for the other.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Shape5, Tensor5D

Triple = tuple[int, int, int]


def _out_extent(size: int, pad: int, kernel: int, stride: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


@dataclass(frozen=True)
class Conv3DSpec:
    """Bias-free 3D convolution; in/out channels must divide by ``groups``."""

    in_channels: int
    out_channels: int
    kernel: Triple
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)
    groups: int = 1

    def __post_init__(self):
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise ValueError("channel and group counts must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ValueError(
                f"channels ({self.in_channels}->{self.out_channels}) "
                f"not divisible by groups={self.groups}"
            )
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ValueError("kernel and stride components must be positive")
        if any(p < 0 for p in self.padding):
            raise ValueError("padding must be nonnegative")

    @property
    def param_count(self) -> int:
        kt, kh, kw = self.kernel
        return self.out_channels * (self.in_channels // self.groups) * kt * kh * kw

    @property
    def weight_shape(self) -> tuple[int, int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_shape(self, x: Shape5) -> Shape5:
        if x.c != self.in_channels:
            raise ValueError(f"input has {x.c} channels, spec wants {self.in_channels}")
        dims = [
            _out_extent(s, p, k, st)
            for s, p, k, st in zip(
                (x.t, x.h, x.w), self.padding, self.kernel, self.stride
            )
        ]
        if any(d < 1 for d in dims):
            raise ValueError(f"nonpositive conv output extent {dims} for input {tuple(x)}")
        return Shape5(x.n, self.out_channels, *dims)


@dataclass(frozen=True)
class PoolSpec:
    kind: str  # "max" | "avg"
    kernel: Triple
    stride: Triple = (1, 1, 1)
    padding: Triple = (0, 0, 0)

    def __post_init__(self):
        if self.kind not in ("max", "avg"):
            raise ValueError(f"unknown pool kind {self.kind!r}")
        if any(k < 1 for k in self.kernel) or any(s < 1 for s in self.stride):
            raise ValueError("kernel and stride components must be positive")

    def output_shape(self, x: Shape5) -> Shape5:
        dims = [
            _out_extent(s, p, k, st)
            for s, p, k, st in zip(
                (x.t, x.h, x.w), self.padding, self.kernel, self.stride
            )
        ]
        if any(d < 1 for d in dims):
            raise ValueError(f"nonpositive pool output extent {dims} for input {tuple(x)}")
        return Shape5(x.n, x.c, *dims)


@dataclass
class BatchNormParams:
    """Inference-mode batch norm: y = gamma * (x - mean) / sqrt(var + eps) + beta."""

    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        self.gamma = np.asarray(self.gamma, dtype=np.float64).ravel()
        self.beta = np.asarray(self.beta, dtype=np.float64).ravel()
        self.mean = np.asarray(self.mean, dtype=np.float64).ravel()
        self.var = np.asarray(self.var, dtype=np.float64).ravel()
        c = len(self.gamma)
        if not (len(self.beta) == len(self.mean) == len(self.var) == c):
            raise ValueError("batch-norm vectors must share one length")
        if np.any(self.var < 0):
            raise ValueError("variance must be nonnegative")
        if self.eps <= 0:
            raise ValueError("eps must be positive")

    @classmethod
    def identity(cls, channels: int, eps: float = 1e-5) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels),
            beta=np.zeros(channels),
            mean=np.zeros(channels),
            var=np.ones(channels),
            eps=eps,
        )


@dataclass
class MacCounter:
    """Tally of multiply-accumulates actually performed by convolution calls."""

    macs: int = 0
    per_layer: dict = field(default_factory=dict)

    def add(self, count: int, tag: str | None = None):
        self.macs += count
        if tag is not None:
            self.per_layer[tag] = self.per_layer.get(tag, 0) + count


def _pad_input(x: np.ndarray, padding: Triple, value: float = 0.0) -> np.ndarray:
    pt, ph, pw = padding
    if pt == ph == pw == 0:
        return x
    return np.pad(
        x,
        ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)),
        mode="constant",
        constant_values=value,
    )


def _offset_view(
    xp: np.ndarray, offset: Triple, out_dims: Triple, stride: Triple
) -> np.ndarray:
    """Strided view of the padded input aligned to one kernel offset."""
    dt, dh, dw = offset
    ot, oh, ow = out_dims
    st, sh, sw = stride
    return xp[
        :,
        :,
        dt : dt + ot * st : st,
        dh : dh + oh * sh : sh,
        dw : dw + ow * sw : sw,
    ]


def conv3d_direct(
    x: Tensor5D,
    spec: Conv3DSpec,
    weights: np.ndarray,
    counter: MacCounter | None = None,
    tag: str | None = None,
) -> Tensor5D:
    """Direct convolution: accumulate one shifted input slice per kernel tap."""
    out_shape = spec.output_shape(x.shape)
    w = _check_weights(spec, weights)
    xp = _pad_input(x.data.astype(np.float64), spec.padding)
    kt, kh, kw = spec.kernel
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    out_dims = (out_shape.t, out_shape.h, out_shape.w)
    out = np.zeros(out_shape, dtype=np.float64)
    for g in range(spec.groups):
        xg = xp[:, g * cg : (g + 1) * cg]
        wg = w[g * og : (g + 1) * og].astype(np.float64)
        acc = out[:, g * og : (g + 1) * og]
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    view = _offset_view(xg, (dt, dh, dw), out_dims, spec.stride)
                    acc += np.einsum("oc,ncthw->nothw", wg[:, :, dt, dh, dw], view)
    if counter is not None:
        kvol = kt * kh * kw
        counter.add(out_shape.size * cg * kvol, tag)
    return Tensor5D(out.astype(np.float32))


def _im2col(
    xp: np.ndarray, kernel: Triple, out_dims: Triple, stride: Triple
) -> np.ndarray:
    """(n, c*kvol, L) patch matrix from a padded input."""
    n, c = xp.shape[:2]
    kt, kh, kw = kernel
    ot, oh, ow = out_dims
    cols = np.empty((n, c, kt * kh * kw, ot, oh, ow), dtype=np.float64)
    k = 0
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                cols[:, :, k] = _offset_view(xp, (dt, dh, dw), out_dims, stride)
                k += 1
    return cols.reshape(n, c * kt * kh * kw, ot * oh * ow)


def conv3d_lowered(
    x: Tensor5D,
    spec: Conv3DSpec,
    weights: np.ndarray,
    counter: MacCounter | None = None,
    tag: str | None = None,
) -> Tensor5D:
    """Convolution by patch-matrix lowering and matrix multiply."""
    out_shape = spec.output_shape(x.shape)
    w = _check_weights(spec, weights)
    xp = _pad_input(x.data.astype(np.float64), spec.padding)
    cg = spec.in_channels // spec.groups
    og = spec.out_channels // spec.groups
    out_dims = (out_shape.t, out_shape.h, out_shape.w)
    out = np.empty(out_shape, dtype=np.float64)
    for g in range(spec.groups):
        cols = _im2col(
            xp[:, g * cg : (g + 1) * cg], spec.kernel, out_dims, spec.stride
        )
        wmat = w[g * og : (g + 1) * og].reshape(og, -1).astype(np.float64)
        out[:, g * og : (g + 1) * og] = (wmat @ cols).reshape(
            x.n, og, *out_dims
        )
    if counter is not None:
        kvol = spec.kernel[0] * spec.kernel[1] * spec.kernel[2]
        counter.add(out_shape.size * cg * kvol, tag)
    return Tensor5D(out.astype(np.float32))


def _check_weights(spec: Conv3DSpec, weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights)
    if w.shape != spec.weight_shape:
        raise ValueError(f"weights shape {w.shape} != expected {spec.weight_shape}")
    return w


def channel_shuffle(x: Tensor5D, groups: int) -> Tensor5D:
    """Reshape-transpose shuffle: channel i*n + j moves to j*g + i (n = c/g)."""
    if groups < 1 or x.c % groups:
        raise ValueError(f"channels {x.c} not divisible by groups {groups}")
    n, c, t, h, w = x.data.shape
    per = c // groups
    y = (
        x.data.reshape(n, groups, per, t, h, w)
        .transpose(0, 2, 1, 3, 4, 5)
        .reshape(n, c, t, h, w)
    )
    return Tensor5D(np.ascontiguousarray(y))


def pool3d(x: Tensor5D, spec: PoolSpec) -> Tensor5D:
    """Max pooling pads with -inf; average pooling pads with zeros and always
    divides by the full kernel volume."""
    out_shape = spec.output_shape(x.shape)
    out_dims = (out_shape.t, out_shape.h, out_shape.w)
    kt, kh, kw = spec.kernel
    if spec.kind == "max":
        xp = _pad_input(x.data, spec.padding, value=-np.inf)
        out = np.full(out_shape, -np.inf, dtype=np.float32)
        for dt in range(kt):
            for dh in range(kh):
                for dw in range(kw):
                    np.maximum(
                        out,
                        _offset_view(xp, (dt, dh, dw), out_dims, spec.stride),
                        out=out,
                    )
        return Tensor5D(out)
    xp = _pad_input(x.data.astype(np.float64), spec.padding)
    out = np.zeros(out_shape, dtype=np.float64)
    for dt in range(kt):
        for dh in range(kh):
            for dw in range(kw):
                out += _offset_view(xp, (dt, dh, dw), out_dims, spec.stride)
    return Tensor5D((out / (kt * kh * kw)).astype(np.float32))


def batchnorm_infer(x: Tensor5D, p: BatchNormParams) -> Tensor5D:
    if len(p.gamma) != x.c:
        raise ValueError(f"batch-norm has {len(p.gamma)} channels, input has {x.c}")
    scale = (p.gamma / np.sqrt(p.var + p.eps)).reshape(1, -1, 1, 1, 1)
    shift = (p.beta - p.mean * p.gamma / np.sqrt(p.var + p.eps)).reshape(1, -1, 1, 1, 1)
    return Tensor5D((x.data.astype(np.float64) * scale + shift).astype(np.float32))


def softmax_channels(x: Tensor5D) -> Tensor5D:
    """Exp-normalize over the channel axis at every (n, t, h, w) site."""
    z = x.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return Tensor5D((e / e.sum(axis=1, keepdims=True)).astype(np.float32))


def glorot_uniform(spec: Conv3DSpec, rng: np.random.Generator) -> np.ndarray:
    """Seeded uniform init in +-sqrt(6 / (fan_in + fan_out)) for reproducible
    cross-implementation tests."""
    kvol = math.prod(spec.kernel)
    fan_in = (spec.in_channels // spec.groups) * kvol
    fan_out = (spec.out_channels // spec.groups) * kvol
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=spec.weight_shape).astype(np.float32)
