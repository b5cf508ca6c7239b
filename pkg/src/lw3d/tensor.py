"""Dense rank-5 video tensors in fixed NCTHW layout.

Everything in this toolkit moves data as ``Tensor5D``: a contiguous
32-bit float buffer ordered (batch, channel, time, height, width) with
width fastest.  Channel split/concat are therefore contiguous block
operations, and the binary file format is bit-exact across platforms.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

MAGIC = b"LW3D"
FORMAT_VERSION = 1


class Shape5(NamedTuple):
    """Dimensions of a rank-5 tensor; all components >= 1 for valid tensors."""

    n: int
    c: int
    t: int
    h: int
    w: int

    @property
    def size(self) -> int:
        return self.n * self.c * self.t * self.h * self.w


@dataclass(frozen=True)
class Tensor5D:
    """Immutable rank-5 float32 tensor.

    ``data`` is a C-contiguous ndarray of shape (n, c, t, h, w); element
    (n, c, t, h, w) lives at flat index ((((n*C + c)*T + t)*H + h)*W + w.
    Callers must not mutate ``data`` after construction.
    """

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 5:
            raise ValueError(f"expected 5 dims, got {self.data.ndim}")
        if any(d < 1 for d in self.data.shape):
            raise ValueError(f"all dims must be >= 1, got {self.data.shape}")
        if self.data.dtype != np.float32 or not self.data.flags["C_CONTIGUOUS"]:
            object.__setattr__(
                self, "data", np.ascontiguousarray(self.data, dtype=np.float32)
            )

    @property
    def shape(self) -> Shape5:
        return Shape5(*self.data.shape)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def c(self) -> int:
        return self.data.shape[1]

    @property
    def t(self) -> int:
        return self.data.shape[2]

    @property
    def h(self) -> int:
        return self.data.shape[3]

    @property
    def w(self) -> int:
        return self.data.shape[4]

    def __eq__(self, other) -> bool:
        return isinstance(other, Tensor5D) and np.array_equal(self.data, other.data)


def zeros(shape: Shape5 | tuple) -> Tensor5D:
    shape = Shape5(*shape)
    if any(d < 1 for d in shape):
        raise ValueError(f"all shape components must be >= 1, got {shape}")
    return Tensor5D(np.zeros(shape, dtype=np.float32))


def from_array(a: np.ndarray) -> Tensor5D:
    return Tensor5D(np.asarray(a, dtype=np.float32).reshape(a.shape))


def concat_channels(parts: Sequence[Tensor5D]) -> Tensor5D:
    """Concatenate along the channel axis; part k occupies a contiguous block."""
    if not parts:
        raise ValueError("concat_channels requires at least one part")
    ref = parts[0].shape
    for i, p in enumerate(parts[1:], start=1):
        s = p.shape
        if (s.n, s.t, s.h, s.w) != (ref.n, ref.t, ref.h, ref.w):
            raise ValueError(
                f"part {i} has shape {tuple(s)}, incompatible with {tuple(ref)}"
            )
    return Tensor5D(np.concatenate([p.data for p in parts], axis=1))


def split_channels(x: Tensor5D, sizes: Sequence[int]) -> list[Tensor5D]:
    """Inverse of concat_channels; ``sizes`` must sum to x.c."""
    if any(s <= 0 for s in sizes):
        raise ValueError(f"split sizes must be positive, got {list(sizes)}")
    if sum(sizes) != x.c:
        raise ValueError(f"split sizes sum to {sum(sizes)}, expected {x.c}")
    out = []
    start = 0
    for s in sizes:
        out.append(Tensor5D(np.ascontiguousarray(x.data[:, start : start + s])))
        start += s
    return out


def map_elementwise(x: Tensor5D, f: Callable[[float], float]) -> Tensor5D:
    return Tensor5D(np.vectorize(f, otypes=[np.float32])(x.data))


def relu(x: Tensor5D) -> Tensor5D:
    return Tensor5D(np.maximum(x.data, np.float32(0.0)))


def save_tensor(path, x: Tensor5D) -> None:
    """Write the portable binary format: magic, version byte, five u64 LE dims,
    then the float32 LE payload in layout order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(bytes([FORMAT_VERSION]))
        f.write(struct.pack("<5Q", *x.shape))
        f.write(np.ascontiguousarray(x.data, dtype="<f4").tobytes())


def load_tensor(path) -> Tensor5D:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version = f.read(1)
        if version != bytes([FORMAT_VERSION]):
            raise ValueError(f"{path}: unsupported format version {version!r}")
        dims = struct.unpack("<5Q", f.read(40))
        count = int(np.prod([int(d) for d in dims], dtype=np.int64))
        payload = f.read(4 * count)
        if len(payload) != 4 * count:
            raise ValueError(f"{path}: truncated payload")
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    return Tensor5D(data)
