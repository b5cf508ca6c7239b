import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lw3d import tensor
from lw3d.tensor import Shape5, Tensor5D


def rand_tensor(rng, shape):
    return Tensor5D(rng.standard_normal(shape).astype(np.float32))


class TestTensor5D:
    def test_layout_index_formula(self):
        # element (n,c,t,h,w) must live at ((((n*C+c)*T+t)*H+h)*W+w
        n_, c_, t_, h_, w_ = 2, 3, 2, 2, 3
        data = np.arange(n_ * c_ * t_ * h_ * w_, dtype=np.float32).reshape(
            n_, c_, t_, h_, w_
        )
        x = Tensor5D(data)
        flat = x.data.reshape(-1)
        for n in range(n_):
            for c in range(c_):
                for t in range(t_):
                    for h in range(h_):
                        for w in range(w_):
                            idx = ((((n * c_ + c) * t_ + t) * h_ + h) * w_ + w)
                            assert flat[idx] == x.data[n, c, t, h, w]

    def test_rejects_wrong_rank(self):
        with pytest.raises(ValueError):
            Tensor5D(np.zeros((2, 3, 4), dtype=np.float32))

    def test_rejects_zero_dim(self):
        with pytest.raises(ValueError):
            Tensor5D(np.zeros((1, 0, 2, 2, 2), dtype=np.float32))

    def test_coerces_dtype_and_contiguity(self):
        x = Tensor5D(np.zeros((1, 2, 2, 2, 2), dtype=np.float64))
        assert x.data.dtype == np.float32
        assert x.data.flags["C_CONTIGUOUS"]

    def test_shape_properties(self):
        x = tensor.zeros((2, 3, 4, 5, 6))
        assert x.shape == Shape5(2, 3, 4, 5, 6)
        assert (x.n, x.c, x.t, x.h, x.w) == (2, 3, 4, 5, 6)
        assert x.shape.size == 720


def test_zeros_is_all_zero():
    x = tensor.zeros(Shape5(1, 2, 3, 4, 5))
    assert not x.data.any()


def test_zeros_rejects_invalid():
    with pytest.raises(ValueError):
        tensor.zeros((1, 2, 0, 4, 5))


def test_relu_definition():
    x = tensor.from_array(np.array([-1.0, 0.0, 4.0]).reshape(1, 3, 1, 1, 1))
    y = tensor.relu(x)
    assert y.data.reshape(-1).tolist() == [0.0, 0.0, 4.0]


def test_relu_idempotent():
    rng = np.random.default_rng(0)
    x = rand_tensor(rng, (2, 3, 4, 5, 6))
    once = tensor.relu(x)
    assert tensor.relu(once) == once


def test_map_elementwise_matches_relu():
    rng = np.random.default_rng(1)
    x = rand_tensor(rng, (1, 4, 2, 3, 3))
    assert tensor.map_elementwise(x, lambda v: max(0.0, v)) == tensor.relu(x)


@st.composite
def tensor_and_partition(draw):
    c = draw(st.integers(min_value=1, max_value=12))
    n = draw(st.integers(min_value=1, max_value=2))
    t = draw(st.integers(min_value=1, max_value=3))
    h = draw(st.integers(min_value=1, max_value=3))
    w = draw(st.integers(min_value=1, max_value=3))
    seed = draw(st.integers(min_value=0, max_value=2**31))
    # random composition of c into positive parts
    sizes = []
    left = c
    while left:
        s = draw(st.integers(min_value=1, max_value=left))
        sizes.append(s)
        left -= s
    data = np.random.default_rng(seed).standard_normal((n, c, t, h, w))
    return Tensor5D(data.astype(np.float32)), sizes


@settings(max_examples=120, deadline=None)
@given(tensor_and_partition())
def test_split_concat_round_trip(case):
    x, sizes = case
    parts = tensor.split_channels(x, sizes)
    assert [p.c for p in parts] == sizes
    assert tensor.concat_channels(parts) == x


def test_split_rejects_bad_sizes():
    x = tensor.zeros((1, 4, 1, 1, 1))
    with pytest.raises(ValueError):
        tensor.split_channels(x, [2, 3])
    with pytest.raises(ValueError):
        tensor.split_channels(x, [4, 0])


def test_concat_rejects_mismatched_sites():
    a = tensor.zeros((1, 2, 2, 2, 2))
    b = tensor.zeros((1, 2, 3, 2, 2))
    with pytest.raises(ValueError):
        tensor.concat_channels([a, b])


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        x = rand_tensor(rng, (2, 3, 4, 5, 6))
        path = tmp_path / "t.lw3d"
        tensor.save_tensor(path, x)
        assert tensor.load_tensor(path) == x

    def test_header_layout(self, tmp_path):
        x = tensor.zeros((1, 2, 3, 4, 5))
        path = tmp_path / "t.lw3d"
        tensor.save_tensor(path, x)
        raw = path.read_bytes()
        assert raw[:4] == b"LW3D"
        assert raw[4] == 1
        assert struct.unpack("<5Q", raw[5:45]) == (1, 2, 3, 4, 5)
        assert len(raw) == 45 + 4 * 120

    def test_payload_is_little_endian_f32(self, tmp_path):
        x = tensor.from_array(
            np.array([1.0, -2.5], dtype=np.float32).reshape(1, 2, 1, 1, 1)
        )
        path = tmp_path / "t.lw3d"
        tensor.save_tensor(path, x)
        payload = path.read_bytes()[45:]
        assert np.frombuffer(payload, dtype="<f4").tolist() == [1.0, -2.5]

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.lw3d"
        path.write_bytes(b"NOPE" + bytes(60))
        with pytest.raises(ValueError, match="magic"):
            tensor.load_tensor(path)

    def test_bad_version_rejected(self, tmp_path):
        path = tmp_path / "bad.lw3d"
        path.write_bytes(b"LW3D\x02" + bytes(60))
        with pytest.raises(ValueError, match="version"):
            tensor.load_tensor(path)

    def test_truncated_payload_rejected(self, tmp_path):
        x = tensor.zeros((1, 2, 3, 4, 5))
        path = tmp_path / "t.lw3d"
        tensor.save_tensor(path, x)
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError, match="truncated"):
            tensor.load_tensor(path)
