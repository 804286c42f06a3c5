import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from stmf import grids
from stmf.io import MAGIC, config_hash, dumps, parse_tensor, read_tensor, tensor_bytes, write_tensor


def test_spectral_derivatives_of_sine():
    x = grids.coords(64, True)
    u = np.sin(2 * np.pi * x)[None]
    assert np.allclose(grids.spectral_grad(u, 1)[..., 0], 2 * np.pi * np.cos(2 * np.pi * x))
    assert np.allclose(grids.spectral_laplacian(u, 1), -4 * np.pi**2 * u)


def test_fd_laplacian_exact_on_quadratic():
    n = 17
    x = grids.coords(n, False)
    X, Y = np.meshgrid(x, x, indexing="ij")
    u = (X**2 + 3 * Y**2)[None]
    lap = grids.fd_laplacian(u, 2)
    assert np.allclose(lap[0, 1:-1, 1:-1], 8.0)


def test_shift_field_periodic_and_bounded():
    u = np.arange(6.0)[None]
    assert np.array_equal(grids.shift_field(u, (2,), True)[0], [4, 5, 0, 1, 2, 3])
    mask = grids.valid_mask((1, 6), (2,), False)
    assert mask[0].tolist() == [False, False, True, True, True, True]
    assert np.array_equal(grids.shift_field(u, (2,), False)[0, 2:], [0, 1, 2, 3])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=5),
              elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_tensor_roundtrip(a):
    assert np.array_equal(parse_tensor(tensor_bytes(a)), a)


def test_tensor_layout():
    buf = tensor_bytes(np.arange(6.0).reshape(2, 3))
    assert buf[:6] == MAGIC == b"STMF1\0"
    assert buf[6] == 0 and buf[7] == 2
    assert struct.unpack("<2Q", buf[8:24]) == (2, 3)
    assert np.frombuffer(buf[24:], "<f8").tolist() == list(range(6))


def test_corrupt_tensor_rejected():
    buf = tensor_bytes(np.ones(3))
    with pytest.raises(ValueError):
        parse_tensor(b"XXXXX\0" + buf[6:])
    with pytest.raises(ValueError):
        parse_tensor(buf[:-8])


def test_write_read(tmp_path):
    write_tensor(tmp_path / "a.stmf", np.eye(3))
    assert np.array_equal(read_tensor(tmp_path / "a.stmf"), np.eye(3))
    assert not list(tmp_path.glob("*.part"))


def test_json_is_canonical():
    assert dumps({"b": 1, "a": np.float64(2.0)}) == dumps({"a": 2.0, "b": 1})
    assert config_hash({"a": 1}) == config_hash({"a": 1}) != config_hash({"a": 2})
