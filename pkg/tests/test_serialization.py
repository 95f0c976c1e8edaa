"""Tensor container round trips and the float wire format."""

import numpy as np
import pytest

from ranknce.serialization import format_float, load_tensors, save_tensors, tensor_to_csv


def test_round_trip_preserves_shapes_and_bits(tmp_path):
    rng = np.random.Generator(np.random.PCG64(0))
    tensors = {
        "scalar": np.asarray(3.5),
        "vector": rng.normal(size=7),
        "matrix": rng.normal(size=(4, 3)),
        "conv": rng.normal(size=(2, 3, 3, 3)),
        "empty": np.zeros((0, 5)),
    }
    path = tmp_path / "state.tns"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == arr.shape, name
        assert loaded[name].tobytes() == np.asarray(arr, dtype=np.float64).tobytes(), name


def test_round_trip_keeps_noncontiguous_values(tmp_path):
    base = np.arange(24.0).reshape(4, 6)
    view = base[:, ::2]  # not C-contiguous
    path = tmp_path / "v.tns"
    save_tensors(path, {"v": view})
    assert np.array_equal(load_tensors(path)["v"], view)


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.tns"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="container"):
        load_tensors(path)


def test_format_float_round_trips():
    rng = np.random.Generator(np.random.PCG64(1))
    for _ in range(200):
        x = float(rng.normal() * 10.0 ** rng.integers(-8, 8))
        assert float(format_float(x)) == x
    assert format_float(0.0) == "0.0"
    assert format_float(1.0) == "1.0"


def test_tensor_to_csv_shapes(tmp_path):
    path = tmp_path / "m.csv"
    tensor_to_csv(np.array([[1.0, 2.0], [3.0, 4.0]]), path)
    assert path.read_text() == "1.0,2.0\n3.0,4.0\n"
    tensor_to_csv(np.array([5.0, 6.0]), path)
    assert path.read_text() == "5.0\n6.0\n"
    with pytest.raises(ValueError):
        tensor_to_csv(np.zeros((2, 2, 2)), path)
