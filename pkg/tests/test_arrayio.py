import numpy as np
import pytest

from objcentric.arrayio import ArrayFormatError, read_array, write_array


@pytest.mark.parametrize("dtype", [np.float32, np.float64, np.int32, np.uint8])
def test_round_trip(tmp_path, dtype):
    a = (np.arange(12).reshape(3, 4) * 3).astype(dtype)
    write_array(tmp_path / "a.ocfa", a)
    b = read_array(tmp_path / "a.ocfa")
    assert b.dtype == a.dtype and np.array_equal(a, b)


def test_header_layout(tmp_path):
    write_array(tmp_path / "a.ocfa", np.ones((2, 5), np.float32))
    raw = (tmp_path / "a.ocfa").read_bytes()
    assert raw[:4] == b"OCFA"
    assert np.frombuffer(raw[4:16], "<u4").tolist() == [1, 2, 5]
    assert len(raw) == 16 + 2 * 5 * 4


def test_bad_magic(tmp_path):
    (tmp_path / "x").write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(ArrayFormatError):
        read_array(tmp_path / "x")
