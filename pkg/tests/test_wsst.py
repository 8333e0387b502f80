import struct

import numpy as np
import pytest

from wsss import wsst


def test_header_layout():
    buf = wsst.to_bytes(np.arange(6, dtype=np.float32).reshape(2, 3))
    assert buf[:4] == bytes([0x57, 0x53, 0x53, 0x54])
    assert buf[4] == 1 and buf[5] == 1 and buf[6] == 2
    assert struct.unpack("<2I", buf[7:15]) == (2, 3)
    assert np.frombuffer(buf[15:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_u8_variant():
    buf = wsst.to_bytes(np.array([[0, 4], [2, 1]], dtype=np.int64))
    assert buf[5] == 2
    back = wsst.from_bytes(buf)
    assert back.dtype == np.uint8 and back.tolist() == [[0, 4], [2, 1]]


def test_roundtrip_bit_exact(rng):
    arr = rng.normal(size=(3, 4, 5)).astype(np.float32)
    arr.ravel()[:4] = [np.float32(1e-45), -0.0, np.finfo(np.float32).max, np.float32(np.nan)]
    back = wsst.from_bytes(wsst.to_bytes(arr))
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_file_roundtrip(tmp_path, rng):
    arr = rng.random((7,)).astype(np.float32)
    wsst.save(tmp_path / "a.wsst", arr)
    assert wsst.load(tmp_path / "a.wsst").tobytes() == arr.tobytes()


@pytest.mark.parametrize(
    "mutate,match",
    [
        (lambda b: b"XSST" + b[4:], "offset 0: bad magic"),
        (lambda b: b[:4] + b"\x02" + b[5:], "offset 4: unsupported version"),
        (lambda b: b[:5] + b"\x09" + b[6:], "offset 5: unknown dtype"),
        (lambda b: b[:-1], "payload"),
        (lambda b: b[:5], "truncated"),
    ],
)
def test_corrupt_rejected_with_path_and_offset(tmp_path, mutate, match):
    path = tmp_path / "bad.wsst"
    path.write_bytes(mutate(wsst.to_bytes(np.zeros((2, 2), dtype=np.float32))))
    with pytest.raises(wsst.WSSTError, match=match) as err:
        wsst.load(path)
    assert str(path) in str(err.value)
