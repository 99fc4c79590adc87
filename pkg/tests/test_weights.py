import struct

import numpy as np
import pytest

from rfe.errors import ParseError
from rfe.tensor_core import weights


def _params():
    rng = np.random.default_rng(3)
    return {
        "extractor.l0.weight": rng.normal(size=(4, 3)),
        "heads.1.bias": rng.normal(size=2),
        "scalar": np.array(np.pi),
        "retro.2.ñame": np.array([np.inf, -0.0, 5e-324, np.finfo(float).max]),
        "empty": np.zeros((0, 3)),
    }


def test_round_trip_is_bit_exact(tmp_path):
    params = _params()
    path = tmp_path / "w.rfew"
    weights.save(path, params)
    back = weights.load(path)
    assert list(back) == list(params)
    for name, arr in params.items():
        assert back[name].shape == arr.shape
        assert back[name].dtype == np.float64
        assert back[name].tobytes() == arr.tobytes()


def test_layout_matches_hand_encoding():
    buf = weights.dumps({"ab": np.array([[1.5, -2.0]])})
    expected = (b"RFEW1" + struct.pack("<Q", 2) + b"ab" + struct.pack("<QQQ", 2, 1, 2)
                + struct.pack("<dd", 1.5, -2.0))
    assert buf == expected


def test_empty_container():
    assert weights.loads(weights.dumps({})) == {}


def test_bad_magic_reports_offset_zero():
    with pytest.raises(ParseError) as info:
        weights.loads(b"RFEW2" + b"\0" * 8)
    assert info.value.offset == 0


def test_truncated_data_reports_offset():
    buf = weights.dumps({"w": np.arange(4.0)})
    data_start = 5 + 8 + 1 + 8 + 8
    with pytest.raises(ParseError, match="truncated data") as info:
        weights.loads(buf[:-3])
    assert info.value.offset == data_start


def test_truncated_integer_reports_offset():
    buf = weights.dumps({"w": np.arange(4.0)})
    with pytest.raises(ParseError, match="integer") as info:
        weights.loads(buf[:10])
    assert info.value.offset == 5


def test_truncated_name_and_bad_utf8():
    with pytest.raises(ParseError) as info:
        weights.loads(b"RFEW1" + struct.pack("<Q", 10) + b"abc")
    assert info.value.offset == 13
    with pytest.raises(ParseError, match="UTF-8") as info:
        weights.loads(b"RFEW1" + struct.pack("<Q", 2) + b"\xff\xfe" + struct.pack("<Q", 0) + b"\0" * 8)
    assert info.value.offset == 13
