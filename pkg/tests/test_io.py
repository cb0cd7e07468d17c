import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from miscfilter import io
from miscfilter.exceptions import ConfigurationError, FormatError
from miscfilter.model import NetworkConfig


@given(arrays(st.sampled_from([np.float32, np.float64]),
              st.lists(st.integers(0, 4), min_size=0, max_size=4).map(tuple),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_tensor_round_trip(arr):
    back, end = io.decode_tensor(io.encode_tensor(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)
    assert end == len(io.encode_tensor(arr))


def test_tensor_header_layout():
    buf = io.encode_tensor(np.zeros((2, 3), np.float64))
    assert buf[:4] == b"MTEN" and buf[4] == 1 and buf[5] == 1 and buf[6] == 2
    assert int.from_bytes(buf[7:11], "little") == 2 and int.from_bytes(buf[11:15], "little") == 3
    assert len(buf) == 15 + 6 * 8


def test_tensor_errors(tmp_path):
    buf = io.encode_tensor(np.ones(4, np.float32))
    with pytest.raises(FormatError) as exc:
        io.decode_tensor(buf[:-3])
    assert exc.value.offset == len(buf) - 3
    with pytest.raises(FormatError):
        io.decode_tensor(b"NOPE" + buf[4:])
    with pytest.raises(ConfigurationError):
        io.encode_tensor(np.ones(3, np.int32))
    path = tmp_path / "t.mten"
    path.write_bytes(buf + b"x")
    with pytest.raises(FormatError, match="trailing"):
        io.load_tensor(path)


def test_config_text_round_trip():
    text = "# comment\n\nbase_channels = 8\nuse_mga=false\nmax_flow=4.5\n"
    values = io.parse_config(text)
    net = io.coerce(NetworkConfig, values)
    assert net == NetworkConfig(base_channels=8, use_mga=False, max_flow=4.5)
    assert io.parse_config(io.format_config({"a": True, "b": 3})) == {"a": "true", "b": "3"}
    with pytest.raises(ConfigurationError):
        io.parse_config("novalue\n")
    with pytest.raises(ConfigurationError):
        io.coerce(NetworkConfig, {"use_mga": "maybe"})
