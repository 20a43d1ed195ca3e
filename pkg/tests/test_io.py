import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from maskdiff.io import (
    array_digest,
    atomic_write_json,
    contact_sheet,
    file_digest,
    load_mask,
    load_tensor,
    parse_tensor_bytes,
    save_mask,
    save_png,
    save_tensor,
    tensor_bytes,
    to_uint8,
)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, array_shapes(min_dims=1, max_dims=4, max_side=5), elements=st.floats(-1e3, 1e3, width=32)))
def test_tensor_bytes_round_trip(arr):
    np.testing.assert_array_equal(parse_tensor_bytes(tensor_bytes(arr)), arr)


def test_tensor_header_and_errors(tmp_path):
    raw = tensor_bytes(np.zeros((2, 3)))
    assert raw.startswith(b'{"magic": "MDT1", "dims": [2, 3], "dtype": "f32", "byte_order": "LE"}\n')
    with pytest.raises(ValueError):
        parse_tensor_bytes(raw[:-4])
    with pytest.raises(ValueError):
        parse_tensor_bytes(b"no header")
    with pytest.raises(ValueError):
        parse_tensor_bytes(raw.replace(b"LE", b"BE"))
    save_tensor(tmp_path / "a" / "x.mdt", np.ones(4))
    np.testing.assert_array_equal(load_tensor(tmp_path / "a" / "x.mdt"), np.ones(4, np.float32))


def test_mask_png_round_trip(tmp_path):
    m = np.random.default_rng(0).random((9, 7)) < 0.4
    save_mask(tmp_path / "m.png", m)
    np.testing.assert_array_equal(load_mask(tmp_path / "m.png"), m)


def test_uint8_mapping():
    np.testing.assert_array_equal(to_uint8(np.array([-2.0, -1.0, 0.0, 1.0, 3.0])), [0, 0, 128, 255, 255])


def test_previews_and_atomic_json(tmp_path):
    save_png(tmp_path / "p.png", np.zeros((4, 4, 1)))
    contact_sheet(tmp_path / "s.png", [[np.zeros((4, 4)), np.ones((4, 4))], [np.zeros((4, 4))]], scale=2)
    atomic_write_json(tmp_path / "j.json", {"b": 1, "a": [1, 2]})
    text = (tmp_path / "j.json").read_text()
    assert text.index('"a"') < text.index('"b"')
    atomic_write_json(tmp_path / "j.json", {"b": 1, "a": [1, 2]})
    assert (tmp_path / "j.json").read_text() == text
    assert len(file_digest(tmp_path / "j.json")) == 64
    assert sorted(p.name for p in tmp_path.iterdir()) == ["j.json", "p.png", "s.png"]


def test_array_digest_tracks_dtype_and_shape():
    a = np.zeros(4, np.float32)
    assert array_digest(a) == array_digest(a.copy())
    assert array_digest(a) != array_digest(a.reshape(2, 2))
    assert array_digest(a) != array_digest(a.astype(np.float64))
