import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from kdkit.errors import StorageError
from kdkit.serialization import (
    dump_tensors,
    load_tensor_file,
    load_tensors,
    save_tensor_file,
)


def _assert_bit_exact(a: dict, b: dict):
    assert sorted(a) == sorted(b)
    for k in a:
        assert a[k].dtype == b[k].dtype
        assert a[k].shape == b[k].shape
        assert torch.equal(a[k], b[k])


def test_round_trip_mixed_dtypes():
    payload = {
        "weights": torch.randn(3, 4),
        "counts": torch.tensor([1, 2, 3], dtype=torch.int64),
        "flags": torch.tensor([True, False]),
        "half": torch.randn(5).to(torch.float16),
        "bytes": torch.arange(6, dtype=torch.uint8),
    }
    _assert_bit_exact(payload, load_tensors(dump_tensors(payload)))


def test_round_trip_scalar_and_empty_shapes():
    payload = {"scalar": torch.tensor(3.5), "empty": torch.zeros(0, 4)}
    out = load_tensors(dump_tensors(payload))
    assert out["scalar"].shape == ()
    assert float(out["scalar"]) == 3.5
    assert out["empty"].shape == (0, 4)


def test_empty_map_round_trips():
    assert load_tensors(dump_tensors({})) == {}


def test_bad_magic_rejected():
    with pytest.raises(StorageError):
        load_tensors(b"NOPE" + b"\x00" * 16)


def test_truncated_blob_rejected():
    blob = dump_tensors({"x": torch.randn(8)})
    with pytest.raises(StorageError):
        load_tensors(blob[: len(blob) - 5])


def test_payload_size_mismatch_rejected():
    blob = bytearray(dump_tensors({"x": torch.zeros(2)}))
    # grow the declared element count without growing the payload
    off = 4 + 4 + 2 + 1 + 1 + 1
    declared = int.from_bytes(blob[off:off + 8], "little")
    blob[off:off + 8] = (declared + 1).to_bytes(8, "little")
    with pytest.raises(StorageError):
        load_tensors(bytes(blob))


def test_non_tensor_entry_rejected():
    with pytest.raises(StorageError):
        dump_tensors({"x": [1, 2, 3]})


def test_unsupported_dtype_rejected():
    with pytest.raises(StorageError):
        dump_tensors({"x": torch.zeros(2, dtype=torch.complex64)})


def test_file_round_trip(tmp_path):
    payload = {"a": torch.randn(4, 4, dtype=torch.float64), "b": torch.randint(0, 9, (3,))}
    path = tmp_path / "ckpt" / "t.bin"
    save_tensor_file(path, payload)
    _assert_bit_exact(payload, load_tensor_file(path))


def test_load_missing_file(tmp_path):
    with pytest.raises(StorageError):
        load_tensor_file(tmp_path / "absent.bin")


def test_non_contiguous_tensors_serialize_correctly():
    base = torch.randn(4, 6)
    view = base.t()  # non-contiguous
    out = load_tensors(dump_tensors({"v": view}))
    assert torch.equal(out["v"], view)


_dtypes = st.sampled_from([torch.float32, torch.float64, torch.int64, torch.int32,
                           torch.int16, torch.uint8, torch.bool])
_shapes = st.lists(st.integers(min_value=0, max_value=5), min_size=0, max_size=3)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=20), st.tuples(_dtypes, _shapes),
                       max_size=4), st.integers(0, 2**32 - 1))
def test_round_trip_property(spec, seed):
    g = torch.Generator().manual_seed(seed)
    payload = {}
    for name, (dtype, shape) in spec.items():
        if dtype.is_floating_point:
            payload[name] = torch.randn(shape, generator=g).to(dtype)
        elif dtype == torch.bool:
            payload[name] = torch.rand(shape, generator=g) > 0.5
        else:
            payload[name] = torch.randint(0, 100, shape, generator=g).to(dtype)
    _assert_bit_exact(payload, load_tensors(dump_tensors(payload)))
