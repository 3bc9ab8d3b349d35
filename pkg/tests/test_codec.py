"""Canonical binary codec: round trips, determinism, error cases."""
import pytest
from hypothesis import given, strategies as st

from mdflow import codec

scalars = (st.none() | st.booleans() | st.integers()
           | st.floats(allow_nan=False) | st.text() | st.binary())
values = st.recursive(
    scalars,
    lambda children: st.lists(children, max_size=4)
    | st.dictionaries(st.text(max_size=8), children, max_size=4),
    max_leaves=20,
)


@given(values)
def test_round_trip(value):
    assert codec.decode(codec.encode(value)) == value


def test_encoding_is_canonical_for_dicts():
    a = codec.encode({"x": 1, "y": 2})
    b = codec.encode({"y": 2, "x": 1})
    assert a == b


def test_bool_and_int_are_distinct():
    assert codec.encode(True) != codec.encode(1)
    assert codec.decode(codec.encode(True)) is True


def test_unsupported_type_raises():
    with pytest.raises(codec.CodecError):
        codec.encode(object())


def test_truncated_data_raises():
    data = codec.encode([1, 2, 3])
    with pytest.raises(codec.CodecError):
        codec.decode(data[:-2])


def test_trailing_garbage_raises():
    with pytest.raises(codec.CodecError):
        codec.decode(codec.encode(1) + b"junk")
