"""Canonical self-describing binary encoding for payload values.

Payloads travel through the system as opaque byte strings; this module is
the default codec turning Python values into such byte strings and back.
The encoding is deterministic (dict keys are sorted by their encoded form),
so equal values always produce equal bytes.

Supported value types: None, bool, int, float, bytes, str, list/tuple
(decoded as list), dict with str keys.
"""
from __future__ import annotations

import struct


class CodecError(ValueError):
    pass


_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")

# one-byte type tags
_T_NONE = b"N"
_T_TRUE = b"T"
_T_FALSE = b"F"
_T_INT = b"I"
_T_FLOAT = b"D"
_T_BYTES = b"B"
_T_STR = b"S"
_T_LIST = b"L"
_T_DICT = b"M"


def encode(value) -> bytes:
    out = bytearray()
    _encode_into(value, out)
    return bytes(out)


def _encode_into(value, out: bytearray) -> None:
    if value is None:
        out += _T_NONE
    elif value is True:
        out += _T_TRUE
    elif value is False:
        out += _T_FALSE
    elif isinstance(value, int):
        body = str(value).encode("ascii")
        out += _T_INT + _U32.pack(len(body)) + body
    elif isinstance(value, float):
        out += _T_FLOAT + _F64.pack(value)
    elif isinstance(value, bytes):
        out += _T_BYTES + _U32.pack(len(value)) + value
    elif isinstance(value, str):
        body = value.encode("utf-8")
        out += _T_STR + _U32.pack(len(body)) + body
    elif isinstance(value, (list, tuple)):
        out += _T_LIST + _U32.pack(len(value))
        for item in value:
            _encode_into(item, out)
    elif isinstance(value, dict):
        items = []
        for k, v in value.items():
            if not isinstance(k, str):
                raise CodecError(f"dict keys must be str, got {type(k).__name__}")
            items.append((encode(k), v))
        items.sort(key=lambda kv: kv[0])
        out += _T_DICT + _U32.pack(len(items))
        for ek, v in items:
            out += ek
            _encode_into(v, out)
    else:
        raise CodecError(f"unsupported payload type: {type(value).__name__}")


def decode(data: bytes):
    value, pos = _decode_at(data, 0)
    if pos != len(data):
        raise CodecError(f"trailing bytes after value ({len(data) - pos})")
    return value


def _decode_at(data: bytes, pos: int):
    if pos >= len(data):
        raise CodecError("truncated payload")
    tag = data[pos:pos + 1]
    pos += 1
    if tag == _T_NONE:
        return None, pos
    if tag == _T_TRUE:
        return True, pos
    if tag == _T_FALSE:
        return False, pos
    if tag == _T_FLOAT:
        if pos + 8 > len(data):
            raise CodecError("truncated float")
        return _F64.unpack_from(data, pos)[0], pos + 8
    if tag in (_T_INT, _T_BYTES, _T_STR):
        if pos + 4 > len(data):
            raise CodecError("truncated length")
        n = _U32.unpack_from(data, pos)[0]
        pos += 4
        if pos + n > len(data):
            raise CodecError("truncated body")
        body = data[pos:pos + n]
        pos += n
        if tag == _T_INT:
            return int(body.decode("ascii")), pos
        if tag == _T_BYTES:
            return body, pos
        return body.decode("utf-8"), pos
    if tag in (_T_LIST, _T_DICT):
        if pos + 4 > len(data):
            raise CodecError("truncated count")
        n = _U32.unpack_from(data, pos)[0]
        pos += 4
        if tag == _T_LIST:
            items = []
            for _ in range(n):
                item, pos = _decode_at(data, pos)
                items.append(item)
            return items, pos
        result = {}
        for _ in range(n):
            key, pos = _decode_at(data, pos)
            val, pos = _decode_at(data, pos)
            result[key] = val
        return result, pos
    raise CodecError(f"unknown tag {tag!r} at offset {pos - 1}")
