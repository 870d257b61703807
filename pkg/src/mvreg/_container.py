"""Minimal binary container: magic line, JSON line, raw little-endian float32."""

import json

import numpy as np

from .errors import MalformedHeaderError, PayloadMismatchError, TruncatedPayloadError

_F32 = np.dtype("<f4")


def write_container(path, magic, header, payload):
    header = dict(header)
    header.setdefault("dtype", "f32")
    data = np.ascontiguousarray(payload, dtype=_F32)
    with open(path, "wb") as fh:
        fh.write(magic.encode("ascii") + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(data.tobytes(order="C"))


def read_container(path, magic, count_of):
    """Read a container and return ``(header, flat float32 array)``.

    ``count_of`` maps the parsed header to the number of float32 values the
    payload must hold.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    first = raw.find(b"\n")
    if first < 0 or raw[:first] != magic.encode("ascii"):
        found = raw[: max(first, 0)][:32] if first >= 0 else raw[:32]
        raise MalformedHeaderError(f"{path}: expected magic {magic!r}, found {found!r}")
    second = raw.find(b"\n", first + 1)
    if second < 0:
        raise MalformedHeaderError(f"{path}: missing JSON header line")
    try:
        header = json.loads(raw[first + 1 : second].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: unparsable JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path}: JSON header must be an object")
    if header.get("dtype") != "f32":
        raise MalformedHeaderError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    try:
        expected = int(count_of(header))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"{path}: incomplete header: {exc}") from exc
    body = raw[second + 1 :]
    nbytes = expected * _F32.itemsize
    if len(body) < nbytes:
        raise TruncatedPayloadError(
            f"{path}: payload holds {len(body) // _F32.itemsize} values, header declares {expected}"
        )
    if len(body) > nbytes:
        raise PayloadMismatchError(
            f"{path}: payload holds {len(body) / _F32.itemsize:g} values, header declares {expected}"
        )
    return header, np.frombuffer(body, dtype=_F32).copy()
