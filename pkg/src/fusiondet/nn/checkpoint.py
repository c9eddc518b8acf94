"""Checkpoint file: a text header naming each parameter and its shape, then the
raw little-endian float64 blocks in the same order."""

from __future__ import annotations

import numpy as np

MAGIC = "fusiondet-checkpoint 1"


def dumps(params, meta=None) -> bytes:
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        lines.append(f"meta {key} {value}")
    for p in params:
        lines.append(f"param {p.name} {'x'.join(str(s) for s in p.value.shape) or '1'}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode()
    return header + b"".join(np.asarray(p.value, dtype="<f8").tobytes() for p in params)


def save(path, params, meta=None):
    with open(path, "wb") as f:
        f.write(dumps(params, meta))


def loads(raw: bytes):
    """Return ``(meta, [(name, array), ...])``."""
    meta, entries = {}, []
    pos = 0
    first = True
    while True:
        nl = raw.index(b"\n", pos)
        line = raw[pos:nl].decode()
        pos = nl + 1
        if first:
            if line != MAGIC:
                raise ValueError("not a fusiondet checkpoint")
            first = False
            continue
        if line == "end":
            break
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "param":
            name, shape = rest.rsplit(" ", 1)
            entries.append((name, tuple(int(s) for s in shape.split("x"))))
    arrays = []
    for name, shape in entries:
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        arrays.append((name, arr.copy()))
    if pos != len(raw):
        raise ValueError("checkpoint has trailing bytes")
    return meta, arrays


def load_into(path, params):
    with open(path, "rb") as f:
        meta, arrays = loads(f.read())
    by_name = dict(arrays)
    for p in params:
        if p.name not in by_name:
            raise KeyError(f"checkpoint lacks parameter {p.name}")
        arr = by_name[p.name]
        if arr.shape != p.value.shape:
            raise ValueError(f"{p.name}: checkpoint shape {arr.shape} != model shape {p.value.shape}")
        p.value[...] = arr
    return meta
