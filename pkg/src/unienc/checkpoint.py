"""Checkpoint container.

Layout::

    unienc-checkpoint 1
    name=<tensor> shape=<d0,d1,...> offset=<bytes>
    ...
    end
    <raw little-endian float64 payload>

Offsets are relative to the first payload byte. Round trips are bit-exact.
"""
from __future__ import annotations

import os

import numpy as np

MAGIC = "unienc-checkpoint 1"
_LE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save(path, tensors) -> None:
    """Write a name -> array mapping (``Tensor`` values accepted)."""
    lines = [MAGIC]
    blobs = []
    offset = 0
    for name, value in tensors.items():
        if not name or any(c.isspace() for c in name) or "=" in name:
            raise CheckpointError(f"invalid tensor name {name!r}")
        arr = np.array(getattr(value, "data", value), dtype=_LE, order="C")
        shape = ",".join(str(n) for n in arr.shape)
        lines.append(f"name={name} shape={shape} offset={offset}")
        blob = arr.tobytes()
        blobs.append(blob)
        offset += len(blob)
    lines.append("end")
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("utf-8"))
        for blob in blobs:
            fh.write(blob)
    os.replace(tmp, path)


def load(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    header_end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode()) or header_end < 0:
        raise CheckpointError(f"{path}: not a checkpoint container")
    payload = memoryview(raw)[header_end + len(b"\nend\n"):]
    out = {}
    for line in raw[:header_end].decode("utf-8").splitlines()[1:]:
        fields = dict(kv.split("=", 1) for kv in line.split())
        try:
            name = fields["name"]
            shape = tuple(int(n) for n in fields["shape"].split(",") if n)
            offset = int(fields["offset"])
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"{path}: bad manifest line {line!r}") from exc
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * 8
        if end > len(payload):
            raise CheckpointError(f"{path}: payload truncated at {name}")
        arr = np.frombuffer(payload[offset:end], dtype=_LE).astype(np.float64)
        out[name] = arr.reshape(shape)
    return out
