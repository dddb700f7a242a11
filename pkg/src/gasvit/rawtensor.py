"""Raw tensor files: one text line ``shape: d0 d1 ...`` then little-endian float32 data."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import SpecError


def write_raw_tensor(path, x: np.ndarray) -> None:
    x = np.asarray(x, dtype="<f4")
    header = "shape: " + " ".join(str(d) for d in x.shape) + "\n"
    Path(path).write_bytes(header.encode("ascii") + x.tobytes(order="C"))


def read_raw_tensor(path, expected: tuple | None = None) -> np.ndarray:
    """Read a raw tensor; ``expected`` may use ``None`` for free dimensions."""
    blob = Path(path).read_bytes()
    nl = blob.find(b"\n")
    want = "B " + " ".join(str(d) for d in expected[1:]) if expected else "d0 d1 ..."
    if nl < 0:
        raise SpecError(f"{path}: missing 'shape: {want}' header line")
    try:
        head = blob[:nl].decode("ascii").strip()
        if not head.startswith("shape:"):
            raise ValueError
        shape = tuple(int(t) for t in head[len("shape:"):].split())
        if not shape or min(shape) < 1:
            raise ValueError
    except ValueError:
        raise SpecError(f"{path}: malformed header; expected 'shape: {want}'") from None
    data = blob[nl + 1:]
    if len(data) != 4 * math.prod(shape):
        raise SpecError(f"{path}: header shape {shape} needs {4 * math.prod(shape)} bytes, found {len(data)}; "
                        f"expected 'shape: {want}' followed by little-endian float32 data")
    if expected is not None and (
        len(shape) != len(expected) or any(e is not None and e != s for e, s in zip(expected, shape))
    ):
        raise SpecError(f"{path}: tensor shape {shape} does not match expected shape ({want})")
    return np.frombuffer(data, dtype="<f4").reshape(shape).astype(np.float32)
