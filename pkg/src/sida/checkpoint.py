"""Binary checkpoint container shared by the MoE model and the predictor.

Layout (all integers little-endian, all tensor data float64 little-endian,
C order):

    magic      8 bytes ASCII  ("SIDAMOE1" for models, "SIDAHSH1" for predictors)
    cfg_len    uint32
    cfg        cfg_len bytes  UTF-8 JSON of the config, sorted keys
    n_tensors  uint32
    per tensor, in the owner's declared parameter order:
        name_len  uint16
        name      name_len bytes UTF-8
        ndim      uint8
        dims      ndim x uint64
        data      prod(dims) x float64

Round trips are bit-exact: data is written as raw float64 bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MOE_MAGIC = b"SIDAMOE1"
PREDICTOR_MAGIC = b"SIDAHSH1"


def save_container(
    path: str | Path, magic: bytes, config: dict, tensors: dict[str, np.ndarray]
) -> None:
    if len(magic) != 8:
        raise ContractError("magic must be exactly 8 bytes")
    cfg = json.dumps(config, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(magic)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_container(path: str | Path, expected_magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise ContractError(f"truncated checkpoint {path}")
        chunk = raw[off : off + n]
        off += n
        return chunk

    magic = take(8)
    if magic != expected_magic:
        raise ContractError(
            f"bad magic {magic!r} in {path}, expected {expected_magic!r}"
        )
    (cfg_len,) = struct.unpack("<I", take(4))
    config = json.loads(take(cfg_len).decode("utf-8"))
    (n_tensors,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        count = int(np.prod(dims)) if ndim else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims)
        tensors[name] = data.astype(np.float64).copy()
    if off != len(raw):
        raise ContractError(f"trailing bytes in checkpoint {path}")
    return config, tensors
