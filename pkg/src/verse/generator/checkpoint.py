"""Single-file checkpoint format.

Layout (little-endian): magic ``DVRS``, version u32, length-prefixed
canonical-JSON config, then named f32 tensor records sorted by name::

    name_len u32 | name utf8 | rank u32 | dims u32*rank | data f32
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import ConfigError

MAGIC = b"DVRS"
VERSION = 1


def save_tensors(path, config: dict, tensors: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg_bytes = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(cfg_bytes)))
        f.write(cfg_bytes)
        for name in sorted(tensors):
            arr = np.ascontiguousarray(tensors[name], dtype="<f4")
            nb = name.encode()
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_tensors(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ConfigError(f"{path} is not a checkpoint (bad magic)")
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    (cfg_len,) = struct.unpack_from("<I", buf, 8)
    offset = 12
    config = json.loads(buf[offset : offset + cfg_len].decode())
    offset += cfg_len
    tensors = {}
    while offset < len(buf):
        (name_len,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        name = buf[offset : offset + name_len].decode()
        offset += name_len
        (rank,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors[name] = arr.reshape(dims).copy()
    return config, tensors
