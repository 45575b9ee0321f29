"""Versioned checkpoint container: canonical JSON header plus raw array payload.

Layout: magic ``TGCK`` | uint32 version | uint64 header length | header JSON |
concatenated array bytes. Arrays are stored little-endian in sorted name
order, so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"TGCK"
VERSION = 1

__all__ = ["Checkpoint", "canonical_json", "config_digest"]


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_digest(config_dict: dict) -> str:
    return hashlib.sha256(canonical_json(config_dict).encode()).hexdigest()


@dataclass
class Checkpoint:
    meta: dict
    arrays: dict[str, np.ndarray]
    _model_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        index = []
        payload = bytearray()
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name])
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            index.append({"name": name, "dtype": str(arr.dtype),
                          "shape": list(arr.shape), "offset": len(payload),
                          "nbytes": len(raw)})
            payload.extend(raw)
        header = canonical_json({"meta": self.meta, "arrays": index}).encode()
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            f.write(bytes(payload))

    @classmethod
    def load(cls, path: Path | str) -> "Checkpoint":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:4] != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file (bad magic)")
        version = struct.unpack("<I", raw[4:8])[0]
        if version != VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header_len = struct.unpack("<Q", raw[8:16])[0]
        header = json.loads(raw[16:16 + header_len].decode())
        base = 16 + header_len
        arrays = {}
        for entry in header["arrays"]:
            dtype = np.dtype(entry["dtype"]).newbyteorder("<")
            start = base + entry["offset"]
            buf = raw[start:start + entry["nbytes"]]
            arr = np.frombuffer(buf, dtype=dtype).reshape(entry["shape"])
            arrays[entry["name"]] = arr.astype(np.dtype(entry["dtype"]), copy=True)
        return cls(meta=header["meta"], arrays=arrays)

    # convenience accessors used across trainer / service / eval
    @property
    def kind(self) -> str:
        return self.meta["kind"]

    @property
    def epoch(self) -> int:
        return self.meta["epoch"]

    @property
    def stage(self) -> str:
        return "rgb" if self.kind == "hd" else "fine"

    @property
    def native_dims(self) -> tuple[int, int]:
        cfg = self.meta["config"]
        return cfg["patch_height"], cfg["patch_width"]

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        plen = len(prefix)
        return {k[plen:]: v for k, v in self.arrays.items() if k.startswith(prefix)}
