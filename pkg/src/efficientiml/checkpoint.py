"""Single-file, bit-exact checkpoint container.

Layout (all integers little-endian)::

    8 bytes   magic b"EIMLCKP1"
    8 bytes   uint64 header length in bytes
    header    UTF-8 text, one record per line:
                step <int>
                tensor <name> <dtype> <d0,d1,...> <offset> <nbytes>
                config <key> = <value>
                meta <key> = <value>
    payload   raw little-endian tensor bytes; offsets are relative to the
              first payload byte

A scalar tensor is written with shape ``-``.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"EIMLCKP1"


class CheckpointError(Exception):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    moments_m: dict[str, np.ndarray] = field(default_factory=dict)
    moments_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    config: dict[str, str] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, d in (("param/", self.params), ("adam_m/", self.moments_m), ("adam_v/", self.moments_v)):
            for k, v in d.items():
                out[prefix + k] = v
        return out


def _le(arr: np.ndarray) -> np.ndarray:
    arr = np.asarray(arr, order="C")
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    lines = [f"step {ckpt.step}"]
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors().items():
        if any(c.isspace() for c in name):
            raise CheckpointError(f"tensor name contains whitespace: {name!r}")
        a = _le(arr)
        shape = ",".join(str(d) for d in a.shape) or "-"
        lines.append(f"tensor {name} {a.dtype.str} {shape} {offset} {a.nbytes}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    for k, v in ckpt.config.items():
        lines.append(f"config {k} = {v}")
    for k, v in ckpt.meta.items():
        lines.append(f"meta {k} = {v}")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_header(path) -> list[str]:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not an EfficientIML checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        return fh.read(n).decode("utf-8").splitlines()


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise CheckpointError(f"{path}: not an EfficientIML checkpoint")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = fh.read(n).decode("utf-8").splitlines()
        payload = fh.read()
    ckpt = Checkpoint(params={})
    targets = {"param": ckpt.params, "adam_m": ckpt.moments_m, "adam_v": ckpt.moments_v}
    for line in header:
        kind, _, rest = line.partition(" ")
        if kind == "step":
            ckpt.step = int(rest)
        elif kind == "tensor":
            name, dtype, shape, offset, nbytes = rest.split(" ")
            shp = () if shape == "-" else tuple(int(s) for s in shape.split(","))
            off, nb = int(offset), int(nbytes)
            if off + nb > len(payload):
                raise CheckpointError(f"{path}: tensor {name} truncated")
            arr = np.frombuffer(payload[off : off + nb], dtype=np.dtype(dtype)).reshape(shp).copy()
            group, _, key = name.partition("/")
            if group not in targets:
                raise CheckpointError(f"{path}: unknown tensor group in {name}")
            targets[group][key] = arr
        elif kind in ("config", "meta"):
            k, _, v = rest.partition(" = ")
            (ckpt.config if kind == "config" else ckpt.meta)[k] = v
        elif line.strip():
            raise CheckpointError(f"{path}: bad header line {line!r}")
    return ckpt
