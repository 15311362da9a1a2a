"""Versioned binary checkpoint container.

Layout (all integers little endian)::

    b"CFCK"  uint32 version  uint32 n_sections
    n_sections x [ uint16 name_len, name (utf-8), uint8 kind,
                   uint64 payload_len, payload ]

``kind`` 0 is a UTF-8 JSON document. ``kind`` 1 is an array: uint8 dtype
code length, dtype code (numpy ``str``, e.g. ``<f8``), uint8 ndim,
``ndim`` x uint64 shape, then the raw C-order bytes.

Section names used by the trainer:

* ``config``: model and training configuration (JSON)
* ``state``: step, epoch, RNG state, split, history, best score (JSON)
* ``param/<name>``, ``best/<name>``: current and best-validation parameters
* ``adam.m/<name>``, ``adam.v/<name>``: optimizer moments
* ``lds/<field>``: the label weight table
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CFCK"
VERSION = 1
KIND_JSON, KIND_ARRAY = 0, 1


def _encode_array(a):
    a = np.ascontiguousarray(a)
    code = a.dtype.newbyteorder("<").str.encode() if a.dtype.byteorder == ">" else a.dtype.str.encode()
    head = struct.pack("<B", len(code)) + code + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.astype(np.dtype(code.decode())).tobytes()


def _decode_array(buf):
    clen = buf[0]
    code = buf[1:1 + clen].decode()
    pos = 1 + clen
    ndim = buf[pos]
    pos += 1
    shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
    pos += 8 * ndim
    arr = np.frombuffer(buf, dtype=np.dtype(code), offset=pos, count=int(np.prod(shape, dtype=np.int64)))
    return arr.reshape(shape).copy()


def write_sections(path, sections):
    """``sections``: ordered mapping name -> dict/list (JSON) or ndarray."""
    chunks = [MAGIC, struct.pack("<II", VERSION, len(sections))]
    for name, value in sections.items():
        if isinstance(value, np.ndarray):
            kind, payload = KIND_ARRAY, _encode_array(value)
        else:
            kind, payload = KIND_JSON, json.dumps(value, sort_keys=True).encode()
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)) + nb + struct.pack("<BQ", kind, len(payload)))
        chunks.append(payload)
    Path(path).write_bytes(b"".join(chunks))


def read_sections(path):
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", raw, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos, out = 12, {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            name = raw[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            kind, plen = struct.unpack_from("<BQ", raw, pos)
            pos += 9
            payload = raw[pos:pos + plen]
            if len(payload) != plen:
                raise FormatError(f"{path}: truncated section {name!r}")
            pos += plen
            out[name] = json.loads(payload) if kind == KIND_JSON else _decode_array(payload)
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    return out


@dataclass
class Checkpoint:
    config: dict  # {"model": ..., "train": ...}
    params: dict  # name -> ndarray
    best_params: dict = field(default_factory=dict)
    adam_m: dict = field(default_factory=dict)
    adam_v: dict = field(default_factory=dict)
    lds: dict = field(default_factory=dict)  # LdsWeightTable.to_arrays()
    state: dict = field(default_factory=dict)
    version: int = VERSION

    def save(self, path):
        sections = {"config": self.config, "state": self.state}
        for prefix, group in (("param/", self.params), ("best/", self.best_params),
                              ("adam.m/", self.adam_m), ("adam.v/", self.adam_v), ("lds/", self.lds)):
            for name, arr in group.items():
                sections[prefix + name] = np.asarray(arr)
        write_sections(path, sections)

    @classmethod
    def load(cls, path):
        sec = read_sections(path)
        if "config" not in sec:
            raise FormatError(f"{path}: missing config section")

        def group(prefix):
            return {k[len(prefix):]: v for k, v in sec.items() if k.startswith(prefix)}

        return cls(sec["config"], group("param/"), group("best/"), group("adam.m/"),
                   group("adam.v/"), group("lds/"), sec.get("state", {}))

    def model(self, best=True):
        """Rebuild a ``Model`` from the best-validation (or current) parameters."""
        from .model import Model, ModelConfig
        from .tensor import Tensor

        cfg = ModelConfig.from_dict(self.config["model"])
        arrays = self.best_params if best and self.best_params else self.params
        precision = self.config.get("train", {}).get("precision", "f64")
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return Model(cfg, precision=precision, params=params)
