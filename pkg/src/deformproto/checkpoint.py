"""DPPN1 checkpoint files.

Layout (integers little-endian u32, floats little-endian f32)::

    b"DPPN1"
    u32 length, UTF-8 config echo (RunConfig text)
    u32 block count, then per block:
        u32 name length, UTF-8 name, one DPT1 tensor
    u32 record count, then per projection record:
        u32 prototype, u32 image, u32 center row, u32 center col,
        u32 part count, part count x (f32 row offset, f32 col offset),
        f32 achieved cosine

Every tensor is stored rank 4: conv weights as-is, biases as (1, 1, 1, n),
prototype parts as (P, rows, cols, C) and the last layer as (1, 1, P, K).
With ``nd = true`` no offset-branch blocks are written.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .config import ConfigError, RunConfig
from .model import Model, ProjectionRecord
from .tensor import ConvLayer
from .tensorio import TensorFormatError, decode_tensor, encode_tensor

MAGIC = b"DPPN1"
U32 = struct.Struct("<I")
F32 = struct.Struct("<f")


class CheckpointError(ValueError):
    pass


def _blocks(model):
    blocks = []
    for prefix, layers in (("backbone", model.backbone), ("offsets", model.branch)):
        if layers is None:
            continue
        for i, layer in enumerate(layers):
            blocks.append((f"{prefix}.{i}.weight", layer.weight))
            blocks.append((f"{prefix}.{i}.bias", layer.bias.reshape(1, 1, 1, -1)))
    g = model.grid
    blocks.append(("prototypes", model.parts.reshape(len(model.parts), g.rows, g.cols, -1)))
    blocks.append(("last_layer", model.last_layer.reshape(1, 1, *model.last_layer.shape)))
    return blocks


def encode_checkpoint(model):
    out = bytearray(MAGIC)
    echo = model.config.to_text().encode("utf-8")
    out += U32.pack(len(echo)) + echo
    blocks = _blocks(model)
    out += U32.pack(len(blocks))
    for name, arr in blocks:
        raw = name.encode("utf-8")
        out += U32.pack(len(raw)) + raw
        out += encode_tensor(np.asarray(arr, dtype=np.float32))
    out += U32.pack(len(model.projections))
    for rec in model.projections:
        out += struct.pack("<4I", rec.prototype, rec.image, *rec.center)
        offs = np.asarray(rec.offsets, dtype="<f4").reshape(-1, 2)
        out += U32.pack(len(offs)) + offs.tobytes()
        out += F32.pack(rec.cosine)
    return bytes(out)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return U32.unpack(self.take(4, what))[0]


def decode_checkpoint(data):
    rd = _Reader(data)
    if bytes(rd.take(len(MAGIC), "magic")) != MAGIC:
        raise CheckpointError("bad checkpoint magic")
    try:
        echo = bytes(rd.take(rd.u32("config length"), "config")).decode("utf-8")
        config = RunConfig.from_text(echo, source="<checkpoint config>")
    except (UnicodeDecodeError, ConfigError) as exc:
        raise CheckpointError(f"bad config echo: {exc}") from None
    tensors = {}
    for _ in range(rd.u32("block count")):
        name = bytes(rd.take(rd.u32("name length"), "block name")).decode("utf-8")
        try:
            arr, end = decode_tensor(rd.data, rd.pos)
        except TensorFormatError as exc:
            raise CheckpointError(f"block {name}: {exc}") from None
        rd.pos = end
        tensors[name] = arr
    records = []
    for _ in range(rd.u32("record count")):
        proto, image, a, b = struct.unpack("<4I", rd.take(16, "record"))
        n = rd.u32("part count")
        offs = np.frombuffer(rd.take(8 * n, "record offsets"), dtype="<f4").astype(np.float32)
        cos = F32.unpack(rd.take(4, "record cosine"))[0]
        records.append(ProjectionRecord(proto, image, (a, b), offs.reshape(n, 2), cos))
    if rd.pos != len(rd.data):
        raise CheckpointError(f"{len(rd.data) - rd.pos} trailing bytes")
    return _assemble(config, tensors, records)


def _layers(config, tensors, prefix, strides, paddings):
    layers = []
    for i, (s, p) in enumerate(zip(strides, paddings)):
        try:
            w = tensors[f"{prefix}.{i}.weight"]
            b = tensors[f"{prefix}.{i}.bias"].reshape(-1)
        except KeyError as exc:
            raise CheckpointError(f"missing tensor block {exc}") from None
        layers.append(ConvLayer(w, b, stride=s, padding=p))
    return layers


def _assemble(config, tensors, records):
    bb = config.backbone
    backbone = _layers(config, tensors, "backbone", bb.strides, [bb.kernel // 2] * len(bb.strides))
    branch = None
    if not config.nd:
        branch = _layers(config, tensors, "offsets", (1, 1), (1, 1))
    try:
        protos = tensors["prototypes"]
        last = tensors["last_layer"]
    except KeyError as exc:
        raise CheckpointError(f"missing tensor block {exc}") from None
    parts = protos.reshape(protos.shape[0], protos.shape[1] * protos.shape[2], protos.shape[3])
    return Model(config, backbone, parts, branch, last.reshape(last.shape[2:]), records)


def save_checkpoint(path, model):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode_checkpoint(model))
    os.replace(tmp, path)


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
