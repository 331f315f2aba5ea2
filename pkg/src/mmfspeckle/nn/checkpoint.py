"""Checkpoint files for the reconstruction network and the classifier.

Little-endian layout::

    "MMFC" | u32 version | u32 layer count
    per layer: u16 name length | UTF-8 name | u8 rank | u32 dims... | f32 values
    u32 CRC-32 of everything before it
"""

from __future__ import annotations

import re
import struct
import zlib
from pathlib import Path

import numpy as np

from ..dataio import BadMagic, ChecksumError, FormatError, TruncatedStream, VersionMismatch
from .classifier import Classifier
from .unet import UNet

MAGIC = b"MMFC"
VERSION = 1


class ShapeMismatch(FormatError):
    pass


def encode_params(params: dict) -> bytes:
    out = [MAGIC, struct.pack("<II", VERSION, len(params))]
    for name, arr in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    body = b"".join(out)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_params(data: bytes) -> dict:
    if len(data) < 16:
        raise TruncatedStream("checkpoint shorter than its header")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad checkpoint magic {data[:4]!r}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {VERSION}")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint CRC-32 mismatch")
    pos = 12
    params = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", body, pos)
            pos += 2
            name = body[pos:pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", body, pos)
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", body, pos)
            pos += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) * 4
            if pos + size > len(body):
                raise TruncatedStream(f"layer {name} runs past the end of the file")
            params[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except struct.error as exc:
        raise TruncatedStream(str(exc)) from exc
    return params


def save_model(path, model) -> None:
    Path(path).write_bytes(encode_params(model.params))


def model_from_params(params: dict):
    if any(k.startswith("clf.") for k in params):
        w = params["clf.dense.w"]
        channels = params["clf.conv.w"].shape[0]
        side = int(round(np.sqrt(w.shape[1] / channels))) * 2
        return Classifier((side, side), channels, params)
    head = next((k.split(".")[1] for k in params if k.startswith("head.")), None)
    if head is None:
        raise ShapeMismatch("checkpoint holds neither a U-Net nor a classifier")
    enc = sorted({int(m.group(1)) for k in params if (m := re.match(r"enc(\d+)\.", k))})
    channels = [params[f"enc{i}.conv0.w"].shape[0] for i in enc] + [params["mid.conv0.w"].shape[0]]
    model = UNet(channels, head, params)
    reference = UNet(channels, head, rng=np.random.default_rng(0)).params
    if reference.keys() != params.keys():
        raise ShapeMismatch("checkpoint layer names do not match the U-Net layout")
    for k, v in reference.items():
        if v.shape != params[k].shape:
            raise ShapeMismatch(f"layer {k} has shape {params[k].shape}, expected {v.shape}")
    return model


def load_model(path):
    return model_from_params(decode_params(Path(path).read_bytes()))
