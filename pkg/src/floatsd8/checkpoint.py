"""Binary checkpoint format.

Layout (little-endian):

    magic "FSD8" | format version u16 | tensor count u32
    per tensor:
        name length u16 | UTF-8 name
        dtype tag u8 (0=FloatSD8, 1=FP8, 2=FP16, 3=FP32)
        rank u8 | dims u32 each
        raw payload (1 byte per FloatSD8/FP8 element, 2 per FP16, 4 per FP32)

Weights are stored twice: the quantized copy under the parameter name and
the master copy under ``<name>.master``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import (
    DEFAULT_CONFIG,
    FormatConfig,
    fp8_decode_bytes,
    fp16_quantize_values,
    fsd8_decode_bytes,
    fsd8_encode_values,
    fsd8_quantize_values,
)

__all__ = [
    "TAG_FLOATSD8",
    "TAG_FP8",
    "TAG_FP16",
    "TAG_FP32",
    "CheckpointTensor",
    "save_checkpoint",
    "load_checkpoint",
    "save_model",
    "load_model_tensors",
    "requantize_checkpoint",
]

MAGIC = b"FSD8"
VERSION = 1

TAG_FLOATSD8 = 0
TAG_FP8 = 1
TAG_FP16 = 2
TAG_FP32 = 3

_ITEM_SIZE = {TAG_FLOATSD8: 1, TAG_FP8: 1, TAG_FP16: 2, TAG_FP32: 4}


@dataclass
class CheckpointTensor:
    name: str
    tag: int
    raw: np.ndarray       # uint8 codes for FloatSD8/FP8, float otherwise

    def values(self, config: FormatConfig = DEFAULT_CONFIG) -> np.ndarray:
        if self.tag == TAG_FLOATSD8:
            return fsd8_decode_bytes(self.raw, config)
        if self.tag == TAG_FP8:
            return fp8_decode_bytes(self.raw)
        return np.asarray(self.raw, dtype=np.float64)


def _payload(tag: int, array: np.ndarray) -> bytes:
    if tag in (TAG_FLOATSD8, TAG_FP8):
        return np.ascontiguousarray(array, dtype=np.uint8).tobytes()
    if tag == TAG_FP16:
        return np.ascontiguousarray(array, dtype="<f2").tobytes()
    return np.ascontiguousarray(array, dtype="<f4").tobytes()


def save_checkpoint(path, tensors: list[tuple[str, int, np.ndarray]]) -> None:
    """Write tensors as (name, dtype tag, array)."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", VERSION, len(tensors)))
        for name, tag, array in tensors:
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            array = np.asarray(array)
            f.write(struct.pack("<BB", tag, array.ndim))
            for d in array.shape:
                f.write(struct.pack("<I", d))
            f.write(_payload(tag, array))


def load_checkpoint(path) -> dict[str, CheckpointTensor]:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a FSD8 checkpoint (bad magic)")
    version, count = struct.unpack_from("<HI", data, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    offset = 10
    out: dict[str, CheckpointTensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode("utf-8")
        offset += name_len
        tag, rank = struct.unpack_from("<BB", data, offset)
        offset += 2
        dims = struct.unpack_from(f"<{rank}I", data, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        nbytes = n * _ITEM_SIZE[tag]
        blob = data[offset:offset + nbytes]
        offset += nbytes
        if tag in (TAG_FLOATSD8, TAG_FP8):
            raw = np.frombuffer(blob, dtype=np.uint8).reshape(dims).copy()
        elif tag == TAG_FP16:
            raw = np.frombuffer(blob, dtype="<f2").astype(np.float64).reshape(dims)
        else:
            raw = np.frombuffer(blob, dtype="<f4").astype(np.float64).reshape(dims)
        out[name] = CheckpointTensor(name, tag, raw)
    return out


def save_model(path, model) -> None:
    """Store quantized weights plus masters for every model parameter.

    The quantized copy of a weight is re-derived from its master at save
    time (identical to the working copy whenever the policy quantizes), so
    shadow-trained checkpoints still carry FloatSD8 codes.
    """
    master_tag = TAG_FP16 if model.policy.master_fmt == "fp16" else TAG_FP32
    tensors: list[tuple[str, int, np.ndarray]] = []
    for name, kind, master in model.named_parameters():
        if kind in ("weight", "shadow-weight"):
            codes = fsd8_encode_values(
                fsd8_quantize_values(master, model.config), model.config)
            tensors.append((name, TAG_FLOATSD8, codes))
        else:
            tensors.append((name, TAG_FP16, fp16_quantize_values(master)))
        tensors.append((f"{name}.master", master_tag, master))
    save_checkpoint(path, tensors)


def requantize_checkpoint(src, dst, config: FormatConfig = DEFAULT_CONFIG) -> int:
    """Refresh every FloatSD8 tensor from its master copy (FP32 -> FloatSD8).

    Returns the number of tensors requantized.  Masters are preserved
    unchanged; tensors without a master pass through as stored.
    """
    tensors = load_checkpoint(src)
    out: list[tuple[str, int, np.ndarray]] = []
    refreshed = 0
    for name, t in tensors.items():
        if t.tag == TAG_FLOATSD8 and f"{name}.master" in tensors:
            master = tensors[f"{name}.master"].values(config)
            codes = fsd8_encode_values(fsd8_quantize_values(master, config), config)
            out.append((name, TAG_FLOATSD8, codes))
            refreshed += 1
        elif t.tag in (TAG_FLOATSD8, TAG_FP8):
            out.append((name, t.tag, t.raw))
        elif t.tag == TAG_FP16:
            out.append((name, t.tag, t.values(config)))
        else:
            out.append((name, t.tag, t.values(config)))
    save_checkpoint(dst, out)
    return refreshed


def load_model_tensors(path, config: FormatConfig = DEFAULT_CONFIG
                       ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Split a checkpoint into quantized values and master values."""
    tensors = load_checkpoint(path)
    quantized: dict[str, np.ndarray] = {}
    masters: dict[str, np.ndarray] = {}
    for name, t in tensors.items():
        if name.endswith(".master"):
            masters[name[:-7]] = t.values(config)
        else:
            quantized[name] = t.values(config)
    return quantized, masters
