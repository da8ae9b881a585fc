"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"A2LG" | u16 version
    u32 n | n bytes  encoder config, ``key=value`` lines
    u32 n | n bytes  vocabulary text (``a2log-vocab v1``)
    u32 count, then per tensor: u16 name length, name, u8 ndim, ndim x u32 dims
    float64 tensor data in directory order
    u32 crc32 of everything above
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from pathlib import Path

import numpy as np

from .scorer import EncoderConfig, ModelParameters, parameter_shapes
from .tokenizer import Vocabulary

MAGIC = b"A2LG"
VERSION = 1


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def _config_text(config: EncoderConfig) -> str:
    return "".join(f"{k}={v!r}\n" for k, v in config.as_dict().items())


def _parse_config(text: str) -> EncoderConfig:
    fields = {}
    types = {k: type(v) for k, v in EncoderConfig().as_dict().items()}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        if key not in types:
            raise CheckpointError(f"unknown config key {key!r} in checkpoint")
        fields[key] = types[key](value)
    return EncoderConfig(**fields)


def dumps_checkpoint(params: ModelParameters, config: EncoderConfig, vocab: Vocabulary) -> bytes:
    expected = parameter_shapes(config, len(vocab))
    if list(params) != list(expected):
        raise ShapeMismatchError("parameter names do not match the encoder config")
    parts = [MAGIC, struct.pack("<H", VERSION)]
    for block in (_config_text(config), vocab.dumps()):
        raw = block.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw]
    parts.append(struct.pack("<I", len(params)))
    for name, value in params.items():
        if value.shape != expected[name]:
            raise ShapeMismatchError(f"{name}: shape {value.shape}, expected {expected[name]}")
        raw = name.encode("utf-8")
        parts += [struct.pack("<H", len(raw)), raw, struct.pack("<B", value.ndim)]
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
    for value in params.values():
        parts.append(np.ascontiguousarray(value, dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads_checkpoint(buf: bytes) -> tuple[ModelParameters, EncoderConfig, Vocabulary]:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointVersionError("not an a2log checkpoint (bad magic)")
    (version,) = r.unpack("<H")
    if version != VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint version {version}")
    if len(buf) < 4 or struct.unpack("<I", buf[-4:])[0] != zlib.crc32(buf[:-4]):
        raise CheckpointError("checkpoint is truncated or corrupt (checksum mismatch)")
    blocks = []
    for _ in range(2):
        (n,) = r.unpack("<I")
        blocks.append(r.take(n).decode("utf-8"))
    config = _parse_config(blocks[0])
    vocab = Vocabulary.loads(blocks[1])
    (count,) = r.unpack("<I")
    directory = []
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode("utf-8")
        (ndim,) = r.unpack("<B")
        directory.append((name, r.unpack(f"<{ndim}I")))
    expected = parameter_shapes(config, len(vocab))
    if [name for name, _ in directory] != list(expected):
        raise ShapeMismatchError("tensor directory does not match the stored encoder config")
    params: ModelParameters = {}
    for name, shape in directory:
        if tuple(shape) != expected[name]:
            raise ShapeMismatchError(
                f"{name}: stored shape {tuple(shape)}, config and vocabulary imply {expected[name]}"
            )
        size = int(np.prod(shape)) * 8
        params[name] = np.frombuffer(r.take(size), dtype="<f8").astype(np.float64).reshape(shape)
    if r.pos != len(buf) - 4:
        raise CheckpointError("trailing bytes after tensor data")
    return params, config, vocab


def save_checkpoint(params: ModelParameters, config: EncoderConfig, vocab: Vocabulary, path) -> str:
    """Write the checkpoint and return its fingerprint."""
    raw = dumps_checkpoint(params, config, vocab)
    Path(path).write_bytes(raw)
    return fingerprint_bytes(raw)


def load_checkpoint(path) -> tuple[ModelParameters, EncoderConfig, Vocabulary]:
    return loads_checkpoint(Path(path).read_bytes())


def fingerprint_bytes(raw: bytes) -> str:
    return hashlib.sha256(raw).hexdigest()[:16]


def fingerprint(path) -> str:
    return fingerprint_bytes(Path(path).read_bytes())
