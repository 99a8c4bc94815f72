"""
Checkpoint Handler
Persists network parameters, channel layout, normalization statistics and
training provenance.

Layout (little-endian): magic "PDEWBCK1", u32 version, u32 header length, UTF-8
JSON header, raw tensors in declaration order at the model's real precision
(complex tensors as interleaved real/imaginary pairs), trailing u32 CRC32.
"""

import hashlib
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np

from errors import CheckpointFormatError, ShapeError
from fno import ChannelLayout, FnoConfig, FnoParams, tensor_shapes

logger = logging.getLogger(__name__)

MAGIC = b"PDEWBCK1"
VERSION = 1

_HEADER = struct.Struct('<8sII')
_CRC = struct.Struct('<I')


@dataclass
class Checkpoint:
    """A trained (or freshly initialized) network with everything needed to run it."""

    params: FnoParams
    layout: ChannelLayout
    meta: dict = field(default_factory=dict)

    @property
    def config(self) -> FnoConfig:
        return self.params.config

    def copy(self) -> 'Checkpoint':
        return Checkpoint(params=self.params.copy(), layout=self.layout, meta=json.loads(json.dumps(self.meta)))


def encode_checkpoint(checkpoint: Checkpoint) -> bytes:
    params = checkpoint.params
    real = np.dtype(params.config.real_dtype).newbyteorder('<')
    header = {
        'config': params.config.to_dict(),
        'layout': checkpoint.layout.to_list(),
        'norm_mean': params.norm_mean.tolist(),
        'norm_std': params.norm_std.tolist(),
        'tensors': [
            {'name': name, 'shape': list(value.shape), 'complex': bool(np.iscomplexobj(value))}
            for name, value in params.tensors.items()
        ],
        'meta': checkpoint.meta,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode('utf-8')
    chunks = [_HEADER.pack(MAGIC, VERSION, len(header_bytes)), header_bytes]
    for value in params.tensors.values():
        if np.iscomplexobj(value):
            value = np.stack([value.real, value.imag], axis=-1)
        chunks.append(np.ascontiguousarray(value, dtype=real).tobytes())
    payload = b''.join(chunks)
    return payload + _CRC.pack(zlib.crc32(payload))


def decode_checkpoint(data: bytes, config: Optional[FnoConfig] = None) -> Checkpoint:
    """
    Parse checkpoint bytes, optionally against an expected configuration.

    Raises:
        CheckpointFormatError: Wrong magic or version, truncation, checksum mismatch
        ShapeError: A tensor does not fit the expected configuration
    """
    if len(data) < _HEADER.size + _CRC.size:
        raise CheckpointFormatError("checkpoint file is truncated")
    magic, version, header_length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    payload, (stored_crc,) = data[:-_CRC.size], _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(payload) != stored_crc:
        raise CheckpointFormatError("checkpoint checksum mismatch")

    offset = _HEADER.size
    header = json.loads(payload[offset:offset + header_length].decode('utf-8'))
    offset += header_length
    stored_config = FnoConfig.from_dict(header['config'])
    real = np.dtype(stored_config.real_dtype).newbyteorder('<')

    expected = tensor_shapes(config) if config is not None else None
    if expected is not None and len(expected) != len(header['tensors']):
        raise ShapeError(
            f"checkpoint holds {len(header['tensors'])} tensors, configuration expects {len(expected)}"
        )

    tensors = {}
    for entry in header['tensors']:
        name, shape = entry['name'], tuple(entry['shape'])
        if expected is not None:
            if name not in expected:
                raise ShapeError(f"tensor '{name}' is not part of the requested configuration")
            if expected[name][0] != shape:
                raise ShapeError(f"tensor '{name}' has shape {shape}, configuration expects {expected[name][0]}")
        stored_shape = shape + (2,) if entry['complex'] else shape
        count = int(np.prod(stored_shape))
        if offset + count * real.itemsize > len(payload):
            raise CheckpointFormatError("checkpoint payload is truncated")
        values = np.frombuffer(payload, dtype=real, count=count, offset=offset).reshape(stored_shape)
        offset += count * real.itemsize
        if entry['complex']:
            tensor = np.empty(shape, dtype=stored_config.complex_dtype)
            tensor.real, tensor.imag = values[..., 0], values[..., 1]
        else:
            tensor = values.astype(stored_config.real_dtype)
        tensors[name] = tensor

    if offset != len(payload):
        raise CheckpointFormatError(f"{len(payload) - offset} trailing bytes after last tensor")
    params = FnoParams(
        config=stored_config,
        tensors=tensors,
        norm_mean=np.array(header['norm_mean'], dtype=np.float64),
        norm_std=np.array(header['norm_std'], dtype=np.float64),
    )
    return Checkpoint(params=params, layout=ChannelLayout(tuple(header['layout'])), meta=header['meta'])


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, Path]):
    """Write a checkpoint file atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix(path.suffix + '.tmp')
    temp_path.write_bytes(encode_checkpoint(checkpoint))
    os.replace(temp_path, path)
    logger.info("saved checkpoint %s to %s", digest(checkpoint), path)


def load_checkpoint(path: Union[str, Path], config: Optional[FnoConfig] = None) -> Checkpoint:
    """
    Read a checkpoint file.

    Args:
        path: Checkpoint file
        config: When given, every tensor must match its shape

    Raises:
        CheckpointFormatError: Missing or corrupted file
        ShapeError: Mismatch against config, naming the offending tensor
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointFormatError(f"cannot read checkpoint {path}: {e}") from e
    return decode_checkpoint(data, config)


def digest(checkpoint: Checkpoint) -> str:
    """Short content id used in report provenance."""
    return hashlib.sha256(encode_checkpoint(checkpoint)).hexdigest()[:16]
