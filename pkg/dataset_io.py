"""
Dataset File Handler
Reads and writes datasets in the workbench binary format.

Layout (little-endian):
    8-byte magic "PDEWB1\\0\\0", u32 version, u32 manifest length, UTF-8 JSON
    manifest, then one record per sample:
        u8 system tag, u8 has_solution, 12 f64 coefficients,
        f32 source (row-major), f32 K (Darcy only), f32 solution (if present)
    and a trailing u32 CRC32 of every preceding byte.
"""

import hashlib
import json
import logging
import os
import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from data_factory import Dataset, PdeSample
from errors import ConfigError, DatasetFormatError
from pde_systems import COEFFICIENT_SLOTS, CoefficientSet, SystemTag
from spectral_grid import GridSpec

logger = logging.getLogger(__name__)

MAGIC = b"PDEWB1\x00\x00"
VERSION = 1
FIELD_DTYPE = np.dtype('<f4')

_HEADER = struct.Struct('<8sII')
_RECORD_HEAD = struct.Struct(f'<BB{COEFFICIENT_SLOTS}d')
_CRC = struct.Struct('<I')


def encode_dataset(ds: Dataset) -> bytes:
    """Serialize a dataset to bytes."""
    manifest = dict(ds.manifest)
    manifest.update({'split': ds.split, 'grid': ds.grid.to_dict(), 'count': len(ds)})
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode('utf-8')

    chunks = [_HEADER.pack(MAGIC, VERSION, len(manifest_bytes)), manifest_bytes]
    for sample in ds.samples:
        chunks.append(_RECORD_HEAD.pack(sample.system.code, int(sample.has_solution), *sample.coeffs.to_vector()))
        chunks.append(np.ascontiguousarray(sample.source, dtype=FIELD_DTYPE).tobytes())
        if sample.system is SystemTag.DARCY:
            chunks.append(np.ascontiguousarray(sample.coeffs.K, dtype=FIELD_DTYPE).tobytes())
        if sample.has_solution:
            chunks.append(np.ascontiguousarray(sample.solution, dtype=FIELD_DTYPE).tobytes())

    payload = b''.join(chunks)
    return payload + _CRC.pack(zlib.crc32(payload))


def decode_dataset(data: bytes) -> Dataset:
    """
    Parse bytes produced by encode_dataset.

    Raises:
        DatasetFormatError: Wrong magic or version, truncation, checksum mismatch
    """
    if len(data) < _HEADER.size + _CRC.size:
        raise DatasetFormatError("dataset file is truncated")
    magic, version, manifest_length = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise DatasetFormatError(f"unsupported dataset version {version}")

    payload, (stored_crc,) = data[:-_CRC.size], _CRC.unpack_from(data, len(data) - _CRC.size)
    if zlib.crc32(payload) != stored_crc:
        raise DatasetFormatError("dataset checksum mismatch")

    offset = _HEADER.size
    try:
        manifest = json.loads(payload[offset:offset + manifest_length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"unreadable manifest: {e}") from e
    offset += manifest_length

    grid = GridSpec.from_dict(manifest['grid'])
    field_bytes = grid.size * FIELD_DTYPE.itemsize

    def read_field():
        nonlocal offset
        if offset + field_bytes > len(payload):
            raise DatasetFormatError("dataset payload is truncated")
        values = np.frombuffer(payload, dtype=FIELD_DTYPE, count=grid.size, offset=offset)
        offset += field_bytes
        return values.reshape(grid.shape).astype(np.float64)

    samples = []
    for _ in range(int(manifest['count'])):
        if offset + _RECORD_HEAD.size > len(payload):
            raise DatasetFormatError("dataset payload is truncated")
        code, has_solution, *vector = _RECORD_HEAD.unpack_from(payload, offset)
        offset += _RECORD_HEAD.size
        try:
            system = SystemTag.from_code(code)
        except ConfigError as e:
            raise DatasetFormatError(str(e)) from e
        source = read_field()
        K = read_field() if system is SystemTag.DARCY else None
        solution = read_field() if has_solution else None
        coeffs = CoefficientSet.from_vector(np.array(vector), K=K)
        samples.append(PdeSample(system=system, source=source, coeffs=coeffs, solution=solution))

    if offset != len(payload):
        raise DatasetFormatError(f"{len(payload) - offset} trailing bytes after last record")
    return Dataset(samples=samples, split=manifest['split'], grid=grid, manifest=manifest)


def write_dataset(ds: Dataset, path: Union[str, Path]):
    """
    Write a dataset file atomically.

    Args:
        ds: Dataset to persist
        path: Destination file
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.with_suffix(path.suffix + '.tmp')
    temp_path.write_bytes(encode_dataset(ds))
    os.replace(temp_path, path)
    logger.info("wrote %d samples to %s", len(ds), path)


def read_dataset(path: Union[str, Path]) -> Dataset:
    """
    Read a dataset file.

    Raises:
        DatasetFormatError: Missing, corrupted or incompatible file
    """
    try:
        data = Path(path).read_bytes()
    except OSError as e:
        raise DatasetFormatError(f"cannot read dataset {path}: {e}") from e
    return decode_dataset(data)


def manifest_hash(ds: Dataset) -> str:
    """Short content hash identifying a dataset in reports."""
    return hashlib.sha256(encode_dataset(ds)).hexdigest()[:16]
