"""
Checkpoint file format.

    b"LDPC" | u32 LE format version | u64 LE metadata length | JSON metadata | payloads

The metadata lists every tensor (name, shape, byte offset into the payload
section, byte length) in payload order, plus the learned betas, the final
bit-widths and the echoed run config. Payloads are little-endian float32.
"""
import json
import logging
import struct
from dataclasses import dataclass
from math import prod
from pathlib import Path
from typing import Dict, Mapping

import numpy as np

from .exceptions import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b'LDPC'
FORMAT_VERSION = 1
PAYLOAD_DTYPE = np.dtype('<f4')
_HEADER = struct.Struct('<4sIQ')


@dataclass
class Checkpoint:
    metadata: dict
    arrays: Dict[str, np.ndarray]

    @property
    def betas(self):
        return {int(k): float(v) for k, v in self.metadata.get('betas', {}).items()}

    @property
    def final_bits(self):
        return {int(k): int(v) for k, v in self.metadata.get('final_bits', {}).items()}

    @property
    def config(self):
        return self.metadata['config']


def save_checkpoint(path, arrays: Mapping[str, np.ndarray], metadata: dict):
    """Write `arrays` (name -> array) and `metadata` to `path`; returns the path."""
    entries, payloads, offset = [], [], 0
    for name, array in arrays.items():
        data = np.ascontiguousarray(array, dtype=PAYLOAD_DTYPE)
        entries.append({'name': name, 'shape': list(data.shape), 'offset': offset, 'nbytes': data.nbytes})
        payloads.append(data.tobytes())
        offset += data.nbytes
    meta = json.dumps({**metadata, 'tensors': entries}, sort_keys=True).encode('utf-8')

    path = Path(path)
    with open(path, 'wb') as handle:
        handle.write(_HEADER.pack(MAGIC, FORMAT_VERSION, len(meta)))
        handle.write(meta)
        for payload in payloads:
            handle.write(payload)
    logger.info(f"Saved checkpoint with {len(entries)} tensors ({offset} payload bytes) to {path}")
    return path


def load_checkpoint(path) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, meta_len = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}, expected {FORMAT_VERSION}")
    start = _HEADER.size
    if len(raw) < start + meta_len:
        raise CheckpointError(f"{path}: truncated metadata, need {meta_len} bytes")
    try:
        metadata = json.loads(raw[start:start + meta_len].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: metadata is not valid JSON: {exc}") from exc

    payload = memoryview(raw)[start + meta_len:]
    arrays = {}
    for entry in metadata.get('tensors', []):
        shape = tuple(entry['shape'])
        nbytes = prod(shape) * PAYLOAD_DTYPE.itemsize
        end = entry['offset'] + nbytes
        if nbytes != entry['nbytes'] or end > len(payload):
            raise CheckpointError(f"{path}: payload for tensor '{entry['name']}' is truncated or inconsistent")
        arrays[entry['name']] = np.frombuffer(payload[entry['offset']:end], dtype=PAYLOAD_DTYPE) \
            .reshape(shape).astype(np.float32)
    logger.debug(f"Loaded checkpoint {path}: {len(arrays)} tensors")
    return Checkpoint(metadata, arrays)
