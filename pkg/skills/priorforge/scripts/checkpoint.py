#!/usr/bin/env python3
"""
Checkpoint container for PriorForge

Single-file, versioned, named-tensor layout:

    magic b"PFCK" | u32 format version | u64 header length | JSON header | tensor data

All integers are little-endian. The JSON header (sorted keys) carries the metadata and,
per tensor, its name, dtype, shape and byte offset into the data section. Tensor
payloads are little-endian ('<f4' for parameters). Saving, loading and saving again
reproduces the file byte for byte.
"""

import json
import logging
import os
import struct
import tempfile
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

import numpy as np
import torch

try:
    from config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
except ImportError:
    CHECKPOINT_MAGIC = b"PFCK"
    CHECKPOINT_VERSION = 1

logger = logging.getLogger(__name__)

_PREAMBLE = struct.Struct('<4sIQ')

# torch dtype <-> little-endian numpy dtype string
_DTYPES = OrderedDict([
    (torch.float32, '<f4'),
    (torch.float64, '<f8'),
    (torch.int64, '<i8'),
    (torch.int32, '<i4'),
])
_TORCH_DTYPES = {code: dtype for dtype, code in _DTYPES.items()}

_HEADER_KEYS = ('config', 'epoch', 'format_version', 'kind', 'meta', 'seed', 'step', 'tensors')
_ENTRY_KEYS = ('dtype', 'name', 'nbytes', 'offset', 'shape')


class CheckpointError(Exception):
    """Raised for unreadable, truncated or incompatible checkpoint files"""
    pass


@dataclass
class Checkpoint:
    """Named tensors plus the metadata needed to rebuild what produced them"""
    tensors: Dict[str, torch.Tensor]
    config: Dict[str, Any]
    kind: str = 'model'
    step: int = 0
    epoch: int = 0
    seed: int = 0
    meta: Dict[str, Any] = field(default_factory=dict)
    format_version: int = CHECKPOINT_VERSION


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    """Serialize a checkpoint to bytes"""
    entries = []
    chunks = []
    offset = 0
    for name, tensor in ckpt.tensors.items():
        tensor = tensor.detach().cpu().contiguous()
        if tensor.dtype not in _DTYPES:
            raise CheckpointError(f"Unsupported dtype {tensor.dtype} for tensor '{name}'")
        payload = tensor.numpy().astype(_DTYPES[tensor.dtype], copy=False).tobytes()
        entries.append({
            'name': name,
            'dtype': _DTYPES[tensor.dtype],
            'shape': list(tensor.shape),
            'offset': offset,
            'nbytes': len(payload),
        })
        chunks.append(payload)
        offset += len(payload)

    header = {
        'format_version': ckpt.format_version,
        'kind': ckpt.kind,
        'step': int(ckpt.step),
        'epoch': int(ckpt.epoch),
        'seed': int(ckpt.seed),
        'config': ckpt.config,
        'meta': ckpt.meta,
        'tensors': entries,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    preamble = _PREAMBLE.pack(CHECKPOINT_MAGIC, ckpt.format_version, len(header_bytes))
    return preamble + header_bytes + b''.join(chunks)


def decode_checkpoint(raw: bytes, source: str = '<bytes>') -> Checkpoint:
    """Parse checkpoint bytes"""
    if len(raw) < _PREAMBLE.size:
        raise CheckpointError(f"{source}: file too short for a checkpoint header")
    magic, version, header_len = _PREAMBLE.unpack_from(raw, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {version}")

    data_start = _PREAMBLE.size + header_len
    if len(raw) < data_start:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(raw[_PREAMBLE.size:data_start].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{source}: corrupted header: {e}")
    if not isinstance(header, dict):
        raise CheckpointError(f"{source}: corrupted header: not an object")
    missing = [key for key in _HEADER_KEYS if key not in header]
    if missing:
        raise CheckpointError(f"{source}: header missing keys: {', '.join(missing)}")

    tensors = OrderedDict()
    for entry in header['tensors']:
        if not isinstance(entry, dict) or any(key not in entry for key in _ENTRY_KEYS):
            raise CheckpointError(f"{source}: malformed tensor entry in header")
        start = data_start + entry['offset']
        end = start + entry['nbytes']
        if end > len(raw):
            raise CheckpointError(f"{source}: truncated data for tensor '{entry['name']}'")
        if entry['dtype'] not in _TORCH_DTYPES:
            raise CheckpointError(f"{source}: unknown dtype {entry['dtype']}")
        array = np.frombuffer(raw[start:end], dtype=entry['dtype']).reshape(entry['shape'])
        tensors[entry['name']] = torch.from_numpy(array.astype(array.dtype.newbyteorder('='), copy=True))

    return Checkpoint(
        tensors=tensors,
        config=header['config'],
        kind=header['kind'],
        step=header['step'],
        epoch=header['epoch'],
        seed=header['seed'],
        meta=header['meta'],
        format_version=header['format_version'],
    )


def atomic_write(path: Path, payload: bytes):
    """Write bytes via a temp file in the same directory, then rename into place"""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=str(path.parent), prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(ckpt: Checkpoint, path: str) -> Path:
    """Write a checkpoint file atomically"""
    target = Path(path)
    payload = encode_checkpoint(ckpt)
    atomic_write(target, payload)
    logger.info(f"Checkpoint written: {target} ({len(ckpt.tensors)} tensors, {len(payload)} bytes)")
    return target


def load_checkpoint(path: str) -> Checkpoint:
    """Read a checkpoint file"""
    source = Path(path)
    if not source.exists():
        raise CheckpointError(f"Checkpoint not found: {source}")
    return decode_checkpoint(source.read_bytes(), str(source))


def split_prefix(tensors: Dict[str, torch.Tensor], prefix: str) -> Dict[str, torch.Tensor]:
    """Tensors under `prefix.` with the prefix stripped, in stored order"""
    head = f"{prefix}."
    return OrderedDict((name[len(head):], t) for name, t in tensors.items() if name.startswith(head))
