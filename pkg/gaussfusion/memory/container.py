"""Binary container: magic, header length, JSON header, raw little-endian buffers.

Layout::

    b'GFCONT1\\n' | uint64 LE header length | UTF-8 JSON header | buffers...

The header lists every array (name, shape, dtype) in payload order, free-form
metadata and the SHA-256 digest of the payload.
"""
import json
import os
import struct
from typing import Any, Dict, Mapping, Optional, Tuple

import numpy as np
from cryptography.hazmat.primitives import hashes

from gaussfusion.core.errors import DatasetError

MAGIC = b'GFCONT1\n'
_LENGTH = struct.Struct('<Q')


def payload_digest(payload: bytes) -> str:
    digest = hashes.Hash(hashes.SHA256())
    digest.update(payload)
    return digest.finalize().hex()


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    if array.dtype == bool:
        array = array.astype(np.uint8)
    return np.ascontiguousarray(array, dtype=array.dtype.newbyteorder('<'))


def encode_container(arrays: Mapping[str, np.ndarray], meta: Optional[Mapping[str, Any]] = None) -> bytes:
    entries, chunks = [], []
    for name, array in arrays.items():
        le = _little_endian(array)
        entries.append({'name': name, 'shape': list(le.shape), 'dtype': le.dtype.str})
        chunks.append(le.tobytes())
    payload = b''.join(chunks)
    header = json.dumps({
        'arrays': entries,
        'meta': dict(meta or {}),
        'digest': payload_digest(payload),
    }, sort_keys=True).encode('utf-8')
    return MAGIC + _LENGTH.pack(len(header)) + header + payload


def decode_container(blob: bytes, source: str = '<bytes>') -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    if not blob.startswith(MAGIC):
        raise DatasetError(f"{source}: not a gaussfusion container")
    offset = len(MAGIC)
    if len(blob) < offset + _LENGTH.size:
        raise DatasetError(f"{source}: truncated header")
    (length,) = _LENGTH.unpack_from(blob, offset)
    offset += _LENGTH.size
    try:
        header = json.loads(blob[offset:offset + length].decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{source}: corrupt header ({exc})") from exc
    payload = blob[offset + length:]
    if payload_digest(payload) != header.get('digest'):
        raise DatasetError(f"{source}: payload digest mismatch")

    arrays: Dict[str, np.ndarray] = {}
    cursor = 0
    for entry in header['arrays']:
        dtype = np.dtype(entry['dtype'])
        count = int(np.prod(entry['shape'], dtype=np.int64))
        nbytes = count * dtype.itemsize
        if cursor + nbytes > len(payload):
            raise DatasetError(f"{source}: payload shorter than header declares")
        chunk = np.frombuffer(payload, dtype=dtype, count=count, offset=cursor)
        arrays[entry['name']] = chunk.astype(dtype.newbyteorder('='), copy=True).reshape(entry['shape'])
        cursor += nbytes
    return arrays, header.get('meta', {})


def write_container(path: str, arrays: Mapping[str, np.ndarray], meta: Optional[Mapping[str, Any]] = None) -> str:
    blob = encode_container(arrays, meta)
    directory = os.path.dirname(os.path.abspath(path))
    try:
        os.makedirs(directory, exist_ok=True)
        with open(path, 'wb') as fh:
            fh.write(blob)
    except OSError as exc:
        raise DatasetError(f"cannot write {path}: {exc}") from exc
    return path


def read_container(path: str) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    try:
        with open(path, 'rb') as fh:
            blob = fh.read()
    except OSError as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    return decode_container(blob, source=path)
