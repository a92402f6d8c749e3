"""
Self-describing binary container shared by datasets, channel dumps and checkpoints.

Layout (all integers little-endian):
    magic          12 bytes
    version        uint32
    manifest       uint64 length, UTF-8 JSON bytes, uint32 CRC32
    payload        uint64 length, raw bytes, uint32 CRC32
"""

import json
import os
import struct
import zlib
from pathlib import Path
from typing import Any, Iterable, Union

from mimogan.errors import BadMagicError, ChecksumError, ContainerError, TruncatedFileError, VersionMismatchError

FORMAT_VERSION = 1
MAGIC_LENGTH = 12

DATASET_MAGIC = b"MIMOGAN-DSET"
CHANNELS_MAGIC = b"MIMOGAN-CHAN"
CHECKPOINT_MAGIC = b"MIMOGAN-CKPT"

_HEADER = struct.Struct("<12sI")
_LENGTH = struct.Struct("<Q")
_CRC = struct.Struct("<I")


def canonical_json(value: Any) -> str:
    """Sorted-key compact JSON, stable across runs."""
    return json.dumps(value, sort_keys=True, separators=(",", ":"))


def write_container(path: Union[str, Path], magic: bytes, manifest: dict, chunks: Iterable[bytes], payload_length: int) -> Path:
    """
    Write a container, streaming the payload from ordered chunks.

    Bytes go to a sibling .tmp file that replaces `path` only once complete; a failed write
    leaves any existing file at `path` untouched.

    Args:
        path: destination file; parent directories are created
        magic: 12-byte magic identifying the content kind
        manifest: JSON-serializable header
        chunks: payload byte chunks in file order
        payload_length: total payload size in bytes, checked against the chunks
    """
    if len(magic) != MAGIC_LENGTH:
        raise ValueError(f"magic must be {MAGIC_LENGTH} bytes, got {len(magic)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest_bytes = canonical_json(manifest).encode("utf-8")
    partial = path.with_name(path.name + ".tmp")
    try:
        with partial.open("wb") as f:
            f.write(_HEADER.pack(magic, FORMAT_VERSION))
            f.write(_LENGTH.pack(len(manifest_bytes)))
            f.write(manifest_bytes)
            f.write(_CRC.pack(zlib.crc32(manifest_bytes)))
            f.write(_LENGTH.pack(payload_length))
            crc = 0
            written = 0
            for chunk in chunks:
                f.write(chunk)
                crc = zlib.crc32(chunk, crc)
                written += len(chunk)
            if written != payload_length:
                raise ContainerError(f"payload has {written} bytes, {payload_length} declared", path)
            f.write(_CRC.pack(crc))
        os.replace(partial, path)
    except OSError as e:
        partial.unlink(missing_ok=True)
        raise ContainerError(f"cannot write container: {e}", path) from e
    except BaseException:
        partial.unlink(missing_ok=True)
        raise
    return path


def _take(buffer: bytes, offset: int, size: int, what: str, path: Path) -> bytes:
    if offset + size > len(buffer):
        raise TruncatedFileError(f"file ends inside the {what} ({len(buffer) - offset} of {size} bytes)", path)
    return buffer[offset: offset + size]


def read_container(path: Union[str, Path], magic: bytes) -> tuple[dict, bytes]:
    """
    Read and verify a container.

    Returns:
        (manifest, payload bytes)

    Raises:
        BadMagicError, VersionMismatchError, TruncatedFileError, ChecksumError
    """
    path = Path(path)
    try:
        buffer = path.read_bytes()
    except OSError as e:
        raise ContainerError(f"cannot read container: {e}", path) from e

    found_magic, version = _HEADER.unpack(_take(buffer, 0, _HEADER.size, "header", path))
    if found_magic != magic:
        raise BadMagicError(f"expected magic {magic!r}, found {found_magic!r}", path)
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version} is not supported (expected {FORMAT_VERSION})", path)
    offset = _HEADER.size

    sections = []
    for what in ("manifest", "payload"):
        (length,) = _LENGTH.unpack(_take(buffer, offset, _LENGTH.size, f"{what} length", path))
        offset += _LENGTH.size
        body = _take(buffer, offset, length, what, path)
        offset += length
        (crc,) = _CRC.unpack(_take(buffer, offset, _CRC.size, f"{what} checksum", path))
        offset += _CRC.size
        if zlib.crc32(body) != crc:
            raise ChecksumError(f"{what} CRC32 mismatch", path)
        sections.append(body)

    try:
        manifest = json.loads(sections[0].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ContainerError(f"manifest is not valid JSON: {e}", path) from e
    return manifest, sections[1]
