"""Episode dataset persistence: versioned, checksummed, atomically appended.

File layout (little-endian):
    magic  b"AWMD"
    u32    version (1)
    u64    record count
    u32    file checksum: crc32 over the per-record crc words
    records: u64 payload length, payload, u32 crc32(payload)

Payload: u32 JSON-header length, JSON header (task/stage/seed/shapes), then
raw '<f4' observation and action arrays. Appending rewrites to a temp file
and renames, so readers never observe a partial file; truncation and bit
corruption are caught by the length prefixes and checksums.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib

import numpy as np

from ..trajectory import EpisodeRecord

MAGIC = b"AWMD"
VERSION = 1
_HEADER = struct.Struct("<4sIQI")


class DatasetError(IOError):
    pass


def _record_payload(rec: EpisodeRecord) -> bytes:
    obs = np.ascontiguousarray(rec.observations, dtype="<f4")
    acts = np.ascontiguousarray(rec.actions, dtype="<f4")
    head = json.dumps({
        "task": rec.task, "stage": rec.stage, "seed": rec.seed,
        "obs_shape": list(obs.shape), "act_shape": list(acts.shape),
    }, sort_keys=True).encode("utf-8")
    return struct.pack("<I", len(head)) + head + obs.tobytes() + acts.tobytes()


def _payload_record(payload: bytes, offset: int) -> EpisodeRecord:
    (head_len,) = struct.unpack_from("<I", payload, 0)
    head = json.loads(payload[4:4 + head_len].decode("utf-8"))
    obs_shape = tuple(head["obs_shape"])
    act_shape = tuple(head["act_shape"])
    at = 4 + head_len
    obs_bytes = 4 * int(np.prod(obs_shape))
    act_bytes = 4 * int(np.prod(act_shape))
    if at + obs_bytes + act_bytes != len(payload):
        raise DatasetError(f"record payload size mismatch at byte {offset}")
    obs = np.frombuffer(payload, dtype="<f4", count=int(np.prod(obs_shape)),
                        offset=at).reshape(obs_shape)
    acts = np.frombuffer(payload, dtype="<f4", count=int(np.prod(act_shape)),
                         offset=at + obs_bytes).reshape(act_shape)
    return EpisodeRecord(task=head["task"], stage=head["stage"], seed=head["seed"],
                         observations=obs.copy(), actions=acts.copy())


def write(path: str, records: list[EpisodeRecord]) -> None:
    """Write the full dataset atomically (temp file + rename)."""
    body = bytearray()
    file_crc = 0
    for rec in records:
        payload = _record_payload(rec)
        crc = zlib.crc32(payload)
        body += struct.pack("<Q", len(payload))
        body += payload
        body += struct.pack("<I", crc)
        file_crc = zlib.crc32(struct.pack("<I", crc), file_crc)
    header = _HEADER.pack(MAGIC, VERSION, len(records), file_crc)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(header)
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def read(path: str) -> list[EpisodeRecord]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise DatasetError(f"{path}: truncated header at byte {len(blob)}")
    magic, version, count, file_crc = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DatasetError(f"{path}: not a dataset file (bad magic)")
    if version != VERSION:
        raise DatasetError(f"{path}: unknown dataset version {version}")
    records = []
    offset = _HEADER.size
    running_crc = 0
    for i in range(count):
        if offset + 8 > len(blob):
            raise DatasetError(f"{path}: truncated at byte {offset} (record {i})")
        (length,) = struct.unpack_from("<Q", blob, offset)
        offset += 8
        if offset + length + 4 > len(blob):
            raise DatasetError(f"{path}: truncated at byte {offset} (record {i})")
        payload = blob[offset:offset + length]
        offset += length
        (crc,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if zlib.crc32(payload) != crc:
            raise DatasetError(f"{path}: checksum mismatch in record {i} at byte {offset - 4}")
        running_crc = zlib.crc32(struct.pack("<I", crc), running_crc)
        records.append(_payload_record(payload, offset))
    if running_crc != file_crc:
        raise DatasetError(f"{path}: whole-file checksum mismatch")
    if offset != len(blob):
        raise DatasetError(f"{path}: {len(blob) - offset} trailing bytes at {offset}")
    return records


def append(path: str, new_records: list[EpisodeRecord]) -> None:
    """Atomic append: datasets are append-only; existing records never change."""
    existing = read(path) if os.path.exists(path) else []
    write(path, existing + list(new_records))
