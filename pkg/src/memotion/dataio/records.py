"""``MEM1`` record files: preprocessed samples with per-record CRC-32.

Layout (all integers little-endian)::

    "MEM1"  u16 version=1
    repeated:
        u32 payload_length
        payload:
            u16 id_length, id (UTF-8)
            u16 H, u16 W, u8 channels, H*W*channels float32 (channel-major, C×H×W)
            u16 token_count, token_count × u32 ids,
            token_count × u8 mask, token_count × u8 segment ids
            5 × u8 labels (sentiment, humor, sarcasm, offense, motivation)
        u32 CRC-32 of payload

A sample without an image is stored with H = W = channels = 0, one without
text with token_count = 0.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from ..errors import CorruptionError, FormatError
from .labels import LabelSet
from .sample import EncodedText, MemeSample

MAGIC = b"MEM1"
VERSION = 1
_HEADER = struct.Struct("<4sH")
_U32 = struct.Struct("<I")


def encode_payload(sample: MemeSample) -> bytes:
    parts = []
    ident = sample.id.encode("utf-8")
    parts.append(struct.pack("<H", len(ident)) + ident)
    if sample.image is None:
        parts.append(struct.pack("<HHB", 0, 0, 0))
    else:
        img = np.asarray(sample.image, dtype="<f4")
        c, h, w = img.shape
        parts.append(struct.pack("<HHB", h, w, c) + img.tobytes())
    if sample.text is None:
        parts.append(struct.pack("<H", 0))
    else:
        t = sample.text
        parts.append(struct.pack("<H", len(t.input_ids)))
        parts.append(np.asarray(t.input_ids, dtype="<u4").tobytes())
        parts.append(np.asarray(t.input_mask, dtype=np.uint8).tobytes())
        parts.append(np.asarray(t.segment_ids, dtype=np.uint8).tobytes())
    parts.append(bytes(sample.labels.as_tuple()))
    return b"".join(parts)


class _Reader:
    def __init__(self, payload: bytes, index: int):
        self.buf, self.pos, self.index = payload, 0, index

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError("payload shorter than its declared fields", self.index)
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def decode_payload(payload: bytes, index: int = 0) -> MemeSample:
    r = _Reader(payload, index)
    (id_len,) = r.unpack("<H")
    ident = r.take(id_len).decode("utf-8")
    h, w, c = r.unpack("<HHB")
    image = None
    if c:
        image = np.frombuffer(r.take(4 * h * w * c), dtype="<f4").reshape(c, h, w).astype(np.float32)
    (n_tok,) = r.unpack("<H")
    text = None
    if n_tok:
        ids = np.frombuffer(r.take(4 * n_tok), dtype="<u4").astype(np.int64)
        mask = np.frombuffer(r.take(n_tok), dtype=np.uint8).astype(np.int64)
        seg = np.frombuffer(r.take(n_tok), dtype=np.uint8).astype(np.int64)
        text = EncodedText(ids, mask, seg)
    labels = LabelSet(*r.take(5))
    if r.pos != len(payload):
        raise CorruptionError("trailing bytes after labels", index)
    return MemeSample(ident, image, text, labels)


class RecordWriter:
    """Single-writer sink; use as a context manager."""

    def __init__(self, path):
        self._fh = open(path, "wb")
        self._fh.write(_HEADER.pack(MAGIC, VERSION))
        self.count = 0

    def write(self, sample: MemeSample):
        payload = encode_payload(sample)
        self._fh.write(_U32.pack(len(payload)))
        self._fh.write(payload)
        self._fh.write(_U32.pack(zlib.crc32(payload)))
        self.count += 1

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def write_records(path, samples: Iterable[MemeSample]) -> int:
    with RecordWriter(path) as writer:
        for sample in samples:
            writer.write(sample)
        return writer.count


def iter_records(path) -> Iterator[MemeSample]:
    """Stream samples one record at a time."""
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise FormatError(f"{path}: file too short for a record header")
        magic, version = _HEADER.unpack(header)
        if magic != MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"{path}: unsupported record version {version}")
        index = 0
        while True:
            raw_len = fh.read(4)
            if not raw_len:
                return
            if len(raw_len) < 4:
                raise CorruptionError("truncated length prefix", index)
            (length,) = _U32.unpack(raw_len)
            payload = fh.read(length)
            raw_crc = fh.read(4)
            if len(payload) < length or len(raw_crc) < 4:
                raise CorruptionError("truncated record", index)
            if zlib.crc32(payload) != _U32.unpack(raw_crc)[0]:
                raise CorruptionError("CRC mismatch", index)
            yield decode_payload(payload, index)
            index += 1


def read_records(path) -> list[MemeSample]:
    return list(iter_records(Path(path)))
