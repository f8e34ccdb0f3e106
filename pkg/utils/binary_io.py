"""
Little-endian record reading and atomic file writing shared by the FTR1, EMB1 and NET1 formats.
"""
import os
import struct
import tempfile

import numpy as np

from utils.exceptions import FormatError


def atomic_write_bytes(path, payload: bytes):
    """
    Writes payload to path through a temporary file in the same directory followed by a rename,
    so readers never observe a half-written file.

    Args:
        path (str | Path): destination file.
        payload (bytes): full file content.
    """
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=".tmp-", dir=directory)
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


class BinaryReader:
    """
    Cursor over an in-memory buffer that raises FormatError with the failing byte offset.

    Attributes:
        data (bytes): the whole file.
        offset (int): current read position.
        record_index (int | None): index of the record being parsed, reported in errors.
    """

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0
        self.record_index = None

    def fail(self, message, offset=None):
        raise FormatError(message, offset=self.offset if offset is None else offset,
                          record_index=self.record_index)

    def take(self, n_bytes, what):
        if self.offset + n_bytes > len(self.data):
            self.fail(f"Truncated file while reading {what}")
        chunk = self.data[self.offset:self.offset + n_bytes]
        self.offset += n_bytes
        return chunk

    def magic(self, expected: bytes):
        found = self.take(len(expected), "magic")
        if found != expected:
            self.fail(f"Bad magic {found!r}, expected {expected!r}", offset=0)

    def u16(self, what="u16"):
        return struct.unpack('<H', self.take(2, what))[0]

    def u32(self, what="u32"):
        return struct.unpack('<I', self.take(4, what))[0]

    def u64(self, what="u64"):
        return struct.unpack('<Q', self.take(8, what))[0]

    def utf8(self, n_bytes, what="id"):
        start = self.offset
        raw = self.take(n_bytes, what)
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError:
            self.fail(f"Invalid UTF-8 in {what}", offset=start)

    def float32_array(self, count, what="values", require_finite=True):
        start = self.offset
        values = np.frombuffer(self.take(4 * count, what), dtype='<f4').astype(np.float32)
        if require_finite and not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            self.fail(f"Non-finite value in {what}", offset=start + 4 * bad)
        return values

    def at_end(self):
        return self.offset == len(self.data)

    def expect_end(self):
        if not self.at_end():
            self.fail(f"{len(self.data) - self.offset} trailing bytes after last record")


def pack_id(utt_id: str) -> bytes:
    """
    Encodes an utterance id as u16 length + UTF-8 bytes.
    """
    raw = utt_id.encode('utf-8')
    if len(raw) > 0xFFFF:
        raise FormatError(f"Id too long to encode ({len(raw)} bytes): {utt_id[:40]}...")
    return struct.pack('<H', len(raw)) + raw
