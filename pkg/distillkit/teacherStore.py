"""
Precomputed teacher embeddings, the only supervision of label-free distillation.

EMB1 layout (little-endian): magic "EMB1", u32 dim, u32 count, then per record u16 id length,
UTF-8 id, u32 dim, float32 x dim.
"""
import os
import struct

import numpy as np

from distillkit.Constants import EMBEDDING_MAGIC
from utils.binary_io import BinaryReader, atomic_write_bytes, pack_id
from utils.exceptions import DataError, MissingIdError
from utils.logger_config import logger

HEADER_BYTES = len(EMBEDDING_MAGIC) + 8


class TeacherStore:
    """
    Immutable mapping from utterance id to teacher embedding.

    Attributes:
        dim (int): embedding length shared by every entry.
    """

    def __init__(self, dim, entries=None):
        if dim < 1:
            raise DataError(f"Embedding dim must be positive, got {dim}")
        self.dim = int(dim)
        self._entries = {}
        if isinstance(entries, dict):
            entries = entries.items()
        for utt_id, vector in entries or []:
            self.add(utt_id, vector)

    def add(self, utt_id, vector):
        if not isinstance(utt_id, str) or not utt_id:
            raise DataError(f"Utterance id must be a non-empty string, got {utt_id!r}")
        if utt_id in self._entries:
            raise DataError(f"Duplicate utterance id {utt_id!r}")
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise DataError(f"Embedding for {utt_id!r} has shape {vector.shape}, expected ({self.dim},)")
        if not np.all(np.isfinite(vector)):
            raise DataError(f"Non-finite teacher embedding for {utt_id!r}")
        vector.setflags(write=False)
        self._entries[utt_id] = vector

    def __len__(self):
        return len(self._entries)

    def __contains__(self, utt_id):
        return utt_id in self._entries

    def ids(self):
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def lookup(self, utt_id) -> np.ndarray:
        """
        Raises:
            MissingIdError: if the id has no teacher embedding.
        """
        try:
            return self._entries[utt_id]
        except KeyError:
            raise MissingIdError(utt_id) from None


def lookup(store: TeacherStore, utt_id):
    return store.lookup(utt_id)


def store_size_bytes(store: TeacherStore):
    """
    Exact EMB1 file size: header + sum(2 + |id| + 4 + 4 * dim).
    """
    return HEADER_BYTES + sum(2 + len(utt_id.encode('utf-8')) + 4 + 4 * store.dim for utt_id in store.ids())


def write_store(entries, dim, path):
    """
    Writes an EMB1 file atomically.

    Args:
        entries (dict | iterable | TeacherStore): (id, vector) pairs.
        dim (int): embedding length.
        path (str | Path): destination.

    Raises:
        DataError: duplicate id or wrong vector length.
    """
    store = entries if isinstance(entries, TeacherStore) else TeacherStore(dim, entries)
    if store.dim != dim:
        raise DataError(f"Store dim {store.dim} != requested dim {dim}")
    parts = [EMBEDDING_MAGIC, struct.pack('<II', dim, len(store))]
    for utt_id, vector in store.items():
        parts.append(pack_id(utt_id))
        parts.append(struct.pack('<I', dim))
        parts.append(vector.astype('<f4').tobytes())
    atomic_write_bytes(path, b"".join(parts))
    logger.info("Wrote %d teacher embeddings (dim %d) to %s", len(store), dim, os.fspath(path))


def read_store(path) -> TeacherStore:
    """
    Loads an EMB1 file fully into memory.

    Raises:
        FormatError: bad magic, truncation, dim mismatch, duplicate id or non-finite values; the
            error names the byte offset and the failing record.
    """
    with open(path, 'rb') as f:
        reader = BinaryReader(f.read())
    reader.magic(EMBEDDING_MAGIC)
    dim = reader.u32("dim")
    count = reader.u32("record count")
    if dim < 1:
        reader.fail("Embedding dim must be positive", offset=len(EMBEDDING_MAGIC))
    store = TeacherStore(dim)
    for index in range(count):
        reader.record_index = index
        record_start = reader.offset
        utt_id = reader.utf8(reader.u16("id length"))
        dim_offset = reader.offset
        record_dim = reader.u32("record dim")
        if record_dim != dim:
            reader.fail(f"Record dim {record_dim} != file dim {dim}", offset=dim_offset)
        vector = reader.float32_array(dim, "embedding")
        if utt_id in store or not utt_id:
            reader.fail(f"Duplicate or empty id {utt_id!r}", offset=record_start)
        store.add(utt_id, vector)
    reader.record_index = None
    reader.expect_end()
    return store


def import_tsv(path) -> TeacherStore:
    """
    Parses `id<TAB>v1,v2,...,vD` lines from an external extractor. Blank lines are ignored.

    Raises:
        DataError: naming the offending line number.
    """
    store = None
    with open(path, encoding='utf-8') as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip('\n').rstrip('\r')
            if not line.strip():
                continue
            parts = line.split('\t')
            if len(parts) != 2 or not parts[0]:
                raise DataError(f"{path}:{line_number}: expected 'id<TAB>v1,...,vD'")
            try:
                vector = np.array([float(v) for v in parts[1].split(',')], dtype=np.float32)
            except ValueError:
                raise DataError(f"{path}:{line_number}: non-numeric embedding value")
            if store is None:
                store = TeacherStore(vector.size)
            try:
                store.add(parts[0], vector)
            except DataError as e:
                raise DataError(f"{path}:{line_number}: {e.message}")
    if store is None:
        raise DataError(f"{path}: no embeddings found")
    logger.info("Imported %d embeddings of dim %d from %s", len(store), store.dim, path)
    return store
