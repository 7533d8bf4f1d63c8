"""Per-cell embedding tables and their file formats.

Binary ``EMB1`` layout (little-endian)::

    b"EMB1" | u64 rows | u64 dim | rows * u64 cell ids | rows*dim f32 (row-major)

Text layout: one ``cell_id<TAB>v1,v2,...`` line per row.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError

EMB_MAGIC = b"EMB1"
_HEADER = struct.Struct("<4sQQ")


@dataclass
class EmbeddingTable:
    ids: np.ndarray
    vectors: np.ndarray
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.ids = np.ascontiguousarray(self.ids, dtype=np.uint64)
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != self.ids.shape[0]:
            raise ValidationError(
                f"vectors shape {self.vectors.shape} does not match {self.ids.shape[0]} ids"
            )
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValidationError("duplicate cell ids in embedding table")

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def index(self) -> dict:
        if self._index is None:
            self._index = {int(c): i for i, c in enumerate(self.ids)}
        return self._index

    def rows_for(self, cells) -> np.ndarray:
        """Row positions of ``cells``; -1 where a cell is absent."""
        idx = self.index
        return np.array([idx.get(int(c), -1) for c in cells], dtype=np.int64)

    def lookup(self, cell) -> np.ndarray:
        return self.vectors[self.index[int(cell)]]

    def reindexed(self, cells, fill: float = 0.0) -> tuple["EmbeddingTable", np.ndarray]:
        """Table over ``cells`` in that order; returns it with a found-mask."""
        rows = self.rows_for(cells)
        found = rows >= 0
        out = np.full((len(rows), self.dim), fill, dtype=np.float64)
        out[found] = self.vectors[rows[found]]
        return EmbeddingTable(np.asarray(cells, dtype=np.uint64), out), found


def write_emb(path, table: EmbeddingTable) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMB_MAGIC, len(table), table.dim))
        fh.write(table.ids.astype("<u8").tobytes())
        fh.write(table.vectors.astype("<f4").tobytes())


def read_emb(path) -> EmbeddingTable:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError("truncated EMB1 header", offset=len(data), path=path)
    magic, rows, dim = _HEADER.unpack_from(data, 0)
    if magic != EMB_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}", offset=0, path=path)
    off = _HEADER.size
    expected = off + rows * 8 + rows * dim * 4
    if len(data) != expected:
        raise ParseError(
            f"EMB1 payload size mismatch: expected {expected} bytes, got {len(data)}",
            offset=min(len(data), expected),
            path=path,
        )
    ids = np.frombuffer(data, dtype="<u8", count=rows, offset=off)
    off += rows * 8
    vec = np.frombuffer(data, dtype="<f4", count=rows * dim, offset=off).reshape(rows, dim)
    return EmbeddingTable(ids.astype(np.uint64), vec.astype(np.float64))


def write_tsv(path, table: EmbeddingTable) -> None:
    with open(path, "w") as fh:
        for cid, row in zip(table.ids, table.vectors):
            fh.write(f"{int(cid)}\t{','.join(repr(float(v)) for v in row)}\n")


def read_tsv(path) -> EmbeddingTable:
    ids, rows = [], []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError("expected 'cell_id<TAB>v1,v2,...'", line=lineno, path=path)
            try:
                cid = int(parts[0])
                vec = [float(v) for v in parts[1].split(",")]
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            if not 0 <= cid < 1 << 64:
                raise ParseError(f"cell id {cid} is not unsigned 64-bit", line=lineno, path=path)
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ParseError(f"row has {len(vec)} values, expected {dim}", line=lineno, path=path)
            ids.append(cid)
            rows.append(vec)
    if not rows:
        return EmbeddingTable(np.zeros(0, np.uint64), np.zeros((0, 0)))
    return EmbeddingTable(np.array(ids, dtype=np.uint64), np.array(rows))


def read_table(path) -> EmbeddingTable:
    """Read either format, sniffing the ``EMB1`` magic."""
    with open(path, "rb") as fh:
        head = fh.read(4)
    return read_emb(path) if head == EMB_MAGIC else read_tsv(path)
