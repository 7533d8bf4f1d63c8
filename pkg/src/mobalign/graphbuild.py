"""Mobility graph construction and per-node edge sampling.

Every (entity, time bucket) pair contributes one unit of weight to each
unordered pair of distinct cells the entity visited in that bucket.  The
result is stored as a symmetric CSR matrix over the sorted cell ids.
"""

from __future__ import annotations

import itertools
import logging
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from . import hexgrid
from .errors import ParseError, ValidationError

log = logging.getLogger(__name__)

GRAPH_MAGIC = b"MGR1"
_HEADER = struct.Struct("<4sQQ")

# ratio * degree is computed in floating point; 0.1 * 30 must give 3, not 4.
_CEIL_SLACK = 1e-9


class EventRecord(NamedTuple):
    entity_id: str
    cell: int
    bucket: int


@dataclass
class MobilityGraph:
    node_index: np.ndarray
    row_offsets: np.ndarray
    col_indices: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.node_index = np.ascontiguousarray(self.node_index, dtype=np.uint64)
        self.row_offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        self.col_indices = np.ascontiguousarray(self.col_indices, dtype=np.int32)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64)

    @property
    def n_nodes(self) -> int:
        return len(self.node_index)

    @property
    def nnz(self) -> int:
        """Number of stored directed entries (twice the undirected edge count)."""
        return len(self.col_indices)

    @property
    def n_edges(self) -> int:
        return self.nnz // 2

    def degrees(self) -> np.ndarray:
        return np.diff(self.row_offsets)

    def weighted_degrees(self) -> np.ndarray:
        return np.bincount(self.rows(), weights=self.weights, minlength=self.n_nodes)

    def rows(self) -> np.ndarray:
        """Source ordinal of every stored entry."""
        return np.repeat(np.arange(self.n_nodes, dtype=np.int64), self.degrees())

    def neighbors(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        s, e = self.row_offsets[i], self.row_offsets[i + 1]
        return self.col_indices[s:e], self.weights[s:e]

    def ordinal(self, cell) -> int:
        i = int(np.searchsorted(self.node_index, np.uint64(cell)))
        if i >= self.n_nodes or self.node_index[i] != np.uint64(cell):
            raise KeyError(cell)
        return i

    def edge_list(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Undirected edges as ``(i, j, w)`` ordinal arrays with ``i < j``."""
        rows = self.rows()
        upper = rows < self.col_indices
        return rows[upper], self.col_indices[upper].astype(np.int64), self.weights[upper]

    def weight_dict(self) -> dict:
        """``{(cell_a, cell_b): w}`` with ``cell_a < cell_b``."""
        i, j, w = self.edge_list()
        ids = self.node_index
        return {(int(ids[a]), int(ids[b])): float(x) for a, b, x in zip(i, j, w)}

    def reverse_index(self) -> np.ndarray:
        """Position of the (j, i) entry for every stored (i, j) entry."""
        # Sorting entries by (col, row) enumerates the reversed pairs in
        # (row, col) order because the pattern is symmetric.
        return np.lexsort((self.rows(), self.col_indices))

    def validate(self) -> None:
        n = self.n_nodes
        if self.row_offsets.shape != (n + 1,) or self.row_offsets[0] != 0 \
                or self.row_offsets[-1] != self.nnz or np.any(np.diff(self.row_offsets) < 0):
            raise ValidationError("malformed CSR row offsets")
        if n > 1 and np.any(np.diff(self.node_index.astype(object)) <= 0):
            raise ValidationError("node_index must be strictly increasing")
        if self.nnz == 0:
            return
        if self.col_indices.min() < 0 or self.col_indices.max() >= n:
            raise ValidationError("column ordinal out of range")
        if np.any(self.weights <= 0) or not np.all(np.isfinite(self.weights)):
            raise ValidationError("edge weights must be finite and positive")
        rows = self.rows()
        if np.any(rows == self.col_indices):
            raise ValidationError("self-loop present")
        same_row = rows[1:] == rows[:-1]
        if np.any(self.col_indices[1:][same_row] <= self.col_indices[:-1][same_row]):
            raise ValidationError("columns not strictly sorted within a row")
        rev = self.reverse_index()
        if np.any(self.col_indices[rev] != rows) or np.any(rows[rev] != self.col_indices) \
                or np.any(self.weights[rev] != self.weights):
            raise ValidationError("graph is not symmetric")

    def __eq__(self, other):
        if not isinstance(other, MobilityGraph):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, f), getattr(other, f))
            for f in ("node_index", "row_offsets", "col_indices", "weights")
        )


def graph_from_edges(node_index, src, dst, weights) -> MobilityGraph:
    """Symmetric CSR from undirected ordinal edges (each pair listed once)."""
    node_index = np.asarray(node_index, dtype=np.uint64)
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(src == dst):
        raise ValidationError("self-loops are not allowed")
    rows = np.concatenate([src, dst])
    cols = np.concatenate([dst, src])
    w = np.concatenate([weights, weights])
    order = np.lexsort((cols, rows))
    rows, cols, w = rows[order], cols[order], w[order]
    offsets = np.zeros(len(node_index) + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=len(node_index)), out=offsets[1:])
    return MobilityGraph(node_index, offsets, cols, w)


def graph_from_counts(counts: dict, nodes: Iterable[int] = ()) -> MobilityGraph:
    """Build from ``{(cell_a, cell_b): weight}``; extra ``nodes`` stay isolated."""
    cells = set(int(c) for c in nodes)
    for a, b in counts:
        cells.add(int(a))
        cells.add(int(b))
    node_index = np.array(sorted(cells), dtype=np.uint64)
    pos = {c: i for i, c in enumerate(node_index.tolist())}
    src = np.fromiter((pos[int(a)] for a, _ in counts), dtype=np.int64, count=len(counts))
    dst = np.fromiter((pos[int(b)] for _, b in counts), dtype=np.int64, count=len(counts))
    w = np.fromiter(counts.values(), dtype=np.float64, count=len(counts))
    return graph_from_edges(node_index, src, dst, w)


def count_pairs(events: Iterable) -> tuple[Counter, set]:
    """Co-visitation counts ``{(a, b): n}`` (a < b) plus the set of seen cells.

    Counters from disjoint event shards can be merged with ``+``.
    """
    visits = defaultdict(set)
    for ev in events:
        entity, cell, bucket = ev
        if bucket < 0:
            raise ValidationError(f"negative time bucket {bucket} for entity {entity!r}")
        visits[(entity, bucket)].add(int(cell))
    counts = Counter()
    seen = set()
    for cells in visits.values():
        seen.update(cells)
        if len(cells) > 1:
            counts.update(itertools.combinations(sorted(cells), 2))
    return counts, seen


def build_graph(events: Iterable) -> MobilityGraph:
    counts, seen = count_pairs(events)
    return graph_from_counts(counts, seen)


def keep_count(ratio: float, degree):
    """Per-node number of retained edges: ``ceil(ratio * degree)``."""
    k = np.ceil(ratio * np.asarray(degree, dtype=np.float64) - _CEIL_SLACK).astype(np.int64)
    return np.clip(k, np.minimum(degree, 1), degree)


def _check_ratio(ratio):
    if not (0.0 < ratio <= 1.0):
        raise ValidationError(f"ratio must be in (0, 1], got {ratio}")


def keep_mask(g: MobilityGraph, ratio: float, mode: str = "topk", seed: int = 0) -> np.ndarray:
    """Boolean mask over stored entries: the edges each node keeps for itself.

    ``topk`` orders a node's edges by descending weight, ties by ascending
    neighbor cell id.  ``random`` draws a uniform subset without replacement.
    """
    _check_ratio(ratio)
    rows = g.rows()
    if mode == "topk":
        # Columns are ordinals into the sorted node_index, so ordering by
        # column is ordering by neighbor cell id.
        order = np.lexsort((g.col_indices, -g.weights, rows))
    elif mode == "random":
        rng = np.random.default_rng(seed)
        order = np.lexsort((rng.random(g.nnz), rows))
    else:
        raise ValidationError(f"unknown sampling mode {mode!r}")
    rank = np.empty(g.nnz, dtype=np.int64)
    rank[order] = np.arange(g.nnz) - g.row_offsets[rows[order]]
    return rank < keep_count(ratio, g.degrees())[rows]


def subgraph_from_mask(g: MobilityGraph, mask: np.ndarray) -> MobilityGraph:
    """Union-symmetrize a per-node keep mask into a subgraph on the same nodes."""
    keep = mask | mask[g.reverse_index()]
    rows = g.rows()
    offsets = np.zeros(g.n_nodes + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows[keep], minlength=g.n_nodes), out=offsets[1:])
    return MobilityGraph(g.node_index.copy(), offsets, g.col_indices[keep], g.weights[keep])


def sample_topk(g: MobilityGraph, ratio: float = 0.10) -> MobilityGraph:
    return subgraph_from_mask(g, keep_mask(g, ratio, "topk"))


def sample_random(g: MobilityGraph, ratio: float, seed: int) -> MobilityGraph:
    return subgraph_from_mask(g, keep_mask(g, ratio, "random", seed))


def sample(g: MobilityGraph, ratio: float, mode: str = "topk", seed: int = 0) -> MobilityGraph:
    return subgraph_from_mask(g, keep_mask(g, ratio, mode, seed))


# --- file formats -----------------------------------------------------------


def write_graph(path, g: MobilityGraph) -> None:
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(GRAPH_MAGIC, g.n_nodes, g.nnz))
        fh.write(g.node_index.astype("<u8").tobytes())
        fh.write(g.row_offsets.astype("<u8").tobytes())
        fh.write(g.col_indices.astype("<u4").tobytes())
        fh.write(g.weights.astype("<f8").tobytes())


def read_graph(path) -> MobilityGraph:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ParseError("truncated MGR1 header", offset=len(data), path=path)
    magic, n, nnz = _HEADER.unpack_from(data, 0)
    if magic != GRAPH_MAGIC:
        raise ParseError(f"bad magic {magic!r}, expected {GRAPH_MAGIC!r}", offset=0, path=path)
    expected = _HEADER.size + 8 * n + 8 * (n + 1) + 4 * nnz + 8 * nnz
    if len(data) != expected:
        raise ParseError(
            f"MGR1 payload size mismatch: expected {expected} bytes, got {len(data)}",
            offset=min(len(data), expected),
            path=path,
        )
    off = _HEADER.size
    nodes = np.frombuffer(data, "<u8", n, off)
    off += 8 * n
    offsets = np.frombuffer(data, "<u8", n + 1, off)
    off += 8 * (n + 1)
    cols = np.frombuffer(data, "<u4", nnz, off)
    off += 4 * nnz
    w = np.frombuffer(data, "<f8", nnz, off)
    g = MobilityGraph(nodes, offsets.astype(np.int64), cols.astype(np.int32), w)
    try:
        g.validate()
    except ValidationError as exc:
        raise ParseError(f"invalid graph: {exc}", offset=_HEADER.size, path=path) from None
    return g


def write_edge_text(path, g: MobilityGraph) -> None:
    i, j, w = g.edge_list()
    ids = g.node_index
    with open(path, "w") as fh:
        for a, b, x in zip(i, j, w):
            fh.write(f"{int(ids[a])}\t{int(ids[b])}\t{float(x)!r}\n")


def read_edge_text(path) -> MobilityGraph:
    counts = Counter()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                a, b, w = int(parts[0]), int(parts[1]), float(parts[2])
            except (ValueError, IndexError):
                raise ParseError("expected 'cell_a<TAB>cell_b<TAB>weight'", line=lineno, path=path) from None
            if a == b or not w > 0:
                raise ParseError("self-loop or nonpositive weight", line=lineno, path=path)
            counts[(min(a, b), max(a, b))] += w
    return graph_from_counts(counts)


def read_events(path, grid: hexgrid.GridConfig | None = None):
    """Yield :class:`EventRecord` from a tab-separated event log.

    Rows are either ``entity, cell_id, bucket`` (pre-tokenized) or
    ``entity, lat, lon, bucket``; the latter requires ``grid``.
    """
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                if len(parts) == 3:
                    cell = int(parts[1])
                    if not 0 <= cell < 1 << 64:
                        raise ValueError(f"cell id {cell} is not unsigned 64-bit")
                elif len(parts) == 4:
                    if grid is None:
                        raise ValueError("lat/lon rows need a grid configuration")
                    coord = hexgrid.GeoCoord(float(parts[1]), float(parts[2]))
                    cell = hexgrid.cell_of(coord, grid).packed
                else:
                    raise ValueError(f"expected 3 or 4 tab-separated fields, got {len(parts)}")
                bucket = int(parts[-1])
                if bucket < 0:
                    raise ValueError(f"negative bucket {bucket}")
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            yield EventRecord(parts[0], cell, bucket)


def write_events(path, events: Iterable) -> None:
    with open(path, "w") as fh:
        for entity, cell, bucket in events:
            fh.write(f"{entity}\t{int(cell)}\t{int(bucket)}\n")


def summarize(g: MobilityGraph) -> str:
    d = g.degrees()
    return (
        f"{g.n_nodes} nodes, {g.n_edges} edges, degree mean {d.mean() if len(d) else 0:.1f} "
        f"max {d.max() if len(d) else 0}, total weight {g.weights.sum() / 2:.0f}"
    )

