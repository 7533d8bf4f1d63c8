"""Second-order LINE embeddings of the mobility graph.

Each undirected edge is treated as two directed edges.  Per step one
directed edge ``(i, j)`` is drawn proportional to its weight and the
objective ``log s(c_j . v_i) + sum_k log s(-c_n . v_i)`` is ascended, with
negatives ``n`` drawn proportional to weighted degree ** 0.75.  Only the
target vectors ``v`` are returned; context vectors ``c`` are discarded.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numba
import numpy as np

from .embedding import EmbeddingTable
from .errors import ConfigError, ValidationError
from .graphbuild import MobilityGraph

log = logging.getLogger(__name__)

MIN_LR_FRACTION = 1e-4


@dataclass
class LineConfig:
    dim: int = 128
    negatives_per_edge: int = 5
    total_samples: int = 1_000_000
    lr_init: float = 0.025
    noise_power: float = 0.75
    seed: int = 0
    # >1 selects lock-free multi-threaded updates; results then depend on
    # thread scheduling.
    threads: int = 1

    def __post_init__(self):
        if self.dim <= 0:
            raise ConfigError(f"dim must be positive, got {self.dim}")
        if self.negatives_per_edge < 1:
            raise ConfigError(f"negatives_per_edge must be >= 1, got {self.negatives_per_edge}")
        if self.total_samples < 0:
            raise ConfigError(f"total_samples must be >= 0, got {self.total_samples}")
        if not self.lr_init > 0:
            raise ConfigError(f"lr_init must be positive, got {self.lr_init}")
        if self.threads < 1:
            raise ConfigError(f"threads must be >= 1, got {self.threads}")


@dataclass
class AliasTable:
    prob: np.ndarray
    alias: np.ndarray

    def __len__(self):
        return len(self.prob)

    def draw(self, u1: float, u2: float) -> int:
        i = min(int(u1 * len(self.prob)), len(self.prob) - 1)
        return i if u2 < self.prob[i] else int(self.alias[i])

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        n = len(self.prob)
        i = np.minimum((rng.random(size) * n).astype(np.int64), n - 1)
        return np.where(rng.random(size) < self.prob[i], i, self.alias[i])

    def probabilities(self) -> np.ndarray:
        """Distribution implied by the table."""
        n = len(self.prob)
        p = self.prob.copy()
        np.add.at(p, self.alias, 1.0 - self.prob)
        return p / n


def build_alias(weights) -> AliasTable:
    """Vose's alias construction."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or len(w) == 0:
        raise ValidationError("alias table needs a non-empty 1-d weight vector")
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ValidationError("alias weights must be finite and positive")
    n = len(w)
    scaled = w * (n / w.sum())
    prob = np.ones(n)
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    scaled = scaled.tolist()
    while small and large:
        s = small.pop()
        g = large.pop()
        prob[s] = scaled[s]
        alias[s] = g
        scaled[g] = (scaled[g] + scaled[s]) - 1.0
        (small if scaled[g] < 1.0 else large).append(g)
    # Leftovers are 1 up to rounding.
    for i in small + large:
        prob[i] = 1.0
        alias[i] = i
    return AliasTable(prob, alias)


def noise_weights(g: MobilityGraph, power: float = 0.75) -> np.ndarray:
    return g.weighted_degrees() ** power


def noise_table(g: MobilityGraph, power: float = 0.75) -> tuple[AliasTable, np.ndarray]:
    """Alias table over non-isolated nodes and the node ordinals it indexes."""
    w = noise_weights(g, power)
    nodes = np.flatnonzero(w > 0)
    return build_alias(w[nodes]), nodes


# --- per-sample objective (reference for the kernel and gradient checks) ---


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sample_objective(v, c_pos, c_neg) -> float:
    """``log s(c_pos . v) + sum_k log s(-c_neg[k] . v)``."""
    return float(_log_sigmoid(c_pos @ v) + _log_sigmoid(-(c_neg @ v)).sum())


def sample_gradient(v, c_pos, c_neg):
    """Gradient of :func:`sample_objective` w.r.t. ``(v, c_pos, c_neg)``."""
    gp = 1.0 - _sigmoid(c_pos @ v)
    gn = -_sigmoid(c_neg @ v)
    return gp * c_pos + gn @ c_neg, gp * v, np.outer(gn, v)


# --- numba kernels ----------------------------------------------------------


@numba.njit(cache=True)
def _alias_draw(prob, alias, u1, u2):
    n = prob.shape[0]
    i = int(u1 * n)
    if i >= n:
        i = n - 1
    if u2 < prob[i]:
        return i
    return alias[i]


@numba.njit(cache=True)
def _sgd_update(emb, ctx, u, targets, labels, lr, err):
    dim = emb.shape[1]
    err[:] = 0.0
    for t in range(targets.shape[0]):
        c = targets[t]
        f = 0.0
        for d in range(dim):
            f += emb[u, d] * ctx[c, d]
        g = (labels[t] - 1.0 / (1.0 + np.exp(-f))) * lr
        for d in range(dim):
            err[d] += g * ctx[c, d]
        for d in range(dim):
            ctx[c, d] += g * emb[u, d]
    for d in range(dim):
        emb[u, d] += err[d]


@numba.njit(cache=True)
def _run_samples(emb, ctx, src, dst, e_prob, e_alias, n_prob, n_alias, n_nodes,
                 negatives, start, stop, total, lr0):
    targets = np.empty(negatives + 1, dtype=np.int64)
    labels = np.zeros(negatives + 1)
    labels[0] = 1.0
    err = np.empty(emb.shape[1])
    for s in range(start, stop):
        lr = lr0 * (1.0 - (1.0 - MIN_LR_FRACTION) * s / total)
        e = _alias_draw(e_prob, e_alias, np.random.random(), np.random.random())
        targets[0] = dst[e]
        for k in range(negatives):
            targets[k + 1] = n_nodes[_alias_draw(n_prob, n_alias, np.random.random(), np.random.random())]
        _sgd_update(emb, ctx, src[e], targets, labels, lr, err)


@numba.njit(cache=True)
def _train_serial(emb, ctx, src, dst, e_prob, e_alias, n_prob, n_alias, n_nodes,
                  negatives, total, lr0, seed):
    np.random.seed(seed)
    _run_samples(emb, ctx, src, dst, e_prob, e_alias, n_prob, n_alias, n_nodes,
                 negatives, 0, total, total, lr0)


@numba.njit(parallel=True, cache=True)
def _train_hogwild(emb, ctx, src, dst, e_prob, e_alias, n_prob, n_alias, n_nodes,
                   negatives, total, lr0, seed, threads):
    chunk = (total + threads - 1) // threads
    for t in numba.prange(threads):
        np.random.seed(seed + t)
        start = t * chunk
        stop = min(total, start + chunk)
        _run_samples(emb, ctx, src, dst, e_prob, e_alias, n_prob, n_alias, n_nodes,
                     negatives, start, stop, total, lr0)


def sgd_step(emb, ctx, u, targets, labels, lr):
    """One in-place kernel update, exposed for testing against the gradient."""
    _sgd_update(emb, ctx, int(u), np.asarray(targets, dtype=np.int64),
                np.asarray(labels, dtype=np.float64), float(lr), np.empty(emb.shape[1]))


def init_vectors(n: int, dim: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    emb = (rng.random((n, dim)) - 0.5) / dim
    return emb, np.zeros((n, dim))


def train_line(g: MobilityGraph, cfg: LineConfig | None = None) -> EmbeddingTable:
    cfg = cfg or LineConfig()
    if g.nnz == 0:
        raise ValidationError("LINE needs a graph with at least one edge")
    emb, ctx = init_vectors(g.n_nodes, cfg.dim, cfg.seed)
    isolated = g.degrees() == 0
    if isolated.any():
        log.warning("%d isolated nodes get zero LINE vectors", int(isolated.sum()))
    if cfg.total_samples > 0:
        edges = build_alias(g.weights)
        noise, noise_nodes = noise_table(g, cfg.noise_power)
        src = g.rows()
        dst = g.col_indices.astype(np.int64)
        kernel_seed = int(np.random.default_rng(cfg.seed).integers(0, 2**31 - 1))
        args = (emb, ctx, src, dst, edges.prob, edges.alias, noise.prob, noise.alias,
                noise_nodes.astype(np.int64), cfg.negatives_per_edge, cfg.total_samples,
                cfg.lr_init, kernel_seed)
        if cfg.threads == 1:
            _train_serial(*args)
        else:
            numba.set_num_threads(min(cfg.threads, numba.config.NUMBA_NUM_THREADS))
            _train_hogwild(*args, cfg.threads)
    emb[isolated] = 0.0
    if not np.all(np.isfinite(emb)):
        raise ValidationError("LINE produced non-finite vectors; lower lr_init")
    return EmbeddingTable(g.node_index.copy(), emb)
