"""Independent oracles shared by the test modules."""

import numpy as np


def dense_adjacency(g, mode):
    n = g.n_nodes
    A = np.zeros((n, n))
    for i in range(n):
        cols, _ = g.neighbors(i)
        A[i, cols] = 1.0
    d = A.sum(axis=1)
    inv = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    if mode == "symmetric":
        return inv[:, None] * A * inv[None, :]
    return inv[:, None] * A


def dense_propagate(g, X, layers, mode):
    A = dense_adjacency(g, mode)
    total = np.zeros((g.n_nodes, g.n_nodes))
    P = np.eye(g.n_nodes)
    for _ in range(layers + 1):
        total += P
        P = A @ P
    return total @ X


def central_diff(f, x, eps=1e-6):
    """Gradient of scalar ``f`` at ``x`` by central differences (x is modified in place and restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + eps
        fp = f()
        x[idx] = old - eps
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def info_nce_reference(A, B, tau):
    """Loop-based InfoNCE: (1/2n) sum_i -log softmax_j(<A_i, B_j> / tau)[i]."""
    n = A.shape[0]
    total = 0.0
    for i in range(n):
        logits = [float(A[i] @ B[j]) / tau for j in range(n)]
        m = max(logits)
        lse = m + np.log(sum(np.exp(v - m) for v in logits))
        total += lse - logits[i]
    return total / (2 * n)


# Twelve events over cells A..E; expected weights worked out by hand from the
# clique rule (one +1 per unordered pair per entity-bucket, summed).
A, B, C, D, E = 10, 20, 30, 40, 50
HAND_EVENTS = [
    ("u1", A, 0), ("u1", B, 0), ("u1", C, 0), ("u1", A, 0),  # {A,B,C}; repeat of A is a no-op
    ("u1", A, 1), ("u1", B, 1),                              # {A,B} again, next week
    ("u2", B, 0), ("u2", D, 0),                              # {B,D}
    ("u2", D, 1),                                            # single cell: no edge
    ("u3", C, 0), ("u3", D, 0), ("u3", E, 0),                # {C,D,E}
]
HAND_WEIGHTS = {(A, B): 2.0, (A, C): 1.0, (B, C): 1.0, (B, D): 1.0,
                (C, D): 1.0, (C, E): 1.0, (D, E): 1.0}


def exact_keep(ratio, degree):
    from fractions import Fraction
    import math

    return math.ceil(Fraction(str(ratio)) * degree)


def topk_oracle(g, ratio):
    """Per-node kept neighbor sets by sorting (weight desc, neighbor id asc)."""
    kept = {}
    for i in range(g.n_nodes):
        cols, w = g.neighbors(i)
        pairs = sorted(zip(w.tolist(), g.node_index[cols].tolist()), key=lambda t: (-t[0], t[1]))
        k = exact_keep(ratio, len(pairs))
        kept[int(g.node_index[i])] = {c for _, c in pairs[:k]}
    return kept


def mask_to_sets(g, mask):
    rows = g.rows()
    out = {int(c): set() for c in g.node_index}
    for r, c in zip(rows[mask], g.col_indices[mask]):
        out[int(g.node_index[r])].add(int(g.node_index[c]))
    return out
