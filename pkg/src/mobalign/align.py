"""Contrastive alignment of mobility embeddings with auxiliary modalities.

Mobility is the anchor modality.  For each auxiliary modality ``X`` in
(image, text, demographics) the loss pairs a symmetric InfoNCE term::

    L = mean_X ( L(M, X) + L(X, M) )
    L(A, B) = 1/(2n) * sum_i -log softmax_j(<A_i, B_j> / tau)[i]

over the rows of the batch where ``X`` is present.  Text and image inputs
are frozen precomputed vectors with trainable bias-free projections; the
demographic histogram goes through ``log1p``, train-split standardization
and a ReLU MLP; mobility rows come from LightGCN propagation of a
learnable node table.  Every encoder output is L2-normalized.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .embedding import EmbeddingTable
from .errors import ConfigError, NumericError, ValidationError
from .graphbuild import MobilityGraph
from .mobenc import NodeEmbeddingParams, PropagationPlan, make_plan, propagate, propagate_backward
from .nn import MLP, Adam, l2_normalize, l2_normalize_backward

log = logging.getLogger(__name__)

MODALITIES = ("image", "text", "demo")
DEMO_HIDDEN = (256, 256)


@dataclass
class AlignConfig:
    d: int = 128
    tau: float = 0.07
    batch_size: int = 20480
    epochs: int = 100
    lr: float = 1e-3
    weight_decay: float = 1e-3
    val_fraction: float = 0.10
    seed: int = 0
    layers: int = 2
    norm_mode: str = "symmetric"

    def __post_init__(self):
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")
        if self.batch_size < 1 or self.epochs < 0 or self.d < 1:
            raise ConfigError("batch_size and d must be positive, epochs non-negative")
        if self.lr < 0 or self.weight_decay < 0:
            raise ConfigError("lr and weight_decay must be non-negative")


@dataclass
class ModalityRecord:
    cell: int
    text_vec: np.ndarray | None = None
    image_vec: np.ndarray | None = None
    demo_hist: np.ndarray | None = None

    @property
    def present(self) -> dict:
        return {
            "text": self.text_vec is not None,
            "image": self.image_vec is not None,
            "demo": self.demo_hist is not None,
        }


@dataclass
class ModalityData:
    """Column-wise modality features for a list of cells.

    ``features[m]`` has one row per cell; rows where ``masks[m]`` is false
    are placeholders and never reach an encoder.
    """

    cells: np.ndarray
    features: dict
    masks: dict

    def __post_init__(self):
        self.cells = np.asarray(self.cells, dtype=np.uint64)
        n = len(self.cells)
        for m in MODALITIES:
            f, k = self.features[m], self.masks[m]
            if f.shape[0] != n or k.shape != (n,):
                raise ValidationError(f"{m} features/mask do not match {n} cells")
        demo = self.features["demo"][self.masks["demo"]]
        if np.any(demo < 0) or not np.all(np.isfinite(demo)):
            raise ValidationError("demographic histograms must be finite and non-negative")

    def dim(self, m: str) -> int:
        return self.features[m].shape[1]

    @classmethod
    def from_tables(cls, cells, text: EmbeddingTable | None = None, image: EmbeddingTable | None = None,
                    demo: EmbeddingTable | None = None) -> "ModalityData":
        cells = np.asarray(cells, dtype=np.uint64)
        features, masks = {}, {}
        for name, table in (("text", text), ("image", image), ("demo", demo)):
            if table is None or len(table) == 0:
                features[name] = np.zeros((len(cells), 1))
                masks[name] = np.zeros(len(cells), dtype=bool)
            else:
                t, found = table.reindexed(cells)
                features[name], masks[name] = t.vectors, found
        return cls(cells, features, masks)

    @classmethod
    def from_records(cls, records: list[ModalityRecord]) -> "ModalityData":
        cells = np.array([r.cell for r in records], dtype=np.uint64)
        features, masks = {}, {}
        for name, attr in (("text", "text_vec"), ("image", "image_vec"), ("demo", "demo_hist")):
            vecs = [getattr(r, attr) for r in records]
            present = np.array([v is not None for v in vecs], dtype=bool)
            dims = {len(v) for v in vecs if v is not None}
            if len(dims) > 1:
                raise ValidationError(f"{name} vectors have inconsistent lengths {sorted(dims)}")
            dim = dims.pop() if dims else 1
            arr = np.zeros((len(records), dim))
            for i, v in enumerate(vecs):
                if v is not None:
                    arr[i] = v
            features[name], masks[name] = arr, present
        return cls(cells, features, masks)

    def records(self) -> list[ModalityRecord]:
        out = []
        for i, c in enumerate(self.cells):
            vals = {m: self.features[m][i] if self.masks[m][i] else None for m in MODALITIES}
            out.append(ModalityRecord(int(c), vals["text"], vals["image"], vals["demo"]))
        return out

    def tables(self) -> dict:
        return {
            m: EmbeddingTable(self.cells[self.masks[m]], self.features[m][self.masks[m]])
            for m in MODALITIES
        }


# --- loss -------------------------------------------------------------------


def info_nce_pair(a: np.ndarray, b: np.ndarray, tau: float, grad: bool = False):
    """``L(A, B)`` with its ``1/(2n)`` prefactor; optionally ``(loss, dA, dB)``."""
    n = a.shape[0]
    if n == 0:
        raise ValidationError("InfoNCE needs at least one pair")
    logits = (a @ b.T) / tau
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite InfoNCE logits")
    mx = logits.max(axis=1, keepdims=True)
    ex = np.exp(logits - mx)
    z = ex.sum(axis=1, keepdims=True)
    lse = mx[:, 0] + np.log(z[:, 0])
    loss = float(np.sum(lse - np.diag(logits)) / (2 * n))
    if not grad:
        return loss
    d_logits = ex / z
    d_logits[np.diag_indices(n)] -= 1.0
    d_logits /= 2 * n * tau
    return loss, d_logits @ b, d_logits.T @ a


# --- model ------------------------------------------------------------------


@dataclass
class AlignModel:
    """Trainable heads plus the mobility node table, all in ``params``."""

    params: dict
    demo_mlp: MLP | None
    plan: PropagationPlan
    tau: float = 0.07
    demo_mean: np.ndarray | None = None
    demo_std: np.ndarray | None = None
    active: tuple = MODALITIES

    @classmethod
    def init(cls, table: np.ndarray, plan: PropagationPlan, dims: dict, cfg: AlignConfig,
             rng: np.random.Generator, active=MODALITIES, demo_hidden=DEMO_HIDDEN) -> "AlignModel":
        d = cfg.d
        if table.shape[1] != d:
            raise ValidationError(f"node table has dim {table.shape[1]}, config d={d}")
        params = {"mob.table": np.array(table, dtype=np.float64)}
        demo_mlp = None
        for m in active:
            if m == "demo":
                # Nonzero biases keep MLP(0) away from the origin, so an
                # empty histogram still normalizes to a unit row.
                demo_mlp = MLP.init([dims["demo"], *demo_hidden, d], rng, prefix="demo", scheme="uniform")
                params.update(demo_mlp.params)
                demo_mlp.params = params
            else:
                params[f"{m}.w"] = rng.standard_normal((dims[m], d)) / np.sqrt(dims[m])
        return cls(params, demo_mlp, plan, cfg.tau, active=tuple(active))

    def demo_inputs(self, hist: np.ndarray) -> np.ndarray:
        x = np.log1p(hist)
        if self.demo_mean is not None:
            x = (x - self.demo_mean) / self.demo_std
        return x

    def fit_demo_scaler(self, hist: np.ndarray) -> None:
        x = np.log1p(hist)
        self.demo_mean = x.mean(axis=0)
        std = x.std(axis=0)
        self.demo_std = np.where(std > 0, std, 1.0)

    def propagated(self) -> np.ndarray:
        return propagate(self.params["mob.table"], self.plan)

    def encode_modality(self, m: str, raw: np.ndarray):
        """Unit-norm embeddings of raw modality rows, with a backward cache."""
        if m == "demo":
            h, acts = self.demo_mlp.forward(self.demo_inputs(raw), self.params)
            y, norms = l2_normalize(h)
            return y, (raw, acts, y, norms)
        h = raw @ self.params[f"{m}.w"]
        y, norms = l2_normalize(h)
        return y, (raw, None, y, norms)

    def backward_modality(self, m: str, cache, grad_y: np.ndarray, grads: dict) -> None:
        raw, acts, y, norms = cache
        gh = l2_normalize_backward(y, norms, grad_y)
        if m == "demo":
            _, g = self.demo_mlp.backward(acts, gh, self.params, need_input_grad=False)
            for k, v in g.items():
                grads[k] = grads.get(k, 0.0) + v
        else:
            grads[f"{m}.w"] = grads.get(f"{m}.w", 0.0) + raw.T @ gh

    def encode_batch(self, nodes: np.ndarray, data: ModalityData, propagated=None) -> dict:
        """Unit-norm rows per modality for the batch ``nodes``.

        ``data`` is aligned with graph ordinals.  Returns
        ``{modality: (rows, positions_in_batch)}``; auxiliary modalities only
        include the batch positions where they are present.
        """
        P = self.propagated() if propagated is None else propagated
        mob, _ = l2_normalize(P[nodes])
        out = {"mobility": (mob, np.arange(len(nodes)))}
        for m in self.active:
            pos = np.flatnonzero(data.masks[m][nodes])
            y, _ = self.encode_modality(m, data.features[m][nodes[pos]])
            out[m] = (y, pos)
        return out

    def loss(self, nodes: np.ndarray, data: ModalityData, grad: bool = False):
        """Total loss over the batch; with ``grad`` also ``{name: gradient}``."""
        P = self.propagated()
        mob, mob_norms = l2_normalize(P[nodes])
        g_mob = np.zeros_like(mob)
        grads = {}
        terms = []
        for m in self.active:
            pos = np.flatnonzero(data.masks[m][nodes])
            if len(pos) == 0:
                continue
            y, cache = self.encode_modality(m, data.features[m][nodes[pos]])
            if grad:
                l1, dm1, dx1 = info_nce_pair(mob[pos], y, self.tau, grad=True)
                l2, dx2, dm2 = info_nce_pair(y, mob[pos], self.tau, grad=True)
                terms.append((m, l1 + l2, dm1 + dm2, dx1 + dx2, cache))
            else:
                terms.append((m, info_nce_pair(mob[pos], y, self.tau)
                              + info_nce_pair(y, mob[pos], self.tau), None, None, None))
        if not terms:
            raise ValidationError("no modality present in batch")
        k = len(terms)
        total = sum(t[1] for t in terms) / k
        if not grad:
            return total
        for m, _, dm, dx, cache in terms:
            pos = np.flatnonzero(data.masks[m][nodes])
            g_mob[pos] += dm / k
            self.backward_modality(m, cache, dx / k, grads)
        g_P = np.zeros_like(P)
        np.add.at(g_P, nodes, l2_normalize_backward(mob, mob_norms, g_mob))
        grads["mob.table"] = propagate_backward(g_P, self.plan)
        return total, grads


# --- training ---------------------------------------------------------------


@dataclass
class AlignResult:
    embeddings: EmbeddingTable
    model: AlignModel
    history: list = field(default_factory=list)
    train_nodes: np.ndarray | None = None
    val_nodes: np.ndarray | None = None

    def log_lines(self) -> list[str]:
        return [f"{e}\t{tr:.6f}\t{va:.6f}" for e, tr, va in self.history]


def split_nodes(candidates: np.ndarray, val_fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(candidates)
    n_val = int(round(val_fraction * len(perm)))
    if len(perm) > 1:
        n_val = min(max(n_val, 1), len(perm) - 1)
    else:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _batched_loss(model: AlignModel, nodes: np.ndarray, data: ModalityData, batch_size: int) -> float:
    if len(nodes) == 0:
        return float("nan")
    losses = [model.loss(nodes[s:s + batch_size], data) for s in range(0, len(nodes), batch_size)]
    return float(np.mean(losses))


def _diagnostics(model: AlignModel) -> str:
    return ", ".join(f"|{k}|={np.linalg.norm(v):.3g}" for k, v in model.params.items())


def train_align(graph: MobilityGraph, line_init: EmbeddingTable, data: ModalityData,
                cfg: AlignConfig | None = None, plan: PropagationPlan | None = None) -> AlignResult:
    """Train the heads and node table; returns propagated embeddings for every node."""
    cfg = cfg or AlignConfig()
    if plan is None:
        plan = make_plan(graph, cfg.layers, cfg.norm_mode)
    if plan.n_nodes != graph.n_nodes:
        raise ValidationError("propagation plan and graph cover different node sets")
    aligned = ModalityData.from_tables(graph.node_index, **data.tables())
    unknown = len(np.setdiff1d(data.cells, graph.node_index))
    if unknown:
        log.warning("%d modality cells are not graph nodes and are ignored", unknown)
    active = []
    for m in MODALITIES:
        if aligned.masks[m].any():
            active.append(m)
        else:
            log.warning("modality %s is absent for every graph node; pair dropped", m)
    if not active:
        raise ValidationError("no graph node has any auxiliary modality")

    rng = np.random.default_rng(cfg.seed)
    table = NodeEmbeddingParams.from_init(line_init, graph.node_index, seed=cfg.seed).table
    dims = {m: aligned.dim(m) for m in MODALITIES}
    model = AlignModel.init(table, plan, dims, cfg, rng, active)

    candidates = np.flatnonzero(np.any([aligned.masks[m] for m in active], axis=0))
    train_nodes, val_nodes = split_nodes(candidates, cfg.val_fraction, cfg.seed)
    if "demo" in active:
        train_demo = train_nodes[aligned.masks["demo"][train_nodes]]
        if len(train_demo):
            model.fit_demo_scaler(aligned.features["demo"][train_demo])

    opt = Adam(lr=cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(train_nodes)
        batch_losses = []
        for s in range(0, len(order), cfg.batch_size):
            batch = order[s:s + cfg.batch_size]
            loss, grads = model.loss(batch, aligned, grad=True)
            if not np.isfinite(loss):
                raise NumericError(f"alignment diverged at epoch {epoch}: loss={loss}; {_diagnostics(model)}")
            opt.step(model.params, grads)
            batch_losses.append(loss)
        for k, v in model.params.items():
            if not np.all(np.isfinite(v)):
                raise NumericError(f"non-finite parameter {k} after epoch {epoch}; {_diagnostics(model)}")
        train_loss = float(np.mean(batch_losses))
        val_loss = _batched_loss(model, val_nodes, aligned, cfg.batch_size)
        history.append((epoch, train_loss, val_loss))
        log.info("epoch %d train %.4f val %.4f (%.2fs)", epoch, train_loss, val_loss,
                 time.perf_counter() - t0)

    emb = EmbeddingTable(graph.node_index.copy(), model.propagated())
    return AlignResult(emb, model, history, train_nodes, val_nodes)


def config_dict(cfg: AlignConfig) -> dict:
    return asdict(cfg)
