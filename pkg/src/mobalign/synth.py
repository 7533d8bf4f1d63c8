"""Synthetic region with planted per-cell latent factors.

Every cell carries a latent vector ``z`` (Gaussian noise smoothed by one
pass of hex-neighbor averaging, then standardized).  The leading
``mobility_dims`` coordinates drive co-visitation: each entity prefers
cells whose mobility latent points the same way as its own.  Text, image
and demographic features are noisy lifts of the full ``z``, so the
trailing coordinates are visible to the auxiliary modalities only.
Downstream targets are fixed linear functions of ``z`` (or of its mean
over an administrative unit).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import hexgrid
from .align import ModalityData
from .embedding import EmbeddingTable, write_emb, write_tsv
from .errors import ConfigError
from .graphbuild import EventRecord, write_events
from .probe import TaskDataset, write_task


@dataclass
class SynthConfig:
    rows: int = 20
    cols: int = 20
    grid: dict = field(default_factory=dict)
    latent_dim: int = 8
    mobility_dims: int = 6
    n_entities: int = 2000
    n_buckets: int = 54
    min_visits: int = 2
    max_visits: int = 4
    visit_sharpness: float = 6.0
    entity_noise: float = 0.3
    text_dim: int = 1024
    image_dim: int = 768
    demo_dim: int = 36
    text_noise: float = 1.0
    image_noise: float = 1.0
    demo_noise: float = 0.3
    target_noise: float = 0.0
    missing_fraction: float = 0.0
    admin_block: int = 4
    n_points: int = 300
    seed: int = 0

    def __post_init__(self):
        for name in ("rows", "cols", "latent_dim", "n_entities", "n_buckets", "text_dim",
                     "image_dim", "demo_dim", "admin_block", "min_visits"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 < self.mobility_dims <= self.latent_dim:
            raise ConfigError("mobility_dims must be in (0, latent_dim]")
        if self.max_visits < self.min_visits or self.min_visits < 2:
            raise ConfigError("need 2 <= min_visits <= max_visits")
        for name in ("entity_noise", "text_noise", "image_noise", "demo_noise", "target_noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.missing_fraction < 1.0:
            raise ConfigError("missing_fraction must be in [0, 1)")

    @property
    def grid_config(self) -> hexgrid.GridConfig:
        return hexgrid.GridConfig.from_dict(self.grid)


@dataclass
class SynthData:
    cfg: SynthConfig
    grid: hexgrid.GridConfig
    cells: np.ndarray
    latents: np.ndarray
    events: list
    modalities: ModalityData
    tasks: list
    task_weights: dict

    @property
    def mobility_latents(self) -> np.ndarray:
        return self.latents[:, : self.cfg.mobility_dims]

    def latent_table(self) -> EmbeddingTable:
        return EmbeddingTable(self.cells, self.latents)


def region_cells(rows: int, cols: int):
    """Axial coordinates of a ``rows x cols`` rectangle (odd-q offset layout)."""
    q, row = np.meshgrid(np.arange(cols), np.arange(rows), indexing="ij")
    q, row = q.ravel(), row.ravel()
    r = row - (q - (q & 1)) // 2
    return q.astype(np.int64), r.astype(np.int64)


def _smooth(z0: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    pos = {(int(a), int(b)): i for i, (a, b) in enumerate(zip(q, r))}
    out = np.empty_like(z0)
    for i, (a, b) in enumerate(zip(q, r)):
        idx = [i] + [pos[(a + dq, b + dr)] for dq, dr in hexgrid.NEIGHBOR_OFFSETS
                     if (a + dq, b + dr) in pos]
        out[i] = z0[idx].mean(axis=0)
    return out


def _softplus(x):
    return np.logaddexp(0.0, x)


def _unit(v):
    return v / np.linalg.norm(v)


def generate(cfg: SynthConfig | None = None) -> SynthData:
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    grid = cfg.grid_config
    q, r = region_cells(cfg.rows, cfg.cols)
    cells = hexgrid.pack_array(grid.resolution, q, r)
    order = np.argsort(cells)
    q, r, cells = q[order], r[order], cells[order]
    n, k = len(cells), cfg.latent_dim

    z = _smooth(rng.standard_normal((n, k)), q, r)
    z = (z - z.mean(axis=0)) / z.std(axis=0)

    # Co-visitation events.
    zm = z[:, : cfg.mobility_dims]
    zm_unit = zm / np.linalg.norm(zm, axis=1, keepdims=True)
    anchors = rng.integers(0, n, size=cfg.n_entities)
    entity_lat = zm_unit[anchors] + cfg.entity_noise * rng.standard_normal((cfg.n_entities, cfg.mobility_dims))
    entity_lat /= np.linalg.norm(entity_lat, axis=1, keepdims=True)
    counts = rng.integers(cfg.min_visits, cfg.max_visits + 1, size=(cfg.n_entities, cfg.n_buckets))
    events = []
    width = len(str(cfg.n_entities - 1))
    for e in range(cfg.n_entities):
        logits = cfg.visit_sharpness * (zm_unit @ entity_lat[e])
        # Gumbel top-k == sequential sampling without replacement from softmax(logits).
        keys = logits + rng.gumbel(size=(cfg.n_buckets, n))
        top = np.argsort(-keys, axis=1)[:, : cfg.max_visits]
        name = f"u{e:0{width}d}"
        for b in range(cfg.n_buckets):
            for c in top[b, : counts[e, b]]:
                events.append(EventRecord(name, int(cells[c]), b))

    # Auxiliary modalities.
    lift_t = rng.standard_normal((k, cfg.text_dim))
    lift_i = rng.standard_normal((k, cfg.image_dim))
    lift_d = rng.standard_normal((k, cfg.demo_dim)) / np.sqrt(k)
    text = z @ lift_t + cfg.text_noise * rng.standard_normal((n, cfg.text_dim))
    image = z @ lift_i + cfg.image_noise * rng.standard_normal((n, cfg.image_dim))
    demo = 50.0 * _softplus(z @ lift_d + cfg.demo_noise * rng.standard_normal((n, cfg.demo_dim)))
    masks = {m: rng.random(n) >= cfg.missing_fraction for m in ("text", "image", "demo")}
    modalities = ModalityData(cells, {"text": text, "image": image, "demo": demo}, masks)

    # Downstream tasks.
    weights = {
        "mobility_task": np.r_[_unit(rng.standard_normal(cfg.mobility_dims)), np.zeros(k - cfg.mobility_dims)],
        "modality_task": np.r_[np.zeros(cfg.mobility_dims), _unit(rng.standard_normal(k - cfg.mobility_dims))]
        if k > cfg.mobility_dims else None,
        "mixed_task": _unit(rng.standard_normal(k)),
        "admin_task": _unit(rng.standard_normal(k)),
        "point_task": _unit(rng.standard_normal(k)),
    }
    weights = {t: w for t, w in weights.items() if w is not None}
    tasks = []
    for name in ("mobility_task", "modality_task", "mixed_task"):
        if name not in weights:
            continue
        y = z @ weights[name] + cfg.target_noise * rng.standard_normal(n)
        tasks.append(TaskDataset(name, "grid", [f"g{i}" for i in range(n)],
                                 [[int(c)] for c in cells], y))

    block_q = q // cfg.admin_block
    row = r + (q - (q & 1)) // 2
    block_r = row // cfg.admin_block
    units = {}
    for i, key in enumerate(zip(block_q.tolist(), block_r.tolist())):
        units.setdefault(key, []).append(i)
    keys = sorted(units)
    y_admin = np.array([z[units[u]].mean(axis=0) @ weights["admin_task"] for u in keys])
    y_admin += cfg.target_noise * rng.standard_normal(len(keys))
    tasks.append(TaskDataset("admin_task", "admin", [f"a{a}_{b}" for a, b in keys],
                             [[int(cells[i]) for i in units[u]] for u in keys], y_admin))

    if cfg.n_points:
        cx, cy = hexgrid.axial_center(q, r, grid.edge)
        px = rng.uniform(cx.min(), cx.max(), cfg.n_points)
        py = rng.uniform(cy.min(), cy.max(), cfg.n_points)
        plat, plon = hexgrid.unproject(px, py, grid)
        pcells = hexgrid.cells_of(plat, plon, grid)
        pos = np.searchsorted(cells, pcells)
        inside = (pos < n) & (cells[np.minimum(pos, n - 1)] == pcells)
        ids = np.flatnonzero(inside)
        y_pt = z[pos[ids]] @ weights["point_task"] + cfg.target_noise * rng.standard_normal(len(ids))
        tasks.append(TaskDataset("point_task", "point", [f"p{i}" for i in ids],
                                 [[int(pcells[i])] for i in ids], y_pt))

    return SynthData(cfg, grid, cells, z, events, modalities, tasks, weights)


def write(data: SynthData, out_dir) -> dict:
    """Write every artifact in the pipeline's input formats; returns the paths."""
    out = Path(out_dir)
    (out / "tasks").mkdir(parents=True, exist_ok=True)
    paths = {
        "events": out / "events.tsv",
        "text": out / "text.emb",
        "image": out / "image.emb",
        "demo": out / "demo.tsv",
        "latent": out / "latent.emb",
    }
    write_events(paths["events"], data.events)
    tables = data.modalities.tables()
    write_emb(paths["text"], tables["text"])
    write_emb(paths["image"], tables["image"])
    write_tsv(paths["demo"], tables["demo"])
    write_emb(paths["latent"], data.latent_table())
    for task in data.tasks:
        p = out / "tasks" / f"{task.name}.tsv"
        write_task(p, task)
        paths[f"task:{task.name}"] = p
    return {k: str(v) for k, v in paths.items()}


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
