"""Coordinate-to-embedding surrogate distilled from trained cell embeddings.

A frozen random sinusoidal layer lifts a bbox-normalized ``(lon, lat)``
pair to 1024 features, ``sin(omega0 * (W x + b))``; a ReLU MLP maps those
to the 128-d cell embedding and is fit with MSE under Adam.  Querying
then needs only a coordinate, not a cell lookup.

Surrogate file layout: ``u32 header_len | JSON header | float payload``,
little-endian.  The header lists every array's name, shape and dtype in
payload order.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import hexgrid
from .embedding import EmbeddingTable
from .errors import ConfigError, NumericError, ParseError, RangeError, ValidationError
from .nn import MLP, Adam

log = logging.getLogger(__name__)

SURROGATE_MAGIC = "mobalign-surrogate-1"
_BBOX_SLACK = 1e-9


@dataclass
class SirenFeatureMap:
    W: np.ndarray
    b: np.ndarray
    omega0: float = 30.0
    seed: int = 0

    @classmethod
    def create(cls, n_features: int = 1024, omega0: float = 30.0, seed: int = 0, in_dim: int = 2):
        rng = np.random.default_rng(seed)
        # Rounded through float32 so the surrogate file stores them exactly.
        W = rng.uniform(-1.0, 1.0, size=(n_features, in_dim)).astype(np.float32).astype(np.float64)
        b = rng.uniform(-1.0, 1.0, size=n_features).astype(np.float32).astype(np.float64)
        return cls(W, b, omega0, seed)

    @property
    def n_features(self) -> int:
        return self.W.shape[0]

    def encode(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if np.any(np.abs(x) > 1.0 + _BBOX_SLACK) or not np.all(np.isfinite(x)):
            raise RangeError("normalized coordinates must lie in [-1, 1]^2")
        return np.sin(self.omega0 * (x @ self.W.T + self.b))


def siren_encode(x, fmap: SirenFeatureMap) -> np.ndarray:
    return fmap.encode(x)


@dataclass
class DistillConfig:
    hidden_layers: int = 8
    hidden_dim: int = 512
    out_dim: int = 128
    n_features: int = 1024
    omega0: float = 30.0
    lr: float = 0.005
    epochs: int = 5000
    # 0 means full batch.
    batch_size: int = 0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        if min(self.hidden_layers, self.hidden_dim, self.out_dim, self.n_features) < 1:
            raise ConfigError("distillation dimensions must be positive")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")


@dataclass
class BBox:
    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float

    @classmethod
    def around(cls, lat, lon) -> "BBox":
        return cls(float(np.min(lat)), float(np.max(lat)), float(np.min(lon)), float(np.max(lon)))

    def normalize(self, lat, lon) -> np.ndarray:
        lat = np.asarray(lat, dtype=np.float64)
        lon = np.asarray(lon, dtype=np.float64)

        def scale(v, lo, hi):
            span = hi - lo
            return np.zeros_like(v) if span == 0 else 2.0 * (v - lo) / span - 1.0

        x = np.stack([scale(lon, self.lon_min, self.lon_max),
                      scale(lat, self.lat_min, self.lat_max)], axis=-1)
        if np.any(np.abs(x) > 1.0 + _BBOX_SLACK):
            raise RangeError("coordinate outside the surrogate's training bounding box")
        return np.clip(x, -1.0, 1.0)


@dataclass
class Surrogate:
    fmap: SirenFeatureMap
    mlp: MLP
    bbox: BBox
    cfg: DistillConfig
    losses: list = field(default_factory=list)

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def features(self, lat, lon) -> np.ndarray:
        return self.fmap.encode(self.bbox.normalize(lat, lon)).astype(self.cfg.dtype)

    def predict(self, lat, lon) -> np.ndarray:
        out, _ = self.mlp.forward(self.features(lat, lon))
        return out.astype(np.float64)


def mse_loss(pred: np.ndarray, target: np.ndarray, grad: bool = False):
    diff = pred - target
    with np.errstate(over="ignore", invalid="ignore"):
        # a diverging run yields inf/nan here; the caller reports it
        loss = float(np.mean(diff.astype(np.float64) ** 2))
    if not grad:
        return loss
    return loss, (2.0 / diff.size) * diff


def mlp_sizes(cfg: DistillConfig) -> list:
    return [cfg.n_features] + [cfg.hidden_dim] * cfg.hidden_layers + [cfg.out_dim]


def train_distill(lat, lon, targets: np.ndarray, cfg: DistillConfig | None = None,
                  log_every: int = 500) -> Surrogate:
    """Fit the surrogate on ``(centroid, embedding)`` pairs."""
    cfg = cfg or DistillConfig()
    targets = np.asarray(targets, dtype=np.float64)
    if targets.ndim != 2 or targets.shape[0] < 1:
        raise ValidationError("need at least one (centroid, target) pair")
    if targets.shape[1] != cfg.out_dim:
        raise ValidationError(f"targets have dim {targets.shape[1]}, expected {cfg.out_dim}")
    dtype = np.dtype(cfg.dtype)
    rng = np.random.default_rng(cfg.seed)
    fmap = SirenFeatureMap.create(cfg.n_features, cfg.omega0, cfg.seed)
    bbox = BBox.around(lat, lon)
    mlp = MLP.init(mlp_sizes(cfg), rng, prefix="mlp", dtype=dtype, scheme="uniform")
    sur = Surrogate(fmap, mlp, bbox, cfg)
    X = sur.features(lat, lon)
    Y = targets.astype(dtype)
    n = X.shape[0]
    bs = n if cfg.batch_size <= 0 else min(cfg.batch_size, n)
    opt = Adam(lr=cfg.lr)
    t0 = time.perf_counter()
    for epoch in range(1, cfg.epochs + 1):
        order = np.arange(n) if bs == n else rng.permutation(n)
        epoch_loss = 0.0
        for s in range(0, n, bs):
            idx = order[s:s + bs]
            pred, acts = mlp.forward(X[idx])
            loss, g = mse_loss(pred, Y[idx], grad=True)
            if not np.isfinite(loss):
                tail = ", ".join(f"{v:.4g}" for v in sur.losses[-5:])
                raise NumericError(f"distillation diverged at epoch {epoch}; recent losses: {tail}")
            _, grads = mlp.backward(acts, g.astype(dtype), need_input_grad=False)
            opt.step(mlp.params, grads)
            epoch_loss += loss * len(idx)
        sur.losses.append(epoch_loss / n)
        if log_every and epoch % log_every == 0:
            log.info("distill epoch %d mse %.5f (%.1fs)", epoch, sur.losses[-1], time.perf_counter() - t0)
    # Report the loss of the final parameters, not the pre-step batch average.
    sur.losses.append(mse_loss(mlp.forward(X)[0], Y))
    return sur


def distill_from_table(table: EmbeddingTable, grid: hexgrid.GridConfig,
                       cfg: DistillConfig | None = None) -> Surrogate:
    lat, lon = hexgrid.centroids_of(table.ids, grid)
    return train_distill(lat, lon, table.vectors, cfg)


def query(coord: hexgrid.GeoCoord, sur: Surrogate) -> np.ndarray:
    return sur.predict([coord.lat], [coord.lon])[0]


# --- file format ------------------------------------------------------------


def write_surrogate(path, sur: Surrogate) -> None:
    arrays = [("siren.W", sur.fmap.W), ("siren.b", sur.fmap.b)]
    arrays += [(k, sur.mlp.params[k]) for k in sorted(sur.mlp.params, key=_param_order)]
    header = {
        "format": SURROGATE_MAGIC,
        "sizes": sur.mlp.sizes,
        "omega0": sur.fmap.omega0,
        "seed": sur.fmap.seed,
        "bbox": asdict(sur.bbox),
        "config": asdict(sur.cfg),
        "final_loss": sur.final_loss,
        "arrays": [[name, list(a.shape), "<f4" if name.startswith("siren") else np.dtype(sur.cfg.dtype).newbyteorder("<").str]
                   for name, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for (_, _, dt), (_, a) in zip(header["arrays"], arrays):
            fh.write(np.ascontiguousarray(a, dtype=dt).tobytes())


def _param_order(name: str):
    kind, idx = name.split(".")[1][0], int(name.split(".")[1][1:])
    return idx, kind != "w"


def read_surrogate(path) -> Surrogate:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise ParseError("truncated surrogate header", offset=0, path=path)
    (hlen,) = struct.unpack_from("<I", data, 0)
    try:
        header = json.loads(data[4:4 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ParseError(f"bad JSON header: {exc}", offset=4, path=path) from None
    if header.get("format") != SURROGATE_MAGIC:
        raise ParseError(f"not a surrogate file: {header.get('format')!r}", offset=4, path=path)
    off = 4 + hlen
    arrays = {}
    for name, shape, dt in header["arrays"]:
        count = int(np.prod(shape))
        size = np.dtype(dt).itemsize * count
        if off + size > len(data):
            raise ParseError(f"payload truncated in {name}", offset=len(data), path=path)
        arrays[name] = np.frombuffer(data, dt, count, off).reshape(shape)
        off += size
    if off != len(data):
        raise ParseError("trailing bytes after payload", offset=off, path=path)
    cfg = DistillConfig(**header["config"])
    dtype = np.dtype(cfg.dtype)
    fmap = SirenFeatureMap(arrays["siren.W"].astype(np.float64), arrays["siren.b"].astype(np.float64),
                           header["omega0"], header["seed"])
    params = {k: v.astype(dtype) for k, v in arrays.items() if k.startswith("mlp.")}
    sur = Surrogate(fmap, MLP(header["sizes"], "mlp", params), BBox(**header["bbox"]), cfg)
    sur.losses = [header["final_loss"]]
    return sur
