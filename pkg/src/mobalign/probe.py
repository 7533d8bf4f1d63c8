"""Linear-probe evaluation of cell embeddings on downstream tasks."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from .embedding import EmbeddingTable
from .errors import NumericError, ParseError, ValidationError

log = logging.getLogger(__name__)

UNIT_KINDS = ("point", "grid", "admin")


@dataclass
class TaskDataset:
    name: str
    unit_kind: str
    unit_ids: list
    members: list  # list of lists of cell ids
    targets: np.ndarray

    def __post_init__(self):
        if self.unit_kind not in UNIT_KINDS:
            raise ValidationError(f"unit_kind must be one of {UNIT_KINDS}, got {self.unit_kind!r}")
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if not (len(self.unit_ids) == len(self.members) == len(self.targets)):
            raise ValidationError("unit ids, members and targets differ in length")
        for uid, cells in zip(self.unit_ids, self.members):
            if self.unit_kind == "admin" and len(cells) < 1:
                raise ValidationError(f"admin unit {uid} has no member cells")
            if self.unit_kind != "admin" and len(cells) != 1:
                raise ValidationError(f"{self.unit_kind} unit {uid} must reference exactly one cell")


@dataclass
class ProbeReport:
    task: str
    trials: int
    r2_mean: float
    r2_std: float
    probe_kind: str = "ridge"
    n_units: int = 0
    error: str | None = None


def aggregate(emb: EmbeddingTable, task: TaskDataset):
    """Feature rows per unit (mean over member cells present in ``emb``).

    Returns ``(X, y, dropped)`` where ``dropped`` counts excluded units.
    """
    index = emb.index
    rows, ys = [], []
    dropped = missing_cells = 0
    for cells, y in zip(task.members, task.targets):
        pos = [index[int(c)] for c in cells if int(c) in index]
        missing_cells += len(cells) - len(pos)
        if not pos:
            dropped += 1
            continue
        rows.append(emb.vectors[pos].mean(axis=0))
        ys.append(y)
    if missing_cells:
        log.warning("task %s: %d member cells missing from embeddings, %d units dropped",
                    task.name, missing_cells, dropped)
    if not rows:
        raise ValidationError(f"task {task.name}: every unit was dropped")
    return np.array(rows), np.array(ys), dropped


@dataclass
class RidgeModel:
    mean: np.ndarray
    scale: np.ndarray
    coef: np.ndarray
    intercept: float

    def predict(self, X: np.ndarray) -> np.ndarray:
        return ((X - self.mean) / self.scale) @ self.coef + self.intercept


def fit_ridge(X: np.ndarray, y: np.ndarray, lam: float = 1.0) -> RidgeModel:
    """Ridge on standardized features; the intercept is not penalized."""
    if lam < 0:
        raise ValidationError(f"ridge lambda must be >= 0, got {lam}")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    Z = (X - mean) / scale
    y_mean = float(y.mean())
    A = Z.T @ Z + lam * np.eye(Z.shape[1])
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=True)
        if lam == 0 and np.min(np.abs(np.diag(factor[0]))) < 1e-6 * np.sqrt(np.max(np.diag(A)) + 1e-300):
            raise np.linalg.LinAlgError("near-singular")
    except np.linalg.LinAlgError:
        raise NumericError("ridge normal equations are singular; use lambda > 0") from None
    coef = scipy.linalg.cho_solve(factor, Z.T @ (y - y_mean))
    return RidgeModel(mean, scale, coef, y_mean)


def r2_score(y: np.ndarray, pred: np.ndarray) -> float:
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0:
        return 1.0 if ss_res == 0 else 0.0
    return 1.0 - ss_res / ss_tot


def train_test_split(n: int, test_fraction: float, seed: int):
    if not 0.0 < test_fraction < 1.0:
        raise ValidationError(f"test_fraction must be in (0, 1), got {test_fraction}")
    perm = np.random.default_rng(seed).permutation(n)
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    return np.sort(perm[n_test:]), np.sort(perm[:n_test])


def ridge_fit_eval(X, y, lam: float = 1.0, split_seed: int = 0, test_fraction: float = 0.2) -> float:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < 5:
        raise ValidationError(f"need at least 5 rows for a probe, got {X.shape[0]}")
    train, test = train_test_split(X.shape[0], test_fraction, split_seed)
    model = fit_ridge(X[train], y[train], lam)
    return r2_score(y[test], model.predict(X[test]))


def run_benchmark(emb: EmbeddingTable, tasks: list[TaskDataset], trials: int = 10, lam: float = 1.0,
                  test_fraction: float = 0.2, seed: int = 0) -> list[ProbeReport]:
    if trials < 1:
        raise ValidationError(f"trials must be >= 1, got {trials}")
    reports = []
    for task in tasks:
        try:
            X, y, _ = aggregate(emb, task)
            scores = [ridge_fit_eval(X, y, lam, seed + t, test_fraction) for t in range(trials)]
            reports.append(ProbeReport(task.name, trials, float(np.mean(scores)),
                                       float(np.std(scores)), n_units=len(y)))
        except (ValidationError, NumericError) as exc:
            log.error("task %s failed: %s", task.name, exc)
            reports.append(ProbeReport(task.name, trials, float("nan"), float("nan"), error=str(exc)))
    return reports


# --- file formats -----------------------------------------------------------


def read_task(path, name: str | None = None) -> TaskDataset:
    """Task file: ``unit_kind<TAB>kind`` header, then ``unit_id<TAB>c1,c2,...<TAB>target``."""
    path = Path(path)
    unit_kind = None
    ids, members, targets = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if unit_kind is None:
                if len(parts) != 2 or parts[0] != "unit_kind":
                    raise ParseError("expected header 'unit_kind<TAB>point|grid|admin'", line=lineno, path=path)
                unit_kind = parts[1]
                continue
            if len(parts) != 3:
                raise ParseError("expected 'unit_id<TAB>cells<TAB>target'", line=lineno, path=path)
            try:
                cells = [int(c) for c in parts[1].split(",") if c]
                target = float(parts[2])
            except ValueError as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            ids.append(parts[0])
            members.append(cells)
            targets.append(target)
    if unit_kind is None:
        raise ParseError("missing unit_kind header", line=1, path=path)
    try:
        return TaskDataset(name or path.stem, unit_kind, ids, members, np.array(targets))
    except ValidationError as exc:
        raise ParseError(str(exc), path=path) from None


def write_task(path, task: TaskDataset) -> None:
    with open(path, "w") as fh:
        fh.write(f"unit_kind\t{task.unit_kind}\n")
        for uid, cells, y in zip(task.unit_ids, task.members, task.targets):
            fh.write(f"{uid}\t{','.join(str(int(c)) for c in cells)}\t{float(y)!r}\n")


def format_report(reports: list[ProbeReport]) -> str:
    lines = ["task\tr2_mean\tr2_std\ttrials\tprobe"]
    for r in reports:
        lines.append(f"{r.task}\t{r.r2_mean:.6f}\t{r.r2_std:.6f}\t{r.trials}\t{r.probe_kind}")
    return "\n".join(lines) + "\n"
