"""Run configuration, manifests and the end-to-end driver.

A run is described by one JSON object with a section per stage::

    {"grid": {...}, "synth": {...}, "graph": {...}, "line": {...},
     "align": {...}, "probe": {...}, "distill": {...}, "inputs": {...}}

Every section is optional and falls back to the desk preset below; any key
not listed here is rejected so that typos fail loudly instead of silently
running with a default.
"""

from __future__ import annotations

import contextlib
import dataclasses
import hashlib
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, align, distill, graphbuild, hexgrid, line, probe, synth
from .embedding import EmbeddingTable, read_table, write_emb
from .errors import ConfigError

log = logging.getLogger(__name__)


@dataclass
class GraphSection:
    ratio: float = 0.10
    mode: str = "topk"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("topk", "random"):
            raise ConfigError(f"graph.mode must be 'topk' or 'random', got {self.mode!r}")
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"graph.ratio must be in (0, 1], got {self.ratio}")


@dataclass
class ProbeSection:
    trials: int = 10
    lam: float = 1.0
    test_fraction: float = 0.2
    seed: int = 0


INPUT_KEYS = ("events", "graph", "line", "emb", "text", "image", "demo", "tasks", "surrogate", "points")


def desk_line() -> line.LineConfig:
    return line.LineConfig(total_samples=2_000_000)


def desk_align() -> align.AlignConfig:
    # 400 cells at batch 256 give ~60 optimizer steps in total, so the step
    # size is raised well above the large-batch recipe.
    return align.AlignConfig(batch_size=256, epochs=30, lr=3e-2)


@dataclass
class PipelineConfig:
    grid: hexgrid.GridConfig = field(default_factory=hexgrid.GridConfig)
    synth: synth.SynthConfig = field(default_factory=synth.SynthConfig)
    graph: GraphSection = field(default_factory=GraphSection)
    line: line.LineConfig = field(default_factory=desk_line)
    align: align.AlignConfig = field(default_factory=desk_align)
    probe: ProbeSection = field(default_factory=ProbeSection)
    distill: distill.DistillConfig = field(default_factory=distill.DistillConfig)
    inputs: dict = field(default_factory=dict)

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Same config with every stage seed set to ``seed``."""
        out = dataclasses.replace(self)
        for name in ("synth", "graph", "line", "align", "probe", "distill"):
            setattr(out, name, dataclasses.replace(getattr(self, name), seed=int(seed)))
        return out

    def to_dict(self) -> dict:
        d = {name: asdict(getattr(self, name))
             for name in ("synth", "graph", "line", "align", "probe", "distill")}
        # synth.grid mirrors the top-level grid and is re-injected on load
        d["synth"].pop("grid", None)
        d["grid"] = self.grid.to_dict()
        d["inputs"] = dict(self.inputs)
        return d

    def require_input(self, key: str) -> str:
        value = self.inputs.get(key)
        if not value:
            raise ConfigError(f"missing config key 'inputs.{key}' (or pass --{key})", key=f"inputs.{key}")
        return value


_SECTIONS = {
    "synth": synth.SynthConfig,
    "graph": GraphSection,
    "line": line.LineConfig,
    "align": align.AlignConfig,
    "probe": ProbeSection,
    "distill": distill.DistillConfig,
}
_GRID_KEYS = ("resolution", "edge_length_m", "origin_lat", "origin_lon", "ref_lat")


def _build_section(name: str, cls, values: dict, default):
    if not isinstance(values, dict):
        raise ConfigError(f"config section '{name}' must be an object", key=name)
    allowed = {f.name for f in dataclasses.fields(cls)} - {"grid"}
    for key, value in values.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key '{name}.{key}'", key=f"{name}.{key}")
        expected = type(getattr(default, key))
        ok = isinstance(value, expected) and not (expected is not bool and isinstance(value, bool))
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            ok = True
        if not ok:
            raise ConfigError(f"config key '{name}.{key}' expects {expected.__name__}, "
                              f"got {type(value).__name__}", key=f"{name}.{key}")
    try:
        return dataclasses.replace(default, **values)
    except TypeError as exc:
        raise ConfigError(f"bad value in section '{name}': {exc}", key=name) from None


def config_from_dict(raw: dict) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    base = PipelineConfig()
    known = set(_SECTIONS) | {"grid", "inputs"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"unknown config section '{key}'", key=key)
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build_section(name, cls, raw.get(name, {}), getattr(base, name))
    grid_raw = raw.get("grid", {})
    for key in grid_raw:
        if key not in _GRID_KEYS:
            raise ConfigError(f"unknown config key 'grid.{key}'", key=f"grid.{key}")
    kwargs["grid"] = hexgrid.GridConfig.from_dict(grid_raw)
    inputs = raw.get("inputs", {})
    for key in inputs:
        if key not in INPUT_KEYS:
            raise ConfigError(f"unknown config key 'inputs.{key}'", key=f"inputs.{key}")
    kwargs["inputs"] = dict(inputs)
    cfg = PipelineConfig(**kwargs)
    # Synthetic cells live on the same grid as everything else.
    cfg.synth = dataclasses.replace(cfg.synth, grid=cfg.grid.to_dict())
    return cfg


def load_config(path=None) -> PipelineConfig:
    if path is None:
        return config_from_dict({})
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return config_from_dict(raw)


# --- determinism and manifests ----------------------------------------------


@contextlib.contextmanager
def deterministic_mode(enabled: bool = True):
    """Pin BLAS and numba to one thread for the duration of the block."""
    if not enabled:
        yield
        return
    import numba
    from threadpoolctl import threadpool_limits

    prev = numba.get_num_threads()
    numba.set_num_threads(1)
    try:
        with threadpool_limits(limits=1):
            yield
    finally:
        numba.set_num_threads(prev)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def versions() -> dict:
    import numba
    import scipy

    return {
        "mobalign": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    deterministic: bool
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    stage_seconds: dict = field(default_factory=dict)
    versions: dict = field(default_factory=versions)

    @classmethod
    def start(cls, command: str, cfg: PipelineConfig, deterministic: bool) -> "RunManifest":
        seeds = {name: getattr(cfg, name).seed for name in ("synth", "graph", "line", "align", "probe", "distill")}
        return cls(command, cfg.to_dict(), seeds, deterministic)

    def add_input(self, key: str, path) -> None:
        self.inputs[key] = {"path": str(path), "sha256": sha256_file(path)}

    def add_output(self, key: str, path) -> None:
        self.outputs[key] = {"path": str(path), "sha256": sha256_file(path)}

    @contextlib.contextmanager
    def stage(self, name: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            self.stage_seconds[name] = round(time.perf_counter() - t0, 4)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


# --- end-to-end driver --------------------------------------------------------


@dataclass
class PipelineResult:
    data: synth.SynthData | None
    full_graph: graphbuild.MobilityGraph
    graph: graphbuild.MobilityGraph
    line_table: EmbeddingTable
    align_result: align.AlignResult
    reports: list
    surrogate: distill.Surrogate | None
    manifest: RunManifest
    paths: dict


def run_pipeline(cfg: PipelineConfig, out_dir, deterministic: bool = False,
                 with_distill: bool = False) -> PipelineResult:
    """Synthesize (unless ``inputs.events`` is set), build, sample, pre-encode,
    align, probe and optionally distill, writing every artifact to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if deterministic and cfg.line.threads != 1:
        cfg = dataclasses.replace(cfg, line=dataclasses.replace(cfg.line, threads=1))
    man = RunManifest.start("pipeline", cfg, deterministic)
    paths = {}
    with deterministic_mode(deterministic):
        data = None
        if cfg.inputs.get("events"):
            for key in ("events", "text", "image", "demo"):
                if cfg.inputs.get(key):
                    man.add_input(key, cfg.inputs[key])
            with man.stage("read_inputs"):
                events = list(graphbuild.read_events(cfg.inputs["events"], cfg.grid))
                tables = {m: read_table(cfg.inputs[m]) for m in ("text", "image", "demo") if cfg.inputs.get(m)}
                if not tables:
                    raise ConfigError("missing config key 'inputs.text|image|demo'", key="inputs.text")
                cells = np.unique(np.concatenate([t.ids for t in tables.values()]))
                modalities = align.ModalityData.from_tables(cells, **tables)
                tasks = [probe.read_task(p) for p in _task_paths(cfg.inputs.get("tasks"))]
                for p in _task_paths(cfg.inputs.get("tasks")):
                    man.add_input(f"task:{Path(p).stem}", p)
        else:
            with man.stage("synth"):
                data = synth.generate(cfg.synth)
                paths.update(synth.write(data, out / "synth"))
            events, modalities, tasks = data.events, data.modalities, data.tasks

        with man.stage("build_graph"):
            full = graphbuild.build_graph(events)
            paths["graph_full"] = str(out / "graph_full.mgr")
            graphbuild.write_graph(paths["graph_full"], full)
        with man.stage("sample_graph"):
            sub = graphbuild.sample(full, cfg.graph.ratio, cfg.graph.mode, cfg.graph.seed)
            paths["graph"] = str(out / "graph.mgr")
            graphbuild.write_graph(paths["graph"], sub)
        log.info("full graph: %s; sampled: %s", graphbuild.summarize(full), graphbuild.summarize(sub))
        with man.stage("train_line"):
            line_table = line.train_line(full, cfg.line)
            paths["line"] = str(out / "line.emb")
            write_emb(paths["line"], line_table)
        with man.stage("train_align"):
            res = align.train_align(sub, line_table, modalities, cfg.align)
            paths["emb"] = str(out / "embeddings.emb")
            write_emb(paths["emb"], res.embeddings)
            paths["align_log"] = str(out / "align_log.tsv")
            Path(paths["align_log"]).write_text("\n".join(["epoch\ttrain\tval"] + res.log_lines()) + "\n")
        reports = []
        if tasks:
            with man.stage("probe"):
                reports = probe.run_benchmark(res.embeddings, tasks, cfg.probe.trials, cfg.probe.lam,
                                              cfg.probe.test_fraction, cfg.probe.seed)
                paths["report"] = str(out / "report.tsv")
                Path(paths["report"]).write_text(probe.format_report(reports))
        sur = None
        if with_distill:
            with man.stage("distill"):
                sur = distill.distill_from_table(res.embeddings, cfg.grid, cfg.distill)
                paths["surrogate"] = str(out / "surrogate.bin")
                distill.write_surrogate(paths["surrogate"], sur)

    for key in ("graph", "line", "emb", "report", "surrogate"):
        if key in paths:
            man.add_output(key, paths[key])
    paths["manifest"] = str(man.write(out))
    return PipelineResult(data, full, sub, line_table, res, reports, sur, man, paths)


def _task_paths(value) -> list:
    """``inputs.tasks`` is a list of files or a directory of ``*.tsv``."""
    if not value:
        return []
    if isinstance(value, str):
        p = Path(value)
        return sorted(str(x) for x in p.glob("*.tsv")) if p.is_dir() else [value]
    return [str(x) for x in value]
