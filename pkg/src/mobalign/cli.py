"""Command-line entry point: ``mobalign <subcommand> [options]``.

Every subcommand reads the shared JSON config, writes its outputs plus a
``manifest.json`` into ``--out``, and on failure prints one JSON object on
stderr (``{"status": "error", "type": ..., "message": ...}``) and exits
nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import align, distill, graphbuild, hexgrid, line, probe, synth
from .embedding import EmbeddingTable, read_table, write_emb, write_tsv
from .errors import ConfigError, NumericError, ParseError, RangeError, ValidationError
from .pipeline import (PipelineConfig, RunManifest, _task_paths, deterministic_mode, load_config,
                       run_pipeline)

log = logging.getLogger("mobalign")

EXIT_CODES = {ConfigError: 2, ParseError: 3, ValidationError: 4, RangeError: 4, NumericError: 5}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_payload(exc: BaseException) -> dict:
    payload = {"status": "error", "type": type(exc).__name__, "message": str(exc)}
    for attr in ("key", "line", "offset", "path"):
        value = getattr(exc, attr, None)
        if value is not None:
            payload[attr] = str(value) if attr == "path" else value
    return payload


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, UsageError):
        return 2
    for cls, code in EXIT_CODES.items():
        if isinstance(exc, cls):
            return code
    if isinstance(exc, OSError):
        return 6
    return 1


# --- helpers ----------------------------------------------------------------


def _inputs(cfg: PipelineConfig, args, *keys) -> PipelineConfig:
    """Command-line paths override ``inputs`` entries of the config."""
    inputs = dict(cfg.inputs)
    for key in keys:
        value = getattr(args, key, None)
        if value:
            inputs[key] = value
    return dataclasses.replace(cfg, inputs=inputs)


def _read_points(path):
    """``lat<TAB>lon`` rows (an optional leading id column is kept)."""
    ids, lat, lon = [], [], []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            raw = raw.rstrip("\n")
            if not raw or raw.startswith("#"):
                continue
            parts = raw.split("\t")
            if len(parts) not in (2, 3):
                raise ParseError("expected 'lat<TAB>lon' or 'id<TAB>lat<TAB>lon'", line=lineno, path=path)
            try:
                la, lo = float(parts[-2]), float(parts[-1])
                hexgrid.GeoCoord(la, lo)
            except (ValueError, RangeError) as exc:
                raise ParseError(str(exc), line=lineno, path=path) from None
            ids.append(parts[0] if len(parts) == 3 else str(len(ids)))
            lat.append(la)
            lon.append(lo)
    return ids, np.array(lat), np.array(lon)


def _points(args, cfg):
    if args.lat is not None or args.lon is not None:
        if args.lat is None or args.lon is None:
            raise UsageError("--lat and --lon must be given together")
        coord = hexgrid.GeoCoord(args.lat, args.lon)
        return ["0"], np.array([coord.lat]), np.array([coord.lon])
    return _read_points(cfg.require_input("points"))


def _vec_str(v) -> str:
    return ",".join(repr(float(x)) for x in v)


# --- subcommands ------------------------------------------------------------


def cmd_synth(cfg, args, man, out):
    with man.stage("synth"):
        data = synth.generate(cfg.synth)
        paths = synth.write(data, out)
    for key in ("events", "text", "image", "demo"):
        man.add_output(key, paths[key])
    log.info("synthesized %d cells, %d events, %d tasks", len(data.cells), len(data.events), len(data.tasks))


def cmd_grid_index(cfg, args, man, out):
    cfg = _inputs(cfg, args, "points")
    ids, lat, lon = _points(args, cfg)
    if cfg.inputs.get("points"):
        man.add_input("points", cfg.inputs["points"])
    with man.stage("grid_index"):
        cells = hexgrid.cells_of(lat, lon, cfg.grid)
    path = out / "cells.tsv"
    with open(path, "w") as fh:
        fh.write("id\tlat\tlon\tcell_id\n")
        for i, la, lo, c in zip(ids, lat, lon, cells):
            fh.write(f"{i}\t{float(la)!r}\t{float(lo)!r}\t{int(c)}\n")
    man.add_output("cells", path)
    if len(cells) == 1:
        print(int(cells[0]))


def cmd_build_graph(cfg, args, man, out):
    cfg = _inputs(cfg, args, "events")
    path = cfg.require_input("events")
    man.add_input("events", path)
    with man.stage("build_graph"):
        g = graphbuild.build_graph(graphbuild.read_events(path, cfg.grid))
    dest = out / "graph.mgr"
    graphbuild.write_graph(dest, g)
    man.add_output("graph", dest)
    if args.edges_text:
        graphbuild.write_edge_text(out / "edges.tsv", g)
    log.info("graph: %s", graphbuild.summarize(g))


def cmd_sample_graph(cfg, args, man, out):
    cfg = _inputs(cfg, args, "graph")
    path = cfg.require_input("graph")
    man.add_input("graph", path)
    section = dataclasses.replace(cfg.graph, **{k: v for k, v in (("ratio", args.ratio), ("mode", args.mode))
                                                if v is not None})
    man.config["graph"] = dataclasses.asdict(section)
    with man.stage("sample_graph"):
        g = graphbuild.read_graph(path)
        sub = graphbuild.sample(g, section.ratio, section.mode, section.seed)
    dest = out / "sampled.mgr"
    graphbuild.write_graph(dest, sub)
    man.add_output("graph", dest)
    log.info("sampled: %s", graphbuild.summarize(sub))


def cmd_train_line(cfg, args, man, out):
    cfg = _inputs(cfg, args, "graph")
    path = cfg.require_input("graph")
    man.add_input("graph", path)
    with man.stage("train_line"):
        table = line.train_line(graphbuild.read_graph(path), cfg.line)
    dest = out / "line.emb"
    write_emb(dest, table)
    man.add_output("line", dest)


def cmd_train_align(cfg, args, man, out):
    cfg = _inputs(cfg, args, "graph", "line", "text", "image", "demo")
    g_path, l_path = cfg.require_input("graph"), cfg.require_input("line")
    man.add_input("graph", g_path)
    man.add_input("line", l_path)
    tables = {}
    for m in ("text", "image", "demo"):
        if cfg.inputs.get(m):
            man.add_input(m, cfg.inputs[m])
            tables[m] = read_table(cfg.inputs[m])
    if not tables:
        raise ConfigError("missing config key 'inputs.text' (at least one of text, image, demo is needed)",
                          key="inputs.text")
    g = graphbuild.read_graph(g_path)
    init = read_table(l_path)
    cells = np.unique(np.concatenate([t.ids for t in tables.values()]))
    data = align.ModalityData.from_tables(cells, **tables)
    with man.stage("train_align"):
        res = align.train_align(g, init, data, cfg.align)
    dest = out / "embeddings.emb"
    write_emb(dest, res.embeddings)
    (out / "align_log.tsv").write_text("\n".join(["epoch\ttrain\tval"] + res.log_lines()) + "\n")
    man.add_output("emb", dest)


def cmd_export_emb(cfg, args, man, out):
    cfg = _inputs(cfg, args, "emb")
    path = cfg.require_input("emb")
    man.add_input("emb", path)
    table = read_table(path)
    if args.cells:
        ids = np.array([int(x) for x in Path(args.cells).read_text().split()], dtype=np.uint64)
        table, found = table.reindexed(ids)
        if not found.all():
            log.warning("%d requested cells have no embedding and were skipped", int((~found).sum()))
            table = EmbeddingTable(table.ids[found], table.vectors[found])
    dest = out / f"embeddings.{args.format}"
    (write_tsv if args.format == "tsv" else write_emb)(dest, table)
    man.add_output("emb", dest)


def cmd_probe(cfg, args, man, out):
    cfg = _inputs(cfg, args, "emb", "tasks")
    path = cfg.require_input("emb")
    task_files = _task_paths(cfg.require_input("tasks"))
    if not task_files:
        raise ConfigError("inputs.tasks names no task files", key="inputs.tasks")
    man.add_input("emb", path)
    for p in task_files:
        man.add_input(f"task:{Path(p).stem}", p)
    emb = read_table(path)
    tasks = [probe.read_task(p) for p in task_files]
    p = cfg.probe
    with man.stage("probe"):
        reports = probe.run_benchmark(emb, tasks, p.trials, p.lam, p.test_fraction, p.seed)
    dest = out / "report.tsv"
    dest.write_text(probe.format_report(reports))
    man.add_output("report", dest)
    sys.stdout.write(probe.format_report(reports))


def cmd_distill(cfg, args, man, out):
    cfg = _inputs(cfg, args, "emb")
    path = cfg.require_input("emb")
    man.add_input("emb", path)
    with man.stage("distill"):
        sur = distill.distill_from_table(read_table(path), cfg.grid, cfg.distill)
    dest = out / "surrogate.bin"
    distill.write_surrogate(dest, sur)
    man.add_output("surrogate", dest)
    log.info("distillation final mse %.5f", sur.final_loss)


def cmd_query(cfg, args, man, out):
    cfg = _inputs(cfg, args, "surrogate", "points")
    path = cfg.require_input("surrogate")
    man.add_input("surrogate", path)
    ids, lat, lon = _points(args, cfg)
    sur = distill.read_surrogate(path)
    with man.stage("query"):
        vecs = sur.predict(lat, lon)
    dest = out / "query.tsv"
    with open(dest, "w") as fh:
        for i, v in zip(ids, vecs):
            fh.write(f"{i}\t{_vec_str(v)}\n")
    man.add_output("query", dest)
    if len(ids) == 1:
        print(_vec_str(vecs[0]))


def cmd_pipeline(cfg, args, man, out):
    cfg = _inputs(cfg, args, "events", "text", "image", "demo", "tasks")
    res = run_pipeline(cfg, out, deterministic=args.deterministic, with_distill=args.distill)
    if res.reports:
        sys.stdout.write(probe.format_report(res.reports))
    return res.manifest


COMMANDS = {
    "synth": (cmd_synth, "generate a synthetic region with planted latents"),
    "grid-index": (cmd_grid_index, "map coordinates to hexagonal cell ids"),
    "build-graph": (cmd_build_graph, "build the co-visitation graph from an event log"),
    "sample-graph": (cmd_sample_graph, "keep a per-node fraction of edges (top-k or random)"),
    "train-line": (cmd_train_line, "second-order LINE pre-encoding"),
    "train-align": (cmd_train_align, "contrastive alignment with auxiliary modalities"),
    "export-emb": (cmd_export_emb, "convert or subset an embedding table"),
    "probe": (cmd_probe, "ridge linear probe on downstream tasks"),
    "distill": (cmd_distill, "fit a coordinate-to-embedding surrogate"),
    "query": (cmd_query, "query a surrogate at coordinates"),
    "pipeline": (cmd_pipeline, "run synth/build/sample/line/align/probe end to end"),
}


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="override every stage seed")
    common.add_argument("--deterministic", action="store_true", help="single-threaded, reproducible run")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="mobalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name in ("grid-index", "query"):
            p.add_argument("--points", help="TSV of lat/lon rows")
            p.add_argument("--lat", type=float)
            p.add_argument("--lon", type=float)
        if name == "build-graph":
            p.add_argument("--events")
            p.add_argument("--edges-text", action="store_true", help="also write edges.tsv")
        if name in ("sample-graph", "train-line", "train-align"):
            p.add_argument("--graph")
        if name == "sample-graph":
            p.add_argument("--ratio", type=float)
            p.add_argument("--mode", choices=("topk", "random"))
        if name == "train-align":
            p.add_argument("--line")
        if name in ("train-align", "pipeline"):
            p.add_argument("--text")
            p.add_argument("--image")
            p.add_argument("--demo")
        if name in ("export-emb", "probe", "distill"):
            p.add_argument("--emb")
        if name == "export-emb":
            p.add_argument("--format", choices=("tsv", "emb"), default="tsv")
            p.add_argument("--cells", help="whitespace-separated cell ids to keep")
        if name in ("probe", "pipeline"):
            p.add_argument("--tasks", nargs="+", help="task files or a directory")
        if name == "pipeline":
            p.add_argument("--events")
            p.add_argument("--distill", action="store_true", help="also fit the surrogate")
        if name == "query":
            p.add_argument("--surrogate")
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s", stream=sys.stderr)
        cfg = load_config(args.config)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError("--seed must be an unsigned 64-bit integer", key="seed")
            cfg = cfg.with_seed(args.seed)
        if args.deterministic:
            cfg = dataclasses.replace(cfg, line=dataclasses.replace(cfg.line, threads=1))
        if getattr(args, "tasks", None) and len(args.tasks) == 1:
            args.tasks = args.tasks[0]
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        func = COMMANDS[args.command][0]
        man = RunManifest.start(args.command, cfg, args.deterministic)
        with deterministic_mode(args.deterministic):
            result = func(cfg, args, man, out)
        (result or man).write(out)
    except (UsageError, ConfigError, ParseError, ValidationError, RangeError, NumericError, OSError) as exc:
        print(json.dumps(_error_payload(exc), sort_keys=True), file=sys.stderr)
        return _exit_code(exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
