import json

import numpy as np
import pytest

from mobalign import distill, graphbuild
from mobalign.cli import main
from mobalign.embedding import read_emb, read_table
from mobalign.pipeline import sha256_file

TINY = {
    "synth": {"rows": 6, "cols": 6, "n_entities": 150, "n_buckets": 6, "text_dim": 16, "image_dim": 12,
              "demo_dim": 4, "n_points": 40, "admin_block": 2},
    "line": {"dim": 16, "total_samples": 20000},
    "align": {"d": 16, "batch_size": 16, "epochs": 2},
    "probe": {"trials": 3},
    "distill": {"hidden_layers": 2, "hidden_dim": 16, "out_dim": 16, "n_features": 32, "epochs": 5},
}


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture(scope="module")
def chain(tmp_path_factory):
    """synth -> build -> sample -> line -> align, shared by the read-only tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    steps = [
        ["synth", "--out", root / "synth"],
        ["build-graph", "--events", root / "synth/events.tsv", "--edges-text", "--out", root / "build"],
        ["sample-graph", "--graph", root / "build/graph.mgr", "--ratio", "0.5", "--out", root / "sample"],
        ["train-line", "--graph", root / "build/graph.mgr", "--out", root / "line"],
        ["train-align", "--graph", root / "sample/sampled.mgr", "--line", root / "line/line.emb",
         "--text", root / "synth/text.emb", "--image", root / "synth/image.emb", "--demo", root / "synth/demo.tsv",
         "--out", root / "align"],
    ]
    for argv in steps:
        assert main([str(a) for a in argv + ["--config", cfg, "--deterministic"]]) == 0, argv
    return root, cfg


def test_chain_outputs_and_manifests(chain):
    root, _ = chain
    for d, name in [("synth", "events.tsv"), ("build", "graph.mgr"), ("build", "edges.tsv"),
                    ("sample", "sampled.mgr"), ("line", "line.emb"), ("align", "embeddings.emb"),
                    ("align", "align_log.tsv")]:
        assert (root / d / name).exists()
        assert (root / d / "manifest.json").exists()
    man = json.loads((root / "align/manifest.json").read_text())
    assert man["command"] == "train-align" and man["deterministic"] is True
    assert man["outputs"]["emb"]["sha256"] == sha256_file(root / "align/embeddings.emb")
    assert man["inputs"]["line"]["sha256"] == sha256_file(root / "line/line.emb")
    assert man["config"]["align"]["d"] == 16 and set(man["seeds"]) >= {"line", "align"}
    assert "train_align" in man["stage_seconds"] and "numpy" in man["versions"]
    assert read_emb(root / "line/line.emb").vectors.shape[1] == 16
    emb = read_emb(root / "align/embeddings.emb")
    assert emb.vectors.shape == (36, 16)


def test_edges_text_matches_graph(chain):
    root, _ = chain
    g = graphbuild.read_graph(root / "build/graph.mgr")
    rows = [ln.split("\t") for ln in (root / "build/edges.tsv").read_text().splitlines()
            if ln and not ln.startswith(("#", "src"))]
    assert len(rows) == g.n_edges


def test_sample_ratio_one_is_payload_identical(chain, capsys, tmp_path):
    root, cfg = chain
    code, _, _ = run(capsys, "sample-graph", "--graph", root / "build/graph.mgr", "--ratio", "1.0",
                     "--out", tmp_path, "--config", cfg)
    assert code == 0
    assert sha256_file(tmp_path / "sampled.mgr") == sha256_file(root / "build/graph.mgr")


def test_probe_rerun_identical(chain, capsys, tmp_path):
    root, cfg = chain
    args = ["probe", "--emb", root / "align/embeddings.emb", "--tasks", root / "synth/tasks", "--config", cfg]
    code, out, _ = run(capsys, *args, "--out", tmp_path / "a")
    assert code == 0 and "mobility_task" in out
    code, _, _ = run(capsys, *args, "--out", tmp_path / "b")
    assert code == 0
    assert (tmp_path / "a/report.tsv").read_bytes() == (tmp_path / "b/report.tsv").read_bytes()


def test_export_emb_tsv_and_subset(chain, capsys, tmp_path):
    root, _ = chain
    emb = read_emb(root / "align/embeddings.emb")
    keep = tmp_path / "keep.txt"
    keep.write_text(f"{emb.ids[3]}\n{emb.ids[0]}\n")
    code, _, _ = run(capsys, "export-emb", "--emb", root / "align/embeddings.emb", "--cells", keep,
                     "--out", tmp_path)
    assert code == 0
    t = read_table(tmp_path / "embeddings.tsv")
    assert sorted(t.ids.tolist()) == sorted([int(emb.ids[3]), int(emb.ids[0])])
    row = int(np.flatnonzero(t.ids == emb.ids[0])[0])
    assert np.allclose(t.vectors[row], emb.vectors[0], rtol=1e-6)


def test_grid_index_single_point(capsys, tmp_path):
    code, out, _ = run(capsys, "grid-index", "--lat", "40.7", "--lon", "-74.0", "--out", tmp_path)
    assert code == 0 and int(out.strip()) > 0
    assert (tmp_path / "cells.tsv").read_text().startswith("id\tlat\tlon\tcell_id\n")


def test_grid_index_points_file(capsys, tmp_path):
    pts = tmp_path / "pts.tsv"
    pts.write_text("a\t40.7\t-74.0\nb\t40.7\t-74.0\nc\t10.0\t10.0\n")
    code, _, _ = run(capsys, "grid-index", "--points", pts, "--out", tmp_path)
    rows = [r.split("\t") for r in (tmp_path / "cells.tsv").read_text().splitlines()[1:]]
    assert code == 0 and [r[0] for r in rows] == ["a", "b", "c"]
    assert rows[0][3] == rows[1][3] != rows[2][3]


def test_distill_and_query(chain, capsys, tmp_path):
    root, cfg = chain
    code, _, _ = run(capsys, "distill", "--emb", root / "align/embeddings.emb", "--config", cfg,
                     "--out", tmp_path)
    assert code == 0
    sur = distill.read_surrogate(tmp_path / "surrogate.bin")
    lat = (sur.bbox.lat_min + sur.bbox.lat_max) / 2
    lon = (sur.bbox.lon_min + sur.bbox.lon_max) / 2
    code, out, _ = run(capsys, "query", "--surrogate", tmp_path / "surrogate.bin", "--lat", lat, "--lon", lon,
                       "--out", tmp_path)
    assert code == 0
    vec = np.array([float(x) for x in out.strip().split(",")])
    assert np.array_equal(vec, sur.predict([lat], [lon])[0])
    code, _, err = run(capsys, "query", "--surrogate", tmp_path / "surrogate.bin", "--lat", "0", "--lon", "0",
                       "--out", tmp_path)
    assert code != 0 and json.loads(err)["type"] == "RangeError"


def test_pipeline_subcommand(capsys, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps(TINY))
    code, out, _ = run(capsys, "pipeline", "--config", cfg, "--deterministic", "--distill", "--out", tmp_path / "o")
    assert code == 0 and "admin_task" in out
    for name in ("graph_full.mgr", "graph.mgr", "line.emb", "embeddings.emb", "report.tsv", "surrogate.bin",
                 "manifest.json"):
        assert (tmp_path / "o" / name).exists()


# --- failures -------------------------------------------------------------------


def test_missing_input_names_key(capsys, tmp_path):
    code, _, err = run(capsys, "train-line", "--out", tmp_path)
    payload = json.loads(err)
    assert code != 0
    assert payload["status"] == "error" and payload["key"] == "inputs.graph"


def test_unknown_config_key_rejected(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"line": {"dimm": 8}}))
    code, _, err = run(capsys, "synth", "--config", cfg, "--out", tmp_path)
    assert code == 2 and json.loads(err)["key"] == "line.dimm"


def test_invalid_json_config(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text("{")
    code, _, err = run(capsys, "synth", "--config", cfg, "--out", tmp_path)
    assert code == 2 and json.loads(err)["type"] == "ConfigError"


def test_corrupt_graph_reports_byte_offset(chain, capsys, tmp_path):
    root, _ = chain
    bad = tmp_path / "bad.mgr"
    data = bytearray((root / "build/graph.mgr").read_bytes())
    bad.write_bytes(bytes(data[: len(data) - 7]))
    code, _, err = run(capsys, "train-line", "--graph", bad, "--out", tmp_path)
    payload = json.loads(err)
    assert code == 3 and payload["type"] == "ParseError" and isinstance(payload["offset"], int)


def test_malformed_events_report_position(capsys, tmp_path):
    ev = tmp_path / "ev.tsv"
    ev.write_text("u1\t5\t0\nu1\tnot-a-cell\t0\n")
    code, _, err = run(capsys, "build-graph", "--events", ev, "--out", tmp_path)
    payload = json.loads(err)
    assert code == 3 and payload["type"] == "ParseError"
    assert payload.get("line") == 2 or payload.get("offset") is not None


def test_usage_error_is_json(capsys):
    code, _, err = run(capsys, "sample-graph", "--mode", "bogus")
    assert code == 2 and json.loads(err)["type"] == "UsageError"


def test_missing_file_is_os_error(capsys, tmp_path):
    code, _, err = run(capsys, "train-line", "--graph", tmp_path / "nope.mgr", "--out", tmp_path)
    assert code == 6 and json.loads(err)["status"] == "error"


def test_seed_out_of_range(capsys, tmp_path):
    code, _, err = run(capsys, "synth", "--seed", str(2**64), "--out", tmp_path)
    assert code == 2 and json.loads(err)["key"] == "seed"
