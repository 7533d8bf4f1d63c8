import json

import pytest

from mobalign.errors import ConfigError
from mobalign.pipeline import PipelineConfig, RunManifest, config_from_dict, load_config


def test_defaults_are_desk_preset():
    cfg = load_config()
    assert cfg.align.batch_size == 256 and cfg.align.epochs == 30
    assert cfg.graph.ratio == 0.10 and cfg.graph.mode == "topk"
    assert cfg.synth.rows == 20 and cfg.synth.n_entities == 2000 and cfg.synth.n_buckets == 54
    assert cfg.distill.hidden_layers == 8 and cfg.distill.epochs == 5000


def test_sections_override():
    cfg = config_from_dict({"line": {"dim": 32}, "align": {"tau": 0.1}, "graph": {"ratio": 0.5}})
    assert cfg.line.dim == 32 and cfg.align.tau == 0.1 and cfg.graph.ratio == 0.5
    assert cfg.line.total_samples == PipelineConfig().line.total_samples


def test_int_accepted_for_float():
    assert config_from_dict({"align": {"lr": 1}}).align.lr == 1


@pytest.mark.parametrize("raw,key", [
    ({"linee": {}}, "linee"),
    ({"line": {"dimm": 3}}, "line.dimm"),
    ({"synth": {"grid": {}}}, "synth.grid"),
    ({"inputs": {"eventz": "x"}}, "inputs.eventz"),
    ({"grid": {"res": 3}}, "grid.res"),
    ({"line": {"dim": "8"}}, "line.dim"),
    ({"line": {"dim": True}}, "line.dim"),
    ({"graph": []}, "graph"),
])
def test_unknown_or_mistyped_keys_rejected(raw, key):
    with pytest.raises(ConfigError) as exc:
        config_from_dict(raw)
    assert exc.value.key == key


@pytest.mark.parametrize("raw", [{"graph": {"ratio": 0.0}}, {"graph": {"mode": "best"}}, {"line": {"dim": 0}},
                                 {"synth": {"rows": -1}}])
def test_section_validation(raw):
    with pytest.raises(ConfigError):
        config_from_dict(raw)


def test_grid_is_shared_with_synth():
    cfg = config_from_dict({"grid": {"resolution": 3}})
    assert cfg.grid.resolution == 3 and cfg.synth.grid_config.resolution == 3


def test_with_seed_sets_every_stage():
    cfg = PipelineConfig().with_seed(11)
    assert {cfg.synth.seed, cfg.graph.seed, cfg.line.seed, cfg.align.seed, cfg.probe.seed, cfg.distill.seed} == {11}
    assert PipelineConfig().line.seed == 0


def test_require_input_names_key():
    with pytest.raises(ConfigError) as exc:
        PipelineConfig().require_input("events")
    assert exc.value.key == "inputs.events"


def test_config_roundtrips_through_manifest(tmp_path):
    cfg = config_from_dict({"line": {"dim": 24}, "grid": {"resolution": 4}, "inputs": {"events": "e.tsv"}})
    man = RunManifest.start("x", cfg, True)
    path = man.write(tmp_path)
    snap = json.loads(path.read_text())["config"]
    again = config_from_dict(snap)
    assert again.to_dict() == cfg.to_dict()


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("[1, 2")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")
    (tmp_path / "arr.json").write_text("[1, 2]")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "arr.json")
