import json
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from propnet.ablation import (DEVIATIONS_MM, deviated_seed, format_deviation_table, run_ablation,
                              segment_cases)
from propnet.checkpoint import model_checkpoint, save_checkpoint
from propnet.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, main
from propnet.config import ConfigError, canonical_json, config_from_dict, fingerprint, parse_config, schema
from propnet.data import PhantomConfig, phantom_set
from propnet.model import PropNet
from propnet.propagate import ModelPredictor

REPO = Path(__file__).resolve().parents[1]
TINY = ["model.base_channels=8", "model.blocks=[1,1,1,1]", "data.n_train=4", "data.n_val=2",
        "train.epochs=2", "train.val_every=1", "train.checkpoint_every=0"]


# -- config ------------------------------------------------------------------

def test_empty_file_gives_defaults(tmp_path):
    f = tmp_path / "empty.json"
    f.write_text("")
    assert parse_config(f, env={}) == parse_config(env={})
    f.write_text("{}")
    assert parse_config(f, env={}).fingerprint() == parse_config(env={}).fingerprint()


def test_unknown_key_names_the_key(tmp_path):
    f = tmp_path / "c.json"
    f.write_text(json.dumps({"train": {"epochz": 3}}))
    with pytest.raises(ConfigError, match="epochz"):
        parse_config(f, env={})
    with pytest.raises(ConfigError, match="bogus"):
        parse_config(overrides=["bogus=1"], env={})


@pytest.mark.parametrize("override, key", [
    ("train.epochs=\"ten\"", "train.epochs"),
    ("train.epochs=2.5", "train.epochs"),
    ("propagate.parallel=1", "propagate.parallel"),
    ("model.blocks=[1,2]", "model"),
    ("data.phantom.spacing=[1,2]", "data.phantom.spacing"),
    ("data=3", "data"),
])
def test_type_mismatch_names_the_key(override, key):
    with pytest.raises(ConfigError, match=key.replace(".", r"\.")):
        parse_config(overrides=[override], env={})


def test_constraint_violation_is_config_error():
    with pytest.raises(ConfigError):
        parse_config(overrides=["propagate.crop_size=96"], env={})  # differs from model.input_size
    with pytest.raises(ConfigError):
        parse_config(overrides=["propagate.connectivity=8"], env={})


def test_override_changes_only_that_field():
    base = parse_config(env={}).to_dict()
    new = parse_config(overrides=["propagate.interval_mm=10"], env={}).to_dict()
    assert new["propagate"]["interval_mm"] == 10.0
    new["propagate"]["interval_mm"] = base["propagate"]["interval_mm"]
    assert new == base


def test_override_value_falls_back_to_string():
    assert parse_config(overrides=["output_dir=runs/x"], env={}).output_dir == "runs/x"


def test_fingerprint_independent_of_key_order(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    a.write_text(json.dumps({"seed": 3, "train": {"epochs": 5, "T0": 4}}))
    b.write_text(json.dumps({"train": {"T0": 4, "epochs": 5}, "seed": 3}))
    assert parse_config(a, env={}).fingerprint() == parse_config(b, env={}).fingerprint()
    assert parse_config(a, env={}).fingerprint() != parse_config(env={}).fingerprint()


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=5), st.integers(), max_size=6))
def test_fingerprint_is_canonical(d):
    shuffled = dict(reversed(list(d.items())))
    assert fingerprint(d) == fingerprint(shuffled)
    assert len(fingerprint(d)) == 16
    assert json.loads(canonical_json(d)) == d


def test_seed_from_environment():
    assert parse_config(env={"PROPNET_SEED": "99"}).seed == 99
    assert parse_config(env={}).seed == 7
    with pytest.raises(ConfigError, match="PROPNET_SEED"):
        parse_config(env={"PROPNET_SEED": "x"})


def test_round_trip_through_dict():
    run = parse_config(overrides=["model.blocks=[1,1,1,1]", "evaluate.tolerances=[1.0]"], env={})
    assert config_from_dict(run.to_dict()) == run


def test_schema_lists_every_section():
    s = schema()
    assert set(s["properties"]) == {"seed", "output_dir", "data", "model", "train", "propagate", "evaluate"}
    assert s["properties"]["train"]["properties"]["epochs"] == {"type": "int", "default": 200}


@pytest.mark.parametrize("name", ["desk.json", "fullsize.json"])
def test_committed_configs_parse(name):
    run = parse_config(REPO / "configs" / name, env={})
    assert run.model.input_size == run.propagate.crop_size


def test_fullsize_config_values():
    run = parse_config(REPO / "configs" / "fullsize.json", env={})
    assert (run.train.epochs, run.train.T, run.train.T0, run.train.T_mult) == (200, 40.0, 40, 2)
    assert run.model.input_size == 256 and run.model.base_channels == 64
    assert run.train.erosion_kernel == 9 and run.propagate.interval_mm == 20.0


def test_desk_config_only_shortens_training():
    desk = parse_config(REPO / "configs" / "desk.json", env={}).to_dict()
    default = parse_config(env={}).to_dict()
    assert (desk["train"]["epochs"], desk["train"]["T0"], desk["train"]["T"]) == (60, 12, 12.0)
    for k in ("epochs", "T0", "T"):
        desk["train"][k] = default["train"][k]
    assert desk == default


# -- ablation bookkeeping ----------------------------------------------------

@pytest.fixture(scope="module")
def tiny_ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablate")
    run = parse_config(overrides=TINY + ["data.phantom.shape=[16,48,48]", "data.phantom.tumor_slices_range=[6,9]",
                                         "data.phantom.lumen_radius_range=[4.0,5.0]",
                                         "data.phantom.wall_thickness_range=[3.0,4.0]",
                                         "propagate.max_iterations=8"], env={})
    for stem, refine in (("full", True), ("propose_only", False)):
        net = PropNet(run.model.__class__(**{**vars(run.model), "boundary_branch_enabled": refine,
                                             "refining_stage_enabled": refine}))
        save_checkpoint(model_checkpoint(net), root / f"{stem}.ckpt")
    cases = phantom_set(run.data.phantom, 2, split=1)
    return run, root, cases


def test_interval_sweep_bookkeeping(tiny_ablation, tmp_path):
    run, ckpts, cases = tiny_ablation
    reports = run_ablation("interval_sweep", run, ckpts, tmp_path, cases=cases, timing_repeats=1)
    assert sorted(r.fingerprint["interval_mm"] for r in reports.values()) == [5, 10, 15, 20]
    assert all(r.fingerprint["config"] == run.fingerprint() for r in reports.values())
    assert (tmp_path / "interval.png").stat().st_size > 0
    assert len(list(tmp_path.glob("report_*mm.csv"))) == 4


def test_deviation_sweep_zero_row_is_plain_evaluation(tiny_ablation, tmp_path):
    from propnet.train import load_model
    from propnet.metrics import dsc

    run, ckpts, cases = tiny_ablation
    reports = run_ablation("deviation_sweep", run, ckpts, tmp_path, cases=cases)
    assert len(reports) == len(DEVIATIONS_MM)
    plain = segment_cases(ModelPredictor(load_model(ckpts / "full.ckpt")), cases, run)
    want = [dsc(s.mask.voxels, g.voxels) for _, s, g, _ in plain]
    assert reports["0mm"].values("dsc") == pytest.approx(want, abs=0)
    table = (tmp_path / "deviation_table.txt").read_text().splitlines()
    assert table[0].startswith("Deviation (mm) | DSC | JI")
    assert [ln.split(" | ")[0] for ln in table[1:]] == ["-15", "-10", "-5", "0", "+5", "+10", "+15"]


def test_variants_suite_reports_available_variants(tiny_ablation, tmp_path):
    run, ckpts, cases = tiny_ablation
    reports = run_ablation("variants", run, ckpts, tmp_path, cases=cases)
    # no boundary-only checkpoint, so that row is skipped
    assert list(reports) == ["propose_only", "+refine", "+mcc"]
    rows = json.loads((tmp_path / "summary.json").read_text())["rows"]
    assert rows[0]["p_vs_first"] == 1.0


def test_missing_checkpoint_names_variant(tiny_ablation, tmp_path):
    run, _, cases = tiny_ablation
    with pytest.raises(FileNotFoundError, match="'\\+boundary'"):
        run_ablation("+boundary", run, tmp_path, tmp_path / "out", cases=cases)
    with pytest.raises(ValueError, match="unknown suite"):
        run_ablation("nope", run, tmp_path, tmp_path / "out", cases=cases)


def test_deviated_seed_snaps_to_tumor_slices():
    m = np.zeros((20, 4, 4), np.uint8)
    m[5:12, 1:3, 1:3] = 1
    assert deviated_seed(m, 8, 10.0, 5.0) == 10
    assert deviated_seed(m, 8, -15.0, 5.0) == 5
    assert deviated_seed(m, 8, 30.0, 5.0) == 11  # target 14 snaps back to the last tumor slice
    assert deviated_seed(m, 8, -100.0, 5.0) == 5
    with pytest.raises(ValueError):
        deviated_seed(np.zeros_like(m), 8, 5.0, 5.0)


def test_format_deviation_table_signs_and_order():
    rows = [{"deviation_mm": d, "dsc": 0.5, "ji": 0.3} for d in (5, 0, -5)]
    assert format_deviation_table(rows).splitlines() == ["Deviation (mm) | DSC | JI", "-5 | 0.500 | 0.300",
                                                          "0 | 0.500 | 0.300", "+5 | 0.500 | 0.300"]


# -- CLI ---------------------------------------------------------------------

def test_synth_writes_pairs_and_manifest(tmp_path):
    assert main(["synth", "--count", "4", "--out", str(tmp_path)]) == EXIT_OK
    assert len(list(tmp_path.glob("*.vol.raw"))) == 4
    assert len(list(tmp_path.glob("*.mask.raw"))) == 4
    assert len(list((tmp_path / "seeds").glob("*.mask.json"))) == 4
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["count"] == 4 and len({c["id"] for c in manifest["cases"]}) == 4
    run = json.loads((tmp_path / "run.json").read_text())
    assert run["command"] == "synth" and run["config_fingerprint"] == parse_config().fingerprint()


def test_missing_required_argument_is_usage_error(tmp_path):
    assert main(["propagate", "--ckpt", "x", "--volume", "y", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE


def test_bad_config_is_usage_error(tmp_path):
    assert main(["synth", "--count", "1", "--out", str(tmp_path), "--set", "data.nope=1"]) == EXIT_USAGE


def test_runtime_failure_exits_one(tmp_path):
    argv = ["propagate", "--ckpt", str(tmp_path / "none.ckpt"), "--volume", str(tmp_path / "v"),
            "--seed-mask", str(tmp_path / "s"), "--out", str(tmp_path / "o")]
    assert main(argv) == EXIT_FAIL


def test_smoke_chain(tmp_path, capsys):
    small = ["data.phantom.shape=[16,48,48]", "data.phantom.tumor_slices_range=[6,9]",
             "data.phantom.lumen_radius_range=[4.0,5.0]", "data.phantom.wall_thickness_range=[3.0,4.0]"]
    sets = [a for s in TINY + small for a in ("--set", s)]
    data, val = tmp_path / "data", tmp_path / "val"
    assert main(["synth", "--count", "2", "--out", str(data), *sets]) == EXIT_OK
    assert main(["synth", "--count", "2", "--split", "1", "--out", str(val), *sets]) == EXIT_OK
    train_sets = sets + ["--set", f"train.train_dir={data}", "--set", f"train.val_dir={val}"]
    assert main(["train", "--out", str(tmp_path / "train"), *train_sets]) == EXIT_OK
    ckpt = tmp_path / "train" / "last.ckpt"
    assert ckpt.exists() and (tmp_path / "train" / "training.png").exists()

    pred = tmp_path / "pred"
    for meta in sorted(val.glob("*.vol.json")):
        cid = meta.name[: -len(".vol.json")]
        argv = ["propagate", "--ckpt", str(ckpt), "--volume", str(val / cid),
                "--seed-mask", str(val / "seeds" / cid), "--out", str(pred), *sets]
        assert main(argv) == EXIT_OK
        assert main(argv + ["--sequential", "--out", str(tmp_path / "seq")]) == EXIT_OK
        trace = json.loads((pred / "trace.json").read_text())
        assert trace["interval"] == 4 and trace["parallel"] is True
    for p in pred.glob("*.mask.raw"):
        assert p.read_bytes() == (tmp_path / "seq" / p.name).read_bytes()

    # ground truth lives alongside the volumes in the synth directory
    assert main(["evaluate", "--pred", str(pred), "--gt", str(val), "--out", str(tmp_path / "eval")]) == EXIT_OK
    assert "dsc" in capsys.readouterr().out
    header = (tmp_path / "eval" / "report.csv").read_text().splitlines()[0]
    assert header == "id,dsc,ji,sdsc@0.5,sdsc@1.0,sdsc@2.0"
    for d in ("data", "val", "train", "pred", "eval"):
        info = json.loads((tmp_path / d / "run.json").read_text())
        assert info["versions"]["torch"] and "wall_time_s" in info
