import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from boxseg import __version__
from boxseg.cli import main
from boxseg.dataset import load_dataset
from boxseg.proposals import load_label_maps


@pytest.fixture()
def runner():
    return CliRunner()


def write_json(path: Path, payload: dict) -> str:
    path.write_text(json.dumps(payload))
    return str(path)


GEN_CFG = {"count": 6, "seed": 11, "side_range": [12, 20], "noise": 0.05,
           "fg_intensity": [0.7, 0.95], "bg_intensity": [0.05, 0.2]}

TRAIN_CFG = {"supervision": "box_like", "iterations": 4, "batch_size": 2, "branch_width": 4}


def gen_dataset(runner, tmp_path, name="data", cfg=GEN_CFG) -> str:
    cfg_path = write_json(tmp_path / "gen.json", cfg)
    out = tmp_path / name
    result = runner.invoke(main, ["gen-data", "--config", cfg_path, "--out", str(out)])
    assert result.exit_code == 0, result.output
    return str(out)


def test_version(runner):
    result = runner.invoke(main, ["--version"])
    assert result.exit_code == 0
    assert __version__ in result.output


def test_gen_data_reproducible(runner, tmp_path):
    a = gen_dataset(runner, tmp_path, "a")
    b = gen_dataset(runner, tmp_path, "b")
    for f in sorted(Path(a).iterdir()):
        if f.name == "run_manifest.json":  # carries wall-clock duration
            continue
        assert f.read_bytes() == (Path(b) / f.name).read_bytes(), f.name
    manifest = json.loads((Path(a) / "run_manifest.json").read_text())
    assert manifest["subcommand"] == "gen-data"
    assert manifest["config"]["seed"] == 11
    assert manifest["version"] == __version__


def test_gen_data_malformed_config_names_key(runner, tmp_path):
    cfg_path = write_json(tmp_path / "bad.json", {"coutn": 5})
    result = runner.invoke(main, ["gen-data", "--config", cfg_path, "--out", str(tmp_path / "x")])
    assert result.exit_code != 0
    assert "coutn" in result.output


def test_gen_data_refuses_nonempty_out(runner, tmp_path):
    out = gen_dataset(runner, tmp_path)
    cfg_path = write_json(tmp_path / "gen.json", GEN_CFG)
    result = runner.invoke(main, ["gen-data", "--config", cfg_path, "--out", out])
    assert result.exit_code != 0
    assert "--force" in result.output
    result = runner.invoke(main, ["gen-data", "--config", cfg_path, "--out", out, "--force"])
    assert result.exit_code == 0


def test_proposals_box_mode(runner, tmp_path):
    data = gen_dataset(runner, tmp_path)
    out = tmp_path / "props"
    result = runner.invoke(main, ["proposals", data, "--mode", "box", "--out", str(out)])
    assert result.exit_code == 0, result.output
    maps, ids, meta = load_label_maps(out)
    assert meta["mode"] == "box"
    samples, _ = load_dataset(data)
    assert ids == [s.id for s in samples]
    for s, m in zip(samples, maps):
        for b in s.boxes:
            ys, xs = b.slices()
            assert (m[ys, xs] == b.class_id).any()


def test_proposals_crf_t0_equals_box(runner, tmp_path):
    data = gen_dataset(runner, tmp_path)
    box_out = tmp_path / "box"
    crf_out = tmp_path / "crf0"
    assert runner.invoke(main, ["proposals", data, "--mode", "box", "--out", str(box_out)]).exit_code == 0
    result = runner.invoke(
        main, ["proposals", data, "--mode", "crf", "--iterations", "0", "--out", str(crf_out)]
    )
    assert result.exit_code == 0, result.output
    a, _, _ = load_label_maps(box_out)
    b, _, _ = load_label_maps(crf_out)
    for x, y in zip(a, b):
        assert np.array_equal(x, y)


def test_frstats_writes_table_and_report(runner, tmp_path):
    data = gen_dataset(runner, tmp_path)
    props = tmp_path / "props"
    runner.invoke(main, ["proposals", data, "--mode", "box", "--out", str(props)])
    table_path = tmp_path / "fr.json"
    result = runner.invoke(main, ["frstats", data, str(props), "--k", "2", "--out", str(table_path)])
    assert result.exit_code == 0, result.output
    assert "fill rates" in result.output
    payload = json.loads(table_path.read_text())
    assert payload["format"] == "boxseg-frtable-v1"
    # box-like proposals fill their boxes exactly
    for st in payload["classes"].values():
        assert st["fill_rate"] == 1.0
    assert (tmp_path / "fr.json.run.json").exists()


def _full_pipeline(runner, tmp_path):
    data = gen_dataset(runner, tmp_path)
    props = tmp_path / "props"
    runner.invoke(main, ["proposals", data, "--mode", "box", "--out", str(props)])
    table = tmp_path / "fr.json"
    runner.invoke(main, ["frstats", data, str(props), "--out", str(table)])
    return data, str(props), str(table)


def test_train_and_eval(runner, tmp_path):
    data, props, table = _full_pipeline(runner, tmp_path)
    cfg_path = write_json(tmp_path / "train.json", TRAIN_CFG)
    out = tmp_path / "run"
    result = runner.invoke(main, ["train", data, props, "--config", cfg_path, "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "checkpoint.bin").exists()
    log = (out / "training_log.tsv").read_text().splitlines()
    assert log[0].startswith("# config")
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["supervision"] == "box_like"

    report_path = tmp_path / "eval.json"
    result = runner.invoke(main, ["eval", str(out / "checkpoint.bin"), data, "--out", str(report_path)])
    assert result.exit_code == 0, result.output
    report = json.loads(report_path.read_text())
    assert 0.0 <= report["miou"] <= 1.0
    assert report["train_config"]["supervision"] == "box_like"


def test_train_rerun_is_byte_identical(runner, tmp_path):
    data, props, table = _full_pipeline(runner, tmp_path)
    cfg_path = write_json(tmp_path / "train.json", TRAIN_CFG)
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        result = runner.invoke(main, ["train", data, props, "--config", cfg_path, "--out", str(out)])
        assert result.exit_code == 0, result.output
        outs.append(out)
    assert (outs[0] / "checkpoint.bin").read_bytes() == (outs[1] / "checkpoint.bin").read_bytes()
    assert (outs[0] / "training_log.tsv").read_bytes() == (outs[1] / "training_log.tsv").read_bytes()


def test_train_fr_mode_without_table_fails_fast(runner, tmp_path):
    data, props, _ = _full_pipeline(runner, tmp_path)
    cfg_path = write_json(tmp_path / "train.json", {**TRAIN_CFG, "supervision": "crf+bcm+fr_refined"})
    result = runner.invoke(main, ["train", data, props, "--config", cfg_path, "--out", str(tmp_path / "x")])
    assert result.exit_code != 0
    assert "--fr-table" in result.output


def test_train_refuses_nonempty_out(runner, tmp_path):
    data, props, table = _full_pipeline(runner, tmp_path)
    cfg_path = write_json(tmp_path / "train.json", TRAIN_CFG)
    out = tmp_path / "run"
    assert runner.invoke(main, ["train", data, props, "--config", cfg_path, "--out", str(out)]).exit_code == 0
    result = runner.invoke(main, ["train", data, props, "--config", cfg_path, "--out", str(out)])
    assert result.exit_code != 0
    assert "--force" in result.output


def test_train_semi_fraction_flag(runner, tmp_path):
    data, props, table = _full_pipeline(runner, tmp_path)
    cfg_path = write_json(tmp_path / "train.json", TRAIN_CFG)
    out = tmp_path / "semi"
    result = runner.invoke(
        main, ["train", data, props, "--config", cfg_path, "--semi-fraction", "0.5", "--out", str(out)]
    )
    assert result.exit_code == 0, result.output
    manifest = json.loads((out / "run_manifest.json").read_text())
    assert manifest["config"]["semi_fraction"] == 0.5


def test_ablate_single_cell(runner, tmp_path):
    data = gen_dataset(runner, tmp_path, "train")
    val = gen_dataset(runner, tmp_path, "val", {**GEN_CFG, "seed": 12})
    grid = write_json(tmp_path / "grid.json", {
        "defaults": {"iterations": 4, "batch_size": 2, "branch_width": 4},
        "rows": ["box_like"],
    })
    out = tmp_path / "ablation"
    result = runner.invoke(main, ["ablate", data, val, "--config", grid, "--seeds", "0", "--out", str(out)])
    assert result.exit_code == 0, result.output
    table = (out / "ablation.tsv").read_text().splitlines()
    assert table[0] == "name\tmedian_miou\tper_seed_miou"
    assert table[1].startswith("box_like\t")


def test_eval_rejects_class_mismatch(runner, tmp_path):
    data, props, _ = _full_pipeline(runner, tmp_path)
    cfg_path = write_json(tmp_path / "train.json", TRAIN_CFG)
    out = tmp_path / "run"
    runner.invoke(main, ["train", data, props, "--config", cfg_path, "--out", str(out)])
    other = gen_dataset(runner, tmp_path, "two_class", {**GEN_CFG, "shapes": ["block"]})
    result = runner.invoke(main, ["eval", str(out / "checkpoint.bin"), other, "--out", str(tmp_path / "e.json")])
    assert result.exit_code != 0
    assert "classes" in result.output
