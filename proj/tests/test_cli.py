"""Drives the command-line tool end to end; MPCAD_CLI names the binary."""

import json
import os
import subprocess

import pytest

CLI = os.environ.get("MPCAD_CLI", "mpcad")

SMALL = """
tasks = stripes, dots
epochs = 1
batch_size = 4
backbone.layers = 2
backbone.dim = 16
backbone.heads = 2
backbone.patch_size = 8
backbone.input_hw = 32
backbone.mlp_hidden = 32
backbone.tap_key_layer = 2
backbone.tap_score_layer = 2
synthetic.train_images = 4
synthetic.test_normal = 2
synthetic.test_anomalous = 2
synthetic.defect_area = 0.1
"""


def run(*args, cwd):
    return subprocess.run([CLI, *map(str, args)], cwd=cwd, capture_output=True, text=True)


@pytest.fixture()
def work(tmp_path):
    (tmp_path / "small.cfg").write_text(SMALL)
    return tmp_path


def test_sequence_modes_agree(work):
    assert run("run-sequence", "--config", "small.cfg", "--out", "syn", cwd=work).returncode == 0
    assert run("gen-synthetic", "--config", "small.cfg", "--out", "data", cwd=work).returncode == 0
    assert run("run-sequence", "--config", "data/tasks.cfg", "--out", "img", cwd=work).returncode == 0
    for name in ["results.tsv", "image_auroc.tsv", "pixel_aupr.tsv", "bank.cmpb"]:
        assert (work / "syn" / name).read_bytes() == (work / "img" / name).read_bytes()
    meta = json.loads((work / "img" / "metadata.json").read_text())
    assert meta["mode"] == "images" and meta["visual_prompt_tuning"] is True


def test_feature_mode(work):
    assert run("gen-synthetic", "--config", "small.cfg", "--out", "f", "--format", "features", cwd=work).returncode == 0
    summary = run("import-features", "f/dots/train.cadf", cwd=work)
    assert summary.returncode == 0
    info = json.loads(summary.stdout)
    assert info["n_images"] == 4 and info["channels"] == 16 and info["has_regions"]
    assert run("run-sequence", "--config", "f/tasks.cfg", "--out", "r", cwd=work).returncode == 0
    meta = json.loads((work / "r" / "metadata.json").read_text())
    assert meta["mode"] == "features" and meta["visual_prompt_tuning"] is False
    out = run("infer", "--config", "f/tasks.cfg", "--bank", "r/bank.cmpb", "f/dots/test.cadf", "--out", "maps", cwd=work)
    assert out.returncode == 0
    assert (work / "maps" / "test_003.pgm").exists()


def test_adapt_infer_eval_export(work):
    assert run("adapt", "--config", "small.cfg", "--task", "stripes", "--out", "b1.cmpb", cwd=work).returncode == 0
    r = run("adapt", "--config", "small.cfg", "--task", "dots", "--bank", "b1.cmpb", "--out", "b2.cmpb",
            "--log", "dots.tsv", cwd=work)
    assert r.returncode == 0
    assert (work / "dots.tsv").read_text().startswith("epoch\tloss_text\tloss_visual\tb_v\tb_t\n")
    assert run("gen-synthetic", "--config", "small.cfg", "--out", "data", cwd=work).returncode == 0
    inf = run("infer", "--config", "small.cfg", "--bank", "b2.cmpb", "data/dots/test/003.ppm", "--out", "m", cwd=work)
    assert inf.returncode == 0
    fields = inf.stdout.splitlines()[1].split("\t")
    assert fields[0] == "003" and fields[1] == "dots"
    assert (work / "m" / "003.f32").stat().st_size == 224 * 224 * 4
    ev = run("eval", "--config", "small.cfg", "--bank", "b2.cmpb", "--out", "ev", cwd=work)
    assert ev.returncode == 0 and "avg_fm\tn/a\tn/a" in ev.stdout
    ex = run("export-bank", "--bank", "b2.cmpb", "--out", "bank.json", cwd=work)
    assert ex.returncode == 0
    assert [t["task_name"] for t in json.loads((work / "bank.json").read_text())["tasks"]] == ["stripes", "dots"]


def test_overrides(work):
    r = run("run-sequence", "--config", "small.cfg", "--out", "o", "--seed", "7", "--alpha", "0.5",
            "--tap-score-layer", "1", cwd=work)
    assert r.returncode == 0
    meta = json.loads((work / "o" / "metadata.json").read_text())
    assert meta["seed"] == 7 and meta["alpha"] == 0.5 and meta["tap_score_layer"] == 1


def test_exit_codes(work):
    assert run("run-sequence", "--config", "small.cfg", "--set", "bogus=1", "--out", "x", cwd=work).returncode == 2
    assert run("run-sequence", "--config", "small.cfg", "--alpha", "1.5", "--out", "x", cwd=work).returncode == 2
    assert run("run-sequence", "--config", "missing.cfg", "--out", "x", cwd=work).returncode == 2
    assert run("no-such-command", cwd=work).returncode == 2
    assert run("import-features", "small.cfg", cwd=work).returncode == 3
    assert run("infer", "--bank", "missing.cmpb", "x.ppm", "--out", "x", cwd=work).returncode == 3
    (work / "nan.cfg").write_text(SMALL + "learning_rate = 1e308\nmomentum = 0\n")
    bad = run("run-sequence", "--config", "nan.cfg", "--out", "x", cwd=work)
    assert bad.returncode == 4, bad.stderr
    assert "task 'stripes'" in bad.stderr
    assert run("--help", cwd=work).returncode == 0
