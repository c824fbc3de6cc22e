import json
import re

import numpy as np
import pytest

from lshr import cli, data

TINY = """
output_dir: {out}
network: {{channels: 2, blocks: 1}}
train: {{max_steps: 4, batch_size: 4, eval_every: 2}}
data: {{max_test_images: 8}}
evaluate: {{timing_reps: 1, keep_fractions: [1.0, 0.1], sweep_blocks: [1, 2]}}
"""


@pytest.fixture
def cfg_file(tmp_path):
    path = tmp_path / "run.yaml"
    path.write_text(TINY.format(out=tmp_path / "run"))
    return path


def run(*argv):
    return cli.main([str(a) for a in argv])


def report(out, command):
    return json.loads((out / f"{command}.json").read_text())


def test_config_errors_list_every_key(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("network: {K: 3, colour: true}\ntrain: {lr_recon: -1}\nextra: 1\n")
    assert run("train", "--config", bad) == cli.EXIT_CONFIG
    err = capsys.readouterr().err
    for needle in ("'extra'", "network.colour", "image_size", "lr_recon"):
        assert needle in err


def test_flags_override_file(cfg_file, tmp_path):
    out = tmp_path / "o"
    assert run("complexity", "--config", cfg_file, "--ratio", 0.1, "--blocks", 3, "--mode", "static",
               "--precision", "double", "--seed", 9, "--output-dir", out) == 0
    resolved = json.loads((out / "config.json").read_text())
    assert resolved["network"]["R"] == 0.1 and resolved["network"]["blocks"] == 3
    assert resolved["network"]["pattern_mode"] == "static"
    assert resolved["network"]["precision"] == resolved["train"]["precision"] == "double"
    assert resolved["train"]["seed"] == 9 and resolved["network"]["channels"] == 2


def test_complexity_command(tmp_path, capsys):
    out = tmp_path / "cx"
    assert run("complexity", "--ratio", 0.01, "--output-dir", out) == 0
    rep = report(out, "complexity")
    assert rep["space"] == 2560 and rep["time"] == 655360
    assert "space" in (out / "complexity.csv").read_text()


def test_archived_config_reproduces_resolution(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert run("complexity", "--config", cfg_file, "--blocks", 4) == 0
    first = (out / "config.json").read_text()
    assert run("complexity", "--config", out / "config.json") == 0
    assert (out / "config.json").read_text() == first


def test_train_evaluate_export_simulate_reconstruct(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", cfg_file, "--deterministic") == 0
    ckpt = out / "checkpoint.lshr"
    tr = report(out, "train")
    assert tr["steps"] == 4 and ckpt.exists()
    for name in ("history.csv", "sparsity.csv", "config.json"):
        assert (out / name).exists()
    before = ckpt.read_bytes()

    assert run("evaluate", "--config", cfg_file, "--checkpoint", ckpt) == 0
    assert report(out, "evaluate")["images"] == 8
    assert run("sparsify-eval", "--config", cfg_file, "--checkpoint", ckpt) == 0
    assert [r["keep_fraction"] for r in report(out, "sparsify-eval")["rows"]] == [1.0, 0.1]
    assert run("export-patterns", "--config", cfg_file, "--checkpoint", ckpt) == 0
    assert (out / "patterns.lshrpat").exists()

    ref = tmp_path / "ref.png"
    data.save_grayscale(ref, data.load_digits_corpus()[3, 0])
    assert run("simulate", "--config", cfg_file, "--checkpoint", ckpt, "--image", ref) == 0
    meas = out / "measurements_0000.csv"
    assert run("reconstruct", "--config", cfg_file, "--checkpoint", ckpt, "--measurements", meas,
               "--reference", ref) == 0
    rec = report(out, "reconstruct")
    assert (out / "measurements_0000_reconstruction.png").exists()
    assert re.search(r"^psnr: [0-9.]+$", (out / "reconstruct.txt").read_text(), re.M)
    assert rec["psnr_software_path"] >= 40
    assert ckpt.read_bytes() == before  # inputs are never modified


def test_train_twice_identical(cfg_file, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", cfg_file, "--deterministic", "--output-dir", a) == 0
    assert run("train", "--config", cfg_file, "--deterministic", "--output-dir", b) == 0
    for name in ("checkpoint.lshr", "history.csv", "sparsity.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_prepare_data_then_train_from_patches(cfg_file, tmp_path):
    prep = tmp_path / "prep"
    assert run("prepare-data", "--config", cfg_file, "--output-dir", prep) == 0
    n = report(prep, "prepare-data")
    assert n["train_patches"] + n["test_patches"] == 1797
    cfg = tmp_path / "from_patches.yaml"
    cfg.write_text(
        f"output_dir: {tmp_path / 'p'}\nnetwork: {{channels: 2, blocks: 1}}\n"
        "train: {max_steps: 2, batch_size: 4}\n"
        f"data:\n  patches: {prep / 'train_patches.lshr'}\n  test_patches: {prep / 'test_patches.lshr'}\n"
    )
    assert run("train", "--config", cfg) == 0


def test_directory_corpus(tmp_path):
    imgs = tmp_path / "imgs"
    imgs.mkdir()
    rng = np.random.default_rng(0)
    for i in range(3):
        data.save_grayscale(imgs / f"{i}.png", rng.uniform(size=(48, 40)))
    data.save_grayscale(imgs / "small.png", rng.uniform(size=(10, 10)))
    cfg = tmp_path / "d.yaml"
    cfg.write_text(f"output_dir: {tmp_path / 'd'}\ndata: {{corpus: directory, image_dir: {imgs}, patches_per_image: 4}}\n")
    assert run("prepare-data", "--config", cfg) == 0
    rep = report(tmp_path / "d", "prepare-data")
    assert rep["train_patches"] + rep["test_patches"] == 12


def test_sweep_blocks_command(cfg_file, tmp_path):
    assert run("sweep-blocks", "--config", cfg_file) == 0
    rows = report(tmp_path / "run", "sweep-blocks")["rows"]
    assert [r["blocks"] for r in rows] == [1, 2]


def test_missing_checkpoint_is_data_error(cfg_file, tmp_path, capsys):
    assert run("evaluate", "--config", cfg_file, "--checkpoint", tmp_path / "nope.lshr") == cli.EXIT_DATA
    assert "nope.lshr" in capsys.readouterr().err


def test_checkpoint_required(cfg_file):
    assert run("export-patterns", "--config", cfg_file) == cli.EXIT_CONFIG


def test_corrupt_measurements_is_data_error(cfg_file, tmp_path):
    out = tmp_path / "run"
    assert run("train", "--config", cfg_file) == 0
    assert run("simulate", "--config", cfg_file, "--checkpoint", out / "checkpoint.lshr") == 0
    meas = out / "measurements_0000.csv"
    lines = meas.read_text().splitlines()
    meas.write_text("\n".join(lines[:-1]) + "\n")
    assert run("reconstruct", "--config", cfg_file, "--checkpoint", out / "checkpoint.lshr",
               "--measurements", meas) == cli.EXIT_DATA


def test_example_config_is_valid():
    from pathlib import Path

    example = Path(__file__).resolve().parents[1] / "configs" / "example.yaml"
    cfg = cli.parse_run_config(cli.load_config_file(example))
    defaults = cli.RunConfig()
    # the annotated example documents the defaults of every section
    assert cfg.network == defaults.network and cfg.train == defaults.train
    assert cfg.data == defaults.data and cfg.simulate == defaults.simulate and cfg.evaluate == defaults.evaluate
    assert set(cfg.to_dict()) == set(defaults.to_dict())
