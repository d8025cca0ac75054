import shutil
import subprocess
import sys

import numpy as np
import pytest

from kspace_refine.cli import main
from kspace_refine.config import RunConfig, dump_config, load_config, parse_config
from kspace_refine.data import read_manifest, sha256_file
from kspace_refine.errors import ConfigError
from kspace_refine.recon import UnrolledParams, load_params, save_params

TINY = """\
# tiny pipeline for tests
experiment = tiny
run_dir = run
data_dir = data
seed = 3
height = 32
width = 32
ellipse_count = 3
noise_sigma = 0.01
n_train = 4
n_val = 2
n_test = 2
acs_lines = 4
lambda_band = 2
phases = 2
epochs_per_stage = 2
patience_epochs = 2
lr = 0.01
ista_iters = 5
mask_bank_size = 2
"""


def _write(tmp_path, text=TINY, name="cfg.txt"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def _read_pgm(path):
    blob = path.read_bytes()
    head, rest = blob.split(b"\n", 3)[:3], blob.split(b"\n", 3)[3]
    assert head[0] == b"P5"
    w, h = map(int, head[1].split())
    return np.frombuffer(rest, dtype=np.uint8).reshape(h, w)


@pytest.fixture(scope="module")
def simulated(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write(root)
    assert main(["simulate", "--config", cfg]) == 0
    return root, cfg


@pytest.fixture(scope="module")
def trained(simulated):
    root, cfg = simulated
    assert main(["train", "--config", cfg, "--stages", "3"]) == 0
    return root, cfg


def test_simulate_writes_manifest(simulated, capsys):
    root, cfg = simulated
    entries = read_manifest(root / "data" / "manifest.tsv")
    assert len(entries) == 8
    assert (root / "data" / "masks.tsv").exists()


def test_simulate_rerun_same_manifest_hash(simulated, tmp_path, capsys):
    root, _ = simulated
    again = _write(tmp_path)
    assert main(["simulate", "--config", again]) == 0
    out = capsys.readouterr().out
    digest = sha256_file(root / "data" / "manifest.tsv")
    assert f"manifest sha256: {digest}" in out
    assert sha256_file(tmp_path / "data" / "manifest.tsv") == digest


def test_seed_override_changes_data(simulated, tmp_path):
    root, _ = simulated
    cfg = _write(tmp_path)
    assert main(["simulate", "--config", cfg, "--seed", "4"]) == 0
    assert sha256_file(tmp_path / "data" / "manifest.tsv") != sha256_file(root / "data" / "manifest.tsv")


def test_unknown_key_exit_1(tmp_path, capsys):
    cfg = _write(tmp_path, TINY + "learning_rate = 0.1\n")
    assert main(["simulate", "--config", cfg]) == 1
    assert "learning_rate" in capsys.readouterr().err


def test_bad_value_exit_1(tmp_path, capsys):
    assert main(["simulate", "--config", _write(tmp_path, TINY + "lr = fast\n")]) == 1
    assert main(["simulate", "--config", _write(tmp_path, TINY + "lr = -1\n", "b.txt")]) == 1
    assert main(["simulate", "--config", str(tmp_path / "missing.txt")]) == 1


def test_train_single_stage(simulated, tmp_path):
    root, _ = simulated
    cfg = _write(root, TINY.replace("run_dir = run", "run_dir = single"), "single.txt")
    assert main(["train", "--config", cfg, "--stages", "1"]) == 0
    run = root / "single"
    assert (run / "final.krfp").exists()
    assert sorted(p.name for p in run.glob("stage_*")) == ["stage_1"]
    rows = (run / "stage_1" / "stage.csv").read_text().splitlines()
    assert rows[0] == "epoch,train_loss,val_loss,lr"
    assert 1 <= len(rows) - 1 <= 2
    assert load_params(run / "final.krfp") == load_params(run / "stage_1" / "params.krfp")


def test_train_three_stages(trained):
    root, _ = trained
    run = root / "run"
    assert sorted(p.name for p in run.glob("stage_*")) == ["stage_1", "stage_2", "stage_3"]
    assert not (run / "stage_1" / "refined_manifest.tsv").exists()
    for j in (2, 3):
        assert len(read_manifest(run / f"stage_{j}" / "refined_manifest.tsv")) == 4
    summary = (run / "summary.txt").read_text()
    assert f"final_checkpoint_sha256 {sha256_file(run / 'final.krfp')}" in summary
    assert not (run / ".lock").exists()
    cfg = load_config(run / "config.txt")
    assert cfg.num_stages == 3 and cfg.seed == 3


def test_train_deterministic(trained, tmp_path):
    root, _ = trained
    cfg = _write(root, TINY.replace("run_dir = run", "run_dir = again"), "again.txt")
    assert main(["train", "--config", cfg, "--stages", "3"]) == 0
    a, b = root / "run", root / "again"
    assert sha256_file(a / "final.krfp") == sha256_file(b / "final.krfp")
    for j in (1, 2, 3):
        assert (a / f"stage_{j}" / "stage.csv").read_bytes() == (b / f"stage_{j}" / "stage.csv").read_bytes()


def test_train_without_data_exit_2(tmp_path, capsys):
    assert main(["train", "--config", _write(tmp_path)]) == 2
    assert capsys.readouterr().err


def test_train_numeric_failure_exit_3(simulated, capsys):
    root, _ = simulated
    cfg = _write(root, TINY.replace("run_dir = run", "run_dir = blowup") + "init_rho = 1e300\n", "blowup.txt")
    assert main(["train", "--config", cfg, "--stages", "1"]) == 3
    err = capsys.readouterr().err
    assert "stage" in err and "epoch" in err


def test_locked_run_dir_exit_2(simulated, capsys):
    root, _ = simulated
    cfg = _write(root, TINY.replace("run_dir = run", "run_dir = locked"), "locked.txt")
    (root / "locked").mkdir()
    (root / "locked" / ".lock").write_text("123")
    assert main(["train", "--config", cfg]) == 2
    assert "locked" in capsys.readouterr().err


def test_eval_writes_csv_and_table(trained, capsys):
    root, cfg = trained
    assert main(["eval", "--config", cfg]) == 0
    out = capsys.readouterr().out
    lines = out.splitlines()
    assert lines[0].split() == ["method", "PSNR", "4x", "SSIM", "4x"]
    assert [ln.split()[0] for ln in lines[1:]] == ["zero-filled", "classical-ISTA", "tiny"]
    rows = (root / "run" / "eval" / "final.csv").read_text().splitlines()
    assert rows[0] == "subject,psnr,ssim"
    assert len(rows) - 1 == 2
    assert (root / "run" / "eval" / "final_summary.txt").read_text() == out


def test_eval_stage_checkpoint(trained, capsys):
    root, cfg = trained
    assert main(["eval", "--config", cfg, "--checkpoint", "run/stage_1/params.krfp"]) == 0
    assert (root / "run" / "eval" / "params.csv").exists()


def test_eval_missing_truth_exit_2(simulated, tmp_path):
    root, _ = simulated
    shutil.copytree(root / "data", tmp_path / "data")
    cfg = _write(tmp_path)
    save_params(tmp_path / "run" / "final.krfp", UnrolledParams.init(2))
    (tmp_path / "data" / "truth" / "test_0000.img.krt").unlink()
    assert main(["eval", "--config", cfg]) == 2
    assert main(["export-images", "--config", cfg, "--subjects", "test_0000"]) == 2


def test_eval_missing_checkpoint_exit_2(simulated, tmp_path):
    root, _ = simulated
    cfg = _write(root, TINY.replace("run_dir = run", "run_dir = nothing"), "nothing.txt")
    assert main(["eval", "--config", cfg]) == 2


def test_full_mask_exact_reconstruction_hits_cap(tmp_path, capsys):
    cfg = _write(tmp_path, TINY.replace("acs_lines = 4", "acs_lines = 32") + "acceleration = 1\nnoise_sigma = 0\n")
    assert main(["simulate", "--config", cfg]) == 0
    save_params(tmp_path / "run" / "final.krfp", UnrolledParams.init(2, theta=0.0))
    assert main(["eval", "--config", cfg]) == 0
    rows = (tmp_path / "run" / "eval" / "final.csv").read_text().splitlines()[1:]
    assert all(float(r.split(",")[1]) == 200.0 for r in rows)
    assert main(["export-images", "--config", cfg, "--subjects", "test_0001"]) == 0
    err = _read_pgm(tmp_path / "run" / "images" / "test_0001_error.pgm")
    assert err.shape == (32, 32) and not err.any()


def test_export_images(trained, capsys):
    root, cfg = trained
    assert main(["export-images", "--config", cfg, "--subjects", "test_0000"]) == 0
    img_dir = root / "run" / "images"
    assert (img_dir / "test_0000_recon.pgm").exists() and (img_dir / "test_0000_error.pgm").exists()
    recon = _read_pgm(img_dir / "test_0000_recon.pgm")
    assert recon.shape == (32, 32) and recon.max() > 0
    sidecar = (img_dir / "scale.txt").read_text()
    assert "error_scale = 5.0" in sidecar


def test_export_unknown_subject_exit_2(trained):
    _, cfg = trained
    assert main(["export-images", "--config", cfg, "--subjects", "train_0000"]) == 2


def test_module_entry_point(simulated):
    _, cfg = simulated
    res = subprocess.run([sys.executable, "-m", "kspace_refine", "eval", "--config", cfg,
                          "--checkpoint", "no/such.krfp"], capture_output=True, text=True)
    assert res.returncode == 2
    res = subprocess.run([sys.executable, "-m", "kspace_refine", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "simulate" in res.stdout


# -- config --------------------------------------------------------------------------


def test_config_roundtrip(tmp_path):
    cfg = parse_config(TINY, tmp_path)
    again = parse_config(dump_config(cfg), tmp_path)
    assert again == cfg


def test_config_defaults():
    cfg = RunConfig().validate()
    assert cfg.lambda_band == cfg.acs_lines // 2
    assert cfg.num_stages == 15 and cfg.gamma == 0.01 and cfg.lr == 0.001
    assert cfg.refine_config().train == cfg.train_config()


def test_config_seed_changes_all_derived_seeds():
    a, b = RunConfig(seed=1), RunConfig(seed=2)
    assert a.phantom_spec().seed != b.phantom_spec().seed
    assert a.mask_spec().seed != b.mask_spec().seed
    assert a.train_config().master_seed != b.train_config().master_seed


def test_config_errors():
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("just words\n")
    with pytest.raises(ConfigError, match="bogus"):
        parse_config("bogus = 1\n")
    with pytest.raises(ConfigError):
        parse_config("keep_acquired = maybe\n")
    with pytest.raises(ConfigError):
        parse_config("n_test = 0\n")
