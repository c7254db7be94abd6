"""End-to-end CLI pipeline at miniature scale, plus dispatch contracts."""

import os

import numpy as np
import pytest

from optigen.cli import cli_dispatch
from optigen.data import save_idx_images, save_idx_labels
from optigen.images import load_pgm
from optigen.rng import RngStream


@pytest.fixture(scope="module")
def mini_env(tmp_path_factory):
    """A miniature dataset and config so every command finishes in seconds."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    data_dir.mkdir()
    rng = RngStream("cli-data", 0)
    n, side = 160, 7
    images = np.zeros((n, side, side))
    labels = np.zeros(n, dtype=np.uint8)
    for i in range(n):
        c = i % 2
        labels[i] = c
        if c == 0:
            images[i, 1:3, 1:6] = 1.0
        else:
            images[i, 4:6, 1:6] = 1.0
        images[i] += 0.1 * rng.child(f"i{i}").uniform((side, side))
    save_idx_images(data_dir / "train-images-idx3-ubyte.gz", np.clip(images, 0, 1))
    save_idx_labels(data_dir / "train-labels-idx1-ubyte.gz", labels)

    cfg = root / "mini.cfg"
    cfg.write_text(
        f"""
# miniature end-to-end configuration
data_dir = {data_dir}
image_n = 7
class_count = 2
grid_n = 32
sensor_n = 14
d1_m = 1.5e-3
d2_m = 1.5e-3
d3_m = 1.5e-3
noise_dim = 8
embed_dim = 4
hidden1 = 32
hidden2 = 32
seed_n = 8
timesteps = 60
beta_start = 1e-3
beta_end = 0.12
teacher_hidden = 48
teacher_layers = 2
teacher_epochs = 6
batch_size = 16
epochs = 6
lr = 2e-3
warmup_steps = 10
pair_count = 96
baseline_layers = 3
baseline_hidden = 32
eval_batch = 64
eval_repeats = 2
sample_ladder = 60,40,20,10,5,1
decoder_layers = 1
timestep_embed = 8
hidden1 = 32
"""
    )
    return root, str(cfg)


def run(args):
    return cli_dispatch([str(a) for a in args])


def test_usage_errors():
    assert run(["definitely-not-a-command"]) == 1
    assert run([]) == 1
    assert run(["infer", "--model", "x", "--confg", "y"]) == 1


def test_missing_config_file_exit_code(tmp_path):
    assert run(["train-teacher", "--config", "/no/such.cfg", "--out", tmp_path]) == 1


def test_missing_model_file_exit_code(tmp_path):
    assert run(["infer", "--model", "/no/such.ckpt", "--out", tmp_path]) == 2


def test_full_pipeline(mini_env, tmp_path_factory):
    root, cfg = mini_env

    teacher_dir = root / "teacher"
    assert run(["train-teacher", "--config", cfg, "--out", teacher_dir]) == 0
    teacher = teacher_dir / "teacher.ckpt"
    assert teacher.exists()
    assert (teacher_dir / "manifest.txt").exists()

    pairs_dir = root / "pairs"
    assert run(["gen-pairs", "--config", cfg, "--teacher", teacher,
                "--out", pairs_dir]) == 0
    pairs = pairs_dir / "pairs.bin"
    manifest = (pairs_dir / "manifest.txt").read_text()
    assert "input.teacher.sha256" in manifest

    probe_dir = root / "probe"
    assert run(["train-probe", "--config", cfg, "--out", probe_dir]) == 0

    snap_dir = root / "snapshot"
    assert run(["train-snapshot", "--config", cfg, "--pairs", pairs,
                "--out", snap_dir]) == 0
    model = snap_dir / "snapshot.ckpt"
    assert (snap_dir / "train-report.jsonl").exists()

    base_dir = root / "baseline"
    assert run(["train-baseline", "--config", cfg, "--pairs", pairs,
                "--out", base_dir]) == 0

    iter_dir = root / "iterative"
    assert run(["train-iterative", "--config", cfg, "--out", iter_dir]) == 0

    infer1 = root / "infer1"
    assert run(["infer", "--config", cfg, "--model", model, "--seed", "7",
                "--count", "4", "--out", infer1]) == 0
    assert (infer1 / "panel.pgm").exists()

    # determinism: identical invocation gives byte-identical outputs
    infer2 = root / "infer2"
    assert run(["infer", "--config", cfg, "--model", model, "--seed", "7",
                "--count", "4", "--out", infer2]) == 0
    for name in sorted(os.listdir(infer1)):
        if name.endswith(".pgm"):
            b1 = (infer1 / name).read_bytes()
            b2 = (infer2 / name).read_bytes()
            assert b1 == b2, name

    interp_dir = root / "interp"
    assert run(["interpolate", "--config", cfg, "--model", model,
                "--steps", "4", "--labels", "0,1", "--out", interp_dir]) == 0
    assert (interp_dir / "interpolation.pgm").exists()

    eval_dir = root / "eval"
    assert run(["evaluate", "--config", cfg, "--model", model,
                "--probe", probe_dir / "probe.ckpt",
                "--binary-probe", probe_dir / "binary.ckpt",
                "--out", eval_dir]) == 0
    metrics = (eval_dir / "metrics.csv").read_text()
    assert "proxy-fid" in metrics and "proxy-is" in metrics

    bits_dir = root / "bits"
    assert run(["ablate", "bits", "--config", cfg, "--model", model,
                "--probe", probe_dir / "probe.ckpt", "--bits", "8,4,2,1",
                "--out", bits_dir]) == 0
    rows = (bits_dir / "bits.csv").read_text().strip().splitlines()
    assert rows[0] == "bits,proxy_fid"
    assert len(rows) == 5

    flops_dir = root / "flops"
    assert run(["flops", "--config", cfg, "--out", flops_dir]) == 0
    table = (flops_dir / "flops.csv").read_text()
    assert "snapshot-optical-encoder" in table

    # iterative inference runs the reverse ladder
    iter_infer = root / "iter-infer"
    assert run(["infer", "--config", cfg, "--model", iter_dir / "iterative.ckpt",
                "--count", "2", "--out", iter_infer]) == 0
    img = load_pgm(iter_infer / "sample-0000.pgm")
    assert img.shape == (7, 7)
