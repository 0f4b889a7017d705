import json

import numpy as np
import pytest

from inklpose import cli, metrics, synthdata

TINY_CFG = """\
train.batch_size=2
train.max_steps=2
train.ckpt_every=1
model.d=16
model.d1=8
model.d2=8
model.d3=8
model.n_kpt=8
model.n_rec=16
model.n_fps=8
model.S=1
model.heads=2
model.iakd_rounds=1
model.d_state=4
model.geo_knn=8
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["gen-data", "--out", str(root / "d.npz"), "--count", "4", "--seed", "1"]) == 0
    (root / "tiny.cfg").write_text(TINY_CFG)
    assert cli.main(["train", "--data", str(root / "d.npz"), "--config", str(root / "tiny.cfg"),
                     "--out", str(root / "run")]) == 0
    return root


def test_help_exits_zero(capsys):
    assert cli.main(["--help"]) == 0
    assert cli.main(["bench", "--help"]) == 0


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["gen-data", "--out", "x"],
                                  ["gen-data", "--out", "x", "--count", "2", "--bogus"],
                                  ["bench", "--arm", "transformer"], ["gen-data", "--out", "x", "--count", "0"]])
def test_invalid_invocations_exit_two(argv, capsys):
    assert cli.main(argv) == 2


def test_gen_data_round_trip_and_determinism(tmp_path, capsys):
    a, b = tmp_path / "a.npz", tmp_path / "b.npz"
    assert cli.main(["gen-data", "--out", str(a), "--count", "100", "--seed", "5"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("# resolved config") and "gen.seed=5" in out
    assert cli.main(["gen-data", "--out", str(b), "--count", "100", "--seed", "5"]) == 0
    assert a.read_bytes() == b.read_bytes()
    samples = synthdata.read_dataset(a)
    assert len(samples) == 100
    assert {s.category.name for s in samples} == set(synthdata.CATEGORY_NAMES)


def test_gen_data_single_category_and_seed_env(tmp_path, monkeypatch, capsys):
    p = tmp_path / "m.npz"
    monkeypatch.setenv("INKL_SEED", "9")
    assert cli.main(["gen-data", "--out", str(p), "--count", "5", "--categories", "mug"]) == 0
    assert "gen.seed=9" in capsys.readouterr().out
    assert all(s.category.name == "mug" for s in synthdata.read_dataset(p))


def test_gen_data_unwritable_path(tmp_path, capsys):
    assert cli.main(["gen-data", "--out", str(tmp_path / "no" / "such" / "d.npz"), "--count", "1"]) == 2
    assert "error" in capsys.readouterr().err


def test_train_outputs(workspace, capsys):
    run = workspace / "run"
    assert (run / "ckpt_000002.inkl").is_file() and (run / "latest.inkl").is_file()
    recs = [json.loads(line) for line in (run / "metrics.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2]


def test_train_resume_and_errors(workspace, tmp_path, capsys):
    cfg = workspace / "tiny.cfg"
    data = workspace / "d.npz"
    assert cli.main(["train", "--data", str(data), "--config", str(cfg), "--out", str(tmp_path / "r"),
                     "--resume", str(workspace / "run" / "ckpt_000001.inkl")]) == 0
    assert "finished at step 2" in capsys.readouterr().out
    assert cli.main(["train", "--data", str(tmp_path / "missing.npz"), "--config", str(cfg),
                     "--out", str(tmp_path / "r2")]) == 2
    bad = tmp_path / "bad.cfg"
    bad.write_text("model.d=16\nmodel.S=three\n")
    assert cli.main(["train", "--data", str(data), "--config", str(bad), "--out", str(tmp_path / "r3")]) == 2
    assert "bad.cfg:2:" in capsys.readouterr().err


def test_eval_writes_report(workspace, tmp_path, capsys):
    out = tmp_path / "report.jsonl"
    assert cli.main(["eval", "--data", str(workspace / "d.npz"), "--ckpt", str(workspace / "run" / "latest.inkl"),
                     "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "# resolved config" in text and "10°5cm" in text and "IoU50" in text
    rep = metrics.read_report(out)
    assert len(rep.per_instance) == 4 and metrics.is_monotone(rep.aggregates)
    assert cli.main(["eval", "--data", str(workspace / "d.npz"), "--ckpt", str(tmp_path / "none.inkl"),
                     "--out", str(out)]) == 2


def test_gradcheck_exit_codes(capsys):
    assert cli.main(["gradcheck", "--scale", "unit"]) == 0
    assert cli.main(["gradcheck", "--scale", "unit", "--tamper"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_bench_trend_and_reps(capsys):
    rows = {(arm, L): cli.bench_arm(arm, L, 16, reps=3) for arm in ("bi-mamba", "attention") for L in (64, 256)}
    scan = rows["bi-mamba", 256]["flops"] / rows["bi-mamba", 64]["flops"]
    attn = rows["attention", 256]["flops"] / rows["attention", 64]["flops"]
    assert scan == pytest.approx(4.0, rel=0.05) and attn > scan
    assert cli.bench_arm("uni-mamba", 64, 16)["flops"] == cli.bench_arm("uni-mamba", 64, 16)["flops"]
    r = rows["bi-mamba", 64]
    assert r["min_ms"] <= r["median_ms"]
    assert cli.main(["bench", "--arm", "uni-mamba", "--len", "8", "16", "--dim", "8"]) == 0
    out = capsys.readouterr().out
    assert "bench.reps=3" in out and "median ms" in out


def test_plot_keypoints_ply(workspace, tmp_path, capsys):
    out = tmp_path / "k.ply"
    assert cli.main(["plot-keypoints", "--data", str(workspace / "d.npz"), "--ckpt",
                     str(workspace / "run" / "latest.inkl"), "--instance", "1", "--out", str(out)]) == 0
    pts, cols = metrics.read_ply(out)
    assert len(pts) == 8 + 1024
    assert np.all(cols[8:] == 128)
    assert np.all(cols[:8, 2] == 0)
    rg = cols[:8, 0].astype(int) + cols[:8, 1]
    assert np.all((rg >= 254) & (rg <= 256))  # green-to-red blend, each channel rounded
    assert cli.main(["plot-keypoints", "--data", str(workspace / "d.npz"), "--ckpt",
                     str(workspace / "run" / "latest.inkl"), "--instance", "9", "--out", str(out)]) == 2


def test_keypoint_colours_green_when_perfect(workspace):
    net, _ = cli.trainer.load_model(workspace / "run" / "latest.inkl")
    sample = synthdata.read_dataset(workspace / "d.npz")[0]
    pts, cols = cli.keypoint_ply_data(net, sample)
    n = net.cfg.n_kpt
    gt_cols = metrics.nocs_error_colors(pts[:n], pts[:n])
    assert np.all(gt_cols == [0, 255, 0])
    far = metrics.nocs_error_colors(pts[:n] + [0.3, 0, 0], pts[:n])
    assert np.all(far == [255, 0, 0])
