import json
import os

import numpy as np
import pytest

from hd2ssc.checkpoint import load_checkpoint, save_checkpoint
from hd2ssc.cli import main
from hd2ssc.dataio import ModelConfig, read_sscv
from hd2ssc.pipeline import HD2SSC

SMALL = ["--set", "model.c2d=8", "--set", "model.c3d=8", "--set", "model.n_query=8"]


def files(root):
    out = {}
    for d, _, names in os.walk(root):
        for n in names:
            p = os.path.join(d, n)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli") / "data"
    assert main(["gen", "--out", str(d), "--count", "2"]) == 0
    return d


@pytest.fixture(scope="module")
def ckpt(data, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(data), "--out", str(out), "--set", "train.epochs=1"] + SMALL) == 0
    return out / "model.ckpt"


# -------------------------------------------------------------------- gen

def test_gen_layout_and_determinism(data, tmp_path):
    assert sorted(p for p in os.listdir(data) if p.startswith("sample_")) == ["sample_0000", "sample_0001"]
    assert main(["gen", "--out", str(tmp_path / "again"), "--count", "2"]) == 0
    assert files(data) == files(tmp_path / "again")
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["seed"] == 0 and manifest["started"] is None
    assert manifest["outputs"] == ["sample_0000", "sample_0001"]


def test_gen_count_zero_is_usage_error(tmp_path):
    assert main(["gen", "--out", str(tmp_path / "x"), "--count", "0"]) == 1


def test_gen_unwritable_path(tmp_path):
    (tmp_path / "file").write_text("")
    assert main(["gen", "--out", str(tmp_path / "file" / "sub"), "--count", "1"]) == 2


def test_manifest_uses_pinned_epoch(tmp_path, monkeypatch):
    monkeypatch.setenv("SOURCE_DATE_EPOCH", "0")
    assert main(["gen", "--out", str(tmp_path / "d"), "--count", "1"]) == 0
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    assert m["started"] == m["finished"] == "1970-01-01T00:00:00Z"


# ------------------------------------------------------------------ train

def test_train_zero_epochs_writes_initialisation(data, tmp_path):
    cfg_file = tmp_path / "c.txt"
    cfg_file.write_text("train.epochs = 0\nmodel.c2d = 8\nmodel.c3d = 8\nmodel.n_query = 8\n")
    assert main(["train", "--config", str(cfg_file), "--data", str(data), "--out", str(tmp_path / "r")]) == 0
    loaded = load_checkpoint(tmp_path / "r" / "model.ckpt")
    assert loaded.cfg.d_exp == 4
    init = HD2SSC(loaded.cfg, loaded.num_classes)
    for name, value in init.state().items():
        assert np.array_equal(loaded.state()[name], value)
    for name in ("losses.csv", "evals.csv", "metrics.csv", "manifest.json"):
        assert (tmp_path / "r" / name).exists()


def test_train_csv_outputs(ckpt):
    run = ckpt.parent
    header, row = (run / "losses.csv").read_text().strip().split("\n")
    assert header == "epoch,total,ce,bce_of,bce_fb,orth,decouple,critical"
    assert row.startswith("1,")
    assert (run / "metrics.csv").read_text().startswith("sc_iou,miou,car,person")


def test_train_bad_dataset(tmp_path):
    assert main(["train", "--data", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == 2


def test_train_divergence_exit_code(data, tmp_path):
    argv = ["train", "--data", str(data), "--out", str(tmp_path / "o"),
            "--set", "train.lr=1e200", "--set", "train.epochs=3"] + SMALL
    assert main(argv) == 3


def test_train_bad_config_key(data, tmp_path):
    assert main(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--set", "model.nope=1"]) == 2


def test_sweep_rows(data, tmp_path):
    argv = ["train", "--data", str(data), "--out", str(tmp_path / "s"), "--sweep", "model.d_exp=1,2",
            "--max-steps", "1"] + SMALL
    assert main(argv) == 0
    lines = (tmp_path / "s" / "sweep.csv").read_text().strip().split("\n")
    assert lines[0] == "model.d_exp,steps,final_loss,sc_iou,miou"
    assert [l.split(",")[0] for l in lines[1:]] == ["1", "2"]
    assert (tmp_path / "s" / "d_exp_2" / "model.ckpt").exists()


# ------------------------------------------------------------------- eval

def test_eval_oracle_is_perfect(data, tmp_path):
    assert main(["eval", "--oracle", "--data", str(data), "--report", str(tmp_path / "o.csv")]) == 0
    row = (tmp_path / "o.csv").read_text().strip().split("\n")[1]
    assert set(row.split(",")) == {"1.000000"}


def test_eval_repeatable_and_worker_independent(data, ckpt, tmp_path):
    reports = []
    for i, workers in enumerate(("1", "1", "4")):
        path = tmp_path / f"r{i}.csv"
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--report", str(path),
                     "--workers", workers]) == 0
        reports.append(path.read_bytes())
    assert reports[0] == reports[1] == reports[2]


def test_eval_shape_mismatch(data, tmp_path):
    save_checkpoint(HD2SSC(ModelConfig(grid_h=12, grid_w=12, grid_z=4, c2d=4, c3d=4), 6), tmp_path / "m.ckpt")
    assert main(["eval", "--checkpoint", str(tmp_path / "m.ckpt"), "--data", str(data),
                 "--report", str(tmp_path / "r.csv")]) == 2


def test_eval_needs_checkpoint(data, tmp_path):
    assert main(["eval", "--data", str(data), "--report", str(tmp_path / "r.csv")]) == 1


# -------------------------------------------------------------- gradcheck

def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.strip().split("\n")
    assert lines[0] == "loss,max_rel_error,status"
    assert {l.split(",")[0] for l in lines[1:]} == {"orth", "decouple", "critical", "ce", "bce_of", "bce_fb"}
    assert all(l.endswith(",pass") for l in lines[1:])


def test_gradcheck_corrupted_gradient_fails(capsys):
    assert main(["gradcheck", "--max-entries", "2", "--corrupt-grad", "decouple"]) != 0
    assert "decouple" in [l.split(",")[0] for l in capsys.readouterr().out.split("\n") if l.endswith("FAIL")]


# ----------------------------------------------------------------- export

def test_export_sscv_round_trip(data, ckpt, tmp_path):
    assert main(["export", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "e")]) == 0
    g = read_sscv(tmp_path / "e" / "sample_0000.sscv")
    assert g.shape == (32, 32, 8)
    raw = (tmp_path / "e" / "sample_0000.sscv").read_bytes()
    from hd2ssc.dataio import encode_sscv
    assert encode_sscv(g) == raw


def _ply_body(path):
    lines = path.read_text().split("\n")
    end = lines.index("end_header")
    count = int(next(l for l in lines if l.startswith("element vertex")).split()[-1])
    return count, [l for l in lines[end + 1:] if l]


def test_export_ply_counts_occupied(data, ckpt, tmp_path):
    assert main(["export", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "p"),
                 "--format", "ply"]) == 0
    assert main(["export", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "s")]) == 0
    occupied = int(np.count_nonzero(read_sscv(tmp_path / "s" / "sample_0001.sscv").labels))
    count, body = _ply_body(tmp_path / "p" / "sample_0001.ply")
    assert count == len(body) == occupied


def test_export_empty_prediction(data, tmp_path):
    m = HD2SSC(ModelConfig(c2d=8, c3d=8, n_query=8), 6)
    m.class_head.bias.data[0] = 1e3
    save_checkpoint(m, tmp_path / "empty.ckpt")
    assert main(["export", "--checkpoint", str(tmp_path / "empty.ckpt"), "--data", str(data),
                 "--out", str(tmp_path / "p"), "--format", "ply"]) == 0
    assert _ply_body(tmp_path / "p" / "sample_0000.ply") == (0, [])


def test_export_unknown_format(data, ckpt, tmp_path):
    with pytest.raises(SystemExit) as e:
        main(["export", "--checkpoint", str(ckpt), "--data", str(data), "--out", str(tmp_path / "x"),
              "--format", "obj"])
    assert e.value.code == 1


# ---------------------------------------------------------------- logging

def test_bad_log_level(monkeypatch, tmp_path):
    monkeypatch.setenv("HD2_LOG", "loud")
    assert main(["gen", "--out", str(tmp_path / "d"), "--count", "1"]) == 1


def test_logging_stays_off_stdout(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("HD2_LOG", "info")
    assert main(["gen", "--out", str(tmp_path / "d"), "--count", "1"]) == 0
    captured = capsys.readouterr()
    assert captured.out == "" and "wrote 1 samples" in captured.err
