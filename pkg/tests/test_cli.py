import json

import pytest

from specrec.cli import main
from specrec.data import load_interactions
from specrec.model import load_checkpoint


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def workdir(tmp_path, capsys):
    data = tmp_path / "y.tsv"
    code, out, _ = run(capsys, "synth", "--users", 150, "--items", 80, "--alpha", 1.5, "--per-user", 8, "--seed", 3, "--out", data)
    assert code == 0
    code, _, _ = run(capsys, "split", "--data", data, "--paradigm", "debiased", "--seed", 1, "--out", tmp_path / "split")
    assert code == 0
    return tmp_path


def _train(capsys, wd, out, *extra):
    return run(capsys, "train", "--data", wd / "split" / "train.tsv", "--dim", 8, "--epochs", 4, "--lr", 0.01,
               "--batch-size", 256, "--out", out, *extra)


def test_synth_lines(tmp_path, capsys):
    out = tmp_path / "synth.tsv"
    code, text, _ = run(capsys, "synth", "--users", 2000, "--items", 1000, "--alpha", 1.5, "--per-user", 20, "--seed", 7, "--out", out)
    assert code == 0
    assert len(out.read_text().splitlines()) == 40000
    assert json.loads(text)["nnz"] == 40000
    assert 1.2 <= json.loads(text)["fitted_alpha"] <= 1.8


def test_split_files(workdir):
    meta = json.loads((workdir / "split" / "split_meta.json").read_text())
    assert meta["paradigm"] == "debiased"
    for name in ("train.tsv", "valid.tsv", "test.tsv"):
        assert (workdir / "split" / name).exists()


def test_train_deterministic(workdir, capsys):
    assert _train(capsys, workdir, workdir / "a", "--log-spectrum-every", 2)[0] == 0
    assert _train(capsys, workdir, workdir / "b", "--log-spectrum-every", 2)[0] == 0
    assert (workdir / "a" / "model.bin").read_bytes() == (workdir / "b" / "model.bin").read_bytes()
    log = json.loads((workdir / "a" / "train_log.json").read_text())
    assert log["config"]["d"] == 8
    rows = (workdir / "a" / "spectrum_log.csv").read_text().splitlines()
    assert rows[0] == "epoch,k,sigma_k"
    assert {r.split(",")[0] for r in rows[1:]} == {"0", "2", "4"}
    E, meta = load_checkpoint(workdir / "a" / "model.bin")
    assert E.d == 8 and meta["config"]["epochs"] == 4


def test_config_file_roundtrip(workdir, capsys):
    _train(capsys, workdir, workdir / "a", "--beta", 0.5)
    code, out, _ = run(capsys, "train", "--data", workdir / "split" / "train.tsv", "--config", workdir / "a" / "model_meta.json",
                       "--epochs", 2, "--out", workdir / "c")
    assert code == 0
    cfg = json.loads(out)["config"]
    assert cfg["beta"] == 0.5 and cfg["d"] == 8 and cfg["epochs"] == 2


def test_spectrum_bounds_eval(workdir, capsys):
    _train(capsys, workdir, workdir / "m")
    ckpt, train_tsv = workdir / "m" / "model.bin", workdir / "split" / "train.tsv"

    code, out, _ = run(capsys, "spectrum", "--checkpoint", ckpt, "--data", train_tsv, "--vectors")
    rep = json.loads(out)
    # items are re-indexed on load, so m counts the items present in the training file
    assert code == 0 and len(rep["singular_values"]) == 8 and len(rep["q1"]) == load_interactions(train_tsv).m

    code, out, err = run(capsys, "bounds", "--checkpoint", ckpt, "--data", train_tsv, "--out", workdir / "b.json")
    rep = json.loads(out)
    assert code == 0 and "thm1_general" in err
    assert rep["observed_eta"] >= rep["thm2_bound"]
    assert json.loads((workdir / "b.json").read_text()) == rep

    code, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--data", train_tsv, "--test", workdir / "split" / "test.tsv", "--k", 5)
    rep = json.loads(out)
    assert code == 0 and rep["k"] == 5 and rep["paradigm"] == "held_out"
    assert abs(sum(rep["group_shares"]) - 1) < 1e-9

    code, out, _ = run(capsys, "eval", "--checkpoint", ckpt, "--data", train_tsv, "--test-file", workdir / "split" / "test.tsv")
    assert code == 0 and json.loads(out)["paradigm"] == "uniform_exposure"


def test_sigmoid_spectrum(workdir, capsys):
    _train(capsys, workdir, workdir / "m")
    code, out, _ = run(capsys, "spectrum", "--checkpoint", workdir / "m" / "model.bin", "--activation", "sigmoid")
    assert code == 0 and json.loads(out)["sigma1"] > 0


def test_sweeps(workdir, capsys):
    base = ("--data", workdir / "split" / "train.tsv", "--test", workdir / "split" / "test.tsv", "--epochs", 2, "--k", 5, "--lr", 0.01)
    code, out, _ = run(capsys, "sweep-beta", *base, "--betas", "0,0.1", "--dim", 4)
    points = json.loads(out)["points"]
    assert code == 0 and [p["beta"] for p in points] == [0.0, 0.1]
    code, out, _ = run(capsys, "sweep-dim", *base, "--dims", "2,4")
    assert code == 0 and [p["d"] for p in json.loads(out)["points"]] == [2, 4]


def test_timing_small(capsys, monkeypatch):
    monkeypatch.setenv("SBL_THREADS", "1")
    code, out, _ = run(capsys, "timing", "--users", 200, "--items", 150, "--per-user", 5, "--dim", 8,
                       "--timed-epochs", 1, "--direct-epochs", 1)
    res = json.loads(out)
    assert code == 0 and res["threads"] == 1
    assert set(res["seconds_per_epoch"]) == {"mf", "resn", "direct"}


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["train", "--bogus"])
    assert exc.value.code == 2


def test_runtime_error_is_one_json_line(tmp_path, capsys):
    code, out, err = run(capsys, "split", "--data", tmp_path / "missing.tsv", "--out", tmp_path / "s")
    assert code == 1 and out == ""
    lines = err.strip().splitlines()
    assert len(lines) == 1
    payload = json.loads(lines[0])
    assert payload["command"] == "split" and payload["error"] and payload["message"]


def test_bad_config_value(workdir, capsys):
    code, _, err = _train(capsys, workdir, workdir / "z", "--dim", 0)
    assert code == 1 and json.loads(err.strip())["error"] == "ConfigError"


def test_csv_format(tmp_path, capsys):
    out = tmp_path / "y.csv"
    assert run(capsys, "synth", "--users", 20, "--items", 10, "--alpha", 1.0, "--per-user", 2, "--out", out, "--format", "csv_pairs")[0] == 0
    assert "," in out.read_text().splitlines()[0]
    assert load_interactions(out, "csv_pairs").nnz == 40
