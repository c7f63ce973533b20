import csv
import json

import pytest

from depict.cli import main


def read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    grid = ["--set", "synth.grid=4"]
    assert main(["gen", "--count", "6", "--out", str(root / "data"), *grid]) == 0
    args = ["train", "--data", str(root / "data"), "--test", str(root / "data"), "--out", str(root / "model")]
    args += ["--set", "train.epochs=2", "--set", "model.sa_layers=1"]
    assert main(args) == 0
    return root


def test_verify_seed_7(tmp_path, capsys):
    assert main(["verify", "--seed", "7", "--out", str(tmp_path)]) == 0
    rows = read_csv(tmp_path / "verify.csv")
    assert {r["name"] for r in rows} >= {"rate_identity", "bounds", "gradients", "gauge"}
    assert json.loads((tmp_path / "verify.json").read_text())["overall"] is True
    assert json.loads((tmp_path / "run.json").read_text())["seed"] == 7
    assert "PASS [hard] bounds" in capsys.readouterr().out


@pytest.mark.parametrize(
    "argv",
    [
        ["explode"],
        [],
        ["gen", "--set", "synth.colour=3"],
        ["gen", "--set", "nonsense"],
        ["gen", "--seed", "-1"],
        ["segment", "--input", "x.depr", "--method", "depict"],
    ],
)
def test_usage_errors_exit_2(argv, tmp_path):
    argv = argv + ["--out", str(tmp_path)] if argv and argv[0] != "explode" else argv
    if argv and argv[0] == "segment":
        from depict.datagen import SynthConfig, gen_dataset, write_embeddings

        write_embeddings(tmp_path / "x.depr", gen_dataset(SynthConfig(grid=4), 1)[0])
        argv[2] = str(tmp_path / "x.depr")
    assert main(argv) == 2


def test_missing_input_exits_1(tmp_path):
    assert main(["segment", "--input", str(tmp_path / "nope.depr"), "--method", "pca", "--out", str(tmp_path)]) == 1


def test_train_outputs(small_run):
    model = small_run / "model"
    assert (model / "model.dpct").exists() and (model / "model.dpct.json").exists()
    assert len(read_csv(model / "metrics.csv")) == 2
    methods = [r["method"] for r in read_csv(model / "test_accuracy.csv")]
    assert methods == ["depict_CA", "linear_probe", "pca_segment_matched"]
    manifest = json.loads((model / "run.json").read_text())
    assert manifest["config"]["train"]["epochs"] == 2 and "out" not in manifest["args"]


def test_segment_both_methods(small_run, tmp_path):
    src = small_run / "data" / "img_00000.depr"
    before = src.read_bytes()
    argv = ["segment", "--input", str(src), "--checkpoint", str(small_run / "model" / "model.dpct")]
    assert main(argv + ["--method", "both", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "img_00000_depict.pgm").exists() and (tmp_path / "img_00000_pca.pgm").exists()
    rows = read_csv(tmp_path / "segment.csv")
    assert len(rows) == 1 and rows[0]["depict_accuracy"] and rows[0]["pca_matched_accuracy"]
    assert src.read_bytes() == before


def test_probe_and_perturb(small_run, tmp_path):
    ckpt = str(small_run / "model" / "model.dpct")
    data = str(small_run / "data")
    assert main(["probe", "--checkpoint", ckpt, "--data", data, "--out", str(tmp_path / "p")]) == 0
    assert len(read_csv(tmp_path / "p" / "probe.csv")) == 1 * 2 * 2
    assert 0.0 <= json.loads((tmp_path / "p" / "run.json").read_text())["sign_agreement"] <= 1.0
    argv = ["perturb", "--checkpoint", ckpt, "--data", data, "--kind", "per_head_orthogonal"]
    assert main(argv + ["--out", str(tmp_path / "q")]) == 0
    (row,) = read_csv(tmp_path / "q" / "perturb.csv")
    assert float(row["agreement"]) == 1.0


def test_config_file_and_override(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"synth.grid": 3, "synth.noise": 0.0}))
    argv = ["gen", "--config", str(cfg), "--set", "synth.grid=5", "--count", "1", "--out", str(tmp_path / "o")]
    assert main(argv) == 0
    conf = json.loads((tmp_path / "o" / "run.json").read_text())["config"]["synth"]
    assert conf["grid"] == 5 and conf["noise"] == 0.0
