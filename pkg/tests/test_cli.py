import json

import numpy as np
import pytest

from flowattack import cli
from flowattack.cli import main
from flowattack.config import COMMAND_KEYS
from flowattack.containers import read_tensor
from flowattack.records import read_records

GEN_FILES = ("data.nftd", "labels.nftd", "dataset.json", "config.resolved")


def _gen(out, n=40, seed=0):
    return main(["gen-data", "--kind", "two-moons", "--n", str(n), "--seed", str(seed), "--out", str(out)])


@pytest.mark.parametrize("command", sorted(COMMAND_KEYS))
def test_help_lists_every_key(command, capsys):
    with pytest.raises(SystemExit) as info:
        main([command, "--help"])
    assert info.value.code == 0
    text = capsys.readouterr().out
    for key in COMMAND_KEYS[command]:
        assert key.flag in text


def test_gen_data_is_byte_reproducible(tmp_path):
    assert _gen(tmp_path / "a") == 0
    assert _gen(tmp_path / "b") == 0
    for name in GEN_FILES:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    meta = json.loads((tmp_path / "a" / "dataset.json").read_text())
    assert meta["bounds"] == [-3.0, 3.0]
    assert read_tensor(tmp_path / "a" / "data.nftd").shape == (40, 2)


def test_usage_errors_exit_with_two(tmp_path):
    assert _gen(tmp_path / "data") == 0
    assert _gen(tmp_path / "data") == 2
    assert main(["gen-data", "--kind", "spirals", "--out", str(tmp_path / "x")]) == 2
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("kind = blobs\nnoise_level = 0.2\n", encoding="utf-8")
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "y")]) == 2
    with pytest.raises(SystemExit) as info:
        main(["gen-data", "--colour", "red", "--out", str(tmp_path / "z")])
    assert info.value.code == 2


def test_unreadable_inputs_exit_with_three(tmp_path):
    missing = tmp_path / "nowhere.nftd"
    assert main(["train-flow", "--data", str(missing), "--out", str(tmp_path / "f1")]) == 3
    corrupt = tmp_path / "corrupt.nftd"
    corrupt.write_bytes(b"NOPE" + bytes(12))
    assert main(["train-flow", "--data", str(corrupt), "--out", str(tmp_path / "f2")]) == 3


@pytest.mark.parametrize("error, code", [(ValueError("bad shape"), 2), (KeyError("label"), 2),
                                         (FloatingPointError("overflow"), 4),
                                         (np.linalg.LinAlgError("singular"), 4)])
def test_unexpected_errors_map_to_exit_codes(tmp_path, monkeypatch, error, code):
    def explode(cfg, out):
        raise error

    monkeypatch.setitem(cli.COMMANDS, "gen-data", explode)
    assert main(["gen-data", "--out", str(tmp_path / "out")]) == code


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    assert _gen(root / "data") == 0
    data, labels = str(root / "data" / "data.nftd"), str(root / "data" / "labels.nftd")
    clf_args = ["--data", data, "--labels", labels, "--hidden", "8", "--epochs", "5"]
    assert main(["train-classifier", *clf_args, "--out", str(root / "clf")]) == 0
    assert main(["train-classifier", *clf_args, "--out", str(root / "clf2")]) == 0
    assert main(["train-flow", "--data", data, "--epochs", "2", "--hidden", "8", "--blocks", "2",
                 "--out", str(root / "flow")]) == 0
    attack = ["--data", data, "--labels", labels, "--classifier", str(root / "clf" / "classifier.ckpt"),
              "--flow", str(root / "flow" / "flow.ckpt"), "--limit", "5", "--max-queries", "100",
              "--population", "20", "--epsilon", "0.3"]
    for variant in ("advflow", "nattack"):
        assert main(["attack", *attack, "--variant", variant, "--check-interval", "20",
                     "--out", str(root / variant)]) == 0
    assert main(["attack", *attack, "--variant", "advflow", "--check-interval", "200",
                 "--out", str(root / "unchecked")]) == 0
    return root


def test_classifier_training_is_byte_reproducible(pipeline):
    a = (pipeline / "clf" / "classifier.ckpt").read_bytes()
    assert a == (pipeline / "clf2" / "classifier.ckpt").read_bytes()


def test_attack_outputs(pipeline):
    for variant in ("advflow", "nattack"):
        records = read_records(pipeline / variant / "results.jsonl")
        assert [r.index for r in records] == list(range(5))
        assert all(r.total_queries <= 100 and r.queries <= 100 for r in records)
        assert read_tensor(pipeline / variant / "adversarial.nftd").shape == (5, 2)
        report = json.loads((pipeline / variant / "report.json").read_text())
        assert report["attack"]["variant"] == variant
        assert (pipeline / variant / "report.txt").exists()


def test_evaluate_combines_runs(pipeline):
    out = pipeline / "eval"
    code = main(["evaluate", "--attacks", f"{pipeline / 'advflow'},{pipeline / 'nattack'}",
                 "--data", str(pipeline / "data" / "data.nftd"), "--flow", str(pipeline / "flow" / "flow.ckpt"),
                 "--budgets", "20,100", "--lemma-points", "2", "--out", str(out)])
    assert code == 0
    document = json.loads((out / "evaluation.json").read_text())
    assert set(document["variants"]) == {"advflow", "nattack"}
    assert set(document["success_curve"]) == {"20", "100"}
    assert "lemma1" in document and "covariance" in document
    assert (out / "success_curve.csv").exists()


def test_detect_without_successful_attacks_is_a_usage_error(pipeline):
    code = main(["detect", "--data", str(pipeline / "data" / "data.nftd"),
                 "--labels", str(pipeline / "data" / "labels.nftd"),
                 "--classifier", str(pipeline / "clf" / "classifier.ckpt"),
                 "--attacks", str(pipeline / "unchecked"), "--out", str(pipeline / "detect")])
    assert code == 2


def _relative_pipeline():
    data, labels = ["--data", "data/data.nftd"], ["--labels", "data/labels.nftd"]
    models = ["--classifier", "clf/classifier.ckpt", "--flow", "flow/flow.ckpt"]
    assert main(["gen-data", "--kind", "two-moons", "--n", "200", "--seed", "3", "--out", "data"]) == 0
    assert main(["train-flow", *data, "--epochs", "20", "--hidden", "32", "--lr", "1e-3", "--out", "flow"]) == 0
    assert main(["train-classifier", *data, *labels, "--hidden", "32,32", "--epochs", "60", "--out", "clf"]) == 0
    for variant in ("advflow", "nattack"):
        assert main(["attack", *data, *labels, *models, "--variant", variant, "--limit", "40",
                     "--epsilon", "0.3", "--max-queries", "2000", "--jobs", "2", "--out", variant]) == 0
    assert main(["detect", *data, *labels, *models, "--attacks", "advflow,nattack", "--out", "detect"]) == 0
    assert main(["evaluate", "--attacks", "advflow,nattack", *data, "--flow", "flow/flow.ckpt",
                 "--out", "eval"]) == 0


@pytest.mark.slow
def test_full_pipeline_is_byte_reproducible(tmp_path, monkeypatch):
    trees = []
    for name in ("a", "b"):
        root = tmp_path / name
        root.mkdir()
        monkeypatch.chdir(root)
        _relative_pipeline()
        trees.append({p.relative_to(root).as_posix(): p.read_bytes() for p in root.rglob("*") if p.is_file()})
    first, second = trees
    assert first.keys() == second.keys()
    assert {"flow/flow.ckpt", "clf/classifier.ckpt", "detect/detect_report.json"} <= first.keys()
    for name, content in first.items():
        assert content == second[name], name

    report = json.loads(first["detect/detect_report.json"])
    assert [d["attack_variant"] for d in report["detectors"]] == ["advflow", "nattack"]
    assert all(0.0 <= d["auroc"] <= 1.0 for d in report["detectors"])
    assert set(report["latent_shift"]) == {"advflow", "nattack"}
