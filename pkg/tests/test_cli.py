import json

import pytest

from conftest import TINY_RUN, run_pipeline, tree_digest
from racnet.cli import main
from racnet.config import load_run_config, parse_config_text, parse_k_range
from racnet.errors import ConfigError


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "run.cfg"
    p.write_text(TINY_RUN)
    return p


def b_cfg(tmp_path, out):
    p = tmp_path / "b.cfg"
    p.write_text(TINY_RUN + f"seed = 1\nbackground = 0.32\ndataset_name = B\ndata = {out}/b/data\n"
                 f"data_b = {out}/b/data\nmodel = {out}/model.racn\nanchors = {out}/anchors.json\n")
    return p


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    return json.loads(err[-1])


def test_unknown_command_writes_nothing(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["frobnicate", "--out", str(out)]) == 2
    assert not out.exists()
    assert error_line(capsys)["error"] == "usage"


def test_bad_flag_is_usage_error(tmp_path):
    assert main(["train", "--mask", "maybe", "--out", str(tmp_path / "o")]) == 2


def test_invalid_config_exit_3(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = many\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert "epochs" in error_line(capsys)["message"]
    cfg.write_text("foo = 1\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 3
    assert main(["extract-anchors", "--k-range", "5..2", "--out", str(tmp_path / "o")]) == 3


def test_missing_artifact_exit_4(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path / "o")]) == 4
    assert error_line(capsys)["error"] == "missing-artifact"
    assert main(["train", "--config", str(tmp_path / "nope.cfg"), "--out", str(tmp_path / "o")]) == 4


def test_report(tmp_path, capsys):
    (tmp_path / "m.jsonl").write_text("\n".join(json.dumps({"id": f"v{i}", "label": y})
                                               for i, y in enumerate([1, 1, 0, 0])) + "\n")
    (tmp_path / "p.csv").write_text("id,truth,prediction\nv0,1,1\nv1,1,0\nv2,0,0\nv3,0,0\n")
    cfg = tmp_path / "r.cfg"
    cfg.write_text(f"predictions = {tmp_path}/p.csv\nmanifest = {tmp_path}/m.jsonl\n")
    assert main(["report", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 0
    summary = json.loads(capsys.readouterr().out)
    assert summary["macro_f1"] == pytest.approx(0.7333, abs=1e-4)
    rep = json.loads((tmp_path / "o" / "report_metrics.json").read_text())
    assert rep["recall"] == {"0": 1.0, "1": 0.5}


def test_pipeline_and_byte_identical_rerun(tmp_path, tiny_cfg):
    digests = []
    for name in ("run1", "run2"):
        out = tmp_path / name
        codes = run_pipeline(main, out, tiny_cfg, b_cfg(tmp_path, out))
        assert codes == [0] * len(codes)
        digests.append(tree_digest(out))
    assert digests[0] == digests[1]
    files = set(digests[0])
    for f in ("model.racn", "history.csv", "eval_metrics.json", "anchors.json", "classify_metrics.txt",
              "bundle/anchors_merged.json", "bundle/head.racn", "ablate/ablation.json",
              "ablate/no-mask/seed0/metrics.json", "ablate/no-alignment/seed0/predictions.csv"):
        assert f in files
    merged = json.loads((tmp_path / "run1" / "bundle" / "anchors_merged.json").read_text())
    assert len(merged["anchors"]) == 3 + 2
    assert not list(tmp_path.rglob(".racnet.lock"))


def test_classify_through_bundle(tmp_path, tiny_cfg):
    out = tmp_path / "o"
    run_pipeline(main, out, tiny_cfg, b_cfg(tmp_path, out))
    cfg = tmp_path / "c.cfg"
    cfg.write_text(TINY_RUN + f"bundle = {out}/bundle\ndata = {out}/b/data\n")
    assert main(["classify", "--config", str(cfg), "--out", str(tmp_path / "c")]) == 0
    rows = (tmp_path / "c" / "classify_predictions.csv").read_text().splitlines()
    assert rows[0].startswith("id,") and len(rows) == 1 + 6  # 3 per class in the test split


def test_config_parsing():
    assert parse_config_text("# c\nmask = off\nk-range = 2..4 # x\n") == {"mask": False, "k_range": "2..4"}
    assert parse_k_range("3") == [3]
    with pytest.raises(ConfigError):
        parse_config_text("epochs 3")
    with pytest.raises(ConfigError):
        load_run_config(overrides={"train_fraction": 0.9})
    cfg = load_run_config(overrides={"routing": "none", "seed": "4"})
    assert cfg.seed == 4 and not cfg.model_config().masked
