import csv
import json

import numpy as np
import pytest

from nphct import cli
from nphct.phantom_eval import synth_cohort
from nphct.nph_predict import write_cohort
from nphct.volume_core import Geometry, ScalarVolume, load_labels, save_volume


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Template, two phantoms and a tissue model built through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    assert run("make-template", "--out", root / "tpl") == 0
    assert run("phantom", "--n", 2, "--seed", 40, "--out", root / "ph") == 0
    assert run("train-tissue", "--scan", root / "ph" / "phantom_000_ct.nii.gz",
               "--truth", root / "ph" / "phantom_000_truth.nii.gz", "--template", root / "tpl",
               "--n-estimators", 50, "--out", root / "model.json") == 0
    return root


def test_make_template_outputs(work):
    names = {p.name for p in (work / "tpl").iterdir()}
    assert {"template.json", "head_mask.nii.gz", "skull_mask.nii.gz", "seeds.json", "template_ct.nii.gz",
            "template_labels.nii.gz", "manifest.json"} <= names
    manifest = json.loads((work / "tpl" / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["command"] == "make-template"


def test_phantom_outputs(work):
    meta = json.loads((work / "ph" / "phantom_001.json").read_text())
    assert meta["volumes_ml"]["ventricle_ml"] == pytest.approx(118.0, rel=0.02)
    assert meta["spec"]["rng_seed"] == 41
    assert not any(p.name.startswith(".") for p in (work / "ph").iterdir())


def test_train_report(work):
    report = json.loads((work / "model_report.json").read_text())
    assert report["training_accuracy"] >= 0.95
    assert all(c > 0 for c in report["class_counts"])
    assert json.loads((work / "model_manifest.json").read_text())["rng_seeds"]["forest"] == 0


def test_segment_and_evaluate(work):
    out = work / "seg"
    scan = work / "ph" / "phantom_001_ct.nii.gz"
    assert run("segment", "--scan", scan, "--template", work / "tpl", "--tissue-model", work / "model.json",
               "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    for key in ("ventricle_ml", "subarachnoid_ml", "cerebral_ml", "total_ml"):
        assert report[key] > 0
    assert abs(report["ventricle_ml"] - 118.0) <= 0.1 * 118.0
    assert len(list(out.glob("overlay_*.png"))) == 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["config_hash"]
    assert str(out / "seg.nii.gz") in manifest["outputs"]
    seg = load_labels(out / "seg.nii.gz")
    assert seg.geometry.same_as(load_labels(work / "ph" / "phantom_001_truth.nii.gz").geometry)

    pred = work / "pred" / "proposed" / "phantom_001"
    pred.mkdir(parents=True)
    (pred / "seg.nii.gz").write_bytes((out / "seg.nii.gz").read_bytes())
    table = work / "table.csv"
    assert run("evaluate", "--pred", work / "pred", "--truth", work / "ph", "--out", table) == 0
    rows = list(csv.DictReader(table.open()))
    assert rows[0]["method"] == "proposed" and rows[0]["n"] == "2" and rows[0]["failures"] == "1"
    # the missing phantom_000 prediction counts as zero
    assert 0.4 <= float(rows[0]["ventricle_mean"]) <= 0.5


def test_evaluate_geometry_mismatch(work, tmp_path):
    pred = tmp_path / "pred"
    pred.mkdir()
    g = Geometry.from_spacing((8, 8, 8), (1, 1, 1))
    from nphct.volume_core import LabelVolume
    save_volume(LabelVolume(np.zeros(g.dims, np.uint8), g.spacing, g.pose, 5), pred / "phantom_000_seg.nii.gz")
    assert run("evaluate", "--pred", pred, "--truth", work / "ph", "--out", tmp_path / "t.csv") == 1
    assert not (tmp_path / "t.csv").exists()


def test_registration_failure_exit_code(work, tmp_path):
    g = Geometry.from_spacing((32, 32, 32), (3, 3, 3))
    save_volume(ScalarVolume(np.full(g.dims, -1000.0), g.spacing, g.pose), tmp_path / "air.nii.gz")
    out = tmp_path / "seg"
    assert run("segment", "--scan", tmp_path / "air.nii.gz", "--template", work / "tpl",
               "--tissue-model", work / "model.json", "--out", out) == cli.EXIT_REGISTRATION
    assert not (out / "seg.nii.gz").exists() and not (out / "report.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "failed" and "air" in manifest["error"]


def test_io_exit_codes(work, tmp_path):
    assert run("segment", "--scan", tmp_path / "nope.nii.gz", "--template", tmp_path / "missing",
               "--tissue-model", work / "model.json", "--out", tmp_path / "o") == cli.EXIT_IO
    assert run("segment", "--scan", tmp_path / "nope.nii.gz", "--template", work / "tpl",
               "--tissue-model", work / "model.json", "--out", tmp_path / "o") == cli.EXIT_IO


def test_usage_exit_code(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["segment", "--bogus"])
    assert exc.value.code == cli.EXIT_USAGE
    assert run("phantom", "--out", "x", "--jobs", 0) == cli.EXIT_USAGE


def test_manifest_only(work, tmp_path):
    out = tmp_path / "m"
    assert run("segment", "--scan", "a.nii.gz", "b.nii.gz", "--template", work / "tpl", "--tissue-model",
               work / "model.json", "--out", out, "--manifest-only", "--skull-hu", 300) == 0
    assert [p.name for p in out.iterdir()] == ["manifest.json"]
    m = json.loads((out / "manifest.json").read_text())
    assert m["outputs"] == [str(out / "a" / "seg.nii.gz"), str(out / "b" / "seg.nii.gz")]
    base = tmp_path / "m2"
    run("segment", "--scan", "a.nii.gz", "--template", "t", "--tissue-model", "m", "--out", base,
        "--manifest-only")
    assert json.loads((base / "manifest.json").read_text())["config_hash"] != m["config_hash"]


@pytest.mark.parametrize("classifier", ["svm", "rf", "evans"])
def test_predict(tmp_path, classifier):
    records = synth_cohort(seed=0)
    for i, r in enumerate(records):
        r.evans_ratio = 0.35 if r.label == 1 else 0.25
    write_cohort(tmp_path / "cohort.csv", records)
    (tmp_path / "cfg.json").write_text(json.dumps({"cv": {"n_repeats": 5}, "forest": {"n_estimators": 20}}))
    out = tmp_path / "out"
    assert run("predict", "--cohort", tmp_path / "cohort.csv", "--classifier", classifier,
               "--config", tmp_path / "cfg.json", "--out", out) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert len((out / "per_repeat.csv").read_text().splitlines()) == 6
    assert all(0 <= metrics[k][0] <= 1 for k in ("test_sensitivity", "test_specificity"))
    assert (out / "importance.png").exists() == (classifier == "svm")
    if classifier == "evans":
        assert metrics["all_subjects"] == {"sensitivity": 1.0, "specificity": 1.0}


def test_predict_schema_error(tmp_path, capsys):
    (tmp_path / "bad.csv").write_text("subject_id,ventricle_ml,subarachnoid_ml,cerebral_ml,label\na,x,1,1,NPH\n")
    assert run("predict", "--cohort", tmp_path / "bad.csv", "--classifier", "svm", "--out", tmp_path / "o") == 1
    assert "row 2" in capsys.readouterr().err
    assert not (tmp_path / "o" / "metrics.json").exists()
