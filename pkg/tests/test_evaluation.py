"""Metrics and report tests."""

import json

import numpy as np
import pytest

from matxfer.config import MatxferConfig, load_config
from matxfer.errors import ValidationError
from matxfer.evaluation import MetricsReport, compute_metrics, report_from_samples
from matxfer.materials import DistanceMatrix
from matxfer.synth import AssignmentEntry, PartMaterialAssignment


def _dm():
    D = np.array([
        [0.0, 4.0, 8.0],
        [4.0, 0.0, 6.0],
        [8.0, 6.0, 0.0],
    ])
    return DistanceMatrix(3, D)


def _assign(mapping, cats):
    return PartMaterialAssignment(entries={
        label: AssignmentEntry(category=cats[label], material_id=mid)
        for label, mid in mapping.items()
    })


def test_compute_metrics_all_correct():
    cats = {1: "woods", 2: "metals"}
    truth = _assign({1: 0, 2: 2}, cats)
    report = compute_metrics(truth, truth, _dm())
    assert report.mat_acc == 1.0 and report.cat_acc == 1.0 and report.mat_dis == 0.0


def test_compute_metrics_one_wrong_same_category():
    cats_t = {1: "woods", 2: "woods", 3: "metals", 4: "metals"}
    truth = _assign({1: 0, 2: 1, 3: 2, 4: 2}, cats_t)
    pred = _assign({1: 1, 2: 1, 3: 2, 4: 2}, {1: "woods", 2: "woods", 3: "metals", 4: "metals"})
    report = compute_metrics(pred, truth, _dm())
    assert report.mat_acc == 0.75
    assert report.cat_acc == 1.0
    assert report.mat_dis == pytest.approx(4.0 / 4.0, abs=1e-12)  # D[1,0] / 4 parts


def test_compute_metrics_part_set_mismatch():
    cats = {1: "woods"}
    truth = _assign({1: 0}, cats)
    pred = _assign({2: 0}, {2: "woods"})
    with pytest.raises(ValidationError):
        compute_metrics(pred, truth, _dm())


def test_compute_metrics_empty_truth():
    with pytest.raises(ValidationError):
        compute_metrics(PartMaterialAssignment(entries={}), PartMaterialAssignment(entries={}), _dm())


def test_metrics_report_exact_fractions_and_stable_bytes():
    r1 = MetricsReport(mat_correct=3, cat_correct=4, n_parts=4, mat_dis=1.25,
                       config_fingerprint="abc123", seed=7)
    r2 = MetricsReport(mat_correct=3, cat_correct=4, n_parts=4, mat_dis=1.25,
                       config_fingerprint="abc123", seed=7)
    assert r1.mat_acc == 0.75
    assert r1.to_text() == r2.to_text()
    assert r1.to_json() == r2.to_json()
    payload = json.loads(r1.to_json())
    assert payload["mat_correct"] == 3 and payload["n_parts"] == 4
    assert payload["config_fingerprint"] == "abc123" and payload["seed"] == 7
    assert "external_scores" in payload  # reserved for external scores (e.g. FID)
    assert "mat_acc: 3/4" in r1.to_text()


def test_report_from_samples_roundtrip():
    report = report_from_samples((0.5, 0.75, 2.0), 8, "fp", 3)
    assert report.mat_correct == 4 and report.cat_correct == 6
    assert report.mat_acc == 0.5 and report.cat_acc == 0.75


# ---------------------------------------------------------------------------
# Config parsing and fingerprints.
# ---------------------------------------------------------------------------

def test_config_defaults_and_fingerprint_stability():
    a, b = MatxferConfig(), MatxferConfig()
    assert a.dump() == b.dump()
    assert a.fingerprint() == b.fingerprint()
    assert a.translation.psi5 == 100.0
    assert a.classifier.alpha5 == 10.0
    assert a.metric.alpha1 == 1.0


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("[synth]\nn_shapes = 12\nimage_size = 32\n\n[run]\nseed = 9\n")
    cfg = load_config(path, overrides=["metric.steps=7", "library.spread=3.5"])
    assert cfg.synth.n_shapes == 12
    assert cfg.synth.image_size == 32
    assert cfg.run.seed == 9
    assert cfg.metric.steps == 7
    assert cfg.library.spread == 3.5
    assert cfg.fingerprint() != MatxferConfig().fingerprint()


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[synth]\nwhatever = 1\n")
    with pytest.raises(ValidationError):
        load_config(path)
    with pytest.raises(ValidationError):
        load_config(None, overrides=["synth.nope=1"])
    with pytest.raises(ValidationError):
        load_config(None, overrides=["not-a-dotted-key"])


def test_config_missing_file():
    with pytest.raises(ValidationError):
        load_config("/nonexistent/path.cfg")
