import csv
import hashlib
import io
import json

import pytest
from click.testing import CliRunner

from builders import ann
from mfconsensus.cli import cli
from mfconsensus.core import Detection, ImageMeta, dump_annotations, dump_detections
from mfconsensus.sim import RaterProfile, StudyPreset


@pytest.fixture
def run(tmp_path):
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(cli, [str(a) for a in args], catch_exceptions=False)

    return invoke


def write(path, data):
    path.write_bytes(data if isinstance(data, bytes) else data.encode())
    return path


def rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


@pytest.fixture
def two_rater_file(tmp_path, image):
    pts = [(100, 100), (500, 500), (900, 900)]
    anns = [ann(f"{r}{i}", r, x, y) for r in "AB" for i, (x, y) in enumerate(pts)]
    return write(tmp_path / "two.json", dump_annotations([image], anns))


@pytest.fixture(scope="module")
def studies(tmp_path_factory):
    root = tmp_path_factory.mktemp("studies")
    runner = CliRunner()
    out = {}
    for preset in ("P1", "P2"):
        path = root / f"{preset}.json"
        res = runner.invoke(
            cli,
            ["simulate", "--preset", preset, "--seed", "3", "--n-images", "4", "--out", str(path),
             "--truth-out", str(root / f"{preset}_truth.json")],
        )
        assert res.exit_code == 0, res.output
        out[preset] = path
    return out


def test_help_lists_subcommands_and_defaults(run):
    res = run("--help")
    for name in ("consensus", "agreement", "sweep", "icc", "eval", "simulate", "splits", "patches", "fuse-check"):
        assert name in res.output
    res = run("consensus", "--help")
    assert "7.5" in res.output and "6" in res.output


def test_consensus_writes_output_and_manifest(run, two_rater_file, tmp_path):
    out = tmp_path / "cs.json"
    res = run("consensus", "--annotations", two_rater_file, "--min-raters", 2, "--out", out)
    assert res.exit_code == 0
    doc = json.loads(out.read_text())
    assert len(doc["entries"]) == 3
    manifest = json.loads((tmp_path / "cs.json.manifest.json").read_text())
    assert manifest["subcommand"] == "consensus"
    assert manifest["config"]["min_raters"] == 2
    assert manifest["outputs"][str(out)] == hashlib.sha256(out.read_bytes()).hexdigest()
    assert manifest["inputs"][str(two_rater_file)] == hashlib.sha256(two_rater_file.read_bytes()).hexdigest()
    assert {"version", "seed", "timestamp"} <= set(manifest)


def test_bad_threshold_is_a_config_error(run, two_rater_file, tmp_path):
    res = run("consensus", "--annotations", two_rater_file, "--min-raters", 0, "--out", tmp_path / "x.json")
    assert res.exit_code == 3
    assert "ConfigError" in res.output
    res = run("consensus", "--annotations", two_rater_file, "--min-raters", 3, "--out", tmp_path / "x.json")
    assert res.exit_code == 3


def test_malformed_input_is_a_schema_error(run, tmp_path):
    bad = write(tmp_path / "bad.json", "{not json")
    res = run("consensus", "--annotations", bad, "--out", tmp_path / "x.json")
    assert res.exit_code == 2
    assert not (tmp_path / "x.json").exists()


def test_missing_input_file(run, tmp_path):
    res = run("consensus", "--annotations", tmp_path / "nope.json", "--out", tmp_path / "x.json")
    assert res.exit_code == 2


def test_agreement_of_identical_raters(run, two_rater_file, tmp_path):
    out = tmp_path / "agree.csv"
    res = run("agreement", "--annotations", two_rater_file, "--min-raters", 1, "--phase-tag", "p1", "--out", out)
    assert res.exit_code == 0
    got = rows(out)
    assert [r["rater_id"] for r in got] == ["A", "B"]
    assert all(float(r["f1"]) == 1.0 and r["phase_tag"] == "p1" and r["threshold"] == "1" for r in got)


def test_sweep_row_count(run, studies, tmp_path):
    out = tmp_path / "sweep.csv"
    res = run("sweep", "--annotations", studies["P2"], "--t-min", 2, "--t-max", 7, "--out", out)
    assert res.exit_code == 0
    got = rows(out)
    assert len(got) == 13 * 6
    assert sorted({int(r["threshold"]) for r in got}) == list(range(2, 8))
    res = run("sweep", "--annotations", studies["P2"], "--t-min", 2, "--t-max", 13, "--out", out)
    assert res.exit_code == 3


def test_p2_agrees_better_than_p1(run, studies, tmp_path):
    means = {}
    for preset, path in studies.items():
        out = tmp_path / f"{preset}.csv"
        assert run("agreement", "--annotations", path, "--out", out).exit_code == 0
        f1 = [float(r["f1"]) for r in rows(out)]
        means[preset] = sum(f1) / len(f1)
    assert means["P2"] > means["P1"]


def test_icc_output(run, studies, tmp_path):
    out = tmp_path / "icc.json"
    assert run("icc", "--annotations", studies["P2"], "--out", out).exit_code == 0
    doc = json.loads(out.read_text())
    assert -1 <= doc["icc_2_1"] <= 1 and doc["k_raters"] == 13
    assert len(doc["counts"]) == 4 and len(doc["rater_ids"]) == 13


def test_icc_needs_two_images(run, two_rater_file, tmp_path):
    assert run("icc", "--annotations", two_rater_file, "--out", tmp_path / "icc.json").exit_code == 3


def test_eval_detections_against_themselves(run, tmp_path, image):
    dets = [Detection("img", 100.0, 100.0, 0.9), Detection("img", 700.0, 300.0, 0.4)]
    det_path = write(tmp_path / "det.json", dump_detections(dets))
    img_path = write(tmp_path / "images.json", dump_annotations([image], []))
    out = tmp_path / "eval.json"
    res = run("eval", "--detections", det_path, "--ground-truth", f"self={det_path}", "--images", img_path, "--out", out)
    assert res.exit_code == 0, res.output
    result = json.loads(out.read_text())["results"]["self"]
    assert result["ap"] == 1.0 and result["best_f1"] == 1.0


def test_eval_against_two_ground_truths(run, studies, tmp_path):
    truth = studies["P2"].with_name("P2_truth.json")
    cs = tmp_path / "cs.json"
    assert run("consensus", "--annotations", studies["P2"], "--out", cs).exit_code == 0
    doc = json.loads(truth.read_text())
    dets = [{"image_id": a["image_id"], "x_px": a["x_px"], "y_px": a["y_px"], "confidence": 0.5}
            for a in doc["annotations"]]
    det_path = write(tmp_path / "det.json", json.dumps({"detections": dets}))
    out = tmp_path / "eval.json"
    res = run("eval", "--detections", det_path, "--ground-truth", f"truth={truth}", "--ground-truth", cs, "--out", out)
    assert res.exit_code == 0, res.output
    results = json.loads(out.read_text())["results"]
    assert set(results) == {"truth", "cs"}
    assert results["truth"]["ap"] == 1.0
    assert results["cs"]["ap"] < 1.0


def test_eval_rejects_duplicate_names(run, two_rater_file, tmp_path):
    det_path = write(tmp_path / "det.json", json.dumps({"detections": []}))
    res = run("eval", "--detections", det_path, "--ground-truth", f"a={two_rater_file}",
              "--ground-truth", f"a={two_rater_file}", "--out", tmp_path / "e.json")
    assert res.exit_code == 3


def test_simulate_perfect_raters_reproduce_truth(run, tmp_path):
    preset = StudyPreset("perfect", n_raters=4, profiles=tuple(RaterProfile(f"R{i}", 1.0, 0.0, 0.0) for i in range(4)))
    pf = write(tmp_path / "preset.json", json.dumps(preset.to_dict()))
    sim, truth, cs = tmp_path / "sim.json", tmp_path / "truth.json", tmp_path / "cs.json"
    res = run("simulate", "--preset-file", pf, "--n-images", 3, "--seed", 5, "--out", sim, "--truth-out", truth)
    assert res.exit_code == 0, res.output
    assert run("consensus", "--annotations", sim, "--min-raters", 4, "--out", cs).exit_code == 0
    entries = sorted((e["image_id"], e["x_px"], e["y_px"]) for e in json.loads(cs.read_text())["entries"])
    expected = sorted((a["image_id"], a["x_px"], a["y_px"]) for a in json.loads(truth.read_text())["annotations"])
    assert entries == expected and entries


def test_simulate_is_deterministic(run, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("simulate", "--preset", "P1", "--seed", 2, "--n-images", 2, "--out", a).exit_code == 0
    assert run("simulate", "--preset", "P1", "--seed", 2, "--n-images", 2, "--out", b).exit_code == 0
    assert a.read_bytes() == b.read_bytes()
    assert run("simulate", "--preset", "P9", "--out", a).exit_code == 3


def test_splits_repeatable(run, tmp_path):
    cases = write(tmp_path / "cases.txt", "\n".join(f"case{i:03d}" for i in range(84)) + "\n")
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert run("splits", "--cases", cases, "--seed", 7, "--out", a).exit_code == 0
    assert run("splits", "--cases", cases, "--seed", 7, "--out", b).exit_code == 0
    assert a.read_bytes() == b.read_bytes()
    fold = json.loads(a.read_text())["folds"][0]
    assert (len(fold["train"]), len(fold["val"]), len(fold["test"])) == (58, 12, 14)
    assert run("splits", "--cases", cases, "--ratios", "0.5/0.5", "--out", a).exit_code == 3
    dup = write(tmp_path / "dup.txt", "x\nx\ny\n")
    assert run("splits", "--cases", dup, "--out", a).exit_code == 2


def test_patches_from_consensus(run, studies, tmp_path):
    cs, out = tmp_path / "cs.json", tmp_path / "patches.csv"
    assert run("consensus", "--annotations", studies["P2"], "--out", cs).exit_code == 0
    assert run("patches", "--ground-truth", cs, "--n-patches", 20, "--seed", 1, "--out", out).exit_code == 0
    got = rows(out)
    assert len(got) == 20 and sum(r["has_mf"] == "1" for r in got) >= 10


def test_patches_infeasible(run, tmp_path):
    empty = write(tmp_path / "empty.json", dump_annotations([ImageMeta("img", 2000, 2000, 0.25)], []))
    assert run("patches", "--ground-truth", empty, "--out", tmp_path / "p.csv").exit_code == 3


def test_fuse_check_on_bundled_fixture(run, tmp_path):
    out = tmp_path / "fuse.json"
    res = run("fuse-check", "--out", out)
    assert res.exit_code == 0
    doc = json.loads(out.read_text())
    assert doc["passed"] and doc["max_relative_error"] < 1e-6


def test_fuse_check_failing_tolerance(run, tmp_path):
    res = run("fuse-check", "--tolerance", 1e-15, "--out", tmp_path / "fuse.json")
    assert res.exit_code == 4
