import filecmp
import json
import stat
import sys
import textwrap

import pytest

from scaleguide.cli import eval_fraction, main


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert run("gen", "--out", out, "--seed", 3, "--mu-grid", "0.9,0.6", "--nu-grid", "1,1/2",
               "--images-per-config", 3) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--dataset", dataset, "--split", "train", "--out", out, "--epochs", 3) == 0
    return out


def test_fraction_parsing():
    assert eval_fraction("1/2.5") == 0.4
    assert eval_fraction(" 0.5 ") == 0.5


def test_gen_outputs(dataset):
    coco = json.loads((dataset / "dataset.json").read_text())
    assert len(coco["images"]) == 12
    manifest = json.loads((dataset / "run.json").read_text())
    assert manifest["command"] == "gen" and manifest["master_seed"] == 3
    assert set(manifest["outputs"]) == {"dataset.json", "manifest.json"}
    assert manifest["config"]["nu_grid"] == [1.0, 0.5]


def test_gen_default_grid_has_25_configs(tmp_path):
    assert run("gen", "--out", tmp_path, "--images-per-config", 1) == 0
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["n_images"] == 25
    assert len({(c["mu"], c["nu"]) for c in man["configs"]}) == 25


def test_gtdist(dataset, tmp_path):
    assert run("gtdist", "--dataset", dataset, "--out", tmp_path) == 0
    doc = json.loads((tmp_path / "gtdist.json").read_text())
    assert len(doc) == 12
    for d in doc.values():
        assert abs(sum(d["probs"]) - 1) < 1e-9


def test_gtdist_skips_empty_image(tmp_path, dataset):
    coco = json.loads((dataset / "dataset.json").read_text())
    first = coco["images"][0]["id"]
    coco["annotations"] = [a for a in coco["annotations"] if a["image_id"] != first]
    src = tmp_path / "ds"
    src.mkdir()
    (src / "dataset.json").write_text(json.dumps(coco))
    assert run("gtdist", "--dataset", src, "--out", tmp_path / "o") == 0
    doc = json.loads((tmp_path / "o" / "gtdist.json").read_text())
    assert str(first) not in doc and len(doc) == 11


def test_train_outputs(trained):
    for name in ("params.json", "loss.csv", "loss.svg", "run.json"):
        assert (trained / name).exists()
    assert (trained / "loss.csv").read_text().splitlines()[0] == "epoch,mean_loss"


def test_run_and_eval(dataset, trained, tmp_path):
    for mode in ("guided-gt", "guided-pred", "exhaustive"):
        extra = ("--params", trained / "params.json") if mode == "guided-pred" else ()
        assert run("run", "--dataset", dataset, "--split", "val", "--mode", mode, "--out", tmp_path / mode,
                   *extra) == 0
        doc = json.loads((tmp_path / mode / "proposals.json").read_text())
        assert doc["h"] == 6 and doc["lambda"] == 0.9
        assert all(len(v["scales"]) == 6 for v in doc["images"].values())
    out = tmp_path / "eval"
    assert run("eval", "--dataset", dataset, "--split", "val", "--out", out, "--formats", "svg,png",
               "--proposals", *(f"{m}={tmp_path / m / 'proposals.json'}"
                                for m in ("guided-gt", "guided-pred", "exhaustive"))) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report["summary"]) == {"guided-gt", "guided-pred", "exhaustive"}
    for k in (10, 100, 1000):
        assert (out / f"recall_iou_K{k}.svg").exists() and (out / f"recall_iou_K{k}.png").exists()
    assert (out / "recall_curves.csv").exists() and (out / "sparsity.csv").exists()


def test_guided_pred_needs_params(dataset, tmp_path):
    assert run("run", "--dataset", dataset, "--mode", "guided-pred", "--out", tmp_path) == 2


def test_bad_flag_is_usage_error(tmp_path):
    assert run("gen", "--out", tmp_path, "--bogus") == 2
    assert run("run", "--out", tmp_path) == 2  # missing --dataset


def test_missing_dataset_is_io_error(tmp_path):
    assert run("gtdist", "--dataset", tmp_path / "missing", "--out", tmp_path / "o") == 3


def test_failing_external_proposer(dataset, tmp_path):
    script = tmp_path / "fail.py"
    script.write_text(f"#!{sys.executable}\n" + textwrap.dedent("""
        import sys
        sys.exit(1)
    """))
    script.chmod(script.stat().st_mode | stat.S_IEXEC)
    assert run("run", "--dataset", dataset, "--external-proposer", script, "--out", tmp_path / "o") == 4


def test_rerun_from_manifest(dataset, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("run", "--dataset", dataset, "--mode", "exhaustive", "--seed", 5, "--out", a) == 0
    assert run("run", "--config", a / "run.json", "--out", b) == 0
    assert filecmp.cmp(a / "proposals.json", b / "proposals.json", shallow=False)
    # flags override config values
    assert run("run", "--config", a / "run.json", "--seed", 6, "--out", tmp_path / "c") == 0
    assert json.loads((tmp_path / "c" / "proposals.json").read_text())["seed"] == 6


def test_byte_identical_reruns(dataset, tmp_path):
    cmds = {
        "gen": ("gen", "--seed", 8, "--mu-grid", "0.8", "--nu-grid", "1,1/3", "--images-per-config", 2),
        "train": ("train", "--dataset", dataset, "--epochs", 2, "--seed", 1),
        "run": ("run", "--dataset", dataset, "--mode", "exhaustive", "--seed", 2),
    }
    for name, argv in cmds.items():
        for rep in ("1", "2"):
            assert run(*argv, "--out", tmp_path / name / rep) == 0
        cmp = filecmp.dircmp(tmp_path / name / "1", tmp_path / name / "2")
        changed = [f for f in cmp.common_files if f != "run.json"
                   and not filecmp.cmp(tmp_path / name / "1" / f, tmp_path / name / "2" / f, shallow=False)]
        assert changed == [], name
