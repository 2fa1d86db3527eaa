import json
import os

import numpy as np
import pytest

from iwgvem.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main
from iwgvem.simstudy import RECORD_COLUMNS, StudyDesign, generate_dataset

FAST = ["--iw-max-iter", "6", "--lr-budget", "2"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    Y, truth = generate_dataset(StudyDesign(n=120), 0)
    np.savetxt(d / "y.csv", Y.data, fmt="%d", delimiter=",")
    np.savetxt(d / "mask.csv", truth.structure.mask.astype(int), fmt="%d", delimiter=",",
               header="f1,f2", comments="")
    np.savetxt(d / "short.csv", truth.structure.mask[:-2].astype(int), fmt="%d", delimiter=",")
    np.savetxt(d / "toy.csv", (np.random.default_rng(0).random((5, 3)) < 0.5).astype(int), fmt="%d", delimiter=",")
    (d / "bad.csv").write_text("1,0,1\n0,2,1\n")
    (d / "ragged.csv").write_text("1,0,1\n0,1\n")
    (d / "text.csv").write_text("a,b\n1,x\n")
    return d


def test_fit_confirmatory(data, tmp_path):
    out = tmp_path / "o"
    rc = main(["fit", "--input", str(data / "y.csv"), "--structure", str(data / "mask.csv"), "--out", str(out)] + FAST)
    assert rc == EXIT_OK
    A = np.loadtxt(out / "A.csv", delimiter=",", skiprows=1)
    assert A.shape == (30, 2)
    meta = json.loads((out / "fit.json").read_text())
    assert meta["iw_iterations"] == 6
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "fit"
    assert set(manifest["inputs"]) == {str(data / "y.csv"), str(data / "mask.csv")}
    assert manifest["config"]["iw_max_iter"] == 6


def test_fit_toy_exploratory(data, tmp_path):
    rc = main(["fit", "--input", str(data / "toy.csv"), "--structure", "exploratory:1", "--out", str(tmp_path)] + FAST)
    assert rc == EXIT_OK
    for name in ("A.csv", "phi.csv", "rotated_A.csv", "manifest.json"):
        assert (tmp_path / name).exists()


@pytest.mark.parametrize("inp,structure,code,needle", [
    ("y.csv", "short.csv", EXIT_DATA, "dimension mismatch"),
    ("bad.csv", "exploratory:1", EXIT_DATA, "other than 0 and 1"),
    ("ragged.csv", "exploratory:1", EXIT_DATA, "row 2 has 2 fields"),
    ("text.csv", "exploratory:1", EXIT_DATA, "non-numeric"),
    ("missing.csv", "exploratory:1", EXIT_DATA, "cannot read"),
    ("y.csv", "exploratory:x", EXIT_USAGE, "exploratory:K"),
])
def test_fit_errors(data, tmp_path, capsys, inp, structure, code, needle):
    s = structure if structure.startswith("exploratory") else str(data / structure)
    rc = main(["fit", "--input", str(data / inp), "--structure", s, "--out", str(tmp_path)])
    assert rc == code
    assert needle in capsys.readouterr().err


def test_usage_errors(tmp_path):
    assert main([]) == EXIT_USAGE
    assert main(["fit", "--out", str(tmp_path)]) == EXIT_USAGE
    assert main(["study", "--out", str(tmp_path), "--k", "3"]) == EXIT_USAGE
    assert main(["elbo", "--bogus"]) == EXIT_USAGE


def test_config_file_and_override(data, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"iw-max-iter": 4, "lr_budget": 2, "lr_grid": [0.05, 0.1], "seed": 3}))
    out = tmp_path / "o"
    rc = main(["fit", "--config", str(cfg), "--input", str(data / "y.csv"),
               "--structure", str(data / "mask.csv"), "--out", str(out), "--seed", "7"])
    assert rc == EXIT_OK
    m = json.loads((out / "manifest.json").read_text())
    assert m["seed"] == 7 and m["config"]["iw_max_iter"] == 4 and m["config"]["lr_grid"] == [0.05, 0.1]
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"nope": 1}))
    assert main(["fit", "--config", str(bad), "--out", str(out)]) == EXIT_USAGE


def test_study_rerun_byte_identical(tmp_path):
    args = ["study", "--reps", "1", "--n", "60", "--no-timing", "--threads", "1"] + FAST
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b"), "--threads", "2"]) == EXIT_OK
    a = (tmp_path / "a" / "records.csv").read_bytes()
    assert a == (tmp_path / "b" / "records.csv").read_bytes()
    lines = a.decode().splitlines()
    assert lines[0] == ",".join(RECORD_COLUMNS)
    assert len(lines) == 1 + 6


def test_study_gvem_only_one_row_per_block(tmp_path):
    rc = main(["study", "--reps", "1", "--n", "60", "--methods", "gvem", "--out", str(tmp_path)])
    assert rc == EXIT_OK
    assert len((tmp_path / "records.csv").read_text().splitlines()) == 4


def test_elbo(tmp_path):
    args = ["elbo", "--reps", "1", "--n", "50", "--m-grid", "1", "--out"]
    assert main(args + [str(tmp_path / "a")]) == EXIT_OK
    assert main(args + [str(tmp_path / "b")]) == EXIT_OK
    a = (tmp_path / "a" / "elbo.csv").read_text()
    assert a == (tmp_path / "b" / "elbo.csv").read_text()
    assert a.splitlines()[0] == "rep,seed,gvem,iw_m1"


def test_elbo_default_grid(tmp_path):
    assert main(["elbo", "--reps", "1", "--out", str(tmp_path)]) == EXIT_OK
    m = json.loads((tmp_path / "manifest.json").read_text())
    assert m["config"]["n"] == 200 and m["config"]["j"] == 30
    assert m["config"]["m_grid"] == [5, 10, 50, 100]
