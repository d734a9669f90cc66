import csv
import json
import math

import numpy as np
import pytest

from bnnrobust import cli, dataio
from bnnrobust.cli import main

GOLDEN = __import__("pathlib").Path(__file__).parent / "golden"


def _rows(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_bounds_matches_golden(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bounds", "--out", str(out)]) == 0
    assert out.read_text() == (GOLDEN / "bounds_default.csv").read_text()
    manifest = json.loads((tmp_path / "b.manifest.json").read_text())
    assert manifest["schemas"]["bounds_csv"] == 1 and manifest["artifacts"] == [str(out)]


def test_bounds_anchor_rows():
    rows = {r[0]: r for r in cli.bound_rows(0.075, 0.075, 0.05)}
    assert rows["0.10"][3] == 171
    assert rows["0.90"][3] == 181
    assert all(r[3] <= 292 and r[2] == 292 for r in rows.values())
    # independent evaluation of one interior row
    factor = 2 / (9 * 0.075 ** 2) * math.log(2 / 0.025)
    assert rows["0.30"][1] == math.ceil(factor * (3 * 0.3 + 0.075) * (3 * 0.7 - 0.075))


def test_bounds_stdout(capsys):
    assert main(["bounds", "--theta", "0.1", "--gamma", "0.05", "--alpha", "0.01"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "ci_endpoint,massart_n,chernoff_n,min" and len(lines) == 102
    assert lines[51].split(",")[2] == "185"


def test_train_missing_data_is_usage_error():
    with pytest.raises(SystemExit) as err:
        main(["train", "--method", "mcd"])
    assert err.value.code != 0


@pytest.fixture(scope="module")
def hmc_toy(tmp_path_factory):
    d = tmp_path_factory.mktemp("hmc")
    out = d / "hmc.json"
    assert main(["train", "--method", "hmc", "--arch", "toy", "--data", "blobs", "--out", str(out)]) == 0
    return out


def test_train_hmc_toy_accept_rate(hmc_toy):
    post = dataio.load_posterior(hmc_toy)
    assert 0.2 < post.accept_rate < 0.95
    header = json.loads(hmc_toy.read_text())
    assert header["provenance"]["manifest"] == "hmc.manifest.json"
    manifest = json.loads(hmc_toy.with_name("hmc.manifest.json").read_text())
    assert manifest["command"] == "train" and str(hmc_toy) in manifest["artifacts"]
    assert manifest["config"]["train_config"]["method"] == "hmc"


def _estimate(post, out, *extra):
    argv = ["estimate", "--posterior", str(post), "--input-index", "3", "--out", str(out), *extra]
    assert main(argv) == 0
    return json.loads(out.read_text())


def test_estimate_delta_one_never_sat(hmc_toy, tmp_path):
    doc = _estimate(hmc_toy, tmp_path / "r.json", "--property", "phi1", "--delta", "1.0", "--epsilon", "0.2")
    assert doc["p_hat"] == 0.0 and doc["n"] <= 171
    assert doc["terminating_bound"] == "Massart"
    assert doc["schema_version"] == 1 and doc["manifest"] == "r.manifest.json"


def test_estimate_zero_epsilon(hmc_toy, tmp_path):
    doc = _estimate(hmc_toy, tmp_path / "r.json", "--property", "phi1", "--delta", "0.5", "--epsilon", "0")
    assert doc["p_hat"] == 0.0


def test_estimate_deterministic(hmc_toy, tmp_path):
    flags = ["--property", "phi2", "--epsilon", "0.3", "--method", "pgd", "--eta", "0.1", "--log"]
    a = _estimate(hmc_toy, tmp_path / "a.json", *flags)
    b = _estimate(hmc_toy, tmp_path / "b.json", *flags)
    a.pop("manifest"), b.pop("manifest")
    assert a == b
    assert (tmp_path / "a.json").read_text().replace("a.manifest", "b.manifest") == (tmp_path / "b.json").read_text()
    assert len(a["log"]) == a["n"] and a["robust_verdict"] == (a["p_hat"] <= 0.1)


def test_estimate_result_schema(hmc_toy, tmp_path):
    doc = _estimate(hmc_toy, tmp_path / "r.json", "--property", "phi1", "--delta", "0.01", "--epsilon", "0.3")
    assert set(doc) == {"schema_version", "p_hat", "n", "k", "ci", "n_chernoff", "final_n_max",
                        "terminating_bound", "robust_verdict", "config", "witnesses", "robustness",
                        "query", "manifest"}
    assert doc["robustness"] == (doc["n"] - doc["k"]) / doc["n"]
    assert len(doc["witnesses"]) == doc["k"]


def test_phi1_without_delta_is_usage_error(hmc_toy):
    with pytest.raises(SystemExit) as err:
        main(["estimate", "--posterior", str(hmc_toy), "--input-index", "0", "--epsilon", "0.1"])
    assert err.value.code == 2


def test_estimate_input_file(hmc_toy, tmp_path):
    x = tmp_path / "x.npy"
    np.save(x, np.array([0.3, 0.6]))
    argv = ["estimate", "--posterior", str(hmc_toy), "--input-file", str(x), "--property", "phi1",
            "--delta", "1.0", "--epsilon", "0.1", "--out", str(tmp_path / "f.json")]
    assert main(argv) == 0
    doc = json.loads((tmp_path / "f.json").read_text())
    assert doc["p_hat"] == 0.0 and doc["query"]["input_index"] is None


def test_sweep_one_cell_matches_estimate(hmc_toy, tmp_path):
    doc = _estimate(hmc_toy, tmp_path / "r.json", "--property", "phi1", "--delta", "0.02", "--epsilon", "0.3")
    out = tmp_path / "s.csv"
    assert main(["sweep", "--posterior", str(hmc_toy), "--input-index", "3", "--eps-grid", "0.3",
                 "--delta-grid", "0.02", "--out", str(out)]) == 0
    (row,) = _rows(out)
    assert int(row["n"]) == doc["n"]
    assert float(row["p_hat"]) == doc["robustness"]
    assert float(row["ci_a"]) == 1 - doc["ci"]["b"] and float(row["ci_b"]) == 1 - doc["ci"]["a"]


def test_sweep_row_major_and_schema(hmc_toy, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["sweep", "--posterior", str(hmc_toy), "--input-index", "3", "--eps-grid", "0.0,0.3",
                 "--delta-grid", "0.01,0.5,1.0", "--out", str(out)]) == 0
    rows = _rows(out)
    assert list(rows[0]) == ["epsilon", "delta", "p_hat", "n", "ci_a", "ci_b"]
    assert [(float(r["epsilon"]), float(r["delta"])) for r in rows] == \
        [(e, d) for e in (0.0, 0.3) for d in (0.01, 0.5, 1.0)]
    assert all(float(r["p_hat"]) == 1.0 for r in rows if float(r["epsilon"]) == 0.0)
    manifest = json.loads((tmp_path / "s.manifest.json").read_text())
    assert manifest["schemas"] == {"sweep_csv": 1}


def test_sweep_shared_reach_matches_per_cell(hmc_toy, tmp_path):
    # the delta-shared reachability path must agree with independent estimates
    for delta in (0.01, 0.05):
        doc = _estimate(hmc_toy, tmp_path / "r.json", "--property", "phi1", "--delta", str(delta),
                        "--epsilon", "0.25")
        out = tmp_path / "s.csv"
        main(["sweep", "--posterior", str(hmc_toy), "--input-index", "3", "--eps-grid", "0.25",
              "--delta-grid", f"0.3,{delta}", "--out", str(out)])
        row = _rows(out)[1]
        assert float(row["p_hat"]) == doc["robustness"] and int(row["n"]) == doc["n"]


def test_sweep_empty_grid_is_error(hmc_toy, tmp_path):
    with pytest.raises(SystemExit):
        main(["sweep", "--posterior", str(hmc_toy), "--input-index", "0", "--eps-grid", "",
              "--delta-grid", "0.1", "--out", str(tmp_path / "s.csv")])


def test_attack_sweep_long_format(hmc_toy, tmp_path):
    out = tmp_path / "a.csv"
    assert main(["attack-sweep", "--posterior", str(hmc_toy), "--image-ids", "0,5", "--eps-grid", "0.1,0.4",
                 "--out", str(out)]) == 0
    rows = _rows(out)
    assert list(rows[0]) == ["image_id", "epsilon", "method", "p_hat"]
    assert len(rows) == 2 * 2 * 2
    assert {r["method"] for r in rows} == {"fgsm", "pgd"}
    assert all(0.0 <= float(r["p_hat"]) <= 1.0 for r in rows)


def test_parse_mask_patch():
    assert cli.parse_mask("patch:1,2,2,2", (16,)) == (6, 7, 10, 11)
    assert cli.parse_mask("patch:0,0,1,2", (1, 5, 5)) == (0, 1)
    assert cli.parse_mask("3,1", (16,)) == (3, 1)
    assert cli.parse_mask(None, (16,)) is None


@pytest.mark.slow
def test_train_mcd_fcn512_mnist17(tmp_path, capsys):
    out = tmp_path / "mcd.json"
    assert main(["train", "--method", "mcd", "--arch", "fcn512", "--data", "mnist17", "--seed", "7",
                 "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    acc = float(printed.split("test accuracy:")[1].split()[0])
    assert acc >= 0.85
