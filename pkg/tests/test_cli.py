import csv
import io
import json
import math
import subprocess
import sys

import numpy as np
import pytest

from bppeps.cli import main
from bppeps.tensors import tensor_to_json

from helpers import random_hermitian


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def gen(tmp_path, spec, eps, seed=0, name="net.json", extra=()):
    path = tmp_path / name
    code = main(["generate", "--graph", spec, "--epsilon", str(eps), "--seed", str(seed),
                 "--out", str(path), *extra])
    assert code == 0
    return path


def write_op(tmp_path, m, name):
    path = tmp_path / name
    path.write_text(json.dumps(tensor_to_json(m)))
    return path


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def test_generate_is_byte_deterministic(capsys):
    argv = ["generate", "--graph", "grid:2x3:periodic", "--epsilon", "0.03", "--seed", "7"]
    _, a, err = run(argv, capsys)
    _, b, _ = run(argv, capsys)
    assert a == b
    assert "measured epsilon=0.03" in err
    obj = json.loads(a)
    _, c, _ = run(argv[:-1] + ["8"], capsys)
    assert c != a and "tensors" in obj


@pytest.mark.parametrize("argv", [
    ["generate", "--graph", "grid:0x3"],
    ["generate"],
    ["generate", "--graph", "complete:3", "--epsilon", "1.5"],
])
def test_infeasible_generate_exits_2(argv, capsys):
    code, _, err = run(argv, capsys)
    assert code == 2 and "error" in err


def test_missing_file_exits_2(tmp_path, capsys):
    code, _, _ = run(["contract", "--network", tmp_path / "absent.json"], capsys)
    assert code == 2


# ---------------------------------------------------------------------------
# contract
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("spec", ["complete:3", "cycle:4", "complete:4", "grid:2x3:periodic"])
def test_contract_isometric_matches_oracle(tmp_path, spec, capsys):
    net = gen(tmp_path, spec, 0.0)
    code, out, _ = run(["contract", "--network", net, "--oracle"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["schema"] == "bppeps/1"
    assert rep["oracle"]["rel_error_z"] <= 1e-10
    assert all(abs(complex(*l["value"])) <= 1e-12 for l in rep["loops"])


def test_contract_order_zero_is_bp(tmp_path, capsys):
    net = gen(tmp_path, "grid:2x3:periodic", 0.03)
    code, out, _ = run(["contract", "--network", net, "--order", 0], capsys)
    assert code == 0
    exp = json.loads(out)["expansion"]
    assert exp["f_m"] == exp["log_z_bp"]


def test_contract_prism_accuracy(tmp_path, capsys):
    net = gen(tmp_path, "grid:2x3:periodic", 0.03)
    code, out, _ = run(["contract", "--network", net, "--order", 8, "--oracle"], capsys)
    assert code == 0
    assert json.loads(out)["oracle"]["rel_error_z"] <= 1e-4


def test_non_convergence_exits_3(tmp_path, capsys):
    net = gen(tmp_path, "complete:4", 0.1)
    code, out, err = run(["contract", "--network", net, "--max-iter", 1], capsys)
    assert code == 3
    assert json.loads(out)["converged"] is False
    assert "did not converge" in err


def test_oracle_budget_exits_5(tmp_path, capsys):
    net = gen(tmp_path, "grid:2x3:periodic", 0.03)
    code, _, err = run(["contract", "--network", net, "--oracle", "--oracle-budget", 1000],
                       capsys)
    assert code == 5 and "budget" in err


def test_reports_are_byte_identical(tmp_path, capsys):
    net = gen(tmp_path, "complete:4", 0.05)
    argv = ["contract", "--network", net, "--oracle"]
    _, a, _ = run(argv, capsys)
    _, b, _ = run(argv, capsys)
    assert a == b


# ---------------------------------------------------------------------------
# observe and correlate
# ---------------------------------------------------------------------------


def test_observe_identity(tmp_path, capsys):
    net = gen(tmp_path, "grid:2x3:periodic", 0.03)
    eye = write_op(tmp_path, np.eye(8), "eye.json")
    code, out, _ = run(["observe", "--network", net, "--op", eye, "--region", "2",
                        "--oracle"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert rep["multiplicative"]["value"] == [1.0, 0.0]
    assert rep["additive"]["value"] == [1.0, 0.0]


def test_observe_matches_oracle(tmp_path, capsys):
    net = gen(tmp_path, "grid:2x3:periodic", 0.03)
    h = random_hermitian(8, 0)
    op = write_op(tmp_path, (h + np.eye(8)) / 2, "op.json")
    code, out, _ = run(["observe", "--network", net, "--op", op, "--region", "0",
                        "--oracle"], capsys)
    assert code == 0
    rep = json.loads(out)
    est = complex(*rep["multiplicative"]["value"])
    exact = complex(*rep["oracle"]["value"])
    assert abs(est - exact) <= 1e-4


def test_observe_bad_operator_exits_2(tmp_path, capsys):
    net = gen(tmp_path, "complete:3", 0.03)
    bad = write_op(tmp_path, np.ones((2, 3)), "bad.json")
    code, _, _ = run(["observe", "--network", net, "--op", bad, "--region", "0"], capsys)
    assert code == 2
    code, _, _ = run(["observe", "--network", net, "--op", bad, "--region", "a,b"], capsys)
    assert code == 2


def test_correlate_isometric_vanishes(tmp_path, capsys):
    net = gen(tmp_path, "grid:2x3:periodic", 0.0)
    a = write_op(tmp_path, random_hermitian(8, 1), "a.json")
    b = write_op(tmp_path, random_hermitian(8, 2), "b.json")
    code, out, _ = run(["correlate", "--network", net, "--op-a", a, "--region-a", "0",
                        "--op-b", b, "--region-b", "4", "--oracle"], capsys)
    assert code == 0
    rep = json.loads(out)
    assert abs(complex(*rep["correlator"]["value"])) <= 1e-10
    assert abs(complex(*rep["oracle"]["value"])) <= 1e-10


def test_correlate_identity_is_zero(tmp_path, capsys):
    net = gen(tmp_path, "grid:2x3:periodic", 0.03)
    a = write_op(tmp_path, random_hermitian(8, 1), "a.json")
    eye = write_op(tmp_path, np.eye(8), "eye.json")
    code, out, _ = run(["correlate", "--network", net, "--op-a", a, "--region-a", "0",
                        "--op-b", eye, "--region-b", "4"], capsys)
    assert code == 0
    assert json.loads(out)["correlator"]["value"] == [0.0, 0.0]


# ---------------------------------------------------------------------------
# perturb
# ---------------------------------------------------------------------------


def test_perturb_reports_update(tmp_path, capsys):
    net = gen(tmp_path, "grid:2x3:periodic", 0.03)
    op = write_op(tmp_path, (random_hermitian(8, 0) + np.eye(8)) / 2, "op.json")
    code, out, err = run(["perturb", "--network", net, "--region-a", "4", "--strength", 0.02,
                          "--op-b", op, "--region-b", "0", "--r-th", 1], capsys)
    assert code == 0 and "lightcone violations: 0" in err
    rep = json.loads(out)
    assert rep["lightcone_ok"]
    up = rep["update"]
    assert up["abs_difference"] <= up["plan"]["certificate"]
    assert up["plan"]["multiplies"] < up["from_scratch_multiplies"]


def test_perturb_zero_strength(tmp_path, capsys):
    net = gen(tmp_path, "grid:2x3:periodic", 0.03)
    code, out, _ = run(["perturb", "--network", net, "--region-a", "0", "--strength", 0],
                       capsys)
    assert code == 0
    assert all(r["max_delta"] == 0 for r in json.loads(out)["trace"]["rows"])


def test_perturb_stability_exits_4(tmp_path, capsys):
    net = gen(tmp_path, "grid:2x3:periodic", 0.1)
    code, _, err = run(["perturb", "--network", net, "--region-a", "0", "--strength", 0.5],
                       capsys)
    assert code == 4 and "smaller strength" in err


def test_perturb_needs_both_b_options(tmp_path, capsys):
    net = gen(tmp_path, "complete:3", 0.03)
    code, _, _ = run(["perturb", "--network", net, "--region-a", "0", "--strength", 0.01,
                      "--region-b", "1"], capsys)
    assert code == 2


# ---------------------------------------------------------------------------
# scan
# ---------------------------------------------------------------------------


def test_scan_json(capsys):
    code, out, _ = run(["scan", "--graph", "complete:4", "--epsilons", "0,0.05,0.3",
                        "--ensemble", 2, "--order", 4, "--oracle"], capsys)
    assert code == 0
    rep = json.loads(out)
    rows = rep["rows"]
    assert [r["epsilon"] for r in rows] == [0.0, 0.05, 0.3]
    assert rows[0]["decay"] == "all loops below floor"
    assert rows[1]["convergence_certified"] and not rows[2]["below_eps_star"]
    assert all(len(r["members"]) == 2 for r in rows)
    assert rows[1]["max_rel_error"] <= 1e-3


def test_scan_csv_and_threads(capsys, monkeypatch):
    argv = ["scan", "--graph", "cycle:4", "--epsilons", "0.01,0.1", "--ensemble", 3,
            "--format", "csv"]
    _, a, _ = run(argv, capsys)
    monkeypatch.setenv("BPPEPS_THREADS", "3")
    _, b, _ = run(argv, capsys)
    assert a == b
    rows = list(csv.DictReader(io.StringIO(a)))
    assert len(rows) == 2 and float(rows[0]["epsilon"]) == 0.01
    assert math.isfinite(float(rows[0]["q"]))


def test_scan_malformed_epsilons_exits_2(capsys):
    code, _, _ = run(["scan", "--graph", "cycle:4", "--epsilons", "x"], capsys)
    assert code == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run(
        [sys.executable, "-m", "bppeps.cli", "generate", "--graph", "complete:3"],
        capture_output=True, text=True, check=False,
    )
    assert res.returncode == 0
    assert json.loads(res.stdout)["bond_dim"] == 2
