import csv
import json

import numpy as np
import pytest

from acim.cli import ExperimentConfig, dumps, export_density, main
from acim.dynamics import BranchMap, build_transfer_matrix, make_branch
from acim.errors import ConfigError
from acim.measure import CellMeasure, Grid, LambdaPartition, ReferenceMeasure
from acim.ratio_limit import omega_limit


def write_cfg(tmp_path, name, **cfg):
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps(cfg))
    return p


def run_cli(*args):
    return main(["run", *map(str, args)])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ----------------------------------------------------------------- run


def test_run_doubling(tmp_path):
    cfg = write_cfg(tmp_path, "d", map="doubling")
    assert run_cli(cfg, "--out", tmp_path / "o") == 0
    res = json.loads((tmp_path / "o" / "run.json").read_text())
    assert res["partition"]["verdict"] == "PASS"
    assert res["irreducibility"]["verdict"] is True
    assert res["hypotheses"]["membership"] == "M_inf"
    assert res["omega_limit"]["status"] == "converged"
    assert res["residual"]["max"] <= 1e-12
    traj = read_rows(tmp_path / "o" / "trajectory.csv")
    assert traj[0] == ["n", "S_n[[0,1/2)]", "S_n[[1/2,1)]", "cauchy_gap", "residual"]
    assert traj[1][:3] == ["1", "0.5", "0.5"]
    dens = read_rows(tmp_path / "o" / "density.csv")
    assert len(dens) == 1 + 1024


def test_run_reducible_pair_skips_limit(tmp_path):
    cfg = write_cfg(tmp_path, "r", map="reducible_pair")
    assert run_cli(cfg, "--out", tmp_path / "o") == 0
    res = json.loads((tmp_path / "o" / "run.json").read_text())
    assert res["irreducibility"]["verdict"] is False
    assert res["omega_limit"]["status"] == "skipped"
    assert "not irreducible" in res["omega_limit"]["reason"]
    assert read_rows(tmp_path / "o" / "density.csv") == [
        ["cell_left", "cell_right", "lambda_mass", "nu_mass", "density"]]


def test_negative_tol_is_config_error(tmp_path, capsys):
    cfg = write_cfg(tmp_path, "bad", map="doubling", tol=-1)
    assert run_cli(cfg) != 0
    assert "tol" in capsys.readouterr().err


@pytest.mark.parametrize("cfg, field", [
    ({"map": "nope"}, "map"),
    ({"map": "doubling", "colour": 1}, "colour"),
    ({"map": "doubling", "window": 20, "horizon": 10}, "horizon"),
    ({"map": "doubling", "window": 1}, "window"),
    ({"map": "doubling", "k_cap": float("inf")}, "k_cap"),
    ({"map": "doubling", "seed": "uniform"}, "seed"),
    ({}, "map"),
])
def test_config_validation_names_field(cfg, field):
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig.from_dict(cfg)
    assert exc.value.field == field


def test_unreadable_and_malformed_configs(tmp_path, capsys):
    assert run_cli(tmp_path / "missing.json") != 0
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run_cli(bad) != 0
    cfg = write_cfg(tmp_path, "p", map="doubling", partition={"breakpoints": [0, 0.0001, 1]})
    assert run_cli(cfg) != 0
    assert "partition" in capsys.readouterr().err


def test_findings_do_not_fail_the_run(tmp_path):
    cfg = write_cfg(tmp_path, "q", map="quadratic", out="q_out")
    assert run_cli(cfg) == 0
    res = json.loads((tmp_path / "q_out" / "run.json").read_text())
    assert res["hypotheses"]["membership"] == "not M"


def test_overrides_and_seed_density(tmp_path):
    cfg = write_cfg(tmp_path, "t", map="tent",
                    seed={"density": [2.0, 0.5], "breakpoints": [0, 0.5, 1]},
                    partition={"breakpoints": [0, 0.25, 0.5, 1], "i0": "[1/2,1)"})
    assert run_cli(cfg, "--out", tmp_path / "o", "--horizon", "30", "--grid-cells", "64") == 0
    res = json.loads((tmp_path / "o" / "run.json").read_text())
    assert res["horizon"] == 30 and res["grid"]["cells"] == 64
    assert res["hypotheses"]["i0"] == "[1/2,1)"
    assert res["hypotheses"]["m1"]["mass"] == pytest.approx([0.5, 0.5, 0.25])


def test_seed_density_length_checked(tmp_path):
    cfg = write_cfg(tmp_path, "s", map="tent", seed={"density": [1.0, 2.0]})
    assert run_cli(cfg, "--out", tmp_path / "o") != 0


def test_catalog_lists_maps(capsys):
    assert main(["catalog"]) == 0
    out = capsys.readouterr().out
    for name in ("doubling", "boole", "pomeau_manneville", "reducible_pair"):
        assert name in out


# ----------------------------------------------------------------- determinism


def test_rerun_from_persisted_matrix_is_bit_identical(tmp_path):
    cfg = write_cfg(tmp_path, "g", map="gauss", transfer_matrix="gauss.tm")
    assert run_cli(cfg, "--out", tmp_path / "a") == 0
    assert (tmp_path / "gauss.tm").exists()
    assert run_cli(cfg, "--out", tmp_path / "b") == 0
    for f in ("run.json", "trajectory.csv", "density.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_batch_matches_sequential(tmp_path):
    c1 = write_cfg(tmp_path, "one", map="doubling", horizon=20)
    c2 = write_cfg(tmp_path, "two", map="tent", horizon=20)
    assert run_cli(c1, c2, "--out", tmp_path / "seq") == 0
    assert run_cli(c1, c2, "--out", tmp_path / "par", "--batch") == 0
    for stem in ("one", "two"):
        assert (tmp_path / "seq" / stem / "run.json").read_bytes() == \
               (tmp_path / "par" / stem / "run.json").read_bytes()


# ----------------------------------------------------------------- serialization


def test_dumps_precision_and_nonfinite():
    text = dumps({"a": 0.1, "b": float("inf"), "c": [1, 2.5], "d": np.float64(1 / 3), "e": None})
    assert '"a": 0.10000000000000001' in text
    assert '"b": "inf"' in text
    back = json.loads(text)
    assert back["d"] == 1 / 3 and back["c"] == [1, 2.5]


# ----------------------------------------------------------------- density export


def test_export_density_doubling_two_cells(tmp_path):
    g = Grid.uniform(0.0, 1.0, 2)
    lam = ReferenceMeasure.uniform(g)
    export_density(CellMeasure(2 * lam.weights, g), tmp_path / "d.csv")
    rows = read_rows(tmp_path / "d.csv")
    assert rows[0] == ["cell_left", "cell_right", "lambda_mass", "nu_mass", "density"]
    assert [list(map(float, r)) for r in rows[1:]] == [[0, 0.5, 0.5, 1, 2], [0.5, 1, 0.5, 1, 2]]


def test_export_density_empty(tmp_path):
    export_density(CellMeasure(np.empty(0), Grid(np.empty(0), np.empty(0))), tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text().strip() == "cell_left,cell_right,lambda_mass,nu_mass,density"


def test_export_density_unwritable(tmp_path):
    g = Grid.uniform(0.0, 1.0, 2)
    with pytest.raises(OSError):
        export_density(CellMeasure([1.0, 1.0], g), tmp_path / "no" / "such" / "dir.csv")


def test_export_gauss_density_ordering(tmp_path):
    edges = [0.0, 1 / 4, 1 / 3, 1 / 2, 1.0]
    g = Grid.from_breakpoints(edges)
    lam = ReferenceMeasure.uniform(g)
    branches = [make_branch("gauss", (1 / (k + 1), 1 / k), k=k) for k in (1, 2, 3)]
    branches.append(make_branch("gauss_tail", (0, 1 / 4), first=4))
    T = build_transfer_matrix(BranchMap("gauss4", tuple(branches)), g, lam)
    G = LambdaPartition.from_breakpoints(g, edges)
    rep = omega_limit(T, lam.as_measure(), G, tol=1e-9, n_max=5000)
    export_density(rep.last, tmp_path / "g.csv", lam)
    dens = np.array([float(r[4]) for r in read_rows(tmp_path / "g.csv")[1:]])
    oracle = np.log((1 + g.right) / (1 + g.left)) / (g.right - g.left)
    assert np.all(np.diff(dens) < 0)
    assert np.array_equal(np.argsort(dens), np.argsort(oracle))
