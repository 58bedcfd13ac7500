import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from msgad.harness import config as cfgmod
from msgad.harness.analysis import cost_report, evals_to_reach, variance_scan, write_table
from msgad.harness.cli import cli_main
from msgad.harness.record import COLUMNS, STATUS_CONVERGED, RunRecord
from msgad.harness.reference import ReferenceSaddle, error_metric, make_reference
from msgad.model import TWOD_MINIMA, TWOD_SADDLES, ModelError, UnsupportedOperation, make_model
from msgad.sampling import MicroConfig

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


# -- records -------------------------------------------------------------------


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(finite, st.integers(0, 10**6), finite), min_size=1, max_size=20),
       st.booleans())
def test_record_round_trip(tmp_path_factory, rows, with_states):
    rec = RunRecord(method="hmm", meta={"seed": 3, "config": {"dt": 0.01}})
    evals = 0
    for i, (err, d_evals, se) in enumerate(rows):
        evals += d_evals
        rec.append(i, 0.5 * (i + 1), err, evals, 100, 1e-3, se,
                   state=[err, se] if with_states else None, mod_force=err)
    rec.x_final = np.array([1.0, 2.0])
    out = rec.write(tmp_path_factory.mktemp("rec"))
    back = RunRecord.read(out)
    assert back.method == "hmm" and back.status == rec.status
    assert back.meta == rec.meta
    for col in COLUMNS:
        np.testing.assert_array_equal(back.array(col), rec.array(col))
    np.testing.assert_array_equal(back.array("mod_force"), rec.array("mod_force"))
    np.testing.assert_array_equal(np.array(back.states), np.array(rec.states))
    np.testing.assert_array_equal(back.x_final, rec.x_final)


def test_record_rejects_non_monotone_rows():
    rec = RunRecord(method="gad")
    rec.append(0, 1.0)
    with pytest.raises(ValueError):
        rec.append(1, 1.0)
    with pytest.raises(ValueError):
        rec.append(1, 2.0, force_evals=-1)


def test_record_header_is_fixed(tmp_path):
    RunRecord(method="scm").write(tmp_path)
    assert (tmp_path / "record.csv").read_text().splitlines()[0] == ",".join(COLUMNS)
    meta = json.loads((tmp_path / "meta.json").read_text())
    assert meta["method"] == "scm" and meta["n_rows"] == 0


# -- error metric and references -----------------------------------------------


def grid_reference(n=201, profile=None):
    grid = np.linspace(0.0, 1.0, n)
    x = np.zeros(n) if profile is None else profile(grid)
    return ReferenceSaddle("allen-cahn", {"grid_n": n}, x, 0.0, 1e-10, grid)


def test_error_metric_on_grid_functions():
    ref = grid_reference()
    g = ref.grid
    assert error_metric(ref.x, ref) == 0.0
    assert error_metric(np.full(g.size, -0.3), ref) == pytest.approx(0.3, rel=1e-12)
    # trapezoid on a periodic integrand over whole periods is exact
    assert error_metric(0.7 * np.sin(2 * np.pi * g), ref) == pytest.approx(0.7 / math.sqrt(2), rel=1e-12)
    with pytest.raises(ModelError):
        error_metric(np.zeros(5), ref)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-5, 5))
def test_error_metric_is_a_norm(seed, c):
    ref = grid_reference(41)
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(2, 41))
    assert error_metric(c * a, ref) == pytest.approx(abs(c) * error_metric(a, ref), rel=1e-12, abs=1e-14)
    assert error_metric(a + b, ref) <= error_metric(a, ref) + error_metric(b, ref) + 1e-12


def test_error_metric_is_euclidean_without_grid():
    ref = ReferenceSaddle("twod-ou", {}, np.array([1.0, 2.0]), 0.0, 1e-10)
    assert error_metric([4.0, 6.0], ref) == pytest.approx(5.0)


def test_reference_save_load_and_regrid(tmp_path):
    ref = grid_reference(201, lambda g: np.cos(np.pi * g))
    back = ReferenceSaddle.load(ref.save(tmp_path))
    np.testing.assert_array_equal(back.x, ref.x)
    np.testing.assert_array_equal(back.grid, ref.grid)
    coarse = back.on_grid(np.linspace(0.0, 1.0, 51))
    np.testing.assert_allclose(coarse.x, np.cos(np.pi * coarse.grid), atol=1e-4)
    assert coarse.params["grid_n"] == 51
    with pytest.raises(ModelError):
        ReferenceSaddle("twod-ou", {}, np.zeros(2), 0.0, 1e-10).on_grid(np.zeros(3))


def test_reference_needs_closed_form():
    class Opaque(type(make_model("allen-cahn"))):
        has_exact = False

    with pytest.raises(UnsupportedOperation):
        make_reference(Opaque())


@pytest.mark.parametrize("start,v0,kick,saddle", [("m1", (0.0, 1.0), 1e-2, "s1"),
                                                  ("m2", (0.0, -1.0), 0.5, "s1")])
def test_twod_references(twod, start, v0, kick, saddle):
    from msgad.gad import GadConfig
    cfg = GadConfig(dt=0.01, tol=1e-10, max_steps=400_000, kick=kick, keep_states=False)
    ref = make_reference(twod, TWOD_MINIMA[start], np.array(v0), cfg)
    assert ref.residual <= 1e-10
    np.testing.assert_allclose(ref.x, TWOD_SADDLES[saddle], atol=1e-3)


def test_allen_cahn_reference_without_coupling_is_single_interface():
    model = make_model("allen-cahn", {"mu": 0.0, "grid_n": 101})
    ref = make_reference(model, v0=np.ones(model.N))
    assert ref.residual <= 1e-10
    u = ref.x
    # one interior sign change, odd about the midpoint, pure phases +-1 at the walls
    assert np.count_nonzero(np.diff(np.sign(u)) != 0) == 1
    np.testing.assert_allclose(u, -u[::-1], atol=1e-6)
    np.testing.assert_allclose(abs(u[0]), 1.0, atol=1e-6)


# -- analysis ------------------------------------------------------------------


def test_variance_scan_matches_closed_forms(twod):
    table = variance_scan(twod, ((1.2841, 3.0), (1.2841, 4.5)), n_points=3, M=100_000, seed=1)
    x2 = table["x2"]
    gam = 1 / (1 + (x2 - 5) ** 2)
    # f_2 - F_2 = y^2 - s with s = sigma2 Gamma / 2: variance 2 s^2
    z = (table["var_f2"] - 50 * gam**2) / table["se_f2"]
    assert np.all(np.abs(z) < 4.5), z
    # the covariance sample is -2 (x - 5) / sigma2 (y^2 - s)^2: variance 56 s^4 (4 (x - 5)^2 / sigma4)
    expected = 1400 * (x2 - 5) ** 2 * gam**4
    z = (table["var_J22"] - expected) / table["se_J22"]
    assert np.all(np.abs(z) < 4.5), z


def test_variance_scan_of_frozen_drift_is_zero(frozen):
    table = variance_scan(frozen, n_points=2, micro=MicroConfig(M=500, burn_in=10))
    for key in ("var_f1", "var_f2", "var_J11", "var_J22"):
        np.testing.assert_allclose(table[key], 0.0, atol=1e-20)


def test_variance_scan_rejects_bad_segment(twod):
    with pytest.raises(ValueError):
        variance_scan(twod, ((0.0,), (1.0,)))


def _curve(method, errs, per_step):
    rec = RunRecord(method=method)
    for i, e in enumerate(errs):
        rec.append(i, i + 1.0, e, per_step * (i + 1))
    return rec


def test_cost_report_and_evals_to_reach(tmp_path):
    a = _curve("hmm", [1.0, 0.1, 0.01], 10)
    b = _curve("scm", [0.5, 0.2], 3)
    assert evals_to_reach(a, 0.1) == 20
    assert evals_to_reach(b, 0.01) == math.inf
    table = cost_report({"a": a, "b": b})
    np.testing.assert_array_equal(table["a_evals"], [10, 20, 30])
    np.testing.assert_array_equal(table["b_err"][:2], [0.5, 0.2])
    assert math.isnan(table["b_err"][2])
    assert set(cost_report([a, b])) == {"hmm0_evals", "hmm0_err", "scm1_evals", "scm1_err"}
    assert cost_report({}) == {}
    path = write_table(table, tmp_path / "t.csv")
    assert path.read_text().splitlines()[0] == "a_evals,a_err,b_evals,b_err"


# -- configuration -------------------------------------------------------------


def test_flatten_nested_and_dotted_keys():
    flat = cfgmod.flatten({"model": {"sigma2": 4.0, "D": [[1, 0], [0, 1]]}, "hmm": {"M": 10,
                           "M_schedule": {"r": 1.0}}, "scm.dt0": 1e-3, "seed": 2})
    assert flat == {"model.sigma2": 4.0, "model.D": [[1, 0], [0, 1]], "hmm.M": 10,
                    "hmm.M_schedule.r": 1.0, "scm.dt0": 1e-3, "seed": 2}


def test_unknown_keys_are_named(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text("hmm:\n  Mx: 3\n")
    with pytest.raises(cfgmod.ConfigError, match="hmm.Mx"):
        cfgmod.load_config(path)
    with pytest.raises(cfgmod.ConfigError, match="gad.bogus"):
        cfgmod.parse_override("gad.bogus=1")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.parse_override("gad.dt")
    with pytest.raises(cfgmod.ConfigError):
        cfgmod.load_config(tmp_path / "missing.yaml")


def test_overrides_and_builders():
    assert cfgmod.parse_override("hmm.M=10000") == ("hmm.M", 10000)
    assert cfgmod.parse_override("gad.tol=1e-8") == ("gad.tol", 1e-8)
    assert cfgmod.parse_override("scm.cov_variant=half-hatC2") == ("scm.cov_variant", "half-hatC2")
    flat = {"seed": 4, "hmm.M": 300, "hmm.dt": 0.02, "hmm.M_schedule.r": 0.5, "micro.scheme": "heun",
            "scm.switch_to_hmm": True, "scm.adaptive": True}
    hcfg = cfgmod.hmm_config(flat)
    assert hcfg.micro.M == 300 and hcfg.micro.scheme == "heun" and hcfg.micro.seed == 4
    assert hcfg.dt == 0.02 and hcfg.M_schedule.r == 0.5
    scfg = cfgmod.scm_config(flat)
    assert scfg.scheme == "heun" and scfg.hmm.micro.M == 300
    with pytest.raises(cfgmod.ConfigError, match="gad"):
        cfgmod.gad_config({"gad.dt": -1.0})


# -- command line --------------------------------------------------------------


def test_cli_exit_codes(tmp_path, capsys):
    assert cli_main(["run-gad", "--bogus"]) == 1
    assert cli_main(["run-hmm", "--set", "hmm.nope=1", "--out", str(tmp_path / "x")]) == 1
    assert "hmm.nope" in capsys.readouterr().err
    ref_dir = tmp_path / "ref"
    assert cli_main(["make-reference", "--x0", "m1", "--v0", "0,1", "--out", str(ref_dir)]) == 0
    assert cli_main(["run-gad", "--x0", "m1", "--v0", "0,1", "--reference", str(ref_dir),
                     "--set", "gad.tol=1e-8", "--out", str(tmp_path / "gad")]) == 0
    rec = RunRecord.read(tmp_path / "gad")
    assert rec.status == STATUS_CONVERGED and rec.final_error < 1e-6
    assert cli_main(["run-hmm", "--x0", "m1", "--v0", "0,1", "--max-time", "0.05",
                     "--set", "hmm.M=50", "--out", str(tmp_path / "hmm")]) == 2
    assert cli_main(["run-scm", "--x0", "1,2,3"]) == 1


def test_cli_runs_are_deterministic(tmp_path):
    args = ["run-scm", "--x0", "m1", "--v0", "0,1", "--seed", "5", "--max-time", "0.01"]
    cli_main(args + ["--out", str(tmp_path / "a")])
    cli_main(args + ["--out", str(tmp_path / "b")])
    for name in ("record.csv", "x_star.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_cli_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv("MSGAD_OUT", str(tmp_path))
    assert cli_main(["run-hmm", "--x0", "m1", "--v0", "0,1", "--seed", "3", "--max-time", "0.02",
                     "--set", "hmm.M=20"]) == 2
    assert (tmp_path / "run-hmm-twod-ou-s3" / "record.csv").exists()


def test_cli_cost_report(tmp_path, capsys):
    _curve("hmm", [1.0, 0.1], 10).write(tmp_path / "r1")
    assert cli_main(["cost-report", str(tmp_path / "r1"), "--out", str(tmp_path / "c.csv")]) == 0
    assert (tmp_path / "c.csv").read_text().splitlines()[0] == "r1_evals,r1_err"
