import json
import subprocess
import sys

import numpy as np
import pytest

from limitforge import io
from limitforge.cli import main
from limitforge.geometry import SampleSet, locate_all
from limitforge.matfun import SquareWave
from limitforge.sim import SwitchingAffineSystem, Trajectory
from limitforge.track import TrackingCertificate, TrackingController

from conftest import VDP_NF, VDP_SHIFT, quadrant_system, sectors

# Period of the unforced Van der Pol oscillator with mu = 1.
VDP_PERIOD_MU1 = 6.663286859323


def run(*args):
    return main([str(a) for a in args])


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """datagen -> partition -> synth through the command line, in one directory."""
    d = tmp_path_factory.mktemp("pipeline")
    p = {k: d / n for k, n in [("samples", "vdp.csv"), ("part", "part.json"),
                               ("model", "model.json"), ("cert", "cert.json"),
                               ("model2", "model2.json"), ("cert2", "cert2.json"),
                               ("log", "log.jsonl")]}
    p["dir"] = d
    assert run("datagen", "vanderpol", p["samples"], "--nF", VDP_NF, "--rescale-period", 1.4,
               "--shift", VDP_SHIFT) == 0
    assert run("partition", p["samples"], p["part"], "--np", 8) == 0
    p["synth_code"] = run("synth", p["samples"], p["part"], p["model"], p["cert"],
                          "--nd", 9, "--log", p["log"])
    p["synth_code2"] = run("synth", p["samples"], p["part"], p["model2"], p["cert2"],
                           "--nd", 9)
    return p


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def test_model_json_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    part = sectors(5, center=(0.3, -1.7), phase=0.4)
    sys_ = SwitchingAffineSystem(part, rng.standard_normal((5, 2, 2)),
                                 rng.standard_normal((5, 2)), rng.standard_normal(2),
                                 SquareWave(1.4))
    io.save_json(tmp_path / "m.json", io.model_to_dict(sys_))
    back = io.model_from_dict(io.load_json(tmp_path / "m.json"))
    np.testing.assert_array_equal(back.A, sys_.A)
    np.testing.assert_array_equal(back.b, sys_.b)
    np.testing.assert_array_equal(back.B, sys_.B)
    np.testing.assert_array_equal(back.partition.C, part.C)
    np.testing.assert_array_equal(back.partition.d, part.d)
    np.testing.assert_array_equal(back.partition.center, part.center)
    assert back.input.period_T == 1.4


def test_controller_and_certificate_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    ctrl = TrackingController(rng.standard_normal((4, 1, 2)), rng.standard_normal((4, 1)))
    io.save_json(tmp_path / "c.json", io.controller_to_dict(ctrl))
    back = io.controller_from_dict(io.load_json(tmp_path / "c.json"))
    np.testing.assert_array_equal(back.K, ctrl.K)
    np.testing.assert_array_equal(back.w, ctrl.w)

    M = rng.standard_normal((4, 2, 2))
    cert = TrackingCertificate(np.einsum("kij,klj->kil", M, M) + np.eye(2), 1.1154, 12.8307,
                               0.0098)
    io.save_json(tmp_path / "q.json", io.tracking_certificate_to_dict(cert))
    qb = io.tracking_certificate_from_dict(io.load_json(tmp_path / "q.json"))
    np.testing.assert_array_equal(qb.Q, cert.Q)
    assert (qb.rho, qb.sigma, qb.T_min, qb.z) == (1.1154, 12.8307, 0.0098, 1)


def test_samples_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    S = SampleSet.uniform(rng.standard_normal((13, 3)), 0.7)
    io.write_samples_csv(tmp_path / "s.csv", S, {"generator": "test"})
    back, meta = io.read_samples_csv(tmp_path / "s.csv")
    np.testing.assert_array_equal(back.points, S.points)
    np.testing.assert_array_equal(back.times, S.times)
    assert back.period_T == 0.7
    assert meta["generator"] == "test"


def test_trajectory_csv_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    tr = Trajectory(np.arange(5) * 0.1, rng.standard_normal((5, 2)), np.array([0, 0, 1, 2, 2]))
    io.write_trajectory_csv(tmp_path / "t.csv", tr)
    back, _ = io.read_trajectory_csv(tmp_path / "t.csv")
    np.testing.assert_array_equal(back.states, tr.states)
    np.testing.assert_array_equal(back.regions, tr.regions)


def test_format_errors(tmp_path):
    (tmp_path / "no_t.csv").write_text("t,x1,x2\n0,1,2\n")
    with pytest.raises(io.FormatError, match="T="):
        io.read_samples_csv(tmp_path / "no_t.csv")
    (tmp_path / "cols.csv").write_text("# T=1\ntime,a,b\n0,1,2\n")
    with pytest.raises(io.FormatError, match="expected columns"):
        io.read_samples_csv(tmp_path / "cols.csv")
    ctrl_doc = io.controller_to_dict(TrackingController(np.zeros((3, 1, 2)), np.zeros((3, 1))))
    with pytest.raises(io.FormatError, match="model"):
        io.model_from_dict(ctrl_doc)
    with pytest.raises(io.FormatError, match="schema"):
        io.model_from_dict({**ctrl_doc, "schema": 99})


# ---------------------------------------------------------------------------
# datagen and partition
# ---------------------------------------------------------------------------

def test_datagen_vanderpol_natural_period(tmp_path):
    out = tmp_path / "v.csv"
    assert run("datagen", "vanderpol", out, "--nF", 19) == 0
    S, meta = io.read_samples_csv(out)
    assert S.n_F == 19
    assert abs(S.period_T - VDP_PERIOD_MU1) <= 1e-3
    assert meta["generator"] == "vanderpol"


def test_datagen_rescaled_corpus(pipeline):
    S, meta = io.read_samples_csv(pipeline["samples"])
    assert S.n_F == VDP_NF
    assert S.period_T == 1.4
    np.testing.assert_allclose(S.times, 1.4 * np.arange(VDP_NF) / VDP_NF, atol=1e-15)
    assert meta["seed"] == "0"


def test_datagen_is_byte_deterministic(pipeline, tmp_path):
    out = tmp_path / "again.csv"
    assert run("datagen", "vanderpol", out, "--nF", VDP_NF, "--rescale-period", 1.4,
               "--shift", VDP_SHIFT) == 0
    assert out.read_bytes() == pipeline["samples"].read_bytes()


def test_datagen_rejects_too_few_samples(tmp_path, capsys):
    assert run("datagen", "vanderpol", tmp_path / "v.csv", "--nF", 4) == 2
    assert "n_F" in capsys.readouterr().err


def test_partition_document(pipeline):
    doc = io.load_json(pipeline["part"])
    assert doc["kind"] == "partition"
    assert doc["report"]["passed"]
    assert len(doc["breakpoints"]) == 8
    assert max(doc["dwell_intervals"]) < 1.0
    assert sum(doc["report"]["region_counts"]) == VDP_NF
    assert doc["provenance"]["command"].startswith("limitforge partition")


def test_partition_rejects_two_regions(pipeline, tmp_path):
    assert run("partition", pipeline["samples"], tmp_path / "p.json", "--np", 2) == 2


def test_partition_rejects_self_intersecting_orbit(tmp_path, capsys):
    a = np.linspace(0, 2 * np.pi, 60, endpoint=False) + 0.05
    S = SampleSet.uniform(np.column_stack([np.sin(a), np.sin(2 * a)]), 0.9)
    io.write_samples_csv(tmp_path / "eight.csv", S)
    assert run("partition", tmp_path / "eight.csv", tmp_path / "p.json", "--np", 6) == 2
    assert "self-intersecting" in capsys.readouterr().err


def test_seed_from_environment(pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("LIMITFORGE_SEED", "17")
    assert run("partition", pipeline["samples"], tmp_path / "p.json", "--np", 8) == 0
    assert io.load_json(tmp_path / "p.json")["provenance"]["seed"] == 17
    assert run("partition", pipeline["samples"], tmp_path / "p.json", "--np", 8,
               "--seed", 5) == 0
    assert io.load_json(tmp_path / "p.json")["provenance"]["seed"] == 5
    monkeypatch.setenv("LIMITFORGE_SEED", "abc")
    assert run("partition", pipeline["samples"], tmp_path / "p.json", "--np", 8) == 2


def test_missing_input_file(tmp_path):
    assert run("partition", tmp_path / "absent.csv", tmp_path / "p.json", "--np", 8) == 2


# ---------------------------------------------------------------------------
# synth and simulate
# ---------------------------------------------------------------------------

def test_synth_passes_and_writes_certificate(pipeline):
    assert pipeline["synth_code"] == 0
    cert = io.load_json(pipeline["cert"])
    assert cert["kind"] == "contractivity"
    assert cert["verdict"] is True
    model = io.load_json(pipeline["model"])
    assert model["synthesis"]["taylor_order"] == 9


def test_synth_log_lines(pipeline):
    recs = [json.loads(s) for s in pipeline["log"].read_text().splitlines()]
    assert len(recs) >= 1
    for r in recs:
        assert set(r) == {"iteration", "restart", "objective", "max_infeasibility"}
        assert np.isfinite(r["objective"])


def test_synth_is_deterministic_for_fixed_seed(pipeline):
    assert pipeline["synth_code2"] == 0
    a = io.model_from_dict(io.load_json(pipeline["model"]))
    b = io.model_from_dict(io.load_json(pipeline["model2"]))
    np.testing.assert_array_equal(a.A, b.A)
    np.testing.assert_array_equal(a.b, b.b)
    np.testing.assert_array_equal(a.B, b.B)


def test_simulate_from_three_states_shares_period(pipeline):
    S, _ = io.read_samples_csv(pipeline["samples"])
    c = S.points.mean(axis=0)
    periods = []
    for k, x0 in enumerate([c, c + 3.0, c - [4.0, 1.0]]):
        out = pipeline["dir"] / f"sim{k}.csv"
        vec = ",".join(repr(float(v)) for v in x0)
        assert run("simulate", pipeline["model"], out, "--x0=" + vec, "--t-end", 14.0) == 0
        _, meta = io.read_trajectory_csv(out)
        periods.append(float(meta["period_estimate"]))
    for p in periods:
        assert abs(p - 1.4) <= 0.01 * 1.4


def test_simulate_region_column_matches_locate(pipeline):
    out = pipeline["dir"] / "sim_regions.csv"
    assert run("simulate", pipeline["model"], out, "--t-end", 2.0) == 0
    traj, _ = io.read_trajectory_csv(out)
    system = io.model_from_dict(io.load_json(pipeline["model"]))
    np.testing.assert_array_equal(traj.regions, locate_all(system.partition, traj.states))


def test_simulate_zero_horizon_writes_header_only(tmp_path):
    io.save_json(tmp_path / "m.json", io.model_to_dict(quadrant_system(wave=SquareWave(1.4))))
    out = tmp_path / "s.csv"
    assert run("simulate", tmp_path / "m.json", out, "--t-end", 0) == 0
    lines = [s for s in out.read_text().splitlines() if not s.startswith("#")]
    assert lines == ["t,x1,x2,region"]


def test_simulate_divergence_is_numeric_failure(tmp_path, capsys):
    part = sectors(3)
    sys_ = SwitchingAffineSystem(part, np.repeat(400.0 * np.eye(2)[None], 3, 0),
                                 np.zeros((3, 2)), np.zeros(2))
    io.save_json(tmp_path / "m.json", io.model_to_dict(sys_))
    assert run("simulate", tmp_path / "m.json", tmp_path / "s.csv", "--t-end", 5) == 4
    assert "divergence" in capsys.readouterr().err


def test_simulate_rejects_wrong_state_size(tmp_path):
    io.save_json(tmp_path / "m.json", io.model_to_dict(quadrant_system()))
    assert run("simulate", tmp_path / "m.json", tmp_path / "s.csv", "--x0", "1,2,3") == 2


def test_datagen_from_model_file(tmp_path):
    io.save_json(tmp_path / "m.json", io.model_to_dict(quadrant_system(wave=SquareWave(1.4))))
    out = tmp_path / "s.csv"
    assert run("datagen", "custom-model-file", out, "--model", tmp_path / "m.json",
               "--nF", 28) == 0
    S, _ = io.read_samples_csv(out)
    assert S.n_F == 28 and S.period_T == 1.4
    # The samples lie on the periodic orbit: one more period returns to the first sample.
    from limitforge.sim import simulate

    sys_ = io.model_from_dict(io.load_json(tmp_path / "m.json"))
    end = simulate(sys_, S.points[0], 1.4).states[-1]
    assert np.linalg.norm(end - S.points[0]) <= 1e-5


# ---------------------------------------------------------------------------
# verify-track and track
# ---------------------------------------------------------------------------

def fixture_args():
    return [io.fixture_path(n) for n in ("tracking_model.json", "tracking_controller.json",
                                         "tracking_certificate.json")]


def test_verify_track_prints_slack_and_matches_verdict(tmp_path, capsys):
    code = run("verify-track", *fixture_args(), "--report", tmp_path / "r.json")
    text = capsys.readouterr().out
    assert "0.983608" in text
    doc = io.load_json(tmp_path / "r.json")
    assert code == (0 if doc["verdict"] else 3)
    assert ("verdict: PASS" in text) == doc["verdict"]
    assert doc["T_min_supplied"] == 0.0098 and doc["T_min_measured"] is None


def test_verify_track_names_broken_condition(tmp_path, capsys):
    doc = io.load_json(fixture_args()[2])
    doc["Q_list"][2] = (3.0 * np.asarray(doc["Q_list"][2])).tolist()
    io.save_json(tmp_path / "bad.json", doc)
    m, c, _ = fixture_args()
    assert run("verify-track", m, c, tmp_path / "bad.json") == 3
    assert "FAILED ordering" in capsys.readouterr().out


def test_verify_track_rejects_indefinite_q(tmp_path):
    doc = io.load_json(fixture_args()[2])
    doc["Q_list"][0] = (-np.asarray(doc["Q_list"][0])).tolist()
    io.save_json(tmp_path / "bad.json", doc)
    m, c, _ = fixture_args()
    assert run("verify-track", m, c, tmp_path / "bad.json") == 2


def test_verify_track_measures_dwell(tmp_path, capsys):
    run("verify-track", *fixture_args(), "--tmin-from", "traj", "--report", tmp_path / "r.json")
    doc = io.load_json(tmp_path / "r.json")
    assert doc["T_min_supplied"] == 0.0098
    assert abs(doc["T_min_measured"] - 0.0098) <= 0.1 * 0.0098
    assert "measured" in capsys.readouterr().out


def test_verify_track_bad_tmin(capsys):
    assert run("verify-track", *fixture_args(), "--tmin-from", "often") == 2


def read_error(pref):
    rows = [s for s in open(pref + "_error.csv").read().splitlines() if not s.startswith("#")]
    assert rows[0] == "t,error"
    return np.array([[float(v) for v in r.split(",")] for r in rows[1:]])


def test_track_writes_three_files(tmp_path):
    m, c, _ = fixture_args()
    pref = str(tmp_path / "run")
    assert run("track", m, c, pref, "--xr0", "3.2,19", "--xc0", "13,13") == 0
    ref, _ = io.read_trajectory_csv(pref + "_ref.csv")
    ctl, _ = io.read_trajectory_csv(pref + "_ctrl.csv")
    err = read_error(pref)
    np.testing.assert_allclose(err[:, 1], np.linalg.norm(ctl.states - ref.states, axis=1),
                               atol=1e-12)
    assert err[-1, 1] < 0.01 * err[0, 1]


def test_track_equal_start_has_zero_error(tmp_path):
    m, c, _ = fixture_args()
    pref = str(tmp_path / "same")
    assert run("track", m, c, pref, "--xr0", "3.2,19", "--xc0", "3.2,19", "--t-end", 1) == 0
    err = read_error(pref)
    assert np.all(err[:, 1] == 0.0)


def test_track_step_halving_changes_little(tmp_path):
    m, c, _ = fixture_args()
    ends = []
    for dt in ("1e-3", "5e-4"):
        pref = str(tmp_path / dt)
        assert run("track", m, c, pref, "--xr0", "3.2,19", "--xc0", "4,17", "--t-end", 0.5,
                   "--dt", dt) == 0
        err = read_error(pref)
        ends.append(err[-1, 1])
    assert abs(ends[0] - ends[1]) <= 1e-6


def test_console_script_version():
    out = subprocess.run([sys.executable, "-m", "limitforge.cli", "--version"],
                         capture_output=True, text=True)
    assert out.returncode == 0
    assert out.stdout.startswith("limitforge ")
