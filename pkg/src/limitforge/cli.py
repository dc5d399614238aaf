"""Command-line front end: ``limitforge <command> [options]``.

Commands
--------
datagen        sample one period of an oscillator or of a model file
partition      build and validate a conic partition of a sample file
synth          fit a contractive switching affine model
simulate       simulate a model file
verify-track   check a tracking certificate
track          co-simulate reference and controlled system

Exit codes are 0 on success, 2 on invalid input, 3 when a certificate does
not verify and 4 on numerical failure.  The seed falls back to the
``LIMITFORGE_SEED`` environment variable and then to 0.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

import numpy as np

from . import __version__
from . import io
from .datagen import NoLimitCycleError, fitzhugh_nagumo, orbit_samples, vanderpol
from .geometry import (
    GeometryError,
    SampleSet,
    build_partition,
    compute_center,
    locate_all,
    segment_samples,
    select_breakpoints,
    validate_partition,
)
from .sim import (
    SimulationError,
    Trajectory,
    estimate_period,
    min_dwell_time,
    simulate,
    tracking_error_series,
)
from .track import (
    CertificateInputError,
    check_assumption2,
    cosimulate,
    verify_certificate,
)

__all__ = ["main", "build_parser"]

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_CERT_FAIL = 3
EXIT_NUMERIC = 4

log = logging.getLogger("limitforge")


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _seed(args) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    env = os.environ.get("LIMITFORGE_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise _Fail(EXIT_INVALID, f"LIMITFORGE_SEED={env!r} is not an integer")
    return 0


def _vector(text: str) -> np.ndarray:
    try:
        v = np.array([float(s) for s in text.replace(" ", "").split(",") if s], dtype=float)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")
    if v.size == 0:
        raise argparse.ArgumentTypeError("empty vector")
    return v


def _prov(args, command_line: Optional[List[str]]):
    cmd = "limitforge " + " ".join(command_line) if command_line is not None else None
    return io.provenance(_seed(args), cmd)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _model_orbit_samples(system, x0, n_F: int, tol: float = 1e-6, max_periods: int = 500):
    """Uniform samples of the periodic response of a model file."""
    if system.input is None:
        raise _Fail(EXIT_INVALID, "custom-model-file generator needs a periodic input")
    T = system.input.period_T
    sub = max(1, int(np.ceil(T / n_F / 1e-4)))
    h = T / n_F / sub
    x = np.asarray(x0, float)
    # Whole periods leave the square wave unchanged, so every pass starts at t = 0.
    for _ in range(max_periods):
        tr = simulate(system, x, T, h)
        closed = np.linalg.norm(tr.states[-1] - x) < tol
        x = tr.states[-1]
        if closed:
            break
    else:
        raise NoLimitCycleError("no limit cycle found")
    tr = simulate(system, x, T, h)
    pts = tr.states[:-1:sub][:n_F]
    return SampleSet.uniform(pts, T)


def cmd_datagen(args, argv=None) -> int:
    if args.generator == "vanderpol":
        field, x0 = vanderpol(args.mu), [2.0, 0.0]
    elif args.generator == "fitzhugh":
        field, x0 = fitzhugh_nagumo(args.a, args.b, args.eps, args.current), [0.0, 0.0]
    else:
        field = None
        if args.model is None:
            raise _Fail(EXIT_INVALID, "custom-model-file generator needs --model")
    if args.x0 is not None:
        x0 = args.x0
    if field is not None:
        try:
            S = orbit_samples(field, x0, args.nF, dt=1e-4, rescale_period=args.rescale_period,
                              shift=args.shift)
        except ValueError as exc:
            raise _Fail(EXIT_INVALID, str(exc))
    else:
        system = io.model_from_dict(io.load_json(args.model))
        if args.x0 is None:
            x0 = system.partition.center + 1.0
        if args.nF < 4 * system.n_x:
            raise _Fail(EXIT_INVALID, f"n_F={args.nF} must be at least 4*n_x={4 * system.n_x}")
        S = _model_orbit_samples(system, x0, args.nF)
        if args.rescale_period is not None:
            S = SampleSet.uniform(S.points, args.rescale_period)
    meta = {"generator": args.generator, "seed": _seed(args)}
    io.write_samples_csv(args.out, S, meta)
    print(f"wrote {S.n_F} samples, T={S.period_T:.6g}, to {args.out}")
    return EXIT_OK


def cmd_partition(args, argv=None) -> int:
    S, _ = io.read_samples_csv(args.input)
    if args.np < 3:
        raise _Fail(EXIT_INVALID, f"n_p={args.np} must be at least 3")
    xs = compute_center(S, args.dim_mode)
    bp = select_breakpoints(S, args.np)
    part = build_partition(S, xs, bp)
    rep = validate_partition(part, S)
    seg = segment_samples(S, bp)
    doc = {
        "schema": io.SCHEMA,
        "kind": "partition",
        "partition": io.partition_to_dict(part),
        "breakpoints": [int(k) for k in bp],
        "dwell_intervals": [float(v) for v in seg.dwell_intervals],
        "report": {
            "passed": bool(rep.passed),
            "region_counts": [int(c) for c in rep.region_counts],
            "union_angles": [float(a) for a in rep.union_angles],
            "messages": list(rep.messages),
        },
        "provenance": _prov(args, argv),
    }
    io.save_json(args.out, doc)
    for m in rep.messages:
        print(m)
    print(f"partition with {part.n_p} boundaries: {'valid' if rep.passed else 'INVALID'}")
    return EXIT_OK if rep.passed else EXIT_INVALID


def _load_partition_doc(path):
    d = io.load_json(path)
    if d.get("schema") != io.SCHEMA or d.get("kind") != "partition":
        raise io.FormatError(f"{path}: not a partition document")
    return io.partition_from_dict(d["partition"]), np.asarray(d["breakpoints"], int)


def cmd_synth(args, argv=None) -> int:
    from .synth import SynthesisOptions, build_problem, solve

    S, _ = io.read_samples_csv(args.input)
    part, bp = _load_partition_doc(args.partition)
    seg = segment_samples(S, bp)
    seed = _seed(args)
    opts = SynthesisOptions(enforce_singular_bound=args.beta, restarts=args.restarts, seed=seed)
    problem = build_problem(S, part, seg, args.nd, options=opts)
    res = solve(problem)
    if args.log:
        with open(args.log, "w") as fh:
            for rec in res.log:
                fh.write(json.dumps({"iteration": rec["iteration"], "restart": rec["restart"],
                                     "objective": rec["objective"],
                                     "max_infeasibility": max(rec["max_reach"],
                                                              max(rec["max_lmi_eig"], 0.0))})
                         + "\n")
    prov = _prov(args, argv)
    report = {"taylor_order": args.nd, "objective_posthoc": res.objective_value,
              "objective_taylor": res.objective_taylor, "residuals": res.constraint_residuals,
              "restart": res.restart}
    io.save_json(args.out_model, io.model_to_dict(res.system, prov, {"synthesis": report}))
    io.save_json(args.out_cert, io.contractivity_certificate_to_dict(
        res.certificate, prov, {"synthesis": report}))
    print(f"post-hoc objective {res.objective_value:.6g} (n_d={args.nd}), "
          f"max lmi eigenvalue {np.max(res.certificate.per_region_lmi_margins):.3g}")
    print(f"certificate: {'PASS' if res.certificate.verdict else 'FAIL'}")
    return EXIT_OK if res.certificate.verdict else EXIT_CERT_FAIL


def cmd_simulate(args, argv=None) -> int:
    system = io.model_from_dict(io.load_json(args.model))
    x0 = args.x0 if args.x0 is not None else system.partition.center + 1.0
    if x0.shape != (system.n_x,):
        raise _Fail(EXIT_INVALID, f"--x0 must have {system.n_x} entries")
    meta = {"model": args.model, "dt": args.dt}
    if args.t_end == 0:
        empty = Trajectory(np.zeros(0), np.zeros((0, system.n_x)), np.zeros(0, int))
        io.write_trajectory_csv(args.out, empty, meta)
        return EXIT_OK
    traj = simulate(system, x0, args.t_end, args.dt)
    if system.input is not None:
        try:
            est = estimate_period(traj, system.partition.boundaries[0])
            meta["period_estimate"] = repr(est.period)
            print(f"period estimate {est.period:.6g}")
        except SimulationError:
            pass
    io.write_trajectory_csv(args.out, traj, meta)
    print(f"wrote {traj.times.size} rows to {args.out}")
    return EXIT_OK


def _load_tracking(args):
    system = io.model_from_dict(io.load_json(args.model))
    ctrl = io.controller_from_dict(io.load_json(args.controller))
    return system, ctrl


def cmd_verify_track(args, argv=None) -> int:
    from dataclasses import replace

    system, ctrl = _load_tracking(args)
    cert = io.tracking_certificate_from_dict(io.load_json(args.certificate))
    supplied = cert.T_min
    measured = None
    if args.tmin_from == "traj":
        traj = simulate(system, args.xr0, args.t_end)
        measured = min_dwell_time(traj)
        cert = replace(cert, T_min=measured)
    elif args.tmin_from is not None:
        try:
            cert = replace(cert, T_min=float(args.tmin_from))
        except ValueError:
            raise _Fail(EXIT_INVALID, "--tmin-from must be 'traj' or a number")
    out = verify_certificate(system, ctrl, cert)
    lines = [f"T_min supplied {supplied:.6g}" + (f", measured {measured:.6g}"
                                                 if measured is not None else ""),
             f"rho exp(-sigma T_min) = {out.dwell_slack:.6f}",
             "region  decay margins (k = i-z..i+z)        ordering margins"]
    for i in range(system.n_p):
        dm = " ".join(f"{v:9.4f}" for v in out.decay_margins[i])
        om = " ".join(f"{v:9.4f}" for v in out.ordering_margins[i])
        lines.append(f"{i + 1:6d}  {dm}   {om}")
    lines.append("continuity mismatch: " + " ".join(f"{v:.4g}"
                                                     for v in out.continuity_residuals))
    lines.extend(f"FAILED {f}" for f in out.failures)
    lines.append(f"verdict: {'PASS' if out.verdict else 'FAIL'}")
    print("\n".join(lines))
    if args.report:
        doc = io.tracking_certificate_to_dict(out, _prov(args, argv))
        doc["T_min_supplied"] = supplied
        doc["T_min_measured"] = measured
        io.save_json(args.report, doc)
    return EXIT_OK if out.verdict else EXIT_CERT_FAIL


def cmd_track(args, argv=None) -> int:
    system, ctrl = _load_tracking(args)
    traj_r, traj_c = cosimulate(system, ctrl, args.xr0, args.xc0, args.t_end, args.dt)
    err = tracking_error_series(traj_c, traj_r)
    a2 = check_assumption2(traj_c, traj_r, system.partition)
    meta = {"model": args.model, "controller": args.controller, "dt": args.dt}
    pref = args.out_prefix
    io.write_trajectory_csv(pref + "_ref.csv", traj_r, meta)
    io.write_trajectory_csv(pref + "_ctrl.csv", traj_c, meta)
    rows = [(t, e) for t, e in zip(traj_c.times, err)]
    io._write_csv(pref + "_error.csv", ["t", "error"], rows, meta)
    print(f"error {err[0]:.6g} -> {err[-1]:.6g}; max region distance {a2.max_distance}")
    if a2.first_violation_time is not None:
        print(f"warning: region distance exceeds 1 first at t={a2.first_violation_time:.6g}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="limitforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"limitforge {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("datagen", help="sample one period of an oscillator")
    d.add_argument("generator", choices=["vanderpol", "fitzhugh", "custom-model-file"])
    d.add_argument("out")
    d.add_argument("--nF", type=int, default=199)
    d.add_argument("--mu", type=float, default=1.0)
    d.add_argument("--a", type=float, default=0.7)
    d.add_argument("--b", type=float, default=0.8)
    d.add_argument("--eps", type=float, default=0.08)
    d.add_argument("--current", type=float, default=0.5)
    d.add_argument("--model", help="model file for the custom-model-file generator")
    d.add_argument("--x0", type=_vector)
    d.add_argument("--rescale-period", type=float)
    d.add_argument("--shift", type=int, default=0, help="rotate the first sample along the orbit")
    d.add_argument("--seed", type=int)
    d.set_defaults(func=cmd_datagen)

    q = sub.add_parser("partition", help="build a conic partition")
    q.add_argument("input")
    q.add_argument("out")
    q.add_argument("--np", type=int, required=True)
    q.add_argument("--dim-mode", choices=["midpoint", "half_range"], default="midpoint")
    q.add_argument("--seed", type=int)
    q.set_defaults(func=cmd_partition)

    s = sub.add_parser("synth", help="synthesize a contractive model")
    s.add_argument("input")
    s.add_argument("partition")
    s.add_argument("out_model")
    s.add_argument("out_cert")
    s.add_argument("--nd", type=int, default=9)
    s.add_argument("--beta", type=float)
    s.add_argument("--restarts", type=int, default=1)
    s.add_argument("--seed", type=int)
    s.add_argument("--log", help="write solver records as JSON lines")
    s.set_defaults(func=cmd_synth)

    m = sub.add_parser("simulate", help="simulate a model")
    m.add_argument("model")
    m.add_argument("out")
    m.add_argument("--x0", type=_vector)
    m.add_argument("--t-end", type=float, default=14.0)
    m.add_argument("--dt", type=float, default=1e-3)
    m.add_argument("--seed", type=int)
    m.set_defaults(func=cmd_simulate)

    v = sub.add_parser("verify-track", help="verify a tracking certificate")
    v.add_argument("model")
    v.add_argument("controller")
    v.add_argument("certificate")
    v.add_argument("--tmin-from", help="'traj' to measure T_min, or a number")
    v.add_argument("--xr0", type=_vector, default=np.array([3.2, 19.0]))
    v.add_argument("--t-end", type=float, default=14.0)
    v.add_argument("--report", help="write the machine-readable report here")
    v.add_argument("--seed", type=int)
    v.set_defaults(func=cmd_verify_track)

    t = sub.add_parser("track", help="co-simulate reference and controlled system")
    t.add_argument("model")
    t.add_argument("controller")
    t.add_argument("out_prefix")
    t.add_argument("--xr0", type=_vector, required=True)
    t.add_argument("--xc0", type=_vector, required=True)
    t.add_argument("--t-end", type=float, default=5.0)
    t.add_argument("--dt", type=float, default=1e-3)
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_track)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _seed(args)
        return args.func(args, argv)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (GeometryError, io.FormatError, CertificateInputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NoLimitCycleError, SimulationError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
