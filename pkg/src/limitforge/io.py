"""File formats: sample and trajectory CSV, and versioned JSON documents.

CSV files carry ``# key=value`` comment lines for metadata followed by a
header ``t,x1,...,xn`` (trajectories add a ``region`` column).  JSON
documents carry ``schema: 1``, a ``kind`` tag and a ``provenance`` block.
Floats are written with Python's shortest round-trip representation, so a
save/load cycle reproduces every finite double exactly.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from . import __version__
from .geometry import ConicPartition, Hyperplane, SampleSet
from .matfun import SquareWave
from .sim import SwitchingAffineSystem, Trajectory
from .track import TrackingCertificate, TrackingController

__all__ = [
    "SCHEMA",
    "FormatError",
    "provenance",
    "write_samples_csv",
    "read_samples_csv",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "partition_to_dict",
    "partition_from_dict",
    "model_to_dict",
    "model_from_dict",
    "controller_to_dict",
    "controller_from_dict",
    "tracking_certificate_to_dict",
    "tracking_certificate_from_dict",
    "contractivity_certificate_to_dict",
    "save_json",
    "load_json",
    "fixture_path",
]

SCHEMA = 1


class FormatError(ValueError):
    """Raised when a file does not follow the expected format."""


def provenance(seed: Optional[int] = None, command: Optional[str] = None) -> Dict:
    return {
        "tool_version": __version__,
        "seed": seed,
        "command": command if command is not None else " ".join(sys.argv),
    }


def _fmt(v: float) -> str:
    return repr(float(v))


def _write_csv(path, columns, rows, meta: Optional[Dict] = None):
    lines = []
    for k, v in (meta or {}).items():
        lines.append(f"# {k}={v}")
    lines.append(",".join(columns))
    for r in rows:
        lines.append(",".join(_fmt(x) if not isinstance(x, (int, np.integer)) else str(int(x))
                              for x in r))
    Path(path).write_text("\n".join(lines) + "\n")


def _read_csv(path) -> Tuple[Dict[str, str], list, np.ndarray]:
    meta = {}
    header = None
    data = []
    for line in Path(path).read_text().splitlines():
        s = line.strip()
        if not s:
            continue
        if s.startswith("#"):
            body = s[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = v.strip()
            continue
        if header is None:
            header = [c.strip() for c in s.split(",")]
            continue
        data.append([float(x) for x in s.split(",")])
    if header is None:
        raise FormatError(f"{path}: missing header line")
    arr = np.array(data, dtype=float).reshape(-1, len(header))
    return meta, header, arr


def _check_state_columns(header, extra=()):
    n = len(header) - 1 - len(extra)
    expected = ["t"] + [f"x{q + 1}" for q in range(n)] + list(extra)
    if header != expected:
        raise FormatError(f"expected columns {','.join(expected)}, got {','.join(header)}")
    return n


def write_samples_csv(path, samples: SampleSet, meta: Optional[Dict] = None):
    """Write a sample set; the period goes into a ``# T=`` metadata line."""
    m = {"T": _fmt(samples.period_T), "dt": _fmt(samples.dt_nominal)}
    m.update(meta or {})
    cols = ["t"] + [f"x{q + 1}" for q in range(samples.n_x)]
    rows = np.column_stack([samples.times, samples.points])
    _write_csv(path, cols, rows, m)


def read_samples_csv(path) -> Tuple[SampleSet, Dict[str, str]]:
    meta, header, arr = _read_csv(path)
    _check_state_columns(header)
    if "T" not in meta:
        raise FormatError(f"{path}: missing '# T=' metadata line")
    dt = float(meta["dt"]) if "dt" in meta else None
    return SampleSet(arr[:, 1:], arr[:, 0], float(meta["T"]), dt), meta


def write_trajectory_csv(path, traj: Trajectory, meta: Optional[Dict] = None,
                         with_region: bool = True, header_only: bool = False):
    n = traj.states.shape[1]
    cols = ["t"] + [f"x{q + 1}" for q in range(n)] + (["region"] if with_region else [])
    rows = []
    if not header_only:
        for k in range(traj.times.shape[0]):
            r = [traj.times[k], *traj.states[k]]
            if with_region:
                r.append(int(np.atleast_1d(traj.regions[k])[0]))
            rows.append(r)
    _write_csv(path, cols, rows, meta)


def read_trajectory_csv(path) -> Tuple[Trajectory, Dict[str, str]]:
    meta, header, arr = _read_csv(path)
    has_region = header[-1] == "region"
    _check_state_columns(header, ("region",) if has_region else ())
    states = arr[:, 1:-1] if has_region else arr[:, 1:]
    regions = arr[:, -1].astype(int) if has_region else np.zeros(arr.shape[0], int)
    return Trajectory(arr[:, 0], states, regions), meta


def _tolist(a):
    return np.asarray(a, dtype=float).tolist()


def partition_to_dict(part: ConicPartition) -> Dict:
    return {
        "center": _tolist(part.center),
        "boundaries": [{"C": _tolist(h.normal), "d": float(h.offset)} for h in part.boundaries],
        "axis": None if part.axis_direction is None else {
            "direction": _tolist(part.axis_direction),
            "subspace": None if part.axis_subspace_basis is None
            else _tolist(part.axis_subspace_basis),
        },
    }


def partition_from_dict(d: Dict) -> ConicPartition:
    try:
        bnds = tuple(Hyperplane(b["C"], b["d"]) for b in d["boundaries"])
        axis = d.get("axis")
        direction = None if not axis else axis.get("direction")
        sub = None if not axis else axis.get("subspace")
        return ConicPartition(bnds, d["center"], direction, sub)
    except (KeyError, TypeError) as exc:
        raise FormatError(f"malformed partition: {exc}") from exc


def _wave_to_dict(wave) -> Optional[Dict]:
    if wave is None:
        return None
    if isinstance(wave, SquareWave):
        return {"kind": "square", "period": wave.period_T, "phase": wave.phase,
                "amplitude": wave.amplitude}
    raise FormatError("only square-wave inputs can be serialized")


def _wave_from_dict(d: Optional[Dict]):
    if d is None:
        return None
    if d.get("kind") != "square":
        raise FormatError(f"unknown input kind {d.get('kind')!r}")
    return SquareWave(float(d["period"]), d.get("phase", "minus_first"),
                      float(d.get("amplitude", 1.0)))


def model_to_dict(system: SwitchingAffineSystem, prov: Optional[Dict] = None,
                  extra: Optional[Dict] = None) -> Dict:
    doc = {
        "schema": SCHEMA,
        "kind": "model",
        "n_x": system.n_x,
        "n_p": system.n_p,
        "partition": partition_to_dict(system.partition),
        "dynamics": {
            "A": _tolist(system.A),
            "b": _tolist(system.b),
            "B": _tolist(system.B),
            "input": _wave_to_dict(system.input),
        },
        "provenance": prov if prov is not None else provenance(),
    }
    if extra:
        doc.update(extra)
    return doc


def _check_doc(d: Dict, kind):
    if d.get("schema") != SCHEMA:
        raise FormatError(f"unsupported schema {d.get('schema')!r}")
    kinds = (kind,) if isinstance(kind, str) else kind
    if d.get("kind") not in kinds:
        raise FormatError(f"expected a {' or '.join(kinds)} document, got {d.get('kind')!r}")


def model_from_dict(d: Dict) -> SwitchingAffineSystem:
    _check_doc(d, "model")
    part = partition_from_dict(d["partition"])
    dyn = d["dynamics"]
    system = SwitchingAffineSystem(part, dyn["A"], dyn["b"], dyn["B"],
                                   _wave_from_dict(dyn.get("input")))
    if d.get("n_x") not in (None, system.n_x) or d.get("n_p") not in (None, system.n_p):
        raise FormatError("declared sizes do not match the matrices")
    return system


def controller_to_dict(ctrl: TrackingController, prov: Optional[Dict] = None) -> Dict:
    return {"schema": SCHEMA, "kind": "controller", "K": _tolist(ctrl.K), "w": _tolist(ctrl.w),
            "provenance": prov if prov is not None else provenance()}


def controller_from_dict(d: Dict) -> TrackingController:
    _check_doc(d, "controller")
    return TrackingController(d["K"], d["w"])


def tracking_certificate_to_dict(cert: TrackingCertificate, prov: Optional[Dict] = None) -> Dict:
    doc = {
        "schema": SCHEMA,
        "kind": "tracking",
        "Q_list": _tolist(cert.Q),
        "rho": float(cert.rho),
        "sigma": float(cert.sigma),
        "T_min": float(cert.T_min),
        "z": int(cert.z),
        "margins": None,
        "verdict": cert.verdict,
        "provenance": prov if prov is not None else provenance(),
    }
    if cert.decay_margins is not None:
        doc["margins"] = {
            "decay": _tolist(cert.decay_margins),
            "ordering": _tolist(cert.ordering_margins),
            "dwell_slack": cert.dwell_slack,
            "continuity": _tolist(cert.continuity_residuals),
        }
        doc["failures"] = list(cert.failures)
    return doc


def tracking_certificate_from_dict(d: Dict) -> TrackingCertificate:
    _check_doc(d, "tracking")
    return TrackingCertificate(np.asarray(d["Q_list"], float), float(d["rho"]),
                               float(d["sigma"]), float(d["T_min"]), int(d.get("z", 1)))


def contractivity_certificate_to_dict(cert, prov: Optional[Dict] = None,
                                      extra: Optional[Dict] = None) -> Dict:
    doc = {
        "schema": SCHEMA,
        "kind": "contractivity",
        "Q": _tolist(cert.Q),
        "margins": _tolist(cert.per_region_lmi_margins),
        "continuity": _tolist(cert.continuity_residuals),
        "tol_lmi": cert.tol_lmi,
        "tol_cont": cert.tol_cont,
        "verdict": bool(cert.verdict),
        "provenance": prov if prov is not None else provenance(),
    }
    if extra:
        doc.update(extra)
    return doc


def save_json(path, doc: Dict):
    Path(path).write_text(json.dumps(doc, indent=1, allow_nan=False) + "\n")


def load_json(path) -> Dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON ({exc})") from exc


def fixture_path(name: str) -> Path:
    """Path of a bundled fixture file."""
    return Path(__file__).parent / "fixtures" / name
