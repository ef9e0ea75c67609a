"""On-disk formats: calibration artifacts, plan files and Monte-Carlo reports.

Plan files and datasets are a single JSON header line followed by CSV rows.
Floats are written with 17 significant digits so round trips are exact.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from cctraj.models import Trajectory

VOLATILE = ("wall_time",)


def fmt(v) -> str:
    return format(float(v), ".17g")


def content_hash(obj: dict) -> str:
    clean = {k: v for k, v in obj.items() if k not in VOLATILE and k != "hash"}
    return hashlib.sha256(json.dumps(clean, sort_keys=True).encode()).hexdigest()[:16]


def _write_header_csv(path, header: dict, columns: list, rows) -> None:
    buf = io.StringIO()
    buf.write(json.dumps(header, sort_keys=True) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow(row)
    Path(path).write_text(buf.getvalue())


def _read_header_csv(path):
    lines = Path(path).read_text().splitlines()
    return json.loads(lines[0]), list(csv.reader(lines[1:]))


# -- calibration ------------------------------------------------------------

@dataclass
class CalibrationArtifact:
    K: int
    N: int
    p: float
    delta: float
    delta_bar: float
    weighting: str
    weights: Optional[list]
    C: np.ndarray  # audit quantiles, level 1 - delta + delta_bar, k = 1..N
    stage_eta: np.ndarray  # per-step quantiles at level 1 - delta/2, k = 1..N
    eta: float  # terminal quantile at level 1 - delta
    metric: dict
    provenance: dict
    scores: np.ndarray = field(repr=False, default=None)  # (K, N)
    energies: Optional[np.ndarray] = field(repr=False, default=None)

    def to_dict(self) -> dict:
        d = {
            "K": self.K, "N": self.N, "p": self.p, "delta": self.delta, "delta_bar": self.delta_bar,
            "weighting": self.weighting, "weights": self.weights,
            "C": [float(c) for c in self.C], "stage_eta": [float(c) for c in self.stage_eta],
            "eta": float(self.eta), "metric": self.metric, "provenance": self.provenance,
            "scores_sha": hashlib.sha256(np.ascontiguousarray(self.scores).tobytes()).hexdigest()[:16],
        }
        d["hash"] = content_hash(d)
        return d

    @property
    def hash(self) -> str:
        return self.to_dict()["hash"]


def save_calibration(art: CalibrationArtifact, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "calibration.json").write_text(json.dumps(art.to_dict(), indent=1, sort_keys=True))
    _write_table(out / "scores.csv", art.scores)
    if art.energies is not None:
        _write_table(out / "energies.csv", art.energies)
    return out / "calibration.json"


def _write_table(path, T: np.ndarray) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["j"] + [f"k{k + 1}" for k in range(T.shape[1])])
    for j, row in enumerate(T):
        w.writerow([j] + [fmt(v) for v in row])
    Path(path).write_text(buf.getvalue())


def _read_table(path) -> np.ndarray:
    rows = list(csv.reader(Path(path).read_text().splitlines()))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows])


def load_calibration(path) -> CalibrationArtifact:
    path = Path(path)
    if path.is_dir():
        path = path / "calibration.json"
    d = json.loads(path.read_text())
    energies = path.parent / "energies.csv"
    art = CalibrationArtifact(
        d["K"], d["N"], d["p"], d["delta"], d["delta_bar"], d["weighting"], d["weights"],
        np.array(d["C"]), np.array(d["stage_eta"]), d["eta"], d["metric"], d["provenance"],
        _read_table(path.parent / "scores.csv"),
        _read_table(energies) if energies.exists() else None,
    )
    if art.hash != d["hash"]:
        raise ValueError(f"calibration artifact {path} fails its content hash")
    return art


# -- plans --------------------------------------------------------------------

def save_plan(path, traj: Trajectory, header: dict, gains: Optional[np.ndarray] = None) -> dict:
    nx, nu = traj.states.shape[1], traj.controls.shape[1]
    header = dict(header, N=traj.N, n_x=nx, n_u=nu)
    rows = []
    for k in range(traj.N + 1):
        u = [fmt(v) for v in traj.controls[k]] if k < traj.N else [""] * nu
        rows.append([k] + [fmt(v) for v in traj.states[k]] + u)
    body = "\n".join(",".join(map(str, r)) for r in rows)
    header["body_sha"] = hashlib.sha256(body.encode()).hexdigest()[:16]
    header["hash"] = content_hash(header)
    cols = ["k"] + [f"x{i + 1}" for i in range(nx)] + [f"u{i + 1}" for i in range(nu)]
    _write_header_csv(path, header, cols, rows)
    if gains is not None:
        gpath = Path(path).with_suffix(".gains.csv")
        g = gains.reshape(gains.shape[0], -1)
        _write_header_csv(gpath, {"shape": list(gains.shape[1:]), "plan_hash": header["hash"]},
                          ["k"] + [f"K{i}" for i in range(g.shape[1])],
                          [[k] + [fmt(v) for v in row] for k, row in enumerate(g)])
    return header


def load_plan(path) -> tuple[Trajectory, dict]:
    header, rows = _read_header_csv(path)
    nx, nu = header["n_x"], header["n_u"]
    body = rows[1:]
    X = np.array([[float(v) for v in r[1:1 + nx]] for r in body])
    U = np.array([[float(v) for v in r[1 + nx:1 + nx + nu]] for r in body[:-1]])
    return Trajectory(X, U), header


def load_gains(plan_path) -> Optional[np.ndarray]:
    gpath = Path(plan_path).with_suffix(".gains.csv")
    if not gpath.exists():
        return None
    header, rows = _read_header_csv(gpath)
    g = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return g.reshape(len(g), *header["shape"])


# -- reports --------------------------------------------------------------------

def save_report(out_dir, summary: dict, report, plan: Trajectory, C=None, M_inv=None, stem: str = "report"):
    """JSON summary, per-step table and a figure CSV (plan, ellipse axes, run positions)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = dict(summary)
    summary["hash"] = content_hash(summary)
    (out / f"{stem}.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    N = plan.N
    rows = []
    for k in range(N + 1):
        row = [k, report.state_violations[k] / report.runs]
        for cov in (report.coverage, report.marginal_coverage):
            row.append("" if cov is None or k == 0 else fmt(cov[k - 1]))
        rows.append(row)
    _write_header_csv(out / f"{stem}_steps.csv", {"runs": report.runs, "method": report.method},
                      ["k", "state_failure", "coverage_fixed", "coverage_marginal"], rows)
    if C is not None and M_inv is not None:
        # semi-axes of the position ellipse C_k^2 * M^{-1} restricted to (x1, x2)
        ev = np.sqrt(np.clip(np.linalg.eigvalsh(np.asarray(M_inv)[:2, :2]), 0, None))
        fig = []
        for k in range(N + 1):
            c = 0.0 if k == 0 else float(C[k - 1])
            fig.append([k] + [fmt(v) for v in plan.states[k]] + [fmt(c * ev[1]), fmt(c * ev[0])])
        _write_header_csv(out / f"{stem}_figure.csv", {"ellipse": "semi-axes of C_k^2 M^-1 on positions"},
                          ["k"] + [f"xbar{i + 1}" for i in range(plan.states.shape[1])] + ["axis_major", "axis_minor"],
                          fig)
    if report.trajectories is not None:
        T = report.trajectories
        trace = [[i, k] + [fmt(v) for v in T[i, k]] for i in range(T.shape[0]) for k in range(T.shape[1])]
        _write_header_csv(out / f"{stem}_traces.csv", {"runs": T.shape[0]},
                          ["run", "k"] + [f"x{i + 1}" for i in range(T.shape[2])], trace)
    return summary
