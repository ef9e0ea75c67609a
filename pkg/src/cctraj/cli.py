"""Command-line entry point: ``cctraj {calibrate,plan,simulate,baseline,verify}``.

Exit codes: 0 success, 1 configuration error, 2 insufficient calibration,
3 infeasible plan, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from cctraj import ConfigurationError, DesignError, InsufficientCalibrationError, NumericalFailure
from cctraj.artifacts import load_calibration, load_plan, save_calibration, save_plan, save_report
from cctraj.config import build_constraints, build_model, load_config, policy_designer
from cctraj.contraction import Metric
from cctraj.noise import load_dataset
from cctraj.trajopt import check_plan

log = logging.getLogger("cctraj")

EXIT_CONFIG, EXIT_CALIBRATION, EXIT_INFEASIBLE, EXIT_NUMERICAL = 1, 2, 3, 4


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _load(args):
    overrides = {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        if not _:
            raise ConfigurationError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides["calibration.seed"] = args.seed
    if args.workers is not None:
        overrides["workers"] = args.workers
    if getattr(args, "weighting", None):
        overrides["calibration.weighting"] = args.weighting
    if getattr(args, "stage_mode", None):
        overrides["planner.stage_mode"] = args.stage_mode
    cfg = load_config(args.config, overrides)
    out = Path(args.out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, out


def _dataset(args):
    return load_dataset(args.dataset) if getattr(args, "dataset", None) else None


def _calibration(args, cfg, out):
    from cctraj import pipeline

    path = Path(args.calibration) if getattr(args, "calibration", None) else out / "calibration.json"
    if path.exists():
        return load_calibration(path)
    art = pipeline.run_calibration(cfg, _dataset(args))
    save_calibration(art, out)
    return art


def cmd_calibrate(args) -> int:
    from cctraj import pipeline

    cfg, out = _load(args)
    art = pipeline.run_calibration(cfg, _dataset(args))
    path = save_calibration(art, out)
    C = art.C
    print(f"eta = {art.eta:.6g}  (K={art.K}, N={art.N}, delta={art.delta:g}, weighting={art.weighting})")
    print(f"C_k: min {C.min():.4g}  median {np.median(C):.4g}  max {C.max():.4g}  C_N {C[-1]:.4g}")
    print(f"stage quantile max {np.max(art.stage_eta):.4g}")
    print(f"calibration {art.hash} -> {path}")
    return 0


def cmd_plan(args) -> int:
    from cctraj import pipeline

    cfg, out = _load(args)
    if args.mode == "baseline":
        return _baseline_plan(args, cfg, out)
    art = _calibration(args, cfg, out)
    problem, res = pipeline.plan(cfg, art)
    print(f"status {res.status}  objective {res.objective:.6g}  defect {res.defect:.2e}  "
          f"violation {res.violation:.2e}  outer {res.iterations}  {res.wall_time:.2f}s")
    if res.status == "infeasible":
        return EXIT_INFEASIBLE
    model = build_model(cfg)
    gains = policy_designer(cfg, model)(res.trajectory).gains
    header = dict(problem.info, status=res.status, objective=res.objective, defect=res.defect,
                  violation=res.violation, eta=art.eta, config=cfg.name)
    h = save_plan(out / "plan.csv", res.trajectory, header, gains)
    print(f"plan {h['hash']} -> {out / 'plan.csv'}")
    return 0


def _baseline_plan(args, cfg, out) -> int:
    from cctraj.baseline import baseline_plan

    model = build_model(cfg)
    ds = _dataset(args) or pipeline_dataset(cfg)
    res = baseline_plan(model, build_constraints(cfg, model.n_x), ds, np.asarray(cfg.planner.x0),
                        cfg.calibration.N, np.diag(cfg.planner.R), np.diag(cfg.controller.Q),
                        np.diag(cfg.controller.R))
    p = res.plan
    print(f"baseline status {p.status}  sweeps {res.sweeps}  objective {p.objective:.6g}  {p.wall_time:.2f}s")
    if p.status == "infeasible":
        return EXIT_INFEASIBLE
    h = save_plan(out / "baseline_plan.csv", p.trajectory,
                  {"method": "baseline", "status": p.status, "config": cfg.name, "sweeps": res.sweeps},
                  res.policy.gains)
    print(f"plan {h['hash']} -> {out / 'baseline_plan.csv'}")
    return 0


def pipeline_dataset(cfg):
    from cctraj import pipeline

    return pipeline.make_dataset(cfg)


def _plan_for(args, cfg, out):
    default = "baseline_plan.csv" if getattr(args, "mode", None) == "baseline" else "plan.csv"
    path = Path(args.plan) if getattr(args, "plan", None) else out / default
    if not path.exists():
        raise ConfigurationError(f"no plan at {path}; run 'cctraj plan' first")
    return load_plan(path)


def cmd_simulate(args) -> int:
    from cctraj import pipeline

    cfg, out = _load(args)
    if args.mode == "baseline":
        traj, header = _plan_for(args, cfg, out)
        res = pipeline.simulate(cfg, traj)
        res.report.method = "baseline"
        summary = dict(res.report.summary(), plan=header.get("hash"))
        save_report(out, summary, res.report, traj, stem="baseline")
        print(json.dumps(summary, indent=1))
        return 0
    art = _calibration(args, cfg, out)
    traj, header = _plan_for(args, cfg, out)
    if header.get("calibration") not in (None, art.hash):
        log.warning("plan was built against calibration %s, simulating with %s", header["calibration"], art.hash)
    res = pipeline.simulate(cfg, traj, art, coverage=not args.no_coverage)
    summary = dict(res.report.summary(), plan=header.get("hash"), calibration=art.hash, eta=art.eta)
    save_report(out, summary, res.report, traj, art.C, Metric.from_dict(art.metric).M_inv, stem="simulate")
    print(json.dumps(summary, indent=1))
    return 0


def cmd_baseline(args) -> int:
    from cctraj import pipeline

    cfg, out = _load(args)
    res = pipeline.run_baseline(cfg, _dataset(args))
    p = res.plan
    print(f"baseline status {p.status}  sweeps {res.sweeps}  objective {p.objective:.6g}  {p.wall_time:.2f}s")
    if p.status == "infeasible":
        return EXIT_INFEASIBLE
    save_plan(out / "baseline_plan.csv", p.trajectory, {"method": "baseline", "status": p.status,
                                                         "config": cfg.name}, res.policy.gains)
    summary = res.report.summary()
    save_report(out, summary, res.report, p.trajectory, stem="baseline")
    print(json.dumps(summary, indent=1))
    return 0


def cmd_verify(args) -> int:
    """Audit stored artifacts: calibration invariants, then the plan against its tightened problem."""
    from cctraj import pipeline
    from cctraj.conformal import ScoreTable, quantile_schedule

    cfg, out = _load(args)
    art = load_calibration(args.calibration or out / "calibration.json")
    checks = {}
    S = art.scores
    checks["scores_nonnegative"] = bool(np.all(S >= 0))
    if art.weighting == "recursive" and art.energies is not None:
        checks["scores_bound_energy"] = bool(np.all(S >= art.energies - 1e-9))
    table = ScoreTable(S)
    C = quantile_schedule(table, art.delta, art.delta_bar, art.weights).C
    checks["quantiles_reproduce"] = bool(np.array_equal(C, art.C))
    checks["terminal_quantile_reproduces"] = quantile_schedule(table, art.delta, 0.0, art.weights).eta == art.eta
    plan_path = Path(args.plan) if args.plan else out / "plan.csv"
    result = {"calibration": art.hash, "checks": checks}
    if plan_path.exists():
        traj, header = load_plan(plan_path)
        checks["plan_references_calibration"] = header.get("calibration") == art.hash
        defect, violation = check_plan(pipeline.build_problem(cfg, art), traj)
        checks["plan_dynamics"] = defect <= 1e-6
        checks["plan_tightened_constraints"] = violation <= 1e-6
        result.update(plan=header.get("hash"), defect=defect, violation=violation)
    print(json.dumps(result, indent=1))
    if not checks.get("plan_references_calibration", True):
        return EXIT_CONFIG
    return 0 if all(checks.values()) else EXIT_INFEASIBLE


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cctraj", description="Conformal chance-constrained trajectory planning")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--out", help="output directory (default: config 'out')")
        p.add_argument("--seed", type=int, help="calibration dataset seed")
        p.add_argument("--workers", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        return p

    p = common(sub.add_parser("calibrate", help="score calibration rollouts and compute quantiles"))
    p.add_argument("--dataset", help="disturbance dataset CSV (default: sample from the config)")
    p.add_argument("--weighting", choices=["recursive", "paper-literal"])
    p.set_defaults(func=cmd_calibrate)

    p = common(sub.add_parser("plan", help="solve the tightened planning problem"))
    p.add_argument("--calibration", help="calibration.json (computed when absent)")
    p.add_argument("--dataset")
    p.add_argument("--mode", choices=["conformal", "baseline"], default="conformal",
                   help="conformal quantiles or Gaussian/chi-square tightening")
    p.add_argument("--stage-mode", choices=["eta", "max", "per-step"], help="stage back-off quantiles")
    p.set_defaults(func=cmd_plan)

    p = common(sub.add_parser("simulate", help="Monte-Carlo audit of a plan"))
    p.add_argument("--calibration")
    p.add_argument("--plan")
    p.add_argument("--mode", choices=["conformal", "baseline"], default="conformal")
    p.add_argument("--no-coverage", action="store_true", help="skip the marginal coverage pool")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("baseline", help="Gaussian-fit + chi-square tightening baseline"))
    p.add_argument("--dataset")
    p.set_defaults(func=cmd_baseline)

    p = common(sub.add_parser("verify", help="re-check a stored plan"))
    p.add_argument("--calibration")
    p.add_argument("--plan")
    p.add_argument("--stage-mode", choices=["eta", "max", "per-step"])
    p.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * args.verbose, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InsufficientCalibrationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CALIBRATION
    except (NumericalFailure, DesignError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigurationError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
