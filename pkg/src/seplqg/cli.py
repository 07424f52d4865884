"""Command-line pipeline: optimize | identify | design | evaluate |
theorem1 | pipeline.

Each stage reads the experiment JSON (defaults to the built-in heat
benchmark when --config is omitted) and exchanges artifacts through the
output directory: nominal.json -> rom.json -> controller.json ->
report.json plus the plotting CSVs.  The process exits non-zero if any
acceptance assertion listed in the config fails.
"""

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .belief import GaussianBelief
from .config import ExperimentConfig, benchmark_config
from .harness import (
    check_theorem1,
    complexity_report,
    run_monte_carlo,
)
from .lqg import LqgController, design_lqg
from .sysid import LtvRom, collect_impulse_responses, holdout_pairs, tv_era, validate_rom
from .trajopt import NominalTrajectory, optimize

__all__ = ["main"]


def _load_config(args):
    return ExperimentConfig.load(args.config) if args.config else benchmark_config()


def _prior(cfg, plant):
    x0 = plant.initial_state()
    return GaussianBelief(x0, cfg.prior_std() ** 2 * np.eye(plant.n_x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def cmd_optimize(args):
    cfg = _load_config(args)
    plant = cfg.plant()
    cost = cfg.cost(plant)
    opts = cfg.optimize_options(seed=args.seed)
    b0 = _prior(cfg, plant)
    u0 = np.zeros((plant.horizon, plant.n_u))
    nominal = optimize(u0, b0, plant, cost, opts)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    nominal.to_json(out / "nominal.json")
    sensors = list(plant.config.sensor_nodes)
    rows = []
    for k in range(nominal.horizon + 1):
        u = nominal.controls[k] if k < nominal.horizon else [np.nan] * plant.n_u
        rows.append(
            [k, k * plant.dt, *nominal.means[k][sensors], *u]
        )
    _write_csv(
        out / "fig2_nominal.csv",
        ["k", "t", *[f"mean_x{n}" for n in sensors], *[f"u{m}" for m in range(plant.n_u)]],
        rows,
    )
    print(f"nominal cost {nominal.nominal_cost:.6g} after {nominal.iterations} iterations "
          f"(converged={nominal.converged}) -> {out / 'nominal.json'}")
    return 0


def cmd_identify(args):
    cfg = _load_config(args)
    plant = cfg.plant()
    sid = cfg.sysid()
    out = Path(args.out)
    nominal = NominalTrajectory.from_json(out / "nominal.json")
    markov = collect_impulse_responses(plant, nominal, sid["epsilon"])
    rom = tv_era(markov, n_r=sid["n_r"], p=sid["p"], q=sid["q"])
    holdout = holdout_pairs(nominal.horizon, sid["p"], sid["q"], sid["holdout_extra"], rom.time_range)
    err = validate_rom(rom, markov, holdout)
    rom.to_json(out / "rom.json")
    rows = [[k, *s] for k, s in sorted(rom.singular_values.items())]
    width = max(len(r) - 1 for r in rows)
    _write_csv(out / "sysid_singvals.csv", ["k", *[f"s{i+1}" for i in range(width)]], rows)
    with open(out / "rom_validation.json", "w") as fh:
        json.dump({"holdout_error": err, "n_r": sid["n_r"], "p": sid["p"], "q": sid["q"],
                   "holdout_extra": sid["holdout_extra"], "time_range": list(rom.time_range),
                   "gap_warning": rom.gap_warning}, fh)
    print(f"ROM order {sid['n_r']} on k in {rom.time_range}; held-out Markov error {err:.4f} "
          f"-> {out / 'rom.json'}")
    return 0


def cmd_design(args):
    cfg = _load_config(args)
    plant = cfg.plant()
    lq = cfg.lqg()
    out = Path(args.out)
    rom = LtvRom.from_json(out / "rom.json")
    ctrl = design_lqg(
        rom,
        W=plant.spec.W,
        V=plant.spec.V,
        P0=lq["p0"] * np.eye(rom.n_r),
        q_y=lq["q_y"],
        r=lq["r"],
        terminal_scale=lq["terminal_scale"],
        ridge=lq["ridge"],
    )
    ctrl.to_json(out / "controller.json")
    rows = [
        [
            k,
            np.linalg.norm(ctrl.L_gains[k]) if k < rom.horizon else np.nan,
            np.linalg.norm(ctrl.K_gains[k]),
            ctrl.S_traces[k],
            np.trace(ctrl.P_filter[k]),
        ]
        for k in range(rom.horizon + 1)
    ]
    _write_csv(out / "lqg_diag.csv", ["k", "norm_L", "norm_K", "tr_S", "tr_P"], rows)
    print(f"designed {rom.n_r} x {rom.n_r} LQG gains over horizon {rom.horizon} "
          f"-> {out / 'controller.json'}")
    return 0


def _report_payload(report):
    return {
        "n_runs": report.n_runs,
        "base_seed": report.base_seed,
        "mean_traj": report.mean_traj.tolist(),
        "probe_positions": list(report.probe_positions),
        "probe_nodes": list(report.probe_nodes),
        "run0_closed_err": report.run0_closed_err.tolist(),
        "run0_open_err": report.run0_open_err.tolist(),
        "two_sigma": report.two_sigma.tolist(),
        "mse_closed": report.mse_closed.tolist(),
        "mse_open": report.mse_open.tolist(),
        "delta_J_samples": report.delta_J_samples.tolist(),
        "cost_samples": report.cost_samples.tolist(),
        "nominal_cost": report.nominal_cost,
        "failures": report.failures,
    }


def cmd_evaluate(args):
    cfg = _load_config(args)
    plant = cfg.plant()
    cost = cfg.cost(plant)
    ev = cfg.evaluate()
    out = Path(args.out)
    nominal = NominalTrajectory.from_json(out / "nominal.json")
    ctrl = LqgController.from_json(out / "controller.json")
    n_runs = args.runs or ev["runs"]
    report = run_monte_carlo(
        plant,
        nominal,
        ctrl,
        n_runs=n_runs,
        base_seed=args.seed if args.seed is not None else 0,
        probe_positions=ev["probes"],
        cost=cost,
        belief_size=ev["belief_size"],
        chunk=ev["chunk"],
    )
    with open(out / "report.json", "w") as fh:
        json.dump(_report_payload(report), fh)
    rows = []
    for i, pos in enumerate(report.probe_positions):
        for k in range(report.mean_traj.shape[0]):
            rows.append(
                [
                    k * plant.dt,
                    pos,
                    report.run0_closed_err[k, i],
                    report.run0_open_err[k, i],
                    report.two_sigma[k, i],
                ]
            )
    _write_csv(out / "fig3_errors.csv", ["t", "pos", "closed_err", "open_err", "two_sigma"], rows)
    comp = complexity_report(plant.n_x, ctrl.rom.n_r)
    (out / "complexity.txt").write_text(comp.summary() + "\n")
    print(f"{n_runs} paired runs ({report.failures} failures); "
          f"mse closed {report.mse_closed} open {report.mse_open}; "
          f"mean dJ {report.delta_J_mean:.4g} (se {report.delta_J_se:.4g})")
    failures = _run_assertions(cfg, plant, nominal, report, out)
    return 1 if failures else 0


def cmd_theorem1(args):
    cfg = _load_config(args)
    plant = cfg.plant()
    cost = cfg.cost(plant)
    ev = cfg.evaluate()
    out = Path(args.out)
    nominal = NominalTrajectory.from_json(out / "nominal.json")
    ctrl = LqgController.from_json(out / "controller.json")
    n_runs = args.runs or ev["runs"]
    mean_dj, se, jbar = check_theorem1(
        plant,
        nominal,
        ctrl,
        cost,
        n_runs=n_runs,
        base_seed=args.seed if args.seed is not None else 0,
        belief_size=ev["belief_size"],
        chunk=ev["chunk"],
    )
    with open(out / "theorem1.json", "w") as fh:
        json.dump({"mean_delta_J": mean_dj, "se": se, "nominal_cost": jbar, "runs": n_runs}, fh)
    verdict = abs(mean_dj) <= max(3 * se, 0.02 * abs(jbar))
    print(f"mean dJ = {mean_dj:.5g}, se = {se:.5g}, J = {jbar:.6g} "
          f"-> |mean| {'<=' if verdict else '>'} max(3 se, 2% J)")
    return 0 if verdict else 1


def _run_assertions(cfg, plant, nominal, report, out):
    checks = cfg.assertions()
    if not checks:
        return []
    failures = []

    def emit(name, ok, detail):
        print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
        if not ok:
            failures.append(name)

    if "nominal_band" in checks:
        c = checks["nominal_band"]
        ks = [k for k in range(nominal.horizon + 1) if c["t_start"] <= k * plant.dt <= c["t_end"]]
        window = nominal.means[ks][:, : plant.n_x]
        ok = bool((window.min() >= c["lo"]) and (window.max() <= c["hi"]))
        emit("nominal_band", ok, f"min {window.min():.2f} max {window.max():.2f} in [{c['lo']}, {c['hi']}]")
    if "rom_error_max" in checks:
        val = json.loads((out / "rom_validation.json").read_text())["holdout_error"]
        emit("rom_error_max", val <= checks["rom_error_max"], f"{val:.4f} <= {checks['rom_error_max']}")
    if checks.get("closed_beats_open"):
        ok = bool(np.all(report.mse_closed < report.mse_open))
        emit("closed_beats_open", ok, f"closed {report.mse_closed} < open {report.mse_open}")
    if "mean_within" in checks:
        tol = checks["mean_within"]
        dev = np.abs(report.mean_traj - nominal.means).max()
        emit("mean_within", bool(dev <= tol), f"max |mean - nominal| = {dev:.3f} <= {tol}")
    if "theorem1" in checks:
        c = checks["theorem1"]
        bound = max(
            c.get("se_mult", 3.0) * report.delta_J_se,
            c.get("frac_cost", 0.02) * abs(report.nominal_cost),
        )
        ok = abs(report.delta_J_mean) <= bound
        emit("theorem1", bool(ok), f"|{report.delta_J_mean:.4g}| <= {bound:.4g}")
    return failures


def cmd_pipeline(args):
    rc = cmd_optimize(args)
    rc = rc or cmd_identify(args)
    rc = rc or cmd_design(args)
    rc = rc or cmd_evaluate(args)
    return rc


def main(argv=None):
    parser = argparse.ArgumentParser(prog="seplqg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (
        ("optimize", cmd_optimize),
        ("identify", cmd_identify),
        ("design", cmd_design),
        ("evaluate", cmd_evaluate),
        ("theorem1", cmd_theorem1),
        ("pipeline", cmd_pipeline),
    ):
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment JSON (default: built-in heat benchmark)")
        p.add_argument("--out", required=True, help="artifact directory")
        p.add_argument("--seed", type=int, default=None, help="seed override")
        p.add_argument("--runs", type=int, default=None, help="Monte Carlo runs override")
        p.set_defaults(fn=fn)
    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
