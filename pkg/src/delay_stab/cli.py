"""Command line entry point: ``delay-stab <command> <config> [options]``.

Exit status: 0 on success, 2 when no certificate was found, 1 on error.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import pipeline
from .certification import CertificateReport, build_problem, certify
from .config import parse_config, resolve_config
from .errors import DelayStabError
from .sdpa import export_sdpa
from .simulation import fit_decay_rate, run_closed_loop, write_profiles_csv, write_trace_csv

EXIT_OK, EXIT_ERROR, EXIT_INFEASIBLE = 0, 1, 2
COMMANDS = ("design", "certify", "simulate", "sweep", "export-lmi", "reproduce-paper")
REFERENCE_ORDERS = {"paper_dirichlet": 3, "paper_neumann": 15}


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def write_json(data, path):
    with open(path, "w") as fh:
        json.dump(data, fh, indent=2, default=_json_default)
        fh.write("\n")


def save_report(report, stem, out):
    write_json(report.to_dict(), out / f"{stem}.certificate.json")
    (out / f"{stem}.certificate.txt").write_text(report.summary() + "\n")


def load_report(path):
    with open(path) as fh:
        return CertificateReport.from_dict(json.load(fh))


def design_summary(design):
    red = design.reduced()
    a0, b0, c0 = design.slow_blocks()
    k, l = design.gains.k, design.gains.l
    n = design.params.n
    basis = design.model.basis
    return {
        "variant": design.params.variant.value,
        "delta": design.params.delta,
        "horizon": design.params.horizon,
        "q_c": design.model.q_c,
        "n0": design.n0,
        "n": n,
        "k": k,
        "l": l,
        "closed_loop_poles": np.linalg.eigvals(a0 + np.outer(b0, k)).tolist(),
        "observer_poles": np.linalg.eigvals(a0 - np.outer(l, c0)).tolist(),
        "lambda": basis.lam[:n],
        "beta": design.model.coeffs.beta_n[:n],
        "b": design.model.coeffs.b_n[:n],
        "trace": basis.measurement_trace(design.params.variant.measurement)[:n],
        "F": red.f,
        "L": red.lcal,
        "E": red.e,
    }


def cmd_design(cfg, args, out):
    design = pipeline.build_design(cfg)
    data = design_summary(design)
    write_json(data, out / f"{cfg.stem}.design.json")
    print(f"n0 = {design.n0}, K = {design.gains.k.tolist()}, L = {design.gains.l.tolist()}")
    print("closed-loop poles:", ", ".join(f"{complex(p):.6g}" for p in data["closed_loop_poles"]))
    print("observer poles:   ", ", ".join(f"{complex(p):.6g}" for p in data["observer_poles"]))
    return EXIT_OK


def _certify(cfg, args, design=None):
    design = design or pipeline.build_design(cfg)
    search = pipeline.search_config(cfg, args.seed_grid, args.n_max)
    return design, certify(design, search), search


def cmd_certify(cfg, args, out):
    start = time.perf_counter()
    _, report, _ = _certify(cfg, args)
    save_report(report, cfg.stem, out)
    print(report.summary())
    print(f"elapsed: {time.perf_counter() - start:.2f} s")
    return EXIT_OK if report.certified else EXIT_INFEASIBLE


def cmd_simulate(cfg, args, out):
    design = pipeline.build_design(cfg)
    report = None
    if "certification" in cfg.sections:
        _, report, _ = _certify(cfg, args, design)
        save_report(report, cfg.stem, out)
    scenario = pipeline.scenario_for(cfg, design, report)
    trace = run_closed_loop(scenario)
    write_trace_csv(trace, out / f"{cfg.stem}.trace.csv")
    if trace.profiles is not None:
        write_profiles_csv(trace, out / f"{cfg.stem}.profiles.csv")
    h = design.params.h_o
    rate, resid = fit_decay_rate(trace.t, trace.h1_norm, h)
    print(f"observer order N = {trace.n}")
    print(f"H1 decay rate over [{h:g}, {scenario.T:g}]: {rate:.4f} (log residual {resid:.3g})")
    if trace.artstein:
        print(f"predictor quadrature discrepancy (max): {max(a for _, a in trace.artstein):.3e}")
    return EXIT_OK


def cmd_sweep(cfg, args, out):
    search = pipeline.search_config(cfg, args.seed_grid, args.n_max)
    rows = pipeline.run_sweep(cfg, search)
    path = out / f"{cfg.stem}.sweep.csv"
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow([cfg.sweep.parameter, "status", "n_min_feasible", "note"])
        for r in rows:
            wr.writerow([repr(float(r["value"])), r["status"], "" if r["n"] is None else r["n"], r["note"]])
    for r in rows:
        print(f"{cfg.sweep.parameter} = {r['value']:g}: {r['status']}"
              + (f" at N = {r['n']}" if r["n"] is not None else ""))
    return EXIT_OK


def cmd_export_lmi(cfg, args, out):
    design, report, search = _certify(cfg, args)
    if report.n is None:
        print(report.summary())
        return EXIT_INFEASIBLE
    problem = build_problem(design, report.n, search.eps_values, search.max_remainder_ratio)
    path = out / f"{cfg.stem}.dat-s"
    export_sdpa(problem, report.alpha, path, eps=report.eps, mu=cfg.sdpa_margin)
    print(f"wrote {path} (N = {report.n}, alpha = {report.alpha:g}"
          + (f", eps = {report.eps:g}" if report.eps is not None else "") + f", {report.status})")
    return EXIT_OK if report.certified else EXIT_INFEASIBLE


def cmd_reproduce(args, out):
    lines, summary, code = [], {}, EXIT_OK
    for name in ("paper_dirichlet", "paper_neumann"):
        cfg = parse_config(resolve_config(name))
        start = time.perf_counter()
        design, report, _ = _certify(cfg, args)
        elapsed = time.perf_counter() - start
        save_report(report, cfg.stem, out)
        entry = {"status": report.status, "n": report.n if report.certified else None,
                 "reference_n": REFERENCE_ORDERS[name], "certify_seconds": elapsed}
        if report.certified and cfg.simulation is not None:
            trace = run_closed_loop(pipeline.scenario_for(cfg, design, report))
            write_trace_csv(trace, out / f"{cfg.stem}.trace.csv")
            entry["h1_decay_rate"] = fit_decay_rate(trace.t, trace.h1_norm, design.params.h_o)[0]
        else:
            code = EXIT_INFEASIBLE
        summary[name] = entry
        lines.append(f"{name}: {entry['status']} at N = {entry['n']} (reference N = {entry['reference_n']})"
                     + (f", H1 decay rate {entry['h1_decay_rate']:.3f} (required >= delta = 0.5)" if "h1_decay_rate" in entry else ""))
    write_json(summary, out / "reproduce_summary.json")
    (out / "reproduce_summary.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return code


HANDLERS = {
    "design": cmd_design,
    "certify": cmd_certify,
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "export-lmi": cmd_export_lmi,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="delay-stab", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=COMMANDS)
    ap.add_argument("config", nargs="?", help="configuration file or shipped name")
    ap.add_argument("--out", default=".", help="output directory (default: current)")
    ap.add_argument("--seed-grid", choices=("COARSE", "FINE", "coarse", "fine"), default=None,
                    help="density of the certification search grid")
    ap.add_argument("--n-max", type=int, default=None, help="largest observer order to try")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "reproduce-paper":
            return cmd_reproduce(args, out)
        if args.config is None:
            print(f"error: {args.command} needs a configuration", file=sys.stderr)
            return EXIT_ERROR
        cfg = parse_config(args.config).require(args.command)
        return HANDLERS[args.command](cfg, args, out)
    except DelayStabError as exc:
        violations = getattr(exc, "violations", None)
        if violations:
            print(f"error: [{exc.origin()}] {len(violations)} problem(s)", file=sys.stderr)
            for v in violations:
                print(f"  - {v}", file=sys.stderr)
        else:
            print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
