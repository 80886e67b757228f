"""Command line entry point: ``cemaxwell <command> [options]``."""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import cem, harness
from .assembly import assemble_load
from .coeff import CoefficientError, ModelKind, generate
from .fine import exact_benchmark, solve_fine
from .harness import ConfigError
from .linalg import SolverError
from .mesh import MeshSizeError

TABLES = {
    "table1": "homogeneous",
    "table2": "wave",
    "table3": "model1",
    "table4": "model2",
    "table5": "contrast",
}
TABLE_DEFAULTS = {
    "wave": dict(k_list=(4.0, 8.0), H_list=(0.25, 0.125)),
    "model1": dict(model=dict(kind="random_cubes")),
    "model2": dict(model=dict(kind="periodic_rods")),
    "contrast": dict(model=dict(kind="periodic_rods")),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p):
    p.add_argument("--config", help="TOML config; keys mirror ExperimentConfig")
    p.add_argument("--k", type=float, help="wavenumber")
    p.add_argument("--H", dest="H_list", help="coarse sizes, e.g. '1/4,1/8'")
    p.add_argument("--n-fine", dest="n_fine", type=int, help="fine cells per axis")
    p.add_argument("--m", dest="m_list", help="oversampling layers, e.g. '1,2,3'")
    p.add_argument("--l", type=int, help="auxiliary modes per element")
    p.add_argument("--contrast", dest="contrast_list", help="contrast ratios for table5")
    p.add_argument("--boundary", choices=("consistent", "published"))
    p.add_argument("--reference", choices=("exact", "fine"))
    p.add_argument("--out", dest="output_dir", help="output directory")
    p.add_argument("--jobs", type=int, help="worker processes for basis construction")
    p.add_argument("--strict", action="store_true", default=None,
                   help="zero trace on the whole patch boundary, including the domain boundary")
    p.add_argument("--cache", action="store_true", default=None, help="reuse bases cached on disk")
    p.add_argument("--timings", action="store_true", default=None, help="write wall-clock columns")
    p.add_argument("--paper-scale", action="store_true", help="h = 1/64, H down to 1/16")
    p.add_argument("--check-resolution", action="store_true", help="print the resolution condition status")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    p = _Parser(prog="cemaxwell", description="Multiscale edge-element solver for time-harmonic Maxwell.")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    s = sub.add_parser("solve", help="one fine or multiscale solve")
    _common(s)
    s.add_argument("--method", choices=("ms", "fine"), default="ms")
    s.add_argument("--model", choices=[k.value for k in ModelKind])
    for name, fam in TABLES.items():
        _common(sub.add_parser(name, help=f"experiment family '{fam}'"))
    d = sub.add_parser("decay", help="distance of localized basis functions from the global one")
    _common(d)
    d.add_argument("--element", type=int, help="coarse element (default: most central)")
    d.add_argument("--mode", type=int, default=0, help="eigenmode index j (0-based)")
    d.add_argument("--model", choices=[k.value for k in ModelKind])
    sp_ = sub.add_parser("spectra", help="per-element eigenvalues and Lambda")
    _common(sp_)
    sp_.add_argument("--model", choices=[k.value for k in ModelKind])
    return p


OVERRIDE_KEYS = ("k", "H_list", "n_fine", "m_list", "l", "contrast_list", "boundary", "reference",
                 "output_dir", "jobs", "strict", "cache", "timings")


def make_config(args, family):
    flags = {k: getattr(args, k, None) for k in OVERRIDE_KEYS}
    flags = {k: v for k, v in flags.items() if v is not None}
    flags["family"] = family
    if family == "contrast" and "H_list" in flags:
        # the contrast sweep runs at a single coarse size
        flags["contrast_H"] = flags.pop("H_list").replace(",", " ").split()[0]
    model = getattr(args, "model", None)
    if model:
        flags["model"] = {"kind": model}
    cfg = harness.load_config(args.config, flags, TABLE_DEFAULTS.get(family))
    if args.paper_scale:
        cfg = harness.paper_scale(cfg, keep=set(flags))
    return cfg


def _problem(cfg, H):
    mesh = cfg.mesh(H)
    if cfg.model.kind is ModelKind.HOMOGENEOUS and cfg.model.background_value == 1.0:
        return harness.homogeneous_problem(dataclasses.replace(cfg, reference="fine")
                                           if cfg.reference == "fine" else cfg, mesh, cfg.k)
    return harness.heterogeneous_problem(cfg, mesh, cfg.model, cfg.k)


def _print_resolution(cfg, aux, fld, H):
    rc = cem.resolution_check(cfg.k, H, fld.mu_max, aux.Lambda, cfg.resolution_threshold)
    status = "satisfied" if rc.satisfied else "NOT satisfied"
    print(f"resolution: k H sqrt(mu_max / Lambda) = {rc.value:.4g} (threshold {rc.threshold:g}) {status}")


def cmd_solve(args):
    cfg = make_config(args, "homogeneous")
    H = cfg.H_list[0]
    if args.method == "fine":
        mesh = cfg.mesh(H)
        if cfg.model.kind is ModelKind.HOMOGENEOUS:
            u, f, g = exact_benchmark(cfg.k, cfg.boundary)
            fld = generate(cfg.model, mesh)
        else:
            fld = generate(cfg.model, mesh)
            f, g = harness.unit_source, None
        from .assembly import assemble_operators

        ops = assemble_operators(mesh, fld, None, cfg.k)
        sol = solve_fine(ops, assemble_load(mesh, None, f, g), cfg.rtol)
        print(f"fine solve: {mesh.n_edges} unknowns, residual {sol.residual:.2e}, {sol.report.get('method')}")
        _save_field(cfg, "fine", sol.u)
        return 0
    prob = _problem(cfg, H)
    report = harness.ErrorReport("solve")
    harness.multiscale_rows(cfg, prob, "solve", prob.field.contrast, report)
    if args.check_resolution:
        aux = cem.compute_auxiliary(prob.mesh, prob.field, cfg.k, cfg.l)
        _print_resolution(cfg, aux, prob.field, prob.mesh.H)
    sys.stdout.write(harness.report_summary(report))
    return 0


def _save_field(cfg, tag, u):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{tag}_solution.npy"
    np.save(path, u)
    print(f"wrote {path}")


def cmd_table(args, family):
    cfg = make_config(args, family)
    if args.check_resolution:
        for H in (cfg.H_list if family != "contrast" else (cfg.contrast_H,)):
            mesh = cfg.mesh(H)
            fld = generate(cfg.model, mesh) if family not in ("homogeneous", "wave") else \
                generate(dataclasses.replace(cfg.model, kind=ModelKind.HOMOGENEOUS), mesh)
            aux = cem.compute_auxiliary(mesh, fld, cfg.k, cfg.l)
            _print_resolution(cfg, aux, fld, H)
    report = harness.run(cfg)
    name = [n for n, f in TABLES.items() if f == family][0]
    csv_path, txt_path = harness.emit_report(report, Path(cfg.output_dir) / name, cfg.timings)
    sys.stdout.write(harness.report_summary(report))
    print(f"wrote {csv_path} and {txt_path}")
    return 0


def cmd_decay(args):
    cfg = make_config(args, "homogeneous")
    H = cfg.H_list[0]
    mesh = cfg.mesh(H)
    fld = generate(cfg.model, mesh)
    aux = cem.compute_auxiliary(mesh, fld, cfg.k, cfg.l)
    nc = mesh.n_coarse_per_axis
    i = args.element if args.element is not None else mesh.coarse_index(*(nc // 2,) * 3)
    if args.check_resolution:
        _print_resolution(cfg, aux, fld, H)
    prof = cem.decay_profile(mesh, fld, cfg.k, H, aux, i, args.mode, cfg.m_list, cfg.strict)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "decay.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["m", "err_a", "err_pi_s"])
        for m, ea, es in prof:
            w.writerow([m, f"{ea:.6e}", f"{es:.6e}"])
    for m, ea, es in prof:
        print(f"m={m}  |T phi - T_m phi|_a = {ea:.4e}  |pi(.)|_s = {es:.4e}")
    print(f"wrote {path}")
    return 0


def cmd_spectra(args):
    cfg = make_config(args, "homogeneous")
    H = cfg.H_list[0]
    mesh = cfg.mesh(H)
    fld = generate(cfg.model, mesh)
    aux = cem.compute_auxiliary(mesh, fld, cfg.k, cfg.l)
    table = aux.eigenvalue_table()
    for i, row in enumerate(table):
        print(f"element {i}: " + " ".join(f"{v:.10e}" for v in row))
    print(f"Lambda = {aux.Lambda:.10e}")
    if args.check_resolution:
        _print_resolution(cfg, aux, fld, H)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "spectra.csv", table, delimiter=",", fmt="%.10e",
               header=",".join(f"lambda_{j + 1}" for j in range(table.shape[1])), comments="")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(exc, file=sys.stderr)
        return 2
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "solve":
            return cmd_solve(args)
        if args.command in TABLES:
            return cmd_table(args, TABLES[args.command])
        if args.command == "decay":
            return cmd_decay(args)
        return cmd_spectra(args)
    except (ConfigError, CoefficientError, MeshSizeError) as exc:
        print(f"cemaxwell: configuration error: {exc}", file=sys.stderr)
        return 2
    except (SolverError, OSError) as exc:
        print(f"cemaxwell: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
