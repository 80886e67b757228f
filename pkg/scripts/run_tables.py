"""Run several experiment families in one go and write tableN.csv/.txt files.

    python scripts/run_tables.py --tables 1 4 --out results
    python scripts/run_tables.py --config configs/table5_contrast.toml
"""
import argparse
import logging
import time
from pathlib import Path

from cemaxwell import harness
from cemaxwell.cli import TABLE_DEFAULTS, TABLES


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--tables", nargs="*", type=int, default=[1, 2, 3, 4, 5])
    p.add_argument("--config", help="single TOML config; overrides --tables")
    p.add_argument("--out", default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--paper-scale", action="store_true")
    p.add_argument("--timings", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")

    flags = {"output_dir": args.out, "jobs": args.jobs, "timings": args.timings or None}
    if args.config:
        cfgs = [harness.load_config(args.config, flags)]
    else:
        cfgs = []
        for t in args.tables:
            family = TABLES[f"table{t}"]
            cfgs.append(harness.load_config(None, dict(flags, family=family), TABLE_DEFAULTS.get(family)))
    for cfg in cfgs:
        if args.paper_scale:
            cfg = harness.paper_scale(cfg)
        name = [n for n, f in TABLES.items() if f == cfg.family][0]
        t0 = time.perf_counter()
        report = harness.run(cfg)
        csv_path, _ = harness.emit_report(report, Path(cfg.output_dir) / name, cfg.timings)
        print(harness.report_summary(report))
        print(f"{name}: {time.perf_counter() - t0:.0f} s -> {csv_path}")


if __name__ == "__main__":
    main()
