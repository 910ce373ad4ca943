"""Command-line entry points for the experiment harness."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import harness, intel
from .util import write_csv


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, default=None, help="JSON config overriding the defaults")
    parser.add_argument("--out", type=Path, default=Path("results"), help="output directory for CSV files")
    parser.add_argument("--seed", type=int, default=None, help="override the master seed")
    parser.add_argument("--threads", type=int, default=1, help="worker processes for trial fan-out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selquant",
                                     description="Sensor selection / quantization experiment harness")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
        ("bound", "exact vs truncated error study over network size"),
        ("sweep", "memoryless method comparison over correlation and active fraction"),
        ("temporal", "filtered NMSE evolution over frames"),
        ("consistency", "analytic vs simulated full-chain check"),
    ]:
        p = sub.add_parser(name, help=help_text)
        _add_common(p)
    p = sub.add_parser("intel-prepare", help="ingest a readings file into a model directory")
    _add_common(p)
    p.add_argument("--readings", type=Path, required=True, help="whitespace-separated readings file")
    p = sub.add_parser("intel-run", help="run the real-data experiments from a model directory")
    _add_common(p)
    p.add_argument("--model-dir", type=Path, required=True)
    return parser


def _load_cfg(args) -> dict:
    overrides = {"master_seed": args.seed} if args.seed is not None else None
    return harness.load_config(args.config, overrides)


def _prepare(args, cfg) -> None:
    icfg = cfg["intel"]
    with open(args.readings) as fh:
        readings, report = intel.parse_readings(fh, max_mote=icfg["max_mote"])
    panel = intel.bin_panel(readings, icfg["interval_len_s"], icfg["window_len_s"],
                            tuple(icfg["temp_bounds"]))
    theta_panel = intel.estimate_parameters(panel)
    model, moment_report = intel.estimate_moments(theta_panel)
    intel.save_model(model, args.out)
    diag = intel.model_diagnostics(model, theta_panel)
    write_csv(Path(args.out) / "diagnostics.csv",
              ["interval", "theta_bar", "theta_hat", "xi"],
              [(r["interval"], r["theta_bar"], r["theta_hat"], r["xi"]) for r in diag])
    summary = {
        "kept": report.kept, "skipped": report.skipped,
        "days": panel.days, "sensors": len(panel.sensor_ids),
        "dropped_outliers": panel.dropped_outliers,
        "alpha_excluded_days": moment_report.alpha_excluded_days,
        "model_dir": str(args.out),
    }
    print(json.dumps(summary, indent=2))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _load_cfg(args)
        args.out.mkdir(parents=True, exist_ok=True)
        if args.command == "bound":
            rows = harness.run_bound_study(cfg, args.out)
            print(f"bound study: {len(rows)} rows -> {args.out / 'bound_study.csv'}")
        elif args.command == "sweep":
            rows = harness.run_selection_sweep(cfg, args.out, workers=args.threads)
            print(f"selection sweep: {len(rows)} rows -> {args.out / 'selection_sweep.csv'}")
        elif args.command == "temporal":
            rows = harness.run_temporal_sweep(cfg, args.out)
            print(f"temporal sweep: {len(rows)} rows -> {args.out / 'temporal_sweep.csv'}")
        elif args.command == "consistency":
            results = harness.run_consistency(cfg, args.out)
            worst = max(abs(r["z"]) for r in results)
            print(json.dumps({"cases": len(results), "max_abs_z": worst}, indent=2))
        elif args.command == "intel-prepare":
            _prepare(args, cfg)
        elif args.command == "intel-run":
            harness.run_intel_experiments(cfg, args.model_dir, args.out)
            print(f"real-data experiments -> {args.out}")
    except Exception as exc:  # CLI boundary: report machine-readably, exit nonzero
        print(json.dumps({"error": type(exc).__name__, "detail": str(exc)}), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
