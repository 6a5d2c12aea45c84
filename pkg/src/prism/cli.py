"""Command line interface.

Subcommands:

  baseline         train and persist the fault-free reference runs for
                   one seed across the configured formats
  run              execute a single faulted run against its baseline
  sweep            execute the full campaign grid with resume support
  report           aggregate a results store into text, CSV and figures
  synth-signatures write the built-in corruption signature archetypes

Configuration files are flat UTF-8 ``key = value`` documents; every
flag listed here overrides the matching config key.  Exit codes: 0 on
success, 1 for usage or configuration errors, 2 for I/O errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .campaign import (
    CampaignConfig,
    CampaignError,
    ResultsStore,
    build_report,
    config_from_mapping,
    ensure_baseline,
    execute_cell,
    parse_config_file,
    run_baseline,
    run_sweep,
    sweep_cells,
    trace_path,
    write_trace_csv,
)
from .signatures import ARCHETYPES, save_signatures, synth_archetype
from .trainer import save_weights

__all__ = ["main", "build_parser"]


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with code 1 (argparse defaults to 2)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _comma_list(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip() != "")


def build_parser() -> _Parser:
    p = _Parser(prog="prism", description="fault-injection training campaigns")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("baseline", help="train fault-free reference runs")
    b.add_argument("--config", required=True, help="campaign config file")
    b.add_argument("--seed", required=True, type=int, help="training seed")
    b.set_defaults(func=cmd_baseline)

    r = sub.add_parser("run", help="one faulted run against its baseline")
    r.add_argument("--config", required=True, help="campaign config file")
    r.add_argument("--seed", required=True, type=int, help="training seed")
    r.add_argument("--rate", type=float, help="fault activation rate in (0, 1]")
    r.add_argument("--checkpoint-frac", type=float, help="fault onset as a fraction of total steps")
    r.add_argument("--rank", type=int, help="data-parallel rank hosting the fault")
    r.add_argument("--density", type=float, help="fraction of eligible tiles touched per activation")
    r.add_argument("--format", help="training number format")
    sig = r.add_mutually_exclusive_group()
    sig.add_argument("--signatures", help="corruption signature file (JSONL)")
    sig.add_argument("--archetypes", type=_comma_list, help="built-in signature archetypes, comma separated")
    r.add_argument("--no-nan-check", action="store_true", help="disable the non-finite gradient skip")
    r.add_argument("--out", required=True, help="output directory")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="execute the campaign grid")
    s.add_argument("--config", required=True, help="campaign config file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--resume", action="store_true", help="continue into an existing results store")
    s.set_defaults(func=cmd_sweep)

    t = sub.add_parser("report", help="aggregate a results store")
    t.add_argument("--store", required=True, help="results.jsonl path")
    t.add_argument("--csv", help="CSV output path (default: report.csv next to the store)")
    t.set_defaults(func=cmd_report)

    g = sub.add_parser("synth-signatures", help="write built-in signature archetypes")
    g.add_argument(
        "--archetypes",
        type=_comma_list,
        default=ARCHETYPES,
        help="comma separated archetype names (default: all built-ins)",
    )
    g.add_argument("--out", required=True, help="signature file to write (JSONL)")
    g.set_defaults(func=cmd_synth)

    return p


def _load_config(path: str) -> CampaignConfig:
    return config_from_mapping(parse_config_file(path))


def cmd_baseline(args) -> int:
    cfg = _load_config(args.config)
    arts = run_baseline(cfg, args.seed)
    for fmt in cfg.formats:
        art = arts[fmt]
        print(f"{art.run_id}: ppl={art.ppl:.6g} final_norm={art.final_norm:.6g} "
              f"snapshots={len(art.snapshot_steps)}")
    return 0


def _single_cell_config(cfg: CampaignConfig, args) -> CampaignConfig:
    """Collapse the campaign grid to the one cell this invocation asks
    for; CampaignConfig validation then covers the overrides too."""
    fmt = args.format if args.format is not None else cfg.formats[0]
    if args.rate is not None:
        rate = args.rate
    else:
        if isinstance(cfg.rates, str):
            raise CampaignError("config samples its rates; pass an explicit --rate")
        rate = cfg.rates[0]
    frac = args.checkpoint_frac if args.checkpoint_frac is not None else cfg.checkpoint_fracs[0]
    density = args.density if args.density is not None else cfg.densities[0]
    nan_check = False if args.no_nan_check else cfg.nan_check_variants[0]
    replacements = dict(
        formats=(fmt,),
        rates=(rate,),
        checkpoint_fracs=(frac,),
        densities=(density,),
        nan_check_variants=(nan_check,),
        seed_base=args.seed,
        seeds_per_cell=1,
        out_dir=args.out,
    )
    if args.rank is not None:
        replacements["rank"] = args.rank
    if args.signatures is not None:
        replacements["signatures_path"] = args.signatures
    if args.archetypes is not None:
        replacements["signatures_path"] = None
        replacements["archetypes"] = args.archetypes
    return dataclasses.replace(cfg, **replacements)


def cmd_run(args) -> int:
    cfg = _single_cell_config(_load_config(args.config), args)
    cfg.load_signatures()  # surface signature problems as usage errors
    (cell,) = sweep_cells(cfg)
    baseline = ensure_baseline(cfg, cell.fmt, cell.seed)
    rec, result = execute_cell(cfg, cell, baseline)

    out = Path(cfg.out_dir)
    write_trace_csv(trace_path(out, rec.run_id), rec)
    record_path = out / "runs" / f"{rec.run_id}.json"
    record_path.parent.mkdir(parents=True, exist_ok=True)
    record_path.write_text(json.dumps(rec.to_json(), indent=2), encoding="utf-8")
    weights_path = out / "weights" / f"{rec.run_id}.bin"
    weights_path.parent.mkdir(parents=True, exist_ok=True)
    save_weights(weights_path, result.params)

    ppl = "nan" if rec.final_ppl is None else f"{rec.final_ppl:.6g}"
    print(f"{rec.run_id}: outcome={rec.outcome.value} mode={rec.mode.value} "
          f"final_ppl={ppl} baseline_ppl={rec.baseline_ppl:.6g}")
    print(f"record: {record_path}")
    print(f"trace: {trace_path(out, rec.run_id)}")
    print(f"weights: {weights_path}")
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args.config)
    cfg = dataclasses.replace(cfg, out_dir=args.out)
    cfg.load_signatures()
    store_path = Path(cfg.out_dir) / "results.jsonl"
    if store_path.exists() and store_path.stat().st_size > 0 and not args.resume:
        raise CampaignError(
            f"{store_path} already holds results; pass --resume to continue"
        )

    def progress(i: int, n: int, rid: str) -> None:
        print(f"[{i + 1}/{n}] {rid}", flush=True)

    total = len(sweep_cells(cfg))
    store = run_sweep(cfg, progress=progress)
    print(f"{len(store)} records in {store.path} ({total} grid cells)")
    return 0


def cmd_report(args) -> int:
    store_path = Path(args.store)
    if not store_path.exists():
        raise FileNotFoundError(f"results store not found: {store_path}")
    store = ResultsStore(store_path)
    report = build_report(store.records())
    sys.stdout.write(report.to_text())
    csv_path = Path(args.csv) if args.csv else store_path.parent / "report.csv"
    report.write_csv(csv_path)
    print(f"csv: {csv_path}", file=sys.stderr)
    if report.rows:
        from .reportfig import render_report_figures

        for fig in render_report_figures(report.rows, csv_path.parent, stem=csv_path.stem):
            print(f"figure: {fig}", file=sys.stderr)
    return 0


def cmd_synth(args) -> int:
    sigs = [synth_archetype(name) for name in args.archetypes]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_signatures(out, sigs)
    print(f"wrote {len(sigs)} signatures to {out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CampaignError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
