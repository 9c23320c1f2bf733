"""Command line entry point: ``feel run`` and ``feel synth``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys

from .dataset import SynthConfig, generate_synthetic, save_features, save_ground_truth
from .pipeline import PipelineConfig, emit_reports, load_config, run_pipeline

log = logging.getLogger("feel")


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="feel", description="Unsupervised temporal action localization.")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the iterative pipeline and write reports")
    run.add_argument("--config", help="JSON file mirroring PipelineConfig")
    src = run.add_mutually_exclusive_group()
    src.add_argument("--features", help="FEAT1 snippet-feature file")
    src.add_argument("--synth", action="store_true", help="use a synthetic dataset")
    run.add_argument("--gt", help="ground-truth JSONL (with --features)")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--seed", type=int)
    run.add_argument("--mode", choices=["constant", "variable"])
    run.add_argument("--imax", type=int)
    run.add_argument("--mu", type=float)
    run.add_argument("--no-cci", action="store_true")
    run.add_argument("--no-iis", action="store_true")
    run.add_argument("--snippetwise", action="store_true")
    run.add_argument("--cola-utal", action="store_true", help="plain baseline: one round, no re-ranking or selection")
    run.add_argument("--overwrite", action="store_true")
    run.add_argument("--dump-debug", action="store_true", help="write per-iteration matrices under OUT/debug")
    run.add_argument("-v", "--verbose", action="store_true")

    syn = sub.add_parser("synth", help="write a synthetic dataset as FEAT1 + JSONL")
    syn.add_argument("--out-features", required=True)
    syn.add_argument("--out-gt", required=True)
    syn.add_argument("--config", help="JSON object of SynthConfig fields")
    syn.add_argument("--seed", type=int)
    return ap


def build_config(args) -> PipelineConfig:
    """File values first, then any flag the user actually passed."""
    base = load_config(args.config) if args.config else PipelineConfig()
    over = {}
    if args.features:
        over.update(features=args.features, synth=None)
    if args.gt:
        over["ground_truth"] = args.gt
    if args.synth:
        over.update(features=None, synth=base.synth if base.synth is not None else {})
    for flag, key in (("seed", "seed"), ("mode", "mode"), ("imax", "I_max"), ("mu", "mu")):
        if getattr(args, flag) is not None:
            over[key] = getattr(args, flag)
    for flag in ("no_cci", "no_iis", "snippetwise", "cola_utal", "dump_debug"):
        if getattr(args, flag):
            over[flag] = True
    cfg = dataclasses.replace(base, **over)
    if cfg.synth is not None and args.seed is not None:
        cfg.synth = {**cfg.synth, "seed": args.seed}
    if cfg.synth is None and cfg.features is None:
        raise ValueError("no data source: pass --features, --synth, or a config naming one")
    return cfg


def _run(args) -> int:
    cfg = build_config(args)
    debug = f"{args.out}/debug" if cfg.dump_debug else None
    result = run_pipeline(cfg, debug_dir=debug)
    paths = emit_reports(result, args.out, overwrite=args.overwrite)
    summary = {"status": "ok", "files": [str(p) for p in paths]}
    if result.report is not None:
        summary.update(average_map=result.report.average_map, nmi=result.report.nmi)
    print(json.dumps(summary))
    return 0


def _synth(args) -> int:
    fields = json.loads(open(args.config).read()) if args.config else {}
    if args.seed is not None:
        fields["seed"] = args.seed
    for key in ("actions_per_video", "action_length"):
        if key in fields:
            fields[key] = tuple(fields[key])
    ds, gt = generate_synthetic(SynthConfig(**fields))
    save_features(ds, args.out_features)
    save_ground_truth(gt, args.out_gt)
    print(json.dumps({"status": "ok", "videos": len(ds.videos), "K": ds.K}))
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args) if args.command == "run" else _synth(args)
    except Exception as exc:
        err = {"status": "error", "type": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "iteration", None) is not None:
            err["iteration"] = exc.iteration
        print(json.dumps(err), file=sys.stderr)
        return 2 if isinstance(exc, (ValueError, FileExistsError, FileNotFoundError)) else 1


if __name__ == "__main__":
    sys.exit(main())
