"""Command-line entry point: ``pgsam <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__, harness
from .data import (
    SITE_PRESETS,
    SPLITS,
    export_samples,
    generate_phantoms,
    load_dataset,
    site_config,
)
from .decoder import VarianceTable, build_variance_table
from .exceptions import PGSAMError
from .text import SpatialPriorMask, build_spatial_prior


def _config(args) -> harness.RunConfig:
    cfg = harness.preset(args.preset)
    if args.config:
        cfg = harness.RunConfig.load(args.config, base=cfg)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise SystemExit(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value
    return cfg.updated(overrides)


def _dataset(args, cfg=None):
    need_reports = cfg is None or (cfg.use_tpm and cfg.prompt_mode == "expert")
    return load_dataset(args.data, require_reports=need_reports)


def _train_masks(args):
    data = load_dataset(args.data, require_reports=False)
    return [e.load()[1].pixels for e in data.split(args.split)]


def cmd_gen_phantoms(args):
    out = harness.resolve_output(args.out)
    samples = generate_phantoms(site_config(args.site, args.count, args.seed, missing_channel_prob=args.missing_prob))
    splits = [args.split] * len(samples) if args.split else None
    index = export_samples(out, samples, splits=splits, seed=args.seed)
    print(json.dumps({"root": str(out), "counts": index.counts(), "fingerprint": index.fingerprint()}))


def cmd_build_prior(args):
    prior = build_spatial_prior(_train_masks(args))
    out = harness.resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    prior.save(out)
    print(json.dumps({"path": str(out), "support_count": prior.support_count, "fallback": prior.fallback}))


def cmd_build_variance(args):
    table = build_variance_table(_train_masks(args), 2, args.max_variance)
    out = harness.resolve_output(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.save(out)
    print(json.dumps(table.to_json()))


def cmd_train(args):
    cfg = _config(args)
    data = _dataset(args, cfg)
    out = harness.resolve_output(args.out)
    prior = SpatialPriorMask.load(args.prior) if args.prior else None
    table = VarianceTable.load(args.variance_table) if args.variance_table else None
    result = harness.train(cfg, data, out, resume=args.resume, prior=prior, variance_table=table)
    est = result.estimator
    print(json.dumps({"checkpoint": str(result.checkpoint), "epochs": len(result.history),
                      "best_epoch": est.best_epoch_, "n_train": result.n_train}))


def cmd_eval(args):
    data = load_dataset(args.data, require_reports=False)
    report = harness.evaluate(args.checkpoint, data, args.split, harness.resolve_output(args.out), args.text_provider)
    sys.stdout.write(report.table_csv())


def cmd_predict(args):
    data = load_dataset(args.data, require_reports=False)
    matches = [e for e in data.entries if e.slice_id == args.slice_id]
    if not matches:
        raise PGSAMError(f"slice {args.slice_id!r} not found under {args.data}")
    slice_, _, report = matches[0].load()
    if args.no_report:
        report = None
    _, record = harness.predict(args.checkpoint, slice_.channels, report, harness.resolve_output(args.out), args.slice_id)
    print(json.dumps(record, sort_keys=True))


def cmd_ablate(args):
    cfg = _config(args)
    data = _dataset(args, cfg)
    prompt_seeds = args.prompt_seeds if args.prompt_seeds else None
    report = harness.ablate(cfg, data, tuple(args.seeds), prompt_seeds=prompt_seeds, out_dir=harness.resolve_output(args.out))
    sys.stdout.write(report.module_csv())
    sys.stdout.write(report.prompt_csv())


def cmd_sweep(args):
    cfg = _config(args)
    data = _dataset(args, cfg)
    report = harness.sweep_fraction(cfg, data, tuple(args.fractions), harness.resolve_output(args.out))
    sys.stdout.write(report.to_csv())


def _run_options(p):
    p.add_argument("--data", required=True, help="dataset root written by gen-phantoms")
    p.add_argument("--out", required=True, help=f"output directory (relative paths go under ${harness.OUTPUT_ROOT_ENV})")
    p.add_argument("--preset", default="desk", choices=sorted(harness.PRESETS))
    p.add_argument("--config", help="key = value run configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pgsam", description="Text-guided multi-sequence lesion segmentation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-phantoms", help="write synthetic multi-sequence phantoms with reports")
    p.add_argument("--out", required=True)
    p.add_argument("--site", default="site1", choices=sorted(SITE_PRESETS))
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", choices=SPLITS, help="put every sample in this split instead of 70/10/20")
    p.add_argument("--missing-prob", type=float, default=0.0, help="probability that a sequence is absent")
    p.set_defaults(func=cmd_gen_phantoms)

    for name, func, help_ in (
        ("build-prior", cmd_build_prior, "lesion-frequency prior from training masks"),
        ("build-variance", cmd_build_variance, "class-variance table from training masks"),
    ):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--split", default="train", choices=SPLITS)
        if name == "build-variance":
            p.add_argument("--max-variance", type=float, default=0.1)
        p.set_defaults(func=func)

    p = sub.add_parser("train", help="train and write best/last checkpoints")
    _run_options(p)
    p.add_argument("--resume", help="continue from a last.pt checkpoint")
    p.add_argument("--prior", help="spatial prior written by build-prior")
    p.add_argument("--variance-table", help="variance table written by build-variance")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-slice and per-modality metric report")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=SPLITS)
    p.add_argument("--out", required=True)
    p.add_argument("--text-provider", help="refuse unless the checkpoint used this provider")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one slice and write red overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--slice-id", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-report", action="store_true", help="ignore the slice's report")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("ablate", help="CAM/TPM grid and prompt-template comparison")
    _run_options(p)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--prompt-seeds", type=int, nargs="+", help="seeds for the prompt list (default: --seeds)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="DSC against training-sample fraction")
    _run_options(p)
    p.add_argument("--fractions", type=float, nargs="+", default=list(harness.SAMPLE_FRACTIONS))
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose > 1 else logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        args.func(args)
    except (PGSAMError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
