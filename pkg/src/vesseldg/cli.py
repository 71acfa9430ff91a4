"""Command-line entry point.

Every subcommand resolves the experiment config (file, then flags), writes it
next to its outputs as ``config.yaml`` and exits 0 on success. Usage errors
exit 2; any other failure prints a one-line JSON error to stderr and exits 1.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import ExperimentConfig, load_config, save_config
from .data import default_specs, write_benchmark
from .fadf import load_prototypes
from .harness import (
    build_prototypes_from_checkpoint,
    evaluate,
    load_datasets,
    run_ablation,
    run_lodo,
    train,
)
from .model import load_checkpoint

log = logging.getLogger("vesseldg")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="YAML experiment config")
    p.add_argument("--seed", type=int, default=default, help="master seed")
    p.add_argument("--out-dir", default=default, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vesseldg", description="Domain-generalised vessel segmentation")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        _global_flags(p, suppress=True)
        return p

    p = add("generate-data", "write the synthetic benchmark as PNG folders")
    p.add_argument("--root", help="destination (default: <out-dir>/data)")

    for name, help_ in (("train", "train one model"), ("evaluate", "evaluate a checkpoint")):
        p = add(name, help_)
        p.add_argument("--protocol", choices=("intra", "lodo", "mixed"))
        p.add_argument("--target", type=int, help="target domain id (intra, lodo)")
        p.add_argument("--data-root", help="benchmark folder (default: generate in memory)")
        if name == "train":
            p.add_argument("--epochs", type=int)
        else:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--prototypes", help="prototype store (required when FADF is on)")

    p = add("build-prototypes", "compute the frequency prototype store")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-root")
    p.add_argument("--output", help="store path (default: next to the checkpoint)")

    for name, help_ in (("lodo", "leave-one-domain-out over all domains"),
                        ("ablate", "module and frequency-branch ablation sweep")):
        p = add(name, help_)
        p.add_argument("--data-root")
        p.add_argument("--epochs", type=int)
        if name == "ablate":
            p.add_argument("--protocol", choices=("lodo", "mixed"))
    return parser


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out_dir is not None:
        changes["out_dir"] = args.out_dir
    if getattr(args, "protocol", None):
        changes["protocol"] = args.protocol
    if getattr(args, "target", None) is not None:
        changes["target_domain"] = args.target
    cfg = cfg.replace(**changes) if changes else cfg
    if getattr(args, "data_root", None):
        cfg.data.root = args.data_root
    if getattr(args, "epochs", None):
        cfg.optim.epochs = args.epochs
    return cfg


def _generate(cfg: ExperimentConfig, args) -> Path:
    root = Path(args.root) if args.root else Path(cfg.out_dir) / "data"
    specs = default_specs()
    if cfg.data.domains is not None:
        specs = [s for s in specs if s.domain_id in set(cfg.data.domains)]
    write_benchmark(root, specs, cfg.data.n_train, cfg.data.n_test, cfg.component_seed("data"), cfg.data.size)
    save_config(root / "config.yaml", cfg)
    return root


def _train(cfg: ExperimentConfig) -> Path:
    if cfg.protocol in ("intra", "lodo") and cfg.target_domain is None:
        raise ValueError(f"protocol {cfg.protocol} needs --target")
    res = train(cfg, None, Path(cfg.out_dir) / "train")
    return res.checkpoint


def _prototypes(cfg: ExperimentConfig, args) -> Path:
    ckpt = Path(args.checkpoint)
    out = Path(args.output) if args.output else ckpt.parent / "prototypes.json"
    build_prototypes_from_checkpoint(ckpt, load_datasets(cfg), out)
    save_config(out.parent / "config.yaml", cfg)
    return out


def _evaluate(cfg: ExperimentConfig, args) -> Path:
    model, extra = load_checkpoint(args.checkpoint)
    sources = extra.get("source_domains")
    if sources is None:
        raise ValueError(f"{args.checkpoint}: checkpoint does not record its source domains")
    protos = load_prototypes(args.prototypes) if args.prototypes else None
    cfg.flags = model.flags
    datasets = load_datasets(cfg)
    if cfg.protocol != "mixed" and cfg.target_domain is None:
        raise ValueError(f"protocol {cfg.protocol} needs --target")
    report = evaluate(model, protos, datasets, cfg, sources)
    out = Path(cfg.out_dir) / "evaluate"
    report.save(out / "report.json")
    (out / "report.txt").write_text(report.table(model.flags.label()))
    save_config(out / "config.yaml", cfg)
    return out / "report.txt"


def run(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_usage(sys.stderr)
        return 2
    cfg = resolve_config(args)
    if args.command == "generate-data":
        out = _generate(cfg, args)
    elif args.command == "train":
        out = _train(cfg)
    elif args.command == "build-prototypes":
        out = _prototypes(cfg, args)
    elif args.command == "evaluate":
        out = _evaluate(cfg, args)
    elif args.command == "lodo":
        run_dir = Path(cfg.out_dir) / "lodo"
        run_lodo(cfg, None, run_dir)
        out = run_dir / "summary.txt"
    else:
        run_dir = Path(cfg.out_dir) / "ablate"
        run_ablation(cfg, None, run_dir)
        out = run_dir / "ablation.txt"
    print(out)
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(argv)
    except SystemExit as exc:  # argparse usage errors
        return exc.code if isinstance(exc.code, int) else 2
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
