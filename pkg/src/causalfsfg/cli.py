"""Command-line entry point.

    causalfsfg train   [--config FILE] [--set key=value ...] [--dry-run]
    causalfsfg eval    --checkpoint CKPT [--config FILE] [--set ...]
    causalfsfg ablate  [--config FILE] [--set ...]
    causalfsfg oracle  [--scm FILE]
    causalfsfg inspect [--checkpoint CKPT] [--config FILE] [--set ...]

Exit codes: 0 success, 1 usage/configuration error, 2 runtime/numerical failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import frontdoor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, TrainConfig, parse_config, to_dict
from .data import (ConfigurationError, SamplingError, generate_synthetic_dataset,
                   load_image_folder, sample_episode, split_classes, write_manifest)
from .reports import cost_as_dict, count_params_flops, export_heatmaps, export_metrics
from .training import NumericalError, evaluate, run_ablation, train

log = logging.getLogger("causalfsfg")


def build_data(cfg: RunConfig):
    d = cfg.data
    if d.source == "synthetic":
        dataset = generate_synthetic_dataset(d.synthetic)
    else:
        dataset = load_image_folder(d.path, d.image_size)
    split = split_classes(dataset.classes, d.split, d.split_seed)
    return dataset, split


def dry_run_config(cfg: TrainConfig) -> TrainConfig:
    """One epoch of two episodes, with tiny validation/test sweeps."""
    return dataclasses.replace(cfg, epochs=1, episodes_per_epoch=2, decay_epoch=1,
                               val_every=1, val_episodes=2, eval_episodes=2)


def cmd_train(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    tcfg = dry_run_config(cfg.train) if args.dry_run else cfg.train
    dataset, split = build_data(cfg)
    write_manifest(dataset, out / "dataset_manifest.json")
    result = train(tcfg, dataset, split, out, log_every=1)
    ckpt = out / "checkpoint.npz"
    save_checkpoint(ckpt, result.model, tcfg, result.velocity,
                    extra={"best_val": result.best_val, "best_epoch": result.best_epoch})
    report = evaluate(result.model, dataset, split.test, tcfg.eval_episodes, tcfg.n_test,
                      tcfg.k_test, tcfg.u_test, tcfg.seed + 2, tcfg)
    export_metrics(report, out, cfg.report_formats, stem="eval")
    print(f"checkpoint: {ckpt}")
    print(f"test accuracy: {report}")
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    if not cfg.checkpoint:
        raise ConfigurationError("eval needs --checkpoint")
    model, stored, _, _ = load_checkpoint(cfg.checkpoint)
    tcfg = cfg.train
    if dataclasses.asdict(tcfg.model) != dataclasses.asdict(stored.model):
        log.info("using model config stored in checkpoint")
    dataset, split = build_data(cfg)
    report = evaluate(model, dataset, split.test, tcfg.eval_episodes, tcfg.n_test, tcfg.k_test,
                      tcfg.u_test, tcfg.seed + 2, stored)
    export_metrics(report, cfg.output_dir, cfg.report_formats, stem="eval")
    print(f"test accuracy: {report}")
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    dataset, split = build_data(cfg)
    rows = run_ablation(cfg.train, dataset, split, cfg.output_dir)
    export_metrics(rows, cfg.output_dir, cfg.report_formats, stem="ablation")
    print(f"{'IMSE':>5} {'IMFR':>5}  accuracy")
    for r in rows:
        print(f"{'x' if r['use_imse'] else '':>5} {'x' if r['use_imfr'] else '':>5}  {r['report']}")
    return 0


def cmd_oracle(cfg: RunConfig, args) -> int:
    scm = frontdoor.load_scm(cfg.scm) if cfg.scm else frontdoor.confounded_scm()
    rows = frontdoor.compare(scm)
    np.set_printoptions(precision=6, suppress=True)
    print(f"{'x0':>3}  {'P(Y|do(x0)) truth':<28}{'frontdoor':<28}{'naive P(Y|x0)':<28}"
          f"{'TV fd':>10}{'TV naive':>10}")
    for r in rows:
        print(f"{r['x0']:>3}  {str(r['truth']):<28}{str(r['frontdoor']):<28}"
              f"{str(r['naive']):<28}{r['tv_frontdoor']:>10.2e}{r['tv_naive']:>10.4f}")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "oracle.json").write_text(json.dumps(
        [{k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in r.items()} for r in rows],
        indent=2))
    return 0


def cmd_inspect(cfg: RunConfig, args) -> int:
    out = Path(cfg.output_dir)
    tcfg = cfg.train
    model_cfg = tcfg.model
    model = None
    if cfg.checkpoint:
        model, stored, _, _ = load_checkpoint(cfg.checkpoint)
        model_cfg = stored.model
    cost = count_params_flops(model_cfg, tcfg.n_test, tcfg.k_test, tcfg.u_test)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cost.json").write_text(json.dumps(cost_as_dict(cost), indent=2))
    print(cost.summary())
    if model is not None:
        dataset, split = build_data(cfg)
        rng = np.random.default_rng(tcfg.seed)
        ep = sample_episode(dataset, split.test, tcfg.n_test, 1, 1, rng, augment_mode="test",
                            augment_config=tcfg.augment)
        manifest = export_heatmaps(model, ep.support[:args.samples], out / "heatmaps")
        print(f"heatmaps: {len(manifest['samples'])} samples in {out / 'heatmaps'}")
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "oracle": cmd_oracle,
            "inspect": cmd_inspect}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalfsfg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted override, e.g. train.lr=0.05")
        p.add_argument("--output-dir")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "inspect"):
            p.add_argument("--checkpoint")
        if name == "train":
            p.add_argument("--dry-run", action="store_true")
        if name == "oracle":
            p.add_argument("--scm", help="SCM definition JSON")
        if name == "inspect":
            p.add_argument("--samples", type=int, default=5)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    overrides = list(args.overrides)
    if args.output_dir:
        overrides.append(f"output_dir={args.output_dir}")
    if getattr(args, "checkpoint", None):
        overrides.append(f"checkpoint={args.checkpoint}")
    if getattr(args, "scm", None):
        overrides.append(f"scm={args.scm}")
    try:
        cfg = parse_config(args.config, overrides, command=args.command)
    except (ConfigurationError, OSError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    torch.set_num_threads(max(1, torch.get_num_threads()))
    try:
        return COMMANDS[args.command](cfg, args)
    except (ConfigurationError, CheckpointError, frontdoor.SCMError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 1
    except (NumericalError, SamplingError, frontdoor.EstimationError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
