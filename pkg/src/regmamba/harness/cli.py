"""Command-line entry point: ``regmamba {synth,train,eval,match,robustness,ablate,report}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from ..data import ImagePair, load_image, load_manifest, load_pairs, synth_dataset, write_synth
from .checkpoint import Checkpoint
from .config import RunConfig, desk_config, load_config
from .containers import save_array
from .evaluate import ModelPredictor, ablation_grid, ablation_suite, evaluate, ncc_predictor, robustness_sweep
from .report import load_metrics, write_ablation, write_report
from .training import model_from_checkpoint, train

log = logging.getLogger("regmamba")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else desk_config()
    if args.seed is not None:
        cfg.train.seed = args.seed
    return cfg


def _split(cfg: RunConfig, manifest: str | None):
    """(train, test) pairs: from a manifest (first n_train / next n_test records) or synthesized."""
    manifest = manifest or cfg.data.manifest
    d = cfg.data
    if manifest:
        pairs = load_pairs(load_manifest(manifest))
        return pairs[: d.n_train], pairs[d.n_train: d.n_train + d.n_test]
    return synth_dataset(d.synth, d.n_train), synth_dataset(d.synth, d.n_test, offset=d.n_train)


def _eval_pairs(cfg: RunConfig, manifest: str | None) -> list[ImagePair]:
    if manifest:
        return load_pairs(load_manifest(manifest))
    return _split(cfg, None)[1]


def cmd_synth(args) -> int:
    cfg = _config(args)
    n = args.n if args.n is not None else cfg.data.n_train + cfg.data.n_test
    path = write_synth(args.out_dir, synth_dataset(cfg.data.synth, n, offset=args.offset))
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    train_pairs, test_pairs = _split(cfg, args.manifest)
    resume = Checkpoint.load(args.resume) if args.resume else None
    if resume is not None:
        cfg = RunConfig.from_dict(resume.config)
        if args.epochs is not None:
            cfg.train.epochs = args.epochs
    ckpt = train(cfg, train_pairs, out_dir=args.out_dir, resume=resume, max_steps=args.max_steps,
                 eval_pairs=test_pairs)
    write_report_losses = Path(args.out_dir) / "loss_history.json"
    write_report_losses.write_text(json.dumps({"epoch_losses": ckpt.epoch_losses,
                                               "step_losses": [float(x) for x in ckpt.step_losses]}) + "\n")
    print(Path(args.out_dir) / "checkpoint_last.rmck")
    return 0


def _predictor(args):
    if args.checkpoint is None:
        return None, ncc_predictor
    ckpt = Checkpoint.load(args.checkpoint)
    return ckpt, ModelPredictor(model_from_checkpoint(ckpt))


def cmd_eval(args) -> int:
    torch.set_num_threads(1)
    cfg = _config(args)
    ckpt, pred = _predictor(args)
    if ckpt is not None:
        cfg = RunConfig.from_dict(ckpt.config)
    pairs = _eval_pairs(cfg, args.manifest)
    reports = {"model" if ckpt is not None else "ncc": evaluate(pairs, pred, args.thresholds or cfg.eval.thresholds)}
    if args.baseline and ckpt is not None:
        reports["ncc"] = evaluate(pairs, ncc_predictor, args.thresholds or cfg.eval.thresholds)
    losses = ckpt.step_losses if ckpt is not None else None
    for p in write_report(reports, args.out_dir, step_losses=losses):
        print(p)
    return 0


def cmd_match(args) -> int:
    torch.set_num_threads(1)
    ckpt, pred = _predictor(args)
    ref, tpl = load_image(args.optical), load_image(args.sar)
    res = pred(ref, tpl)
    if args.dump_features and ckpt is not None:
        out = Path(args.dump_features)
        out.mkdir(parents=True, exist_ok=True)
        model = pred.model
        with torch.no_grad():
            f_o, f_s = model(torch.from_numpy(ref.astype(np.float32))[None, None],
                             torch.from_numpy(tpl.astype(np.float32))[None, None], pred.pool)
        save_array(out / "F_O.rma", f_o)
        save_array(out / "F_S.rma", f_s)
    print(json.dumps(res.to_dict(), sort_keys=True))
    return 0


def cmd_robustness(args) -> int:
    torch.set_num_threads(1)
    ckpt, pred = _predictor(args)
    cfg = RunConfig.from_dict(ckpt.config) if ckpt is not None else _config(args)
    pairs = _eval_pairs(cfg, args.manifest)
    variances = args.variances or cfg.robustness.variances
    rows = robustness_sweep(pairs, pred, variances, cfg.robustness.seed)
    base = evaluate(pairs, pred, cfg.eval.thresholds)
    for p in write_report({"noiseless": base}, args.out_dir, robustness=rows):
        print(p)
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.n_train is not None:
        cfg.data.n_train = args.n_train
    if args.n_test is not None:
        cfg.data.n_test = args.n_test
    train_pairs, test_pairs = _split(cfg, args.manifest)
    results = ablation_suite(cfg, train_pairs, test_pairs, ablation_grid(), cfg.eval.thresholds)
    print(write_ablation(results, args.out_dir))
    return 0


def cmd_report(args) -> int:
    reports = {}
    for path in args.metrics:
        for name, rep in load_metrics(path).items():
            key = name if name not in reports else f"{Path(path).parent.name}/{name}"
            reports[key] = rep
    for p in write_report(reports, args.out_dir):
        print(p)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (default: desk-scale preset)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default="runs/latest")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="regmamba", description="Optical/SAR template matching with selective-scan features")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic corpus with a manifest")
    s.add_argument("--n", type=int, default=None)
    s.add_argument("--offset", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", parents=[common], help="train and checkpoint each epoch")
    t.add_argument("--manifest")
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.set_defaults(func=cmd_train)

    for name, fn, hlp in (("eval", cmd_eval, "evaluate a checkpoint (or the NCC baseline without one)"),
                          ("robustness", cmd_robustness, "noise-variance sweep")):
        e = sub.add_parser(name, parents=[common], help=hlp)
        e.add_argument("--checkpoint")
        e.add_argument("--manifest", help="evaluation manifest (default: synthetic held-out split)")
        if name == "eval":
            e.add_argument("--thresholds", type=float, nargs="+")
            e.add_argument("--baseline", action="store_true", help="also evaluate the NCC baseline")
        else:
            e.add_argument("--variances", type=float, nargs="+")
        e.set_defaults(func=fn)

    m = sub.add_parser("match", parents=[common], help="match one pair and print the result as JSON")
    m.add_argument("--checkpoint")
    m.add_argument("--optical", required=True)
    m.add_argument("--sar", required=True)
    m.add_argument("--dump-features", help="directory for F_O.rma / F_S.rma")
    m.set_defaults(func=cmd_match)

    a = sub.add_parser("ablate", parents=[common], help="train/evaluate the ablation grid")
    a.add_argument("--manifest")
    a.add_argument("--epochs", type=int)
    a.add_argument("--n-train", type=int)
    a.add_argument("--n-test", type=int)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", parents=[common], help="merge metrics.json files into one report")
    r.add_argument("metrics", nargs="+")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
