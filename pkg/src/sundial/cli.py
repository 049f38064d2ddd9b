"""Command-line entry points: synth, train, finetune, forecast, evaluate, gradcheck, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time

import numpy as np

from sundial import checkpoint, data, forecast, tensor as T, training
from sundial.config import PRESETS, TrainConfig, model_config
from sundial.model import SundialModel

log = logging.getLogger("sundial")


def _levels(text: str) -> tuple:
    if ".." in text:
        lo, hi = (float(v) for v in text.split(".."))
        n = int(round((hi - lo) / 0.1)) + 1
        return tuple(round(lo + 0.1 * i, 10) for i in range(n))
    return tuple(float(v) for v in text.split(","))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(args, argv: list, command: str, resolved: dict, inputs: dict, outputs: dict,
                    started: float) -> None:
    primary = next((p for p in outputs.values() if p), None)
    path = args.manifest or (f"{primary}.manifest.json" if primary else f"sundial-{command}.manifest.json")
    manifest = {
        "command": command,
        "argv": argv,
        "config": resolved,
        "seed": getattr(args, "seed", None),
        "inputs": inputs,
        "outputs": outputs,
        "wall_clock_s": round(time.time() - started, 3),
        "checksums": {k: _sha256(p) for k, p in {**inputs, **outputs}.items() if p and os.path.isfile(p)},
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=str)


def _train_config(args, mcfg) -> TrainConfig:
    min_ctx = args.min_context or mcfg.patch_len + mcfg.horizon
    max_ctx = args.max_context or mcfg.max_context
    return TrainConfig(batch_size=args.batch_size, steps=args.steps, lr_peak=args.lr,
                       warmup_steps=min(args.warmup, args.steps), weight_decay=args.weight_decay,
                       min_context=min_ctx, max_context=max_ctx, objective=getattr(args, "objective", "timeflow"),
                       seed=args.seed)


def _emit_curve(history, path, window: int = 50) -> None:
    losses = np.array([r[1] for r in history])
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss,smoothed_loss\n")
        for i, (step, loss, _, _) in enumerate(history):
            smooth = losses[max(0, i - window + 1): i + 1].mean()
            fh.write(f"{step},{loss:.9g},{smooth:.9g}\n")


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> dict:
    records = data.synth_corpus(args.seed, args.count, args.length, args.max_kernels)
    data.save_corpus(records, args.out)
    return {"resolved": vars(args), "inputs": {}, "outputs": {"out": args.out}}


def cmd_train(args) -> dict:
    mcfg = model_config(args.config).replace(head=args.objective, seed=args.seed)
    corpus = data.load_corpus(args.corpus)
    tcfg = _train_config(args, mcfg)
    model = SundialModel(mcfg)
    history = training.train(model, corpus, tcfg, log_path=args.loss_log)
    checkpoint.save(model, args.out_checkpoint)
    if args.emit_curves:
        _emit_curve(history, args.emit_curves)
    print(f"trained {tcfg.steps} steps; final loss {history[-1][1]:.4f}" if history else "trained 0 steps")
    return {"resolved": {"model": dataclasses.asdict(mcfg), "train": dataclasses.asdict(tcfg)},
            "inputs": {"corpus": args.corpus},
            "outputs": {"checkpoint": args.out_checkpoint, "loss_log": args.loss_log, "curves": args.emit_curves}}


def cmd_finetune(args) -> dict:
    base = checkpoint.load(args.checkpoint)
    corpus = data.load_corpus(args.corpus)
    tcfg = _train_config(args, base.cfg)
    tuned = training.fine_tune(base, corpus, tcfg, lr_scale=args.lr_scale, log_path=args.loss_log)
    checkpoint.save(tuned, args.out_checkpoint)
    return {"resolved": {"model": dataclasses.asdict(base.cfg), "train": dataclasses.asdict(tcfg),
                         "lr_scale": args.lr_scale},
            "inputs": {"checkpoint": args.checkpoint, "corpus": args.corpus},
            "outputs": {"checkpoint": args.out_checkpoint, "loss_log": args.loss_log}}


def cmd_forecast(args) -> dict:
    model = checkpoint.load(args.checkpoint)
    levels = _levels(args.levels)
    records = data.load_corpus(args.context_file)
    items = []
    for i, rec in enumerate(records):
        rng = np.random.default_rng([args.seed, i])
        items.append((rec.id, forecast.rolling_forecast(rec.values, args.horizon, model, args.samples,
                                                        args.steps, rng, levels)))
    forecast.write_forecasts(items, args.out, levels)
    return {"resolved": {"horizon": args.horizon, "samples": args.samples, "steps": args.steps,
                         "levels": levels, "model": dataclasses.asdict(model.cfg)},
            "inputs": {"checkpoint": args.checkpoint, "context_file": args.context_file},
            "outputs": {"out": args.out}}


def cmd_evaluate(args) -> dict:
    model = checkpoint.load(args.checkpoint)
    records = data.load_corpus(args.corpus)
    metrics = tuple(m.strip() for m in args.metrics.split(","))
    rows = forecast.evaluate_corpus(model, records, args.horizon, args.samples, args.steps, metrics, args.seed)
    forecast.write_report(rows, args.out)
    for rid, name, val in rows:
        if rid == "__all__":
            print(f"{name}: {val:.6g}")
    return {"resolved": {"horizon": args.horizon, "samples": args.samples, "steps": args.steps,
                         "metrics": metrics, "model": dataclasses.asdict(model.cfg)},
            "inputs": {"checkpoint": args.checkpoint, "corpus": args.corpus},
            "outputs": {"out": args.out}}


def cmd_gradcheck(args) -> dict:
    cfg = PRESETS["tiny"] if args.config_tiny or not args.config else model_config(args.config)
    cfg = cfg.replace(seed=args.seed)
    model = SundialModel(cfg)
    corpus = data.synth_corpus(args.seed, 4, 4 * (cfg.patch_len + cfg.horizon) + 16)
    tcfg = TrainConfig(batch_size=2, min_context=cfg.patch_len + cfg.horizon,
                       max_context=min(cfg.max_context, 3 * cfg.patch_len + cfg.horizon), seed=args.seed)
    batch = training.make_batch(corpus, cfg, tcfg, np.random.default_rng(args.seed))
    report = training.grad_check(model, batch, args.tolerance, args.params, args.seed)
    text = "\n".join(report.lines()) + "\n"
    sys.stdout.write(text)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    if not report.passed:
        raise SystemExit(1)
    return {"resolved": {"model": dataclasses.asdict(cfg), "tolerance": args.tolerance, "params": args.params},
            "inputs": {}, "outputs": {"out": args.out}}


def cmd_ablate(args) -> dict:
    from sundial.experiments import ablation

    corpus = data.load_corpus(args.corpus) if args.corpus else None
    rows = ablation(args.toggle, corpus=corpus, config=args.config, steps=args.steps, seed=args.seed,
                    horizon=args.horizon, n_samples=args.samples)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("variant,metric,value\n")
        for variant, name, val in rows:
            fh.write(f"{variant},{name},{val:.9g}\n")
    for row in rows:
        print(*row, sep="\t")
    return {"resolved": vars(args), "inputs": {"corpus": args.corpus}, "outputs": {"out": args.out}}


# -- parser --------------------------------------------------------------------

def _add_train_flags(p, default_steps: int) -> None:
    p.add_argument("--corpus", required=True)
    p.add_argument("--steps", type=int, default=default_steps)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--weight-decay", type=float, default=0.1)
    p.add_argument("--min-context", type=int, default=0, help="0 = patch_len + horizon")
    p.add_argument("--max-context", type=int, default=0, help="0 = model max_context")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-checkpoint", required=True)
    p.add_argument("--loss-log")
    p.add_argument("--emit-curves")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sundial", description=__doc__)
    ap.add_argument("--manifest", help="where to write the run manifest")
    ap.add_argument("--debug", action="store_true", help="assert finiteness after every tensor op")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a KernelSynth corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=200)
    p.add_argument("--length", type=int, default=1024)
    p.add_argument("--max-kernels", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model from scratch")
    p.add_argument("--config", default="toy", help=f"preset ({', '.join(PRESETS)}) or JSON file")
    p.add_argument("--objective", choices=("timeflow", "mse", "diffusion"), default="timeflow")
    _add_train_flags(p, 3000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lr-scale", type=float, default=0.1)
    _add_train_flags(p, 500)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("forecast", help="write quantile forecasts for each context series")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--context-file", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--levels", default="0.1..0.9")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="score held-out tails of each series")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--metrics", default="mse,mae,mase,wql,crps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the TimeFlow loss gradients")
    p.add_argument("--config-tiny", action="store_true", help="use the tiny preset (default)")
    p.add_argument("--config", help="preset or JSON file instead of the tiny preset")
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--params", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/evaluate a variant with one mechanism toggled off")
    p.add_argument("--toggle", choices=("rope", "pre_ln", "kv_cache"), required=True)
    p.add_argument("--corpus", help="defaults to a freshly synthesized corpus")
    p.add_argument("--config", default="toy")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--horizon", type=int, default=96)
    p.add_argument("--samples", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return ap


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else [str(a) for a in argv]
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    T.set_debug(args.debug)
    started = time.time()
    try:
        info = args.func(args)
    except SystemExit as e:
        return int(e.code or 0)
    except Exception as e:  # noqa: BLE001 - surface any failure as a diagnostic
        if args.verbose:
            raise
        print(f"sundial {args.command}: error: {e}", file=sys.stderr)
        return 1
    _write_manifest(args, argv, args.command, info["resolved"], info["inputs"], info["outputs"], started)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
