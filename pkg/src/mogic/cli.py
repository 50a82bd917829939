"""Command-line entry points: ``mogic <command> ...``.

Exit codes: 0 success, 1 configuration/usage error, 2 data or I/O error.
User errors print a single ``error: ...`` line on stderr, never a traceback.
The only environment input is ``MOGIC_THREADS`` (torch intra-op threads).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .autoencoder import AETrainResult, EmptyCorpusError, TooShortError
from .checkpoint import CheckpointError, load_checkpoint, restore_optimizer, save_checkpoint
from .config import TASKS, RunConfig, SampleConfig
from .eval.evaluator import CorpusTooSmallError, load_evaluator, save_evaluator, train_evaluator, write_report
from .model import MoGIC, build_items
from .motion_repr import InsufficientFramesError, MotionFormatError, extract_features, load_motion, save_motion
from .numerics import ConfigError
from .pipeline import build_model, evaluate_generator, fit_autoencoder, load_splits
from .synthdata import build_corpus
from .training import (
    INBETWEEN_MODES,
    GenerationInputs,
    TaskInputError,
    Trainer,
    build_inbetween_mask,
    finetune,
    generate,
)

log = logging.getLogger("mogic")

METRIC_FAMILIES = {
    "fid": ("fid",),
    "r_precision": ("r_precision_top1", "r_precision_top2", "r_precision_top3"),
    "matching_score": ("matching_score",),
    "diversity": ("diversity",),
    "bleu": ("bleu1", "bleu4"),
    "rouge": ("rouge_l",),
}
LOSS_COLUMNS = ("step", "epoch", "task", "loss_motion", "loss_intent", "lr")


class UsageError(Exception):
    """Bad argument combination or value (exit code 1)."""


class DataError(Exception):
    """Missing or malformed input data (exit code 2)."""


# -- helpers -------------------------------------------------------------------

def _overrides(pairs: list[str] | None) -> dict[str, str]:
    out = {}
    for p in pairs or []:
        key, sep, value = p.partition("=")
        if not sep:
            raise ConfigError(f"override {p!r} must look like section.key=value")
        out[key.strip()] = value.strip()
    return out


def _config(args) -> RunConfig:
    return RunConfig.load(getattr(args, "config", None), _overrides(getattr(args, "set", None)))


def _sample_config(args, base: SampleConfig) -> SampleConfig:
    return SampleConfig(
        iters=args.iters if args.iters is not None else base.iters,
        euler_steps=args.euler_steps if args.euler_steps is not None else base.euler_steps,
        noise_scale=args.noise_scale if args.noise_scale is not None else base.noise_scale,
        beam=base.beam,
    )


def _load_vision(path: str | None) -> np.ndarray | None:
    if path is None:
        return None
    p = Path(path)
    if p.suffix == ".npy":
        arr = np.load(p)
    else:
        arr = np.asarray(json.loads(p.read_text()), dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"vision file {path} must hold a (frames, 8) array")
    return arr.astype(np.float32)


def _seed_all(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def _model_from_ae(cfg: RunConfig, ae_ckpt: str, train_feats) -> MoGIC:
    ae_model, ck = load_checkpoint(ae_ckpt)
    if ck.config.ae != cfg.ae:
        raise ConfigError("[ae] section differs from the one the auto-encoder checkpoint was trained with")
    result = AETrainResult(model=ae_model.ae, stats=ae_model.feature_stats)
    return build_model(cfg, result, train_feats)


# -- commands ------------------------------------------------------------------

def cmd_synth(args) -> None:
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    if not 0 < args.min_seconds <= args.max_seconds:
        raise UsageError("need 0 < --min-seconds <= --max-seconds")
    manifest = build_corpus(args.n, args.out, seed=args.seed, duration_range=(args.min_seconds, args.max_seconds))
    print(manifest)


def cmd_train_ae(args) -> None:
    cfg = _config(args)
    _seed_all(args.seed)
    splits = load_splits(args.data)
    ae = fit_autoencoder(cfg, splits["train"], seed=args.seed, log=lambda ep, l: log.info("ae epoch %d loss %.5f", ep, l))
    model = build_model(cfg, ae, splits["train"].feats)
    save_checkpoint(args.out, model)
    print(args.out)


def cmd_train(args) -> None:
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    if args.resume:
        model, ck = load_checkpoint(args.resume)
        if args.config:
            raise UsageError("--resume uses the checkpoint's embedded config; adjust it with --set instead")
        over = _overrides(args.set)
        locked = sorted(k for k in over if k.partition(".")[0] not in ("train", "sample", "eval"))
        if locked:
            raise ConfigError(f"cannot change {locked} when resuming; only [train], [sample] and [eval] keys")
        cfg = RunConfig.from_ini(ck.config.to_ini(), over)
        model.cfg = cfg
    else:
        cfg = _config(args)
    _seed_all(cfg.train.seed)
    splits = load_splits(args.data)
    train = splits["train"]
    if not args.resume:
        if args.ae:
            model = _model_from_ae(cfg, args.ae, train.feats)
        else:
            ae = fit_autoencoder(cfg, train, seed=cfg.train.seed)
            model = build_model(cfg, ae, train.feats)
        log_path.write_text("")
    items = build_items(model, train.records, train.feats)
    trainer = Trainer(model, cfg.train, items, log_path=log_path)
    if args.resume:
        restore_optimizer(ck, trainer.opt)
        trainer.step, trainer.epoch = ck.step, ck.epoch
        # resumed runs draw from a stream keyed by (seed, epoch)
        trainer.rng = np.random.default_rng([cfg.train.seed, ck.epoch])
        trainer.gen = torch.Generator().manual_seed(cfg.train.seed * 100_003 + ck.epoch)

    def checkpoint(tr: Trainer) -> None:
        save_checkpoint(args.out, tr.model, tr.opt, step=tr.step, epoch=tr.epoch)
        last = tr.log[-1] if tr.log else {}
        log.info("epoch %d step %d loss_motion %s", tr.epoch, tr.step, last.get("loss_motion"))

    remaining = max(cfg.train.epochs - trainer.epoch, 0)
    trainer.fit(epochs=remaining, callback=checkpoint)
    save_checkpoint(args.out, model, trainer.opt, step=trainer.step, epoch=trainer.epoch)
    print(args.out)


def cmd_finetune(args) -> None:
    model, ck = load_checkpoint(args.ckpt)
    cfg = ck.config if args.config is None and not args.set else _config(args)
    _seed_all(cfg.train.seed)
    splits = load_splits(args.data)
    items = build_items(model, splits["train"].records, splits["train"].feats)
    log_path = Path(args.log) if args.log else None
    finetune(model, args.task, cfg.train, items, args.steps, log_path=log_path)
    save_checkpoint(args.out, model, step=ck.step + max(args.steps, 0), epoch=ck.epoch)
    print(args.out)


def cmd_sample(args) -> None:
    model, ck = load_checkpoint(args.ckpt)
    sample = _sample_config(args, ck.config.sample)
    inputs = GenerationInputs(text=args.text, vision=_load_vision(args.vision_from), seconds=args.seconds)
    res = generate(model, args.task, inputs, sample, seed=args.seed)
    save_motion(args.out, res.motion)
    print(args.out)


def cmd_inbetween(args) -> None:
    if not 0.0 < args.visible < 1.0:
        raise UsageError("--visible must lie strictly between 0 and 1")
    model, ck = load_checkpoint(args.ckpt)
    motion = load_motion(args.motion)
    sample = _sample_config(args, ck.config.sample)
    length = model.ae.latent_length(len(extract_features(motion)))
    if length < 2:
        raise DataError("motion is too short for in-betweening (needs at least 2 latent tokens)")
    spec = build_inbetween_mask(length, args.mode, args.visible)
    inputs = GenerationInputs(text=args.text, vision=_load_vision(args.vision), motion=motion, mask=spec)
    res = generate(model, "m2m", inputs, sample, seed=args.seed)
    save_motion(args.out, res.motion)
    if args.debug_mask:
        Path(args.debug_mask).write_text(json.dumps({
            "mode": args.mode,
            "length": length,
            "visible_fraction": args.visible,
            "masked": np.nonzero(spec.mask)[0].tolist(),
        }) + "\n")
    print(args.out)


def cmd_intent(args) -> None:
    model, ck = load_checkpoint(args.ckpt)
    sample = _sample_config(args, ck.config.sample)
    inputs = GenerationInputs(motion=load_motion(args.motion), vision=_load_vision(args.vision))
    res = generate(model, "ip", inputs, sample, seed=args.seed)
    Path(args.out).write_text(res.intention + "\n")
    if args.motion_out:
        save_motion(args.motion_out, res.motion)
    print(res.intention)


def cmd_eval(args) -> None:
    families = [f.strip() for f in args.metrics.split(",") if f.strip()]
    unknown = sorted(set(families) - set(METRIC_FAMILIES))
    if unknown:
        raise UsageError(f"unknown metric families {unknown}; choose from {sorted(METRIC_FAMILIES)}")
    model, ck = load_checkpoint(args.ckpt)
    cfg = ck.config
    splits = load_splits(args.data)
    if args.evaluator and Path(args.evaluator).exists():
        ev = load_evaluator(args.evaluator)
    else:
        tr = splits["train"]
        ev = train_evaluator(tr.feats, tr.captions, cfg.eval).model
        if args.evaluator:
            save_evaluator(args.evaluator, ev)
    split = splits[args.split]
    if not split.records:
        raise DataError(f"split {args.split!r} is empty")
    n = len(split.records) if args.limit is None else min(args.limit, len(split.records))
    items = build_items(model, split.records[:n], split.feats[:n])
    sample = _sample_config(args, cfg.sample)
    with_intent = bool({"bleu", "rouge"} & set(families))
    report = evaluate_generator(
        model, ev, items, split.feats[:n], sample, task=args.task, seed=args.seed,
        with_intent=with_intent, reps=args.reps,
    )
    keep = {k for f in families for k in METRIC_FAMILIES[f]}
    report = {k: v for k, v in report.items() if k in keep}
    report["meta"] = {"task": args.task, "split": args.split, "n": n, "seed": args.seed,
                      "iters": sample.iters, "euler_steps": sample.euler_steps,
                      "config_digest": cfg.digest()}
    write_report(args.report, report, cfg.to_ini())
    print(args.report)


def _read_log(path: str) -> list[dict]:
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            rows.append(json.loads(line))
    return rows


def cmd_export_plot(args) -> None:
    out = Path(args.out)
    if args.kind == "loss-curve":
        if not args.log:
            raise UsageError("loss-curve needs --log")
        rows = sorted(_read_log(args.log), key=lambda r: r["step"])
        with out.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(LOSS_COLUMNS)
            for r in rows:
                w.writerow(["" if r.get(c) is None else r.get(c) for c in LOSS_COLUMNS])
    elif args.kind == "ablation-table":
        if not args.report:
            raise UsageError("ablation-table needs at least one --report")
        groups: dict[str, list[dict]] = {}
        for p in args.report:
            rep = json.loads(Path(p).read_text())
            digest = RunConfig.from_ini(rep.get("config", "")).digest()
            groups.setdefault(digest, []).append(rep)
        metrics = sorted({k for reps in groups.values() for r in reps for k, v in r.items()
                          if isinstance(v, dict) and "mean" in v})
        with out.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["config_digest", "n_reports", *metrics])
            for digest in sorted(groups):
                reps = groups[digest]
                vals = []
                for m in metrics:
                    xs = [r[m]["mean"] for r in reps if m in r]
                    vals.append(f"{np.mean(xs):.6g}" if xs else "")
                w.writerow([digest, len(reps), *vals])
    else:  # argparse restricts choices; kept for direct callers
        raise UsageError(f"unknown plot kind {args.kind!r}")
    print(out)


# -- parser --------------------------------------------------------------------

def _add_config(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI config file (defaults used for missing keys)")
    p.add_argument("--set", action="append", metavar="SEC.KEY=VALUE", help="config override, repeatable")


def _add_sampling(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iters", type=int, help="masked decoding passes (config default 17)")
    p.add_argument("--euler-steps", type=int, help="Euler steps per pass (config default 10)")
    p.add_argument("--noise-scale", type=float, help="0 = probability-flow ODE, >0 = SDE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mogic", description="Desk-scale multimodal motion generation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--min-seconds", type=float, default=3.0)
    p.add_argument("--max-seconds", type=float, default=8.0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train-ae", help="train the motion auto-encoder")
    p.add_argument("--data", required=True, help="corpus manifest.jsonl")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    _add_config(p)
    p.set_defaults(func=cmd_train_ae)

    p = sub.add_parser("train", help="joint multi-task training")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ae", help="auto-encoder checkpoint from train-ae (trained inline if omitted)")
    p.add_argument("--resume", help="checkpoint with optimizer state to continue from")
    p.add_argument("--log", help="JSON-lines step log (default: <out>.log.jsonl)")
    _add_config(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training on a single task")
    p.add_argument("--task", choices=TASKS, required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--log")
    _add_config(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("sample", help="generate motion from text and/or vision")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", choices=("l2m", "vl2m", "v2m"), default="l2m")
    p.add_argument("--text")
    p.add_argument("--vision-from", help="per-second descriptors (.npy or JSON, shape frames x 8)")
    p.add_argument("--seconds", type=float, help="clip length (default: from vision, else 4 s)")
    p.add_argument("--out", required=True, help="output .mof")
    _add_sampling(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("inbetween", help="complete a partially visible motion")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=INBETWEEN_MODES, required=True)
    p.add_argument("--visible", type=float, required=True, help="visible fraction in (0, 1)")
    p.add_argument("--motion", required=True, help="input .mof")
    p.add_argument("--text")
    p.add_argument("--vision")
    p.add_argument("--out", required=True)
    p.add_argument("--debug-mask", help="write the latent mask as JSON")
    _add_sampling(p)
    p.set_defaults(func=cmd_inbetween)

    p = sub.add_parser("intent", help="predict the intention of an observed motion prefix")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--motion", required=True)
    p.add_argument("--vision")
    p.add_argument("--out", required=True, help="text file for the predicted caption")
    p.add_argument("--motion-out", help="optional .mof for the completed motion")
    _add_sampling(p)
    p.set_defaults(func=cmd_intent)

    p = sub.add_parser("eval", help="metrics report for a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="output JSON")
    p.add_argument("--metrics", default=",".join(METRIC_FAMILIES), help="comma-separated metric families")
    p.add_argument("--evaluator", help="evaluator weights; trained on the train split and saved here if missing")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--task", choices=("l2m", "vl2m", "v2m"), default="l2m")
    p.add_argument("--limit", type=int)
    p.add_argument("--reps", type=int, help="bootstrap repetitions (config default)")
    _add_sampling(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-plot", help="CSV tables for external plotting")
    p.add_argument("--kind", choices=("loss-curve", "ablation-table"), required=True)
    p.add_argument("--log")
    p.add_argument("--report", action="append")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_plot)
    return parser


def _set_threads() -> None:
    raw = os.environ.get("MOGIC_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"MOGIC_THREADS must be a positive integer, got {raw!r}")
    torch.set_num_threads(n)


_CONFIG_ERRORS = (ConfigError, UsageError, TaskInputError)
_DATA_ERRORS = (
    OSError,
    DataError,
    CheckpointError,
    MotionFormatError,
    InsufficientFramesError,
    TooShortError,
    EmptyCorpusError,
    CorpusTooSmallError,
    json.JSONDecodeError,
    KeyError,
)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _set_threads()
        args.func(args)
    except _CONFIG_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except _DATA_ERRORS as e:
        msg = f"malformed input: missing field {e}" if isinstance(e, KeyError) else (str(e) or type(e).__name__)
        print(f"error: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
