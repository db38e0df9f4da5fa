"""``oafuser`` command line: synth, train, eval, infer, flops.

Exit codes: 0 success, 1 usage or configuration error, 2 data/format
error, 3 numeric failure (non-finite value during training).
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__, lfio
from .carm import CarmConfig
from .errors import (ConfigError, DegenerateBatchError, DimensionError, FormatError, NonFiniteError,
                     UsageError)
from .model import (PRESETS, ModelConfig, count_model_flops, init_model, load_checkpoint,
                    save_checkpoint)
from .train import TrainConfig, evaluate, fit, predict

# Reference totals (GFLOPs at 480x480) keyed by view count, for the flops report.
REFERENCE_GFLOPS = {5: 188.6, 9: 192.9, 17: 201.5, 23: 205.8, 33: 216.5, 81: 271.2}


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = __version__
    duration_s: float = 0.0
    results: dict = field(default_factory=dict)

    def write(self, path: str | os.PathLike) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(self.__dict__, indent=2, sort_keys=True, default=str))
        os.replace(tmp, path)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_pair(text: str) -> tuple[int, int]:
    """'64x48' -> (64, 48); first number is the height (or U)."""
    try:
        a, b = text.lower().split("x")
        pair = (int(a), int(b))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected AxB, got {text!r}") from None
    if min(pair) < 1:
        raise argparse.ArgumentTypeError(f"extents must be positive, got {text!r}")
    return pair


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oafuser", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"oafuser {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic light-field dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--samples", type=int, required=True)
    s.add_argument("--size", type=parse_pair, default=(64, 64))
    s.add_argument("--grid", type=parse_pair, default=(9, 9))
    s.add_argument("--classes", type=int, default=4)
    s.add_argument("--disparity-min", type=float, default=lfio.DEFAULT_DISPARITY[0])
    s.add_argument("--disparity-max", type=float, default=lfio.DEFAULT_DISPARITY[1])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--angular-preset", action="store_true",
                   help="foreground classes differ only in disparity")
    s.add_argument("--manifest")

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS), default="tiny")
    t.add_argument("--pattern", choices=["diag9", "diag17", "all", "none"], default="diag9")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--batch", type=int, default=8)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--lr", type=float, default=TrainConfig.lr0)
    t.add_argument("--out")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--warmup-epochs", type=float, default=TrainConfig.warmup_epochs)
    t.add_argument("--scales", default=",".join(str(x) for x in TrainConfig.scales),
                   help="comma-separated rescale factors")
    t.add_argument("--flip-prob", type=float, default=TrainConfig.flip_prob)
    t.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    t.add_argument("--embed-mult", type=int, default=2)
    t.add_argument("--local-layers", type=int, default=3)
    t.add_argument("--parallel", action="store_true")
    t.add_argument("--figure")
    t.add_argument("--manifest")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--pattern", choices=["diag9", "diag17", "all", "none"], default="diag9")
    e.add_argument("--figure")
    e.add_argument("--manifest")

    i = sub.add_parser("infer", help="predict a label map for one sample")
    i.add_argument("--sample", required=True)
    i.add_argument("--ckpt", required=True)
    i.add_argument("--pattern", choices=["diag9", "diag17", "all", "none"], default="diag9")
    i.add_argument("--out", required=True)
    i.add_argument("--manifest")

    f = sub.add_parser("flops", help="static FLOP and parameter report")
    f.add_argument("--preset", choices=sorted(PRESETS), default="mitb4-like")
    f.add_argument("--size", type=parse_pair, default=(480, 480))
    f.add_argument("--views", type=int, action="append", required=True,
                   help="view count including the center; repeatable")
    f.add_argument("--classes", type=int, default=14)
    f.add_argument("--figure")
    f.add_argument("--manifest")
    return p


def _out(text: str = "") -> None:
    print(text, flush=True)


def _manifest_path(args, default: str | os.PathLike) -> Path:
    return Path(args.manifest) if args.manifest else Path(default)


def cmd_synth(args, man: RunManifest) -> Path:
    rng = (args.disparity_min, args.disparity_max)
    if rng[0] > rng[1]:
        raise ConfigError(f"--disparity-min {rng[0]} exceeds --disparity-max {rng[1]}")
    samples = lfio.synthesize(args.samples, tuple(args.size), tuple(args.grid), args.classes,
                              args.seed, rng, angular=args.angular_preset)
    paths = lfio.save_dataset(samples, args.out,
                              {"preset": "angular" if args.angular_preset else "random"})
    man.config = {"samples": args.samples, "size": list(args.size), "grid": list(args.grid),
                  "classes": args.classes, "disparity_range": list(rng),
                  "angular_preset": args.angular_preset, "generator_version": lfio.GENERATOR_VERSION}
    man.outputs = {"dataset": str(args.out), "samples": [str(p) for p in paths]}
    _out(f"wrote {len(paths)} samples to {args.out}")
    return _manifest_path(args, Path(args.out) / "run.json")


def _dataset_classes(samples: Sequence[lfio.LightFieldSample]) -> int:
    k = samples[0].manifest.get("classes")
    if k is None:
        k = int(max(int(s.labels[s.labels != lfio.IGNORE_LABEL].max(initial=0)) for s in samples)) + 1
    return int(k)


def cmd_train(args, man: RunManifest) -> Path:
    samples = lfio.load_dataset(args.data)
    try:
        scales = tuple(float(x) for x in args.scales.split(","))
    except ValueError:
        raise UsageError(f"--scales expects comma-separated numbers, got {args.scales!r}") from None
    tcfg = TrainConfig(lr0=args.lr, warmup_epochs=args.warmup_epochs, flip_prob=args.flip_prob,
                       scales=scales, epochs=args.epochs, batch=args.batch, seed=args.seed,
                       dtype=args.dtype)
    carm = CarmConfig(embed_mult=args.embed_mult, local_layers=args.local_layers, parallel=args.parallel)
    mcfg = ModelConfig.preset(args.preset, classes=_dataset_classes(samples), carm=carm,
                              pattern=args.pattern)
    state = init_model(mcfg, seed=args.seed, dtype=tcfg.np_dtype)
    history = fit(state, samples, tcfg, args.pattern, max_steps=args.max_steps,
                  log=lambda entry: _out(entry.line()))
    metrics = evaluate(state, samples, args.pattern, tcfg)
    _out(metrics.to_text())
    _out(metrics.to_keyvalue())
    man.config = {"train": tcfg.to_dict(), "model": mcfg.to_dict(), "max_steps": args.max_steps}
    man.inputs = {"data": str(args.data)}
    man.results = {"final_loss": history[-1].loss if history else None, "steps": len(history),
                   **{k: v for k, v in metrics.as_dict().items() if k != "confusion"}}
    if args.out:
        save_checkpoint(state, args.out)
        man.outputs["checkpoint"] = str(args.out)
    if args.figure:
        from .plotting import loss_figure
        man.outputs["figure"] = loss_figure([h.step for h in history], [h.loss for h in history],
                                            [h.lr for h in history], args.figure)
    default = Path(args.out + ".run.json") if args.out else Path("oafuser-train.run.json")
    return _manifest_path(args, default)


def cmd_eval(args, man: RunManifest) -> Path:
    samples = lfio.load_dataset(args.data)
    state = load_checkpoint(args.ckpt)
    metrics = evaluate(state, samples, args.pattern)
    _out(metrics.to_text())
    _out(metrics.to_keyvalue())
    man.config = {"model": state.config.to_dict(), "pattern": args.pattern}
    man.inputs = {"data": str(args.data), "checkpoint": str(args.ckpt)}
    man.results = metrics.as_dict()
    if args.figure:
        from .plotting import confusion_figure
        man.outputs["figure"] = confusion_figure(metrics.confusion, args.figure)
    return _manifest_path(args, "oafuser-eval.run.json")


def cmd_infer(args, man: RunManifest) -> Path:
    sample = lfio.load_sample(args.sample)
    state = load_checkpoint(args.ckpt)
    (labels,) = predict(state, [sample], args.pattern)
    lfio.write_pgm(args.out, labels)
    man.config = {"model": state.config.to_dict(), "pattern": args.pattern}
    man.inputs = {"sample": str(args.sample), "checkpoint": str(args.ckpt)}
    man.outputs = {"labels": str(args.out)}
    _out(f"wrote {args.out} ({labels.shape[0]}x{labels.shape[1]})")
    return _manifest_path(args, str(args.out) + ".run.json")


def cmd_flops(args, man: RunManifest) -> Path:
    mcfg = ModelConfig.preset(args.preset, classes=args.classes)
    reports = []
    for n in args.views:
        rep = count_model_flops(mcfg, tuple(args.size), n)
        reports.append(rep)
        _out(f"# preset={args.preset} size={args.size[0]}x{args.size[1]} views={n}")
        _out(rep.to_text())
        _out(rep.to_keyvalue())
        ref = REFERENCE_GFLOPS.get(n) if tuple(args.size) == (480, 480) and args.preset == "mitb4-like" else None
        if ref is not None:
            _out(f"reference_gflops={ref}")
        _out()
    man.config = {"model": mcfg.to_dict(), "size": list(args.size), "views": list(args.views)}
    man.results = {str(r.n_views): {"total": r.total, "params": r.params,
                                    "marginal_per_view": r.marginal_per_view} for r in reports}
    if args.figure:
        from .plotting import flops_figure
        ref = REFERENCE_GFLOPS if args.preset == "mitb4-like" and tuple(args.size) == (480, 480) else None
        man.outputs["figure"] = flops_figure(reports, args.figure, ref)
    return _manifest_path(args, "oafuser-flops.run.json")


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer,
            "flops": cmd_flops}


def run(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"oafuser: usage error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    man = RunManifest(args.command, argv, {}, getattr(args, "seed", None))
    t0 = time.perf_counter()
    try:
        # overflow is reported through NonFiniteError with the op label, not numpy warnings
        with threadpool_limits(limits=1), np.errstate(over="ignore", invalid="ignore"):
            path = COMMANDS[args.command](args, man)
    except (UsageError, ConfigError) as exc:
        print(f"oafuser: error: {exc}", file=sys.stderr)
        return 1
    except (FormatError, DimensionError, DegenerateBatchError) as exc:
        print(f"oafuser: data error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteError as exc:
        print(f"oafuser: training aborted: {exc}", file=sys.stderr)
        return 3
    man.duration_s = time.perf_counter() - t0
    man.write(path)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
