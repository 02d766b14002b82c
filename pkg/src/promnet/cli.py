"""Command-line entry point: ``promnet <command> [flags]``.

Exit codes: 0 success, 1 runtime/I-O error, 2 usage error, 3 verification failure.
Every command writes ``<command>.manifest.json`` under ``--out-dir``.
"""
from __future__ import annotations

import argparse
import contextlib
import datetime as _dt
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_VERIFY = 0, 1, 2, 3
LARGE_BATCH = 64
DESK_BATCH = 8


class UsageError(Exception):
    pass


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


@contextlib.contextmanager
def thread_limit(n: int | None):
    if n is None:
        env = os.environ.get("PROMNET_THREADS")
        n = int(env) if env else None
    if n is None:
        yield None
        return
    if n < 1:
        raise UsageError(f"--threads must be >= 1, got {n}")
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield n


def write_manifest(out_dir: Path, command: str, config: dict, seed, started: str, artifacts: dict) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "artifacts": artifacts,
        "engine_version": __version__,
        "argv": sys.argv[1:],
    }
    path = out_dir / f"{command}.manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n", encoding="utf-8")
    return path


def _families(text: str) -> tuple[str, ...]:
    from .data import FAMILIES

    fams = tuple(f.strip() for f in text.split(",") if f.strip())
    bad = [f for f in fams if f not in FAMILIES]
    if bad or not fams:
        raise argparse.ArgumentTypeError(f"unknown family {bad or text!r}; choose from {', '.join(FAMILIES)}")
    return fams


def _probability(text: str) -> float:
    p = float(text)
    if not 0.0 <= p <= 1.0:
        raise argparse.ArgumentTypeError(f"probability must lie in [0, 1], got {p}")
    return p


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args, out_dir: Path) -> tuple[dict, dict]:
    from .data import TRACKING_TARGETS, GeneratorConfig, generate_dataset, target_to_scene, write_dataset

    holdout = tuple(args.holdout) if args.holdout else ()
    families = args.families
    for h in holdout:
        if h not in families:
            families = families + (h,)
    goals = tuple(target_to_scene(*g) for g in TRACKING_TARGETS) if args.tracking_goals else None
    cfg = GeneratorConfig(families=families, count=args.count, length=args.length, size=args.size,
                          base_seed=args.seed, holdout=holdout, duplicate=args.duplicate,
                          textured=not args.plain, goals=goals)
    ds = generate_dataset(cfg)
    path = out_dir / args.out
    write_dataset(ds, path)
    n_train = len(ds.indices("train"))
    print(f"wrote {len(ds)} sequences ({n_train} train / {len(ds) - n_train} test) to {path}")
    return vars(cfg) | {"goals": goals}, {"dataset": str(path)}


def _train_model(args):
    from .model import FcLstm, FcLstmConfig, PromNet, PromNetConfig

    if args.model == "promnet":
        return PromNet(PromNetConfig(scale=args.scale, seed=args.seed, peephole=args.peephole))
    return FcLstm(FcLstmConfig(hidden=args.hidden, seed=args.seed))


def cmd_train(args, out_dir: Path) -> tuple[dict, dict]:
    from .checkpoint import parameter_payload_bytes, save_checkpoint
    from .data import read_dataset
    from .optim import RmsPropState, TrainConfig, train_epoch

    ds = read_dataset(args.data)
    train_ds = ds.split("train")
    batch = LARGE_BATCH if args.paper_batch else args.batch
    tcfg = TrainConfig(batch_size=batch, epochs=args.epochs, seed=args.seed,
                       teacher_forcing_prob=args.teacher_forcing, precision=args.precision,
                       clip_norm=args.clip, window_stride=args.window_stride, checkpoint_every=args.checkpoint_every)
    with T.precision(args.precision):
        net = _train_model(args)
        if (train_ds.shape[2], train_ds.shape[3]) != (net.config.input_h, net.config.input_w):
            raise ValueError(f"dataset frames {train_ds.shape[2:]} do not match model input "
                             f"{(net.config.input_h, net.config.input_w)}")
        state = RmsPropState.for_model(net, lr=args.lr)
        log_path = out_dir / args.log
        new_log = not log_path.exists()
        ckpt = out_dir / args.checkpoint
        artifacts = {"checkpoint": str(ckpt), "loss_log": str(log_path)}
        with open(log_path, "a", encoding="utf-8") as log:
            if new_log:
                log.write("model,epoch,mean_loss,teacher_prob,batches\n")
            for epoch in range(tcfg.epochs):
                m = train_epoch(net, train_ds, tcfg, state, epoch)
                log.write(f"{args.model},{epoch + 1},{m.mean_loss:.8f},{m.teacher_prob:.4f},{len(m.batch_losses)}\n")
                log.flush()
                print(f"epoch {epoch + 1}/{tcfg.epochs}: loss {m.mean_loss:.6f}")
                if tcfg.checkpoint_every and (epoch + 1) % tcfg.checkpoint_every == 0 and epoch + 1 < tcfg.epochs:
                    p = out_dir / f"{Path(args.checkpoint).stem}.epoch{epoch + 1}.prck"
                    save_checkpoint(net, state, p, {"epoch": epoch + 1, "train": tcfg.to_dict()})
                    artifacts[f"checkpoint_epoch{epoch + 1}"] = str(p)
        size = save_checkpoint(net, state, ckpt, {"epoch": tcfg.epochs, "train": tcfg.to_dict()})
    counts = {"param_count": net.parameter_count(), "param_payload_bytes": parameter_payload_bytes(net),
              "checkpoint_bytes": size}
    print(f"{args.model}: {counts['param_count']} parameters, checkpoint {size} bytes -> {ckpt}")
    config = {"model": args.model, "model_config": net.config.to_dict(), "train": tcfg.to_dict(),
              "lr": args.lr, "data": str(args.data), **counts}
    return config, artifacts


def cmd_predict(args, out_dir: Path) -> tuple[dict, dict]:
    from .checkpoint import load_checkpoint
    from .data import SequenceDataset, import_frames, list_frames, to_bytes, write_dataset, write_pgm

    net, _, meta = load_checkpoint(args.checkpoint)
    cfg = net.config
    if args.horizon is not None and args.horizon != cfg.t_out:
        raise UsageError(f"--horizon {args.horizon} differs from the checkpoint's t_out={cfg.t_out}")
    paths = list_frames(args.input)
    if len(paths) < cfg.t_in:
        raise ValueError(f"{args.input}: need at least {cfg.t_in} input frames, found {len(paths)}")
    frames = import_frames(args.input, size=cfg.input_h)[-cfg.t_in:]
    pred = net.predict_sequence(frames[:, None, None])[:, 0, 0]
    out = out_dir / args.out
    if args.format == "pgm":
        out.mkdir(parents=True, exist_ok=True)
        written = []
        for t, frame in enumerate(to_bytes(pred)):
            p = out / f"pred_{t + 1:03d}.pgm"
            write_pgm(p, frame)
            written.append(str(p))
        artifacts = {"frames": written}
    else:
        seq = to_bytes(np.concatenate([frames, pred]))[None]
        write_dataset(SequenceDataset(seq, [{"family": "imported", "depth": "", "seed": 0, "goal": [0, 0],
                                             "split": "test"}]), out)
        artifacts = {"dataset": str(out)}
    print(f"predicted {pred.shape[0]} frames from {cfg.t_in} inputs ({paths[-cfg.t_in].name}..{paths[-1].name}) -> {out}")
    config = {"checkpoint": str(args.checkpoint), "input": str(args.input), "inputs_used": [p.name for p in paths[-cfg.t_in:]],
              "model": meta["kind"], "format": args.format}
    return config, artifacts


def cmd_evaluate(args, out_dir: Path) -> tuple[dict, dict]:
    from .checkpoint import load_checkpoint
    from .data import read_dataset
    from .metrics import emit_compare_csv, emit_csv, evaluate_horizon

    ds = read_dataset(args.data)
    idx = ds.indices(args.split)
    if not idx:
        raise ValueError(f"{args.data}: {args.split!r} split is empty")
    split = ds.subset(idx)
    reports = {}
    for path in [args.checkpoint] + ([args.compare] if args.compare else []):
        net, _, meta = load_checkpoint(path)
        tag = meta["kind"]
        if tag in reports:
            tag = f"{tag}{len(reports) + 1}"
        reports[tag] = evaluate_horizon(net, split, args.window_stride, model_tag=tag, dataset_tag=args.split)
        print(f"{tag} ({path}): mean PSNR {reports[tag].mean_psnr():.4f} dB, mean SSIM {reports[tag].mean_ssim():.4f}")
    out = out_dir / args.out
    if args.compare:
        emit_compare_csv(reports, out)
    else:
        emit_csv(next(iter(reports.values())), out)
    config = {"checkpoint": str(args.checkpoint), "compare": args.compare, "data": str(args.data),
              "split": args.split, "window_stride": args.window_stride,
              "mean_psnr": {k: r.mean_psnr() for k, r in reports.items()}}
    return config, {"csv": str(out)}


def cmd_gradcheck(args, out_dir: Path) -> tuple[dict, dict]:
    from .gradcheck import CHECKS, run_checks

    only = None
    if args.only:
        only = [n for part in args.only for n in part.split(",") if n]
        unknown = [n for n in only if n not in CHECKS]
        if unknown:
            raise UsageError(f"unknown check(s) {unknown}; available: {', '.join(CHECKS)}")
    if args.perturb and args.perturb not in T.PRIMITIVES:
        raise UsageError(f"--perturb: unknown primitive {args.perturb!r}")
    results = run_checks(only, perturb=args.perturb)
    width = max(len(r.name) for r in results)
    print(f"{'check':<{width}}  {'max rel err':>12}  {'tol':>8}  {'secs':>6}  result")
    for r in results:
        print(f"{r.name:<{width}}  {r.error:12.3e}  {r.tol:8.0e}  {r.seconds:6.2f}  {'PASS' if r.passed else 'FAIL'}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    config = {"only": only, "perturb": args.perturb,
              "results": {r.name: {"error": r.error, "tol": r.tol, "passed": r.passed} for r in results}}
    args._verify_failed = bool(failed)
    return config, {}


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out-dir", type=Path, default=Path("."), help="root for all outputs")
    common.add_argument("--threads", type=int, default=None,
                        help="cap BLAS threads (fallback: PROMNET_THREADS); 1 = fully serial")

    p = argparse.ArgumentParser(prog="promnet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"promnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="synthesize a moving-agent dataset")
    g.add_argument("--out", default="dataset.prds")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--families", type=_families, default=("straight", "arc", "incline_lr", "incline_rl"))
    g.add_argument("--count", type=_positive, default=20, help="sequences per family")
    g.add_argument("--length", type=_positive, default=30)
    g.add_argument("--size", type=_positive, default=64)
    g.add_argument("--holdout", type=_families, default=None, help="families placed entirely in the test split")
    g.add_argument("--tracking-goals", action="store_true", help="use the four tracking goal points")
    g.add_argument("--duplicate", action="store_true", help="store every trajectory twice")
    g.add_argument("--plain", action="store_true", help="flat background instead of texture")

    t = sub.add_parser("train", parents=[common], help="train PROM-Net or the FC-LSTM baseline")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--model", choices=("promnet", "fclstm"), default="promnet")
    t.add_argument("--lr", type=float, default=0.001)
    t.add_argument("--batch", type=_positive, default=DESK_BATCH)
    t.add_argument("--paper-batch", action="store_true", help=f"batch size {LARGE_BATCH}")
    t.add_argument("--epochs", type=int, default=1)
    t.add_argument("--scale", default="0.25", help="PROM-Net channel width multiplier")
    t.add_argument("--hidden", type=_positive, default=1024, help="FC-LSTM hidden units")
    t.add_argument("--peephole", action="store_true")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--teacher-forcing", type=_probability, default=None,
                   help="fixed probability; default schedules 1.0 then linear decay to 0")
    t.add_argument("--window-stride", type=_positive, default=1)
    t.add_argument("--clip", type=float, default=None, help="global gradient-norm clip")
    t.add_argument("--precision", choices=("float32", "float64"), default="float32")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--checkpoint", default="model.prck")
    t.add_argument("--log", default="train_log.csv")

    pr = sub.add_parser("predict", parents=[common], help="predict future frames from PGM inputs")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--input", type=Path, required=True, help="directory of P5 PGM frames")
    pr.add_argument("--out", default="predictions")
    pr.add_argument("--format", choices=("pgm", "prds"), default="pgm")
    pr.add_argument("--horizon", type=int, default=None)

    e = sub.add_parser("evaluate", parents=[common], help="per-step PSNR/SSIM on a dataset split")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--compare", type=Path, default=None, help="second checkpoint for a side-by-side CSV")
    e.add_argument("--split", choices=("train", "test"), default="test")
    e.add_argument("--window-stride", type=_positive, default=1)
    e.add_argument("--out", default="eval.csv")

    c = sub.add_parser("gradcheck", parents=[common], help="64-bit finite-difference verification")
    c.add_argument("--only", action="append", default=None, help="check name(s), comma separated")
    c.add_argument("--perturb", default=None, help=argparse.SUPPRESS)
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    started = _now()
    try:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        with thread_limit(args.threads) as threads:
            config, artifacts = COMMANDS[args.command](args, args.out_dir)
        config["threads"] = threads
        seed = getattr(args, "seed", None)
        write_manifest(args.out_dir, args.command, config, seed, started, artifacts)
    except UsageError as e:
        print(f"promnet {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, KeyError) as e:
        print(f"promnet {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    if getattr(args, "_verify_failed", False):
        return EXIT_VERIFY
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
