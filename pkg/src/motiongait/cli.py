"""Command-line entry point: synth, train, embed, eval, gradcheck.

Heavy imports happen inside the command handlers so MOTIONGAIT_THREADS can
cap the BLAS worker pool before numpy loads.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path


def _apply_thread_cap() -> None:
    cap = os.environ.get("MOTIONGAIT_THREADS")
    if not cap:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, cap)


def _add_config_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="FILE",
                        help="flat key=value config file")
    parser.add_argument("--profile", default="desk", choices=("desk", "full"),
                        help="preset scale (default: desk)")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key")
    parser.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    parser.add_argument("--no-mem", action="store_true",
                        help="disable the motion excitation stage")
    parser.add_argument("--no-ffe-local", action="store_true",
                        help="replace the local branch with the global one")
    parser.add_argument("--clip-len", type=int, metavar="L",
                        help="frames per excitation clip")
    parser.add_argument("--parts", type=int, metavar="N",
                        help="horizontal parts in the local branch")


def _resolve_config(args):
    from .config import resolve

    overrides: dict[str, str] = {}
    for item in args.overrides:
        if "=" not in item:
            from .errors import ConfigError

            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.no_mem:
        overrides["mem.enabled"] = "false"
    if args.no_ffe_local:
        overrides["ffe.local_enabled"] = "false"
    if args.clip_len is not None:
        overrides["mem.clip_len"] = str(args.clip_len)
    if args.parts is not None:
        overrides["ffe.num_parts"] = str(args.parts)
    return resolve(args.profile, args.config, overrides)


def cmd_synth(args) -> int:
    from . import data

    run = _resolve_config(args)
    views = tuple(int(v) for v in args.views.split(",")) if args.views else data.VIEWS
    manifest = data.synth_generate(
        args.out,
        num_subjects=args.subjects,
        views=views,
        nm=args.nm, bg=args.bg, cl=args.cl,
        frames_per_seq=args.frames,
        seed=run["seed"],
    )
    run.write_echo(args.out, extra={
        "command": "synth", "subjects": args.subjects,
        "frames_per_seq": args.frames, "views": ",".join(map(str, views)),
    })
    print(f"wrote {len(manifest['sequences'])} sequences under {args.out}")
    return 0


def cmd_train(args) -> int:
    from . import data, train, viz

    run = _resolve_config(args)
    index = data.load_dataset(args.data, train_subjects=run["data.train_subjects"])
    if not index.train_subjects:
        from .errors import ConfigError

        raise ConfigError("training split is empty")
    source = data.FrameSource(index, split="train")
    net_config = run.network_config(num_classes=len(index.train_subjects))
    train_config = run.train_config()
    out_dir = Path(args.out)
    every = max(1, train_config.iterations // 10)

    def progress(it, trip, ce, joint):
        if it == 1 or it % every == 0:
            print(f"iter {it:>6d}  triplet {trip:.4f}  ce {ce:.4f}  "
                  f"joint {joint:.4f}", flush=True)

    ckpt = train.train_loop(net_config, train_config, source, out_dir,
                            resume=args.resume, progress=progress)
    run.write_echo(out_dir, extra={"command": "train", "data": args.data})
    viz.save_loss_curve(train.read_loss_log(out_dir / "losses.csv"),
                        out_dir / "figures" / "loss_curve.png")
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_embed(args) -> int:
    import numpy as np

    from . import data, network
    from .autograd import Tensor
    from .evaluation import EmbeddingRecord, write_embeddings

    run = _resolve_config(args)
    header, arrays = network.load_checkpoint(args.checkpoint)
    net_config = network.NetworkConfig.from_dict(header["config"])
    params = network.restore_params(net_config, arrays)
    index = data.load_dataset(args.data, train_subjects=run["data.train_subjects"])
    infos = index.split(args.split)
    if not infos:
        from .errors import IngestionError

        raise IngestionError(f"split {args.split!r} holds no sequences")
    records = []
    for info in infos:
        frames = data.load_sequence_frames(info)
        sample = Tensor(frames[None, :, :, :].astype(np.float32))
        result = network.forward([sample], net_config, params, mode="eval")
        records.append(EmbeddingRecord(
            subject=info.subject,
            condition=info.condition,
            view=info.view,
            descriptor=network.descriptors(result)[0],
        ))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(out, records)
    run.write_echo(out.parent, name=out.name + ".config.echo", extra={
        "command": "embed", "checkpoint": args.checkpoint,
        "split": args.split, "count": len(records),
    })
    print(f"wrote {len(records)} descriptors to {out}")
    return 0


def cmd_eval(args) -> int:
    from . import viz
    from .evaluation import evaluate, read_embeddings, report_to_json, summarize

    run = _resolve_config(args)
    records = read_embeddings(args.embeddings)
    report = evaluate(records)
    text, _ = summarize(report)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(text)
    (out_dir / "report.json").write_text(report_to_json(report))
    if not args.no_figures:
        viz.save_rank1_heatmaps(report, out_dir / "figures")
    run.write_echo(out_dir, extra={"command": "eval",
                                   "embeddings": args.embeddings})
    print(text)
    for name, result in report.conditions.items():
        mean = result.mean
        shown = "n/a" if mean != mean else f"{mean:.1f}"
        print(f"{name} mean rank-1: {shown}")
    return 0


def cmd_gradcheck(args) -> int:
    from .verification import run_suite

    results, ok = run_suite(op_tolerance=args.tolerance,
                            model_tolerance=args.model_tolerance)
    for name, report in results:
        status = "PASS" if report.passed else "FAIL"
        print(f"{name:28s} max_rel={report.max_rel_err:.3e} {status}")
        if not report.passed:
            for line in report.lines():
                print(line)
    print("gradient verification:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motiongait",
        description="Gait recognition from silhouette sequences with "
                    "motion-excited spatio-temporal features.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic walker dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=8)
    p.add_argument("--frames", type=int, default=36)
    p.add_argument("--views", default="", help="comma list, default all 11")
    p.add_argument("--nm", type=int, default=6)
    p.add_argument("--bg", type=int, default=2)
    p.add_argument("--cl", type=int, default=2)
    _add_config_options(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_options(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("embed", help="extract descriptors from a checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train", choices=("train", "test", "all"))
    _add_config_options(p)
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("eval", help="cross-view rank-1 report from descriptors")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-figures", action="store_true")
    _add_config_options(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--model-tolerance", type=float, default=1e-4)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    _apply_thread_cap()
    from .errors import MotionGaitError

    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except MotionGaitError as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
