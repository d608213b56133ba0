"""Command-line interface: ``famednet <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import haze
from .dataset import DatasetManifest, SynthConfig, depth_for_entry, synthesize_dataset, worker_count
from .files import atomic_write_text, list_images, load_image, load_weights, save_image, save_weights
from .guided import GuidedFilterParams
from .metrics import EvalReport, depth_level_stats, regularity_histogram
from .network import (
    FIXED_TEST_SIZE,
    NetConfig,
    count_flops,
    count_parameters,
    dehaze_image,
    predict_k,
    receptive_field,
)
from .train import TrainConfig, TrainingDiverged, train, write_loss_log

EPILOG = """environment:
  FAMED_THREADS   number of worker threads for BLAS, dataset synthesis and
                  evaluation (default 1)
"""


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _effective(name: str, **parts) -> None:
    print(f"{name} config: " + json.dumps(parts, sort_keys=True, default=str), flush=True)


def _add_net_flags(p):
    p.add_argument("--variant", choices=("ss", "gp", "lp"), default="gp")
    p.add_argument("--scales", type=int, default=None, help="pyramid levels (default 1 for ss, 3 otherwise)")
    p.add_argument("--feature-dim", type=int, default=32)
    p.add_argument("--pool", choices=("avg", "max"), default="avg")
    p.add_argument("--no-bn", action="store_true", help="drop batch normalization")
    p.add_argument("--front3x3", type=int, default=0, metavar="N",
                   help="prepend a 3x3 conv with N output channels to every encoder")


def _net_config(args) -> NetConfig:
    scales = args.scales if args.scales is not None else (1 if args.variant == "ss" else 3)
    return NetConfig(
        variant=args.variant, scales=scales, feature_dim=args.feature_dim, use_bn=not args.no_bn,
        pool_mode=args.pool, front_conv3x3_channels=args.front3x3,
    )


# ---------------------------------------------------------------- synth


def cmd_synth(args):
    cfg = SynthConfig(
        beta_range=(args.beta_min, args.beta_max), A_range=(args.A_min, args.A_max),
        splits=tuple(args.splits), seed=args.seed, depth_dir=args.depth_dir,
    )
    _effective("synth", clear_dir=args.clear_dir, out=args.out, **vars(cfg))
    manifest = synthesize_dataset(args.clear_dir, cfg, args.out)
    counts = {s: len(manifest.split(s)) for s in ("train", "val", "test")}
    print(f"wrote {len(manifest.entries)} pairs to {args.out} {counts}")


# ---------------------------------------------------------------- train


def cmd_train(args):
    net_cfg = _net_config(args)
    tc = TrainConfig(
        batch_size=args.batch_size, crop=args.crop, lr0=args.lr, lr_drop_points=tuple(args.lr_drops),
        lr_drop_factor=args.lr_drop_factor, momentum=args.momentum, weight_decay=args.weight_decay,
        alpha_scales=args.alpha_scales, alpha_fusion=args.alpha_fusion, total_iters=args.iters,
        seed=args.seed, log_every=args.log_every, checkpoint_every=args.checkpoint_every,
    )
    _effective("train", net=net_cfg.to_dict(), train=tc.to_dict(), manifest=args.manifest, split=args.split)
    dataset = DatasetManifest.load(args.manifest).pairs(args.split)
    if not dataset:
        raise ValueError(f"{args.manifest}: split {args.split!r} is empty")

    out = Path(args.out)

    def checkpoint(net, it):
        save_weights(net, out.with_name(f"{out.stem}.iter{it}{out.suffix}"))

    def progress(it, lr, loss):
        print(f"iter {it:7d}  lr {lr:.3g}  loss {loss:.6f}", flush=True)

    try:
        result = train(dataset, net_cfg, tc, checkpoint=checkpoint if tc.checkpoint_every else None,
                       progress=progress if not args.quiet else None)
    except TrainingDiverged as e:
        raise RuntimeError(f"training diverged: {e}") from e
    save_weights(result.net, out)
    if args.loss_log:
        write_loss_log(result.losses, args.loss_log)
    print(f"saved weights to {out}")


# ---------------------------------------------------------------- dehaze


def _gf_params(args):
    if args.no_gf:
        return None
    return GuidedFilterParams(radius=args.gf_radius, eps=args.gf_eps, downsample=args.gf_down)


def cmd_dehaze(args):
    net = load_weights(args.weights)
    gf = _gf_params(args)
    longest = args.longest or None
    _effective("dehaze", weights=args.weights, net=net.config.to_dict(),
               gf=None if gf is None else vars(gf), longest=longest)
    src = Path(args.input)
    if src.is_dir():
        out_dir = Path(args.output)
        jobs = [(p, out_dir / f"{p.stem}.png") for p in list_images(src)]
        if not jobs:
            raise ValueError(f"{src}: no PNG/PPM images found")
    else:
        jobs = [(src, Path(args.output))]
    for p, q in jobs:
        J = dehaze_image(net, load_image(p), gf=gf, longest=longest)
        save_image(J, q)
        print(f"{p} -> {q}")


# ---------------------------------------------------------------- eval


def _predict(method, net, I, gf, longest):
    if method == "hazy":
        return I
    if method == "dcp":
        return haze.dcp_baseline_dehaze(I.astype(np.float64)).J
    return dehaze_image(net, I, gf=gf, longest=longest)


def cmd_eval(args):
    gf = _gf_params(args)
    longest = args.longest or None
    report = EvalReport()
    if args.target:
        if not args.pred:
            raise UsageError("eval: --target requires --pred")
        _effective("eval", pred=args.pred, target=args.target)
        preds = {p.stem: p for p in list_images(args.pred)}
        targets = list_images(args.target)
        if not targets:
            raise ValueError(f"{args.target}: no PNG/PPM images found")
        for t in targets:
            if t.stem not in preds:
                raise FileNotFoundError(f"{args.pred}: no prediction for {t.name}")
            report.add(t.stem, load_image(preds[t.stem]), load_image(t))
    else:
        if not args.manifest:
            raise UsageError("eval: give either --pred/--target directories or --manifest")
        if args.method == "net" and not (args.weights or args.pred):
            raise UsageError("eval: --method net needs --weights (or --pred with precomputed outputs)")
        entries = DatasetManifest.load(args.manifest).split(args.split)
        if not entries:
            raise ValueError(f"{args.manifest}: split {args.split!r} is empty")
        net = load_weights(args.weights) if args.weights and not args.pred else None
        _effective("eval", manifest=args.manifest, split=args.split, method=args.method,
                   weights=args.weights, pred=args.pred, gf=None if gf is None else vars(gf), longest=longest)
        preds = {p.stem: p for p in list_images(args.pred)} if args.pred else {}
        for e in entries:
            target = load_image(e.clear)
            if args.pred:
                if e.hazy.stem not in preds:
                    raise FileNotFoundError(f"{args.pred}: no prediction for {e.hazy.name}")
                pred = load_image(preds[e.hazy.stem])
            else:
                pred = _predict(args.method, net, load_image(e.hazy), gf, longest)
            report.add(e.hazy.stem, pred, target, label=args.method)
    text = report.to_csv()
    if args.csv:
        atomic_write_text(args.csv, text)
    sys.stdout.write(text)


# ---------------------------------------------------------------- analyze


def cmd_depth_stats(args):
    if args.manifest:
        m = DatasetManifest.load(args.manifest, check_files=False)
        maps = [depth_for_entry(e, load_image(e.clear).shape[1:]) for e in m.entries]
    elif args.depth_dir:
        maps = [np.load(p) for p in sorted(Path(args.depth_dir).glob("*.npy"))]
    else:
        raise UsageError("analyze depth-stats: give --manifest or --depth-dir")
    if not maps:
        raise ValueError("no depth maps found")
    _effective("depth-stats", patch=args.patch, levels=args.levels, stride=args.stride, maps=len(maps))
    table = depth_level_stats(maps, patch=args.patch, levels=args.levels, stride=args.stride)
    at_least3 = float(table.frequencies[2:].sum())
    _emit(table.to_text() + f"# fraction of patches with >= 3 levels: {at_least3:.4f}\n", args.out)


def cmd_regularity(args):
    images = [load_image(p) for p in list_images(args.images)]
    if not images:
        raise ValueError(f"{args.images}: no PNG/PPM images found")
    if args.method == "dcp":
        table = regularity_histogram(images, "dark_channel", patch=args.patch, bins=args.bins)
    else:
        if not args.weights:
            raise UsageError("analyze regularity --method net needs --weights")
        net = load_weights(args.weights)
        table = regularity_histogram(images, "one_minus_inv_khat", provider=lambda I: predict_k(net, I, None),
                                     patch=args.patch, bins=args.bins)
    _effective("regularity", method=args.method, images=args.images, patch=args.patch, bins=args.bins)
    _emit(table.to_text() + f"# mass in lowest 4 bins: {table.mass_below(4):.4f}\n", args.out)


def _emit(text, out):
    if out:
        atomic_write_text(out, text)
    sys.stdout.write(text)


# ---------------------------------------------------------------- inspect


def cmd_inspect(args):
    cfg = load_weights(args.weights).config if args.weights else _net_config(args)
    h, w = args.size
    flops = count_flops(cfg, h, w)
    print(f"config: {json.dumps(cfg.to_dict(), sort_keys=True)}")
    print(f"params: {count_parameters(cfg)}")
    print(f"flops@{h}x{w} conv_macs: {flops.conv_macs}")
    print(f"flops@{h}x{w} all_ops: {flops.all_ops}")
    print(f"flops@{h}x{w} bn: {flops.bn_ops} relu: {flops.relu_ops} pool: {flops.pool_ops} resize: {flops.resize_ops}")
    print(f"receptive_field: {receptive_field(cfg)}")


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="famednet", description="Multi-scale K-estimation dehazing network.",
                epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="synthesize hazy/clear pairs", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    s.add_argument("clear_dir")
    s.add_argument("out")
    s.add_argument("--beta-min", type=float, default=0.6)
    s.add_argument("--beta-max", type=float, default=1.8)
    s.add_argument("--A-min", type=float, default=0.7)
    s.add_argument("--A-max", type=float, default=1.0)
    s.add_argument("--splits", type=float, nargs=3, default=(0.75, 0.0, 0.25), metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("--depth-dir", default=None, help="directory of <stem>.npy depth maps")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    d = TrainConfig()
    t = sub.add_parser("train", help="train a network", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("manifest")
    t.add_argument("out", help="weight file to write")
    _add_net_flags(t)
    t.add_argument("--split", default="train")
    t.add_argument("--seed", type=int, default=d.seed)
    t.add_argument("--iters", type=int, default=d.total_iters)
    t.add_argument("--batch-size", type=int, default=d.batch_size)
    t.add_argument("--crop", type=int, default=d.crop)
    t.add_argument("--lr", type=float, default=d.lr0)
    t.add_argument("--lr-drops", type=float, nargs="*", default=d.lr_drop_points)
    t.add_argument("--lr-drop-factor", type=float, default=d.lr_drop_factor)
    t.add_argument("--momentum", type=float, default=d.momentum)
    t.add_argument("--weight-decay", type=float, default=d.weight_decay)
    t.add_argument("--alpha-scales", type=float, default=d.alpha_scales)
    t.add_argument("--alpha-fusion", type=float, default=d.alpha_fusion)
    t.add_argument("--log-every", type=int, default=d.log_every)
    t.add_argument("--checkpoint-every", type=int, default=d.checkpoint_every)
    t.add_argument("--loss-log", default=None, help="write per-iteration losses as CSV")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    def gf_flags(q):
        g = GuidedFilterParams()
        q.add_argument("--gf-radius", type=int, default=g.radius)
        q.add_argument("--gf-eps", type=float, default=g.eps)
        q.add_argument("--gf-down", type=int, default=g.downsample)
        q.add_argument("--no-gf", action="store_true", help="skip guided-filter refinement")
        q.add_argument("--longest", type=int, default=FIXED_TEST_SIZE,
                       help="resize the longest side before prediction (0 = native size)")

    h = sub.add_parser("dehaze", help="dehaze an image or a directory", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    h.add_argument("weights")
    h.add_argument("input")
    h.add_argument("output")
    gf_flags(h)
    h.set_defaults(func=cmd_dehaze)

    e = sub.add_parser("eval", help="PSNR/SSIM report", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    e.add_argument("--manifest")
    e.add_argument("--split", default="test")
    e.add_argument("--method", choices=("net", "hazy", "dcp"), default="net")
    e.add_argument("--weights")
    e.add_argument("--pred", help="directory of predictions, matched by file stem")
    e.add_argument("--target", help="directory of ground-truth images (instead of --manifest)")
    e.add_argument("--csv", help="also write the report here")
    gf_flags(e)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("analyze", help="dataset and regularity statistics")
    asub = a.add_subparsers(dest="analysis", required=True, parser_class=_Parser)
    ds = asub.add_parser("depth-stats", help="distinct depth levels per patch")
    ds.add_argument("--manifest")
    ds.add_argument("--depth-dir")
    ds.add_argument("--patch", type=int, default=128)
    ds.add_argument("--levels", type=int, default=10)
    ds.add_argument("--stride", type=int, default=32)
    ds.add_argument("--out")
    ds.set_defaults(func=cmd_depth_stats)
    rg = asub.add_parser("regularity", help="histogram of the dark channel or the learned 1 - 1/K")
    rg.add_argument("images", help="directory of haze-free images")
    rg.add_argument("--method", choices=("dcp", "net"), default="dcp")
    rg.add_argument("--weights")
    rg.add_argument("--patch", type=int, default=7)
    rg.add_argument("--bins", type=int, default=20)
    rg.add_argument("--out")
    rg.set_defaults(func=cmd_regularity)

    i = sub.add_parser("inspect", help="parameter count, FLOPs and receptive field")
    _add_net_flags(i)
    i.add_argument("--weights", help="inspect the config stored in a weight file")
    i.add_argument("--size", type=int, nargs=2, default=(128, 128), metavar=("H", "W"))
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    try:
        with threadpool_limits(limits=worker_count()):
            args.func(args)
    except UsageError as e:
        print(f"famednet: error: {e}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"famednet: error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
