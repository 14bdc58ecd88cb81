"""Command-line entry point: ``cafcn <command> [options]``.

Commands: generate-data, train, infer, eval, curves, selftest.  Relative
``--out`` paths resolve under ``$CAFCN_OUTPUT_ROOT`` when it is set.

Exit codes: 0 success, 1 failure (bad input, I/O error, failed self-test),
2 usage error, 3 output directory locked by another run, 4 training diverged.
"""

import argparse
import logging
import os
import sys
from contextlib import contextmanager
from pathlib import Path

from . import BACKEND, __version__
from .data import (MANIFEST, FormatError, SpecError, SyntheticSpec, generate_dataset, load_image,
                   load_map, load_pairs, read_manifest, save_map, split_manifest,
                   write_manifest)
from .losses import LossConfig
from .metrics import METRIC_KEYS, evaluate_dataset, format_curves, format_report
from .network import (CheckpointError, NetworkConfig, NetworkParams, forward_pair, infer_group,
                      load_checkpoint)
from .selftest import run_selftest
from .training import OptimizerState, TrainingDiverged, checkpoint_name, log_header, resume, train

OUTPUT_ROOT_ENV = "CAFCN_OUTPUT_ROOT"
LOCK_NAME = ".cafcn.lock"
TRAIN_LOG = "train.log"

EXIT_FAIL = 1
EXIT_LOCKED = 3
EXIT_DIVERGED = 4

log = logging.getLogger("cafcn")


class CliError(Exception):
    def __init__(self, message, code=EXIT_FAIL):
        super().__init__(message)
        self.code = code


def output_dir(arg, command):
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if arg is None:
        if not root:
            raise CliError(f"{command}: --out is required (or set {OUTPUT_ROOT_ENV})")
        return Path(root) / command
    path = Path(arg)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


@contextmanager
def guarded(directory):
    """Create ``directory`` and hold an exclusive lock file in it."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        fd = os.open(directory / LOCK_NAME, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(f"{directory} is in use by another run (remove {LOCK_NAME} if stale)",
                       EXIT_LOCKED) from None
    except OSError as exc:
        raise CliError(f"cannot write to {directory}: {exc.strerror}") from None
    try:
        os.write(fd, f"{os.getpid()}\n".encode())
        os.close(fd)
        yield directory
    finally:
        try:
            os.unlink(directory / LOCK_NAME)
        except OSError:
            pass


def _int_list(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _fraction(text):
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError("must lie strictly between 0 and 1")
    return v


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError("must be positive")
        return v
    return parse


def _non_negative_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _metric_keys(text):
    keys = tuple(k.strip() for k in text.split(",") if k.strip())
    unknown = [k for k in keys if k not in METRIC_KEYS]
    if unknown or not keys:
        raise argparse.ArgumentTypeError(f"unknown metric(s) {unknown}; choose from {','.join(METRIC_KEYS)}")
    return tuple(k for k in METRIC_KEYS if k in keys)


# --- generate-data -----------------------------------------------------------

def cmd_generate_data(args):
    spec = SyntheticSpec(image_size=args.image_size, common_shape_kind=args.shape,
                         distractor_count=args.distractors, noise_std=args.noise, seed=args.seed,
                         min_radius=args.min_radius, max_radius=args.max_radius)
    if args.eval_count > args.count:
        raise CliError("--eval-count cannot exceed --count")
    out = output_dir(args.out, "generate-data")
    with guarded(out):
        generate_dataset(spec, args.count, root=out)
        entries = ["\t".join(e) for e in read_manifest(out / MANIFEST)]
        train_part, eval_part = split_manifest(entries, args.eval_count)
        write_manifest(out / "train.tsv", train_part)
        write_manifest(out / "eval.tsv", eval_part)
    print(f"manifest: {out / MANIFEST}")
    print(f"pairs: {args.count} (train {len(train_part)}, eval {len(eval_part)})")
    return 0


# --- train -------------------------------------------------------------------

def _manifest_path(root, name):
    if name is not None:
        path = Path(name)
        return path if path.is_absolute() else Path(root) / path
    for candidate in ("train.tsv", MANIFEST):
        if (Path(root) / candidate).exists():
            return Path(root) / candidate
    raise CliError(f"no manifest found under {root}")


def _latest_checkpoint(path):
    path = Path(path)
    if path.is_dir():
        found = sorted(path.glob("epoch_*.cafcn"))
        if not found:
            raise CliError(f"no checkpoints in {path}")
        return found[-1]
    return path


def _load_checkpoint(path):
    path = _latest_checkpoint(path)
    try:
        return load_checkpoint(path)
    except (FileNotFoundError, IsADirectoryError):
        raise CliError(f"checkpoint not found: {path}") from None
    except CheckpointError as exc:
        raise CliError(f"bad checkpoint {path}: {exc}") from None


def cmd_train(args):
    data = Path(args.data)
    try:
        entries = read_manifest(_manifest_path(data, args.manifest))
        pairs = load_pairs(data, entries)
    except (OSError, FormatError, ValueError) as exc:
        raise CliError(f"cannot load training data: {exc}") from None
    if not pairs:
        raise CliError("training manifest is empty")
    state = OptimizerState(learning_rate=args.lr, momentum=args.momentum,
                           weight_decay=args.weight_decay, decay_every_epochs=args.decay_every)
    if args.resume:
        ck_path = _latest_checkpoint(args.resume)
        try:
            params, state = resume(ck_path, state)
        except FileNotFoundError:
            raise CliError(f"checkpoint not found: {ck_path}") from None
        except CheckpointError as exc:
            raise CliError(f"bad checkpoint {ck_path}: {exc}") from None
    else:
        try:
            cfg = NetworkConfig(input_size=args.input_size, encoder_channels=args.encoder_channels,
                                feature_channels=args.feature_channels,
                                final_channels=args.final_channels)
        except ValueError as exc:
            raise CliError(f"invalid network dims: {exc}") from None
        params = NetworkParams.init(cfg, seed=args.init_seed)
    size = params.config.input_size
    if pairs[0][0].shape[:2] != (size, size):
        raise CliError(f"images are {pairs[0][0].shape[0]}px but the network expects {size}px")
    remaining = max(0, args.epochs - state.epoch)
    loss_cfg = LossConfig(eta=args.eta)
    out = output_dir(args.out, "train")
    with guarded(out):
        log_path = out / TRAIN_LOG
        if not log_path.exists():
            cfg = params.config
            extra = [
                f"scaled-down: input_size={cfg.input_size}",
                f"scaled-down: encoder_channels={','.join(map(str, cfg.encoder_channels))}",
                f"scaled-down: feature_channels={cfg.feature_channels}",
                f"scaled-down: final_channels={cfg.final_channels}",
                f"init_seed={args.init_seed}",
                f"backend={BACKEND}",
            ]
            log_path.write_text("\n".join(log_header(state, loss_cfg, args.batch_size, args.seed, extra)) + "\n")
        try:
            result = train(pairs, params, state, remaining, batch_size=args.batch_size,
                           loss_cfg=loss_cfg, seed=args.seed, checkpoint_dir=out, log_path=log_path)
        except TrainingDiverged as exc:
            raise CliError(f"training diverged: {exc}", EXIT_DIVERGED) from None
    final = out / checkpoint_name(result.state.epoch)
    print(f"checkpoint: {final}")
    if result.epoch_losses:
        print(f"final loss: {result.epoch_losses[-1]:.8f}")
    return 0


# --- infer -------------------------------------------------------------------

def _load_inputs(paths, size):
    images = []
    for p in paths:
        try:
            img = load_image(p)
        except (OSError, FormatError) as exc:
            raise CliError(f"cannot read {p}: {exc}") from None
        if img.shape[:2] != (size, size):
            raise CliError(f"{p} is {img.shape[1]}x{img.shape[0]}, network expects {size}x{size}")
        images.append(img)
    return images


def cmd_infer(args):
    ck = _load_checkpoint(args.checkpoint)
    params = ck.params
    size = params.config.input_size
    # every map is computed before anything is written, so a failure leaves no partial output
    outputs = []
    if args.pair:
        i1, i2 = _load_inputs(args.pair, size)
        p1, p2, _ = forward_pair(i1, i2, params)
        outputs = [("map1.pgm", p1), ("map2.pgm", p2)]
    elif args.group:
        maps = infer_group(_load_inputs(args.group, size), params)
        outputs = [(f"map_{k:03d}.pgm", m) for k, m in enumerate(maps)]
    else:
        data = Path(args.data)
        try:
            entries = read_manifest(_manifest_path(data, args.manifest or "eval.tsv"))
        except (OSError, ValueError) as exc:
            raise CliError(f"cannot read manifest: {exc}") from None
        for a, b, _, _ in entries:
            i1, i2 = _load_inputs([data / a, data / b], size)
            p1, p2, _ = forward_pair(i1, i2, params)
            d = Path(a).parent
            outputs += [(str(d / "pred1.pgm"), p1), (str(d / "pred2.pgm"), p2)]
    out = output_dir(args.out, "infer")
    with guarded(out):
        for name, m in outputs:
            path = out / name
            path.parent.mkdir(parents=True, exist_ok=True)
            save_map(m[..., 0], path)
    print(f"wrote {len(outputs)} maps to {out}")
    return 0


# --- eval / curves -----------------------------------------------------------

def _eval_items(args):
    data = Path(args.data)
    pred = Path(args.pred)
    try:
        entries = read_manifest(_manifest_path(data, args.manifest or "eval.tsv"))
    except (OSError, ValueError) as exc:
        raise CliError(f"cannot read manifest: {exc}") from None
    items = []
    for a, b, ga, gb in entries:
        d = Path(a).parent
        for pname, gt in (("pred1.pgm", ga), ("pred2.pgm", gb)):
            try:
                s = load_map(pred / d / pname)
                g = load_map(data / gt) >= 0.5
            except (OSError, FormatError) as exc:
                raise CliError(f"cannot read maps for {d}: {exc}") from None
            if s.shape != g.shape:
                raise CliError(f"{d}/{pname}: prediction {s.shape} vs ground truth {g.shape}")
            items.append((s, g))
    if not items:
        raise CliError("nothing to evaluate")
    return items


def cmd_eval(args):
    report = evaluate_dataset(_eval_items(args), beta_sq=args.beta_sq, alpha=args.alpha,
                              adaptive=args.adaptive)
    text = format_report(report, args.metrics)
    out = output_dir(args.out, "eval")
    with guarded(out):
        (out / "report.txt").write_text(text)
        if args.curves:
            (out / "curves.csv").write_text(format_curves(report))
    sys.stdout.write(text)
    return 0


def cmd_curves(args):
    report = evaluate_dataset(_eval_items(args), beta_sq=args.beta_sq, alpha=args.alpha)
    out = output_dir(args.out, "curves")
    with guarded(out):
        (out / "curves.csv").write_text(format_curves(report))
    print(f"curves: {out / 'curves.csv'}")
    return 0


# --- selftest ----------------------------------------------------------------

def cmd_selftest(args):
    results = run_selftest(seed=args.seed)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_FAIL if failed else 0


# --- parser ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="cafcn", description="Co-attention FCN co-saliency toolkit.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic pair dataset")
    g.add_argument("--out")
    g.add_argument("--count", type=_non_negative_int, default=240)
    g.add_argument("--eval-count", type=_non_negative_int, default=0,
                   help="hold out the last N pairs in eval.tsv")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=_positive(int), default=32)
    g.add_argument("--shape", choices=("square", "disc", "triangle"), default="square")
    g.add_argument("--distractors", type=_non_negative_int, default=2)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--min-radius", type=_positive(int), default=3)
    g.add_argument("--max-radius", type=_positive(int), default=6)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train the network")
    t.add_argument("--data", required=True)
    t.add_argument("--manifest", help="default: train.tsv, else manifest.tsv")
    t.add_argument("--out")
    t.add_argument("--epochs", type=_non_negative_int, default=1, help="total epochs (including resumed ones)")
    t.add_argument("--batch-size", type=_positive(int), default=4)
    t.add_argument("--lr", type=_positive(float), default=1e-4)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=0.005)
    t.add_argument("--decay-every", type=_positive(int), default=50, help="epochs per 10x lr decay")
    t.add_argument("--eta", type=_fraction, default=0.3, help="background weight of the loss")
    t.add_argument("--seed", type=int, default=0, help="shuffle seed")
    t.add_argument("--init-seed", type=int, default=0)
    t.add_argument("--input-size", type=_positive(int), default=32)
    t.add_argument("--encoder-channels", type=_int_list, default=(8, 16, 32))
    t.add_argument("--feature-channels", type=_positive(int), default=32)
    t.add_argument("--final-channels", type=_positive(int), default=4)
    t.add_argument("--resume", help="checkpoint file, or a directory to take its latest checkpoint")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="write co-saliency maps")
    i.add_argument("--checkpoint", required=True, help="checkpoint file, or a training directory to use its latest")
    i.add_argument("--out")
    mode = i.add_mutually_exclusive_group(required=True)
    mode.add_argument("--pair", nargs=2, metavar="IMAGE")
    mode.add_argument("--group", nargs="+", metavar="IMAGE")
    mode.add_argument("--data", help="dataset root; predicts every manifest pair")
    i.add_argument("--manifest", help="with --data; default eval.tsv")
    i.set_defaults(func=cmd_infer)

    for name, func, help_text in (("eval", cmd_eval, "score predictions"),
                                  ("curves", cmd_curves, "export PR/ROC curves")):
        e = sub.add_parser(name, help=help_text)
        e.add_argument("--data", required=True)
        e.add_argument("--pred", required=True, help="directory written by 'infer --data'")
        e.add_argument("--manifest", help="default eval.tsv")
        e.add_argument("--out")
        e.add_argument("--beta-sq", type=_positive(float), default=0.3)
        e.add_argument("--alpha", type=float, default=0.5)
        if name == "eval":
            e.add_argument("--adaptive", action="store_true",
                           help="F-beta at threshold 2*mean instead of the max over thresholds")
            e.add_argument("--metrics", type=_metric_keys, default=METRIC_KEYS)
            e.add_argument("--curves", action="store_true", help="also write curves.csv")
        e.set_defaults(func=func)

    s = sub.add_parser("selftest", help="run the built-in correctness checks")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_selftest)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    if getattr(args, "alpha", 0.5) is not None and not 0.0 <= getattr(args, "alpha", 0.5) <= 1.0:
        parser.error("--alpha must lie in [0, 1]")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cafcn {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except SpecError as exc:
        print(f"cafcn {args.command}: invalid data spec: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
