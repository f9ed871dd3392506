"""``mtlmammo`` command line: synth, train, eval, report, verify.

Exit codes: 0 ok, 1 verification failure, 2 usage, 3 IO, 4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import logging
import shlex
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import __version__
from .model import BackboneConfig
from .phantom import CLASS_NAMES, DatasetError, PhantomConfig, load_dataset, summarize, write_dataset, \
    generate_sample
from .trainer import REPORT_HEADER, STRATEGIES, CheckpointError, DivergenceError, TrainConfig, \
    evaluate, format_table, load_checkpoint, read_reports, reports_auc, reports_dice, \
    run_strategy, write_run
from .verify import run_suite

EXIT_OK, EXIT_VERIFY, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4
MANIFEST = "manifest.txt"

log = logging.getLogger("mtlmammo")


class UsageError(Exception):
    pass


def read_config(path) -> list[str]:
    """Turn a flat ``key = value`` file into argv tokens placed before the real flags.

    Values are shell-quoted; a value with several words becomes several tokens.
    """
    argv = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        try:
            tokens = shlex.split(value)
        except ValueError as exc:
            raise UsageError(f"{path}:{lineno}: {exc}") from None
        argv += [f"--{key.replace('_', '-')}"] + tokens
    return argv


def write_manifest(out_dir, command: str, args: argparse.Namespace, artifacts: dict,
                   path=None) -> Path:
    """Resolved flags as a re-runnable config file; metadata goes in comments."""
    lines = ["# mtlmammo run manifest",
             f"# command = {command}",
             f"# tool_version = {__version__}",
             f"# started = {args._started}",
             f"# seed = {args.seed}" if hasattr(args, "seed") else "# seed = -"]
    lines += [f"# artifact.{k} = {v}" for k, v in artifacts.items()]
    for key, value in sorted(vars(args).items()):
        if key.startswith("_") or key in ("config", "func", "command") or value is None:
            continue
        if isinstance(value, list):
            value = " ".join(shlex.quote(str(v)) for v in value)
        elif isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        else:
            value = shlex.quote(str(value))
        lines.append(f"{key.replace('_', '-')} = {value}")
    path = Path(out_dir) / MANIFEST if path is None else Path(path)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def _side_manifest(out_file) -> Path:
    """Manifest path for commands whose output is a single file: ``<name>.manifest.txt``."""
    p = Path(out_file)
    return p.with_name(p.name + ".manifest.txt")


def _floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat 'key = value' file with flag defaults; flags override it")
    p.add_argument("--threads", type=int, default=1,
                   help="BLAS threads; 1 is the bit-reproducible path (default: %(default)s)")


def _add_train_flags(p: argparse.ArgumentParser, tc: TrainConfig) -> None:
    p.add_argument("--data", required=True, help="dataset directory written by synth")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--epochs", type=int, default=tc.epochs,
                   help="epochs (classification epochs for sequential) (default: %(default)s)")
    p.add_argument("--phase1-epochs", type=int, default=tc.sequential_phase1_epochs,
                   help="segmentation pre-training epochs for sequential (default: %(default)s)")
    p.add_argument("--batch-size", type=int, default=tc.batch_size, help="(default: %(default)s)")
    p.add_argument("--lr", type=float, default=tc.lr, help="learning rate (default: %(default)s)")
    p.add_argument("--momentum", type=float, default=tc.momentum, help="(default: %(default)s)")
    p.add_argument("--weight-decay", type=float, default=tc.weight_decay, help="(default: %(default)s)")
    p.add_argument("--seed", type=int, default=tc.seed, help="init/shuffle seed (default: %(default)s)")
    p.add_argument("--max-steps", type=int, default=None, help="cap optimizer steps per phase")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtlmammo",
                                     description="Joint lesion segmentation and cancer classification "
                                                 "on synthetic mammography phantoms.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    pc = PhantomConfig()

    p = sub.add_parser("synth", help="generate a phantom dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, default=pc.seed, help="data seed (default: %(default)s)")
    p.add_argument("--n-train", type=int, default=512, help="training samples (default: %(default)s)")
    p.add_argument("--n-test", type=int, default=128, help="test samples (default: %(default)s)")
    p.add_argument("--image-h", type=int, default=pc.image_h, help="image height (default: %(default)s)")
    p.add_argument("--image-w", type=int, default=pc.image_w, help="image width (default: %(default)s)")
    p.add_argument("--lesion-rate", type=float, default=pc.lesion_rate,
                   help="mean lesions per image, Poisson (default: %(default)s)")
    p.add_argument("--class-ratios", type=_floats, default=pc.class_ratios,
                   help="probabilities of lesion classes 1-4 (default: %(default)s)")
    p.add_argument("--noise-sigma", type=float, default=pc.noise_sigma,
                   help="background noise std (default: %(default)s)")
    p.set_defaults(func=cmd_synth)

    tc = TrainConfig()
    p = sub.add_parser("train", help="train one strategy and evaluate it on the test split")
    _add_common(p)
    p.add_argument("--strategy", choices=STRATEGIES, default=tc.strategy, help="(default: %(default)s)")
    p.add_argument("--lambda", "--lam", dest="lam", type=float, default=tc.lam,
                   help="classification weight in the joint loss, in [0, 1] (default: %(default)s)")
    _add_train_flags(p, tc)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train the joint strategy once per lambda value")
    _add_common(p)
    p.add_argument("--lambdas", type=_floats, default="0,0.25,0.5,0.75,1",
                   help="comma-separated lambda values (default: %(default)s)")
    _add_train_flags(p, tc)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("eval", help="recompute the evaluation report from a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True, help="model.mtlc written by train")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--strategy", choices=STRATEGIES, default=None,
                   help="metrics to compute; defaults to the strategy in the run manifest, else joint")
    p.add_argument("--split", choices=("train", "test"), default="test", help="(default: %(default)s)")
    p.add_argument("--out", default=None, help="write the report CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="merge run reports into one strategy-by-metric table")
    _add_common(p)
    p.add_argument("--runs", nargs="*", default=[], help="run directories containing report.csv")
    p.add_argument("--out", default=None, help="write the merged CSV here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="run gradient-check and oracle suites")
    _add_common(p)
    p.add_argument("--suite", choices=("gradcheck", "oracles", "all"), default="all",
                   help="(default: %(default)s)")
    p.set_defaults(func=cmd_verify)
    return parser


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def cmd_synth(args) -> int:
    try:
        cfg = PhantomConfig(image_h=args.image_h, image_w=args.image_w, lesion_rate=args.lesion_rate,
                            class_ratios=tuple(args.class_ratios), noise_sigma=args.noise_sigma,
                            seed=args.seed)
        if args.n_train < 0 or args.n_test < 0:
            raise ValueError("sample counts must be non-negative")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        rows = write_dataset(cfg, args.n_train, args.n_test, args.out)
        write_manifest(args.out, "synth", args, {"index": "index.csv"})
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    stats = summarize(generate_sample(cfg, i) for i in range(len(rows)))
    print(f"wrote {len(rows)} samples ({args.n_train} train / {args.n_test} test) to {args.out}")
    print(f"prevalence {stats['prevalence']:.4f} (expected {cfg.expected_prevalence():.4f})")
    for name, freq in zip(CLASS_NAMES, stats["pixel_freq"]):
        print(f"  {name:<15} pixel fraction {freq:.5f}")
    print(f"healthy-pixel fraction {stats['pixel_freq'][0]:.4f}")
    return EXIT_OK


def _train_config(args, strategy: str, lam: float) -> TrainConfig:
    cfg = TrainConfig(strategy=strategy, lam=lam, lr=args.lr, momentum=args.momentum,
                      weight_decay=args.weight_decay, epochs=args.epochs, batch_size=args.batch_size,
                      seed=args.seed, sequential_phase1_epochs=args.phase1_epochs,
                      max_steps=args.max_steps)
    cfg.validate()
    if cfg.max_steps is not None and cfg.max_steps <= 0:
        raise ValueError("--max-steps must be positive")
    return cfg


def _train_one(cfg: TrainConfig, dataset, out_dir, args, command: str):
    """Run, write artifacts and manifest; returns (exit code, report or None)."""
    try:
        result = run_strategy(cfg, dataset)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED, None
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE, None
    try:
        paths = write_run(result, out_dir)
        write_manifest(out_dir, command, args, paths)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO, None
    return EXIT_OK, result.report


def _load(data_dir):
    try:
        return load_dataset(data_dir)
    except (OSError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return None


def cmd_train(args) -> int:
    try:
        cfg = _train_config(args, args.strategy, args.lam)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    dataset = _load(args.data)
    if dataset is None:
        return EXIT_IO
    code, report = _train_one(cfg, dataset, args.out, args, "train")
    if report is not None:
        print(format_table([report]))
    return code


def cmd_sweep(args) -> int:
    try:
        configs = [_train_config(args, "joint", lam) for lam in args.lambdas]
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    dataset = _load(args.data)
    if dataset is None:
        return EXIT_IO
    reports = []
    for cfg in configs:
        run_dir = Path(args.out) / f"lambda_{cfg.lam:g}"
        run_args = argparse.Namespace(**{**vars(args), "lambdas": None, "out": str(run_dir),
                                         "strategy": "joint", "lam": cfg.lam})
        code, report = _train_one(cfg, dataset, run_dir, run_args, "train")
        if code != EXIT_OK:
            return code
        report.strategy = f"joint(lambda={cfg.lam:g})"
        reports.append(report)
    try:
        write_manifest(args.out, "sweep", args,
                       {f"run{i}": f"lambda_{c.lam:g}" for i, c in enumerate(configs)})
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(format_table(reports))
    return EXIT_OK


def _manifest_values(path: Path) -> dict:
    values = {}
    if path.is_file():
        for line in path.read_text(encoding="utf-8").splitlines():
            body = line.lstrip("# ").strip()
            if "=" in body:
                k, v = (s.strip() for s in body.split("=", 1))
                values[k] = v
    return values


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    manifest = _manifest_values(ckpt.parent / MANIFEST)
    strategy = args.strategy or manifest.get("strategy", "joint")
    try:
        dataset = load_dataset(args.data)
        model = load_checkpoint(ckpt, BackboneConfig())
        samples = dataset.split(args.split)
        report = evaluate(model, samples, strategy)
        phase1 = ckpt.parent / manifest.get("artifact.phase1_checkpoint", "phase1.mtlc")
        if strategy == "sequential" and phase1.is_file():
            seg = evaluate(load_checkpoint(phase1, BackboneConfig()), samples, "seg_baseline")
            report.mean_dice, report.per_class_dice = seg.mean_dice, seg.per_class_dice
    except (OSError, DatasetError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    print(format_table([report]))
    if args.out:
        try:
            Path(args.out).write_text(report.to_csv(), encoding="utf-8")
            write_manifest(None, "eval", args, {"report": Path(args.out).name}, _side_manifest(args.out))
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


def cmd_report(args) -> int:
    reports = []
    try:
        for run in args.runs:
            reports += read_reports(Path(run) / "report.csv")
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    for r in reports:
        # a strategy only reports the metrics of the heads it trains
        if not reports_dice(r.strategy):
            r.mean_dice = r.per_class_dice = None
        if not reports_auc(r.strategy):
            r.auc = None
    print(format_table(reports))
    if args.out:
        try:
            with open(args.out, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(REPORT_HEADER)
                for r in reports:
                    w.writerow(r.csv_row())
            write_manifest(None, "report", args, {"report": Path(args.out).name}, _side_manifest(args.out))
        except OSError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(args.suite)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre = argparse.ArgumentParser(add_help=False)
        pre.add_argument("--config")
        known, _ = pre.parse_known_args(argv)
        if known.config and argv and not argv[0].startswith("-"):
            argv = [argv[0]] + read_config(known.config) + argv[1:]
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args._started = _now()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    with threadpool_limits(limits=args.threads):
        return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
