"""Command-line entry point: ``efficientiml <subcommand> ...``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import CheckpointError
from .config import PRESETS, ConfigError, config_keys, load_config
from .data import DataError, gen_synthetic, load_manifest, load_split, pad_to_multiple, read_image, write_mask
from .loss import make_edge_mask
from .wkv import NumericInputError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


CONFIG_HELP = "config keys (use with --set key=value or in a --config file):\n  " + "\n  ".join(config_keys())


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="efficientiml", description=__doc__,
                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=CONFIG_HELP)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_flags(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--preset", default="default", choices=sorted(PRESETS),
                        help="starting config before --config and --set (default: %(default)s)")
        sp.add_argument("--set", dest="overrides", action="append", type=_kv, default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")

    g = sub.add_parser("gen-synth", help="write a synthetic forgery corpus")
    g.add_argument("--out", required=True, help="corpus root to create")
    g.add_argument("--n", type=int, default=8)
    g.add_argument("--size", type=int, default=256)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--test-ratio", type=int, nargs=2, default=(6, 1), metavar=("TRAIN", "TEST"),
                   help="train:test split ratio (default 6 1)")

    t = sub.add_parser("train", help="train a model; writes train.log and checkpoints",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=CONFIG_HELP)
    config_flags(t)
    t.add_argument("--data-root")
    t.add_argument("--out", help="run directory (default: paths.out)")
    t.add_argument("--seed", type=int, help="sets train.seed and model.seed")
    t.add_argument("--size", type=int, help="sets train.size")
    t.add_argument("--split", default="train", help="manifest split to train on: train, test or all")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="metric report over a manifest split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data-root", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--size", type=int, help="resize images first (default: native size)")
    e.add_argument("--out", help="directory for metrics.jsonl and summary.json")
    e.add_argument("--threshold", type=float, default=0.5)

    pr = sub.add_parser("predict", help="binary mask, probability map and overlay per image")
    src = pr.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", help="model checkpoint")
    src.add_argument("--prob-input", help="use this probability-map image instead of a model")
    pr.add_argument("--input", required=True, help="image file or directory of images")
    pr.add_argument("--out", required=True)
    pr.add_argument("--save-prob", action="store_true", help="also write the probability map")
    pr.add_argument("--threshold", type=float, default=0.5)

    b = sub.add_parser("bench-wkv", help="time naive vs scan WKV kernels")
    b.add_argument("--T", dest="T_list", type=_int_list, default=[256, 1024, 4096])
    b.add_argument("--cv", type=int, default=8, help="channels C_v")
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--threads", type=int, default=1)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--impls", default="naive,scan:compiled,scan:numpy",
                   help="comma list of naive, scan, scan:compiled, scan:numpy")
    b.add_argument("--out", help="write bench.json here")

    c = sub.add_parser("count-flops", help="analytic params/FLOPs and the budget check")
    config_flags(c)
    c.add_argument("--size", type=int, default=1024)
    c.add_argument("--throughput", action="store_true", help="also time a forward pass")
    c.add_argument("--threads", type=int, default=1)
    c.add_argument("--out", help="write flops.json here")
    return p


# --- subcommands ----------------------------------------------------------------


def _resolve_config(args, extra: dict[str, str] | None = None):
    overrides = dict(args.overrides)
    overrides.update(extra or {})
    return load_config(args.config, overrides, preset=args.preset)


def cmd_gen_synth(args) -> int:
    man = gen_synthetic(args.out, args.n, args.size, args.seed, ratio=tuple(args.test_ratio))
    n_test = len(man.split("test"))
    print(f"wrote {len(man)} samples to {args.out} ({len(man) - n_test} train, {n_test} test)")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    extra = {}
    if args.seed is not None:
        extra["train.seed"] = extra["model.seed"] = str(args.seed)
    if args.size is not None:
        extra["train.size"] = str(args.size)
    if args.data_root:
        extra["paths.data_root"] = args.data_root
    if args.out:
        extra["paths.out"] = args.out
    cfg = _resolve_config(args, extra)
    if not cfg.paths.data_root:
        raise UsageError("train needs --data-root (or paths.data_root in the config)")
    manifest = load_manifest(cfg.paths.data_root)
    res = train(cfg, manifest=manifest, out_dir=cfg.paths.out, resume=args.resume,
                log_fn=print, split=args.split)
    print(f"best train f1 {res.best_f1:.4f}; checkpoints in {cfg.paths.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_model

    model, _ = load_model(args.checkpoint)
    samples = load_split(load_manifest(args.data_root), args.split, args.size)
    summary, probs = evaluate(model, samples, threshold=args.threshold)
    if args.out:
        from .metrics import MetricAccumulator

        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        acc = MetricAccumulator(threshold=args.threshold)
        with open(out / "metrics.jsonl", "w") as fh:
            for s, prob in zip(samples, probs):
                fh.write(json.dumps(acc.add(s.id, prob, s.mask)) + "\n")
        (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


def overlay_panel(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``[image | image with tinted region and red boundary | mask]`` as uint8 RGB."""
    m = mask.reshape(mask.shape[0], mask.shape[1]) > 0.5
    rgb = image.copy()
    tint = np.array([1.0, 0.2, 0.2], np.float32)
    rgb[m] = 0.6 * rgb[m] + 0.4 * tint
    edge = make_edge_mask(m.astype(np.float32), 1) > 0
    rgb[edge] = tint
    side = np.repeat(m[..., None].astype(np.float32), 3, axis=-1)
    panel = np.concatenate([image, rgb, side], axis=1)
    return (np.clip(panel, 0, 1) * 255).round().astype(np.uint8)


def _inputs(path: Path) -> list[Path]:
    if path.is_dir():
        exts = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
        files = sorted(p for p in path.iterdir() if p.suffix.lower() in exts)
        if not files:
            raise DataError(f"no images in {path}")
        return files
    if not path.is_file():
        raise DataError(f"input {path} does not exist")
    return [path]


def cmd_predict(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    files = _inputs(Path(args.input))
    model = None
    if args.checkpoint:
        from .train import load_model

        model, _ = load_model(args.checkpoint)
    for f in files:
        img = read_image(f)
        if model is None:
            prob = np.asarray(Image.open(args.prob_input).convert("L"), np.float32)[..., None] / 255.0
            if prob.shape[:2] != img.shape[:2]:
                raise DataError(f"probability map {prob.shape[:2]} does not match image {img.shape[:2]}")
        else:
            padded, _, _ = pad_to_multiple(img)
            prob = model.predict_proba(padded[None])[0][: img.shape[0], : img.shape[1]]
        mask = (prob >= args.threshold).astype(np.float32)
        write_mask(out / f"{f.stem}_mask.png", mask)
        if args.save_prob:
            Image.fromarray((prob[..., 0] * 255).round().astype(np.uint8), mode="L").save(out / f"{f.stem}_prob.png")
        Image.fromarray(overlay_panel(img, mask), mode="RGB").save(out / f"{f.stem}_overlay.png")
        print(f"{f.name}: {int(mask.sum())} manipulated pixels of {mask.size}")
    return EXIT_OK


def cmd_bench_wkv(args) -> int:
    from .complexity import bench_ratios, bench_wkv, format_bench

    impls = tuple(s.strip() for s in args.impls.split(",") if s.strip())
    rows = bench_wkv(args.T_list, args.cv, args.repeats, seed=args.seed, impls=impls, threads=args.threads)
    print(f"# C_v={args.cv} repeats={args.repeats} threads={args.threads} (best of repeats, per call)")
    print(format_bench(rows))
    ratios = {}
    if len(args.T_list) >= 2:
        lo, hi = min(args.T_list), max(args.T_list)
        ratios = bench_ratios(rows, lo, hi)
        for impl, r in ratios.items():
            print(f"ratio T={hi}/T={lo} {impl}: {r:.2f}")
    if args.out:
        rec = {"C_v": args.cv, "repeats": args.repeats, "threads": args.threads,
               "rows": [{"impl": r.impl, "T": r.T, "seconds": r.seconds, "ns_per_token": r.ns_per_token} for r in rows],
               "ratios": ratios}
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rec, indent=2) + "\n")
    return EXIT_OK


def cmd_count_flops(args) -> int:
    from .complexity import (FLOPS_BUDGET_2048, count_flops, format_reconciliation, measure_throughput,
                             reconcile_vs_published)

    cfg = _resolve_config(args)
    rep = count_flops(cfg.model, args.size)
    if args.throughput:
        rep.throughput = measure_throughput(cfg.model, args.size, threads=args.threads)
        rep.threads = args.threads
    print(rep.format())
    if args.size == 2048:
        ok = rep.flops < FLOPS_BUDGET_2048
        print(f"GFLOPs @2048 = {rep.flops / 1e9:.3f} < 100: {'PASS' if ok else 'FAIL'}")
    print(format_reconciliation(reconcile_vs_published(cfg.model)))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps(rep.record(), indent=2) + "\n")
    return EXIT_OK


COMMANDS = {
    "gen-synth": cmd_gen_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "bench-wkv": cmd_bench_wkv,
    "count-flops": cmd_count_flops,
}


def main(argv: list[str] | None = None) -> int:
    from .train import NumericError

    args = build_parser().parse_args(argv)
    try:
        # non-finite values are detected and reported explicitly
        with np.errstate(over="ignore", invalid="ignore"):
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}".replace("\n", "; "), file=sys.stderr)
        return EXIT_DATA
    except (NumericError, NumericInputError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
