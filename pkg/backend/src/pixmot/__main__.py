from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from pixmot import settings
from pixmot.bench import format_bench_line, run_bench
from pixmot.checkpoint import checkpoint_from_named, load_checkpoint, save_checkpoint
from pixmot.dataset import encode_caption, make_dataset
from pixmot.numerics import RandomStream
from pixmot.patch_codec import read_ppm, write_ppm

logger = logging.getLogger("pixmot")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def read_prompt(path: str | Path) -> list[int]:
    text = Path(path).read_text(encoding="utf-8").strip()
    words = text.split()
    if words and all(w.lstrip("-").isdigit() for w in words):
        return [int(w) for w in words]
    return encode_caption(text)


def cmd_train(args: argparse.Namespace) -> int:
    from pixmot.trainer import mean_text_ce, train

    cfg = settings.load_train_config(args.config)
    out = Path(args.out) if args.out else settings.home_dir() / "runs" / Path(args.config).stem
    out.mkdir(parents=True, exist_ok=True)
    settings.save_train_config(out / "config.json", cfg)
    data = make_dataset(cfg.data)
    result = train(cfg, data, metrics_path=out / "metrics.jsonl")
    ckpt = checkpoint_from_named(
        settings.train_config_to_dict(cfg),
        result.params.named_tensors(),
        result.ema,
        rng=result.rng,
        step=result.step,
    )
    path = save_checkpoint(out / "checkpoint.pxmt", ckpt)
    last = result.metrics[-1] if result.metrics else None
    summary = f"checkpoint={path} steps={result.step}"
    if last is not None:
        summary += f" ce={mean_text_ce(result.metrics[-10:]):.4f} mse={last.mse:.4f}"
    print(summary)
    return EXIT_OK


def cmd_sample(args: argparse.Namespace) -> int:
    from pixmot.sampler import SamplerConfig, make_predictor, sample

    ckpt = load_checkpoint(args.checkpoint)
    cfg = settings.train_config_from_dict(ckpt.config)
    params = ckpt.model_params(cfg.model, use_ema=not args.no_ema)
    caption = read_prompt(args.prompt)
    context = [read_ppm(p) for p in args.context or []]
    noise_cfg = cfg.noise_config()
    sampler_cfg = SamplerConfig(
        steps=args.steps, shift=args.shift, gamma=args.gamma, gamma_img=args.gamma_img, renorm=args.renorm
    )
    # edits are trained with the target on the source image grid
    paired = any(tuple(img.shape[1:]) == (args.height, args.width) for img in context)
    predictor = make_predictor(params, caption, noise_cfg, context, paired=paired)
    image = sample(predictor, args.height, args.width, sampler_cfg, RandomStream.from_seed(args.seed), noise_cfg)
    write_ppm(args.out, image)
    print(f"image={args.out} height={args.height} width={args.width} steps={args.steps}")
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    from pixmot.invariants import format_report, modules, run_invariant_suite

    if args.filter and args.filter not in modules():
        raise UsageError(f"unknown module {args.filter!r}; choose from {', '.join(modules())}")
    results = run_invariant_suite(args.filter)
    report = format_report(results)
    if args.report:
        Path(args.report).write_text(report, encoding="utf-8")
    sys.stdout.write(report)
    failed = [r.invariant for r in results if not r.passed]
    if failed:
        logger.error("invariants failed: %s", ", ".join(failed))
        return EXIT_FAILED
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    for record in run_bench(args.layout, args.block_size, args.head_dim, args.repeats, args.seed):
        print(format_bench_line(record))
    return EXIT_OK


def cmd_reward(args: argparse.Namespace) -> int:
    from pixmot.rl_rewards import evaluate_directory
    from pixmot.scorers import scorer_from_env

    records = evaluate_directory(
        args.dir, scorer_from_env(), epoch=args.epoch, lambda_sty=args.lambda_sty, workers=settings.scorer_workers()
    )
    for record in records:
        print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def cmd_serve_scorer(args: argparse.Namespace) -> int:
    from pixmot.scorer_service import create_app

    create_app().run(host=args.host, port=args.port, threaded=True)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pixmot", description="Pixel-space Mixture-of-Transformers toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train the toy model on synthetic data")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None, help="run directory (default: $PIXMOT_HOME/runs/<config name>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="generate an image from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True, help="caption words or token ids")
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--shift", type=float, default=3.0)
    p.add_argument("--gamma", type=float, default=4.0)
    p.add_argument("--gamma-img", dest="gamma_img", type=float, default=1.0)
    p.add_argument("--renorm", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("--context", action="append", help="context image (PPM); repeatable")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("verify", help="run the invariant suite")
    p.add_argument("--filter", default=None, help="only run checks of this module")
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="compare blocked and dense attention")
    p.add_argument("--layout", action="append", required=True, help="e.g. T6,I1x2")
    p.add_argument("--block-size", dest="block_size", type=int, default=4)
    p.add_argument("--head-dim", dest="head_dim", type=int, default=16)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("reward", help="score a directory of generated images")
    p.add_argument("--dir", required=True)
    p.add_argument("--epoch", type=int, default=0)
    p.add_argument("--lambda-sty", dest="lambda_sty", type=float, default=0.5)
    p.set_defaults(func=cmd_reward)

    p = sub.add_parser("serve-scorer", help="serve the reference scorer over HTTP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=5055)
    p.set_defaults(func=cmd_serve_scorer)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        settings.configure_logging()
        settings.apply_thread_settings()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except (UsageError, ValueError, OSError) as exc:
        print(f"pixmot: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
