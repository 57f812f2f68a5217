"""Command line entry point.

Subcommands mirror the pipeline stages:

    dpsynth make-reference-data --out data/ --seed 7
    dpsynth preprocess --data data/reference.csv --schema data/schema.json --out prep/ --seed 7
    dpsynth train --matrix prep/train_matrix.bin --schema prep/schema_fitted.json \
        --out run/ --seed 7 --epochs 150 --variant wgan_gp
    dpsynth train ... --dp --epsilon 1 --delta 1e-5 --clip-norm 1.0
    dpsynth generate --checkpoint run/checkpoints/epoch_0042.ckpt \
        --schema prep/schema_fitted.json --out synth.csv -n 10000 --seed 7
    dpsynth evaluate --train prep/train.csv --test prep/test.csv --synth synth.csv \
        --schema prep/schema_fitted.json --out eval/ --seed 7 --reps 3
    dpsynth sweep-epsilon --matrix ... --schema ... --test prep/test.csv --out sweep/ \
        --seed 7 --epochs 8 --epsilons 1,10,20,30,inf
"""

from __future__ import annotations

import argparse
import json
import math
import sys

from .commands import (
    RunConfig,
    cmd_evaluate,
    cmd_generate,
    cmd_make_reference_data,
    cmd_preprocess,
    cmd_sweep_epsilon,
    cmd_train,
)
from .encoding import load_matrix
from .errors import DpSynthError
from .gan import GanConfig
from .privacy import DpConfig


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",")]


def _eps_list(text: str) -> list[float]:
    return [math.inf if v.strip() in ("inf", "infinity") else float(v) for v in text.split(",")]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dpsynth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    ref = sub.add_parser("make-reference-data", help="sample the seeded reference dataset")
    ref.add_argument("--out", required=True)
    ref.add_argument("--seed", type=int, default=0)
    ref.add_argument("--rows", type=int, default=20000)
    ref.add_argument("--config", default=None, help="JSON spec overriding the default generators")

    prep = sub.add_parser("preprocess", help="filter, split, fit and encode a raw CSV")
    prep.add_argument("--data", required=True)
    prep.add_argument("--schema", required=True)
    prep.add_argument("--out", required=True)
    prep.add_argument("--seed", type=int, default=0)

    tr = sub.add_parser("train", help="train a generator on an encoded matrix")
    tr.add_argument("--matrix", required=True)
    tr.add_argument("--schema", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--epochs", type=int, default=150)
    tr.add_argument("--variant", choices=["vanilla", "wgan_clip", "wgan_gp"], default="wgan_gp")
    tr.add_argument("--batch-size", type=int, default=256)
    tr.add_argument("--noise-dim", type=int, default=100)
    tr.add_argument("--gen-hidden", type=_int_list, default=None, help="3 comma-separated sizes")
    tr.add_argument("--critic-hidden", type=_int_list, default=None)
    tr.add_argument("--lr", type=float, default=None)
    tr.add_argument("--dp", action="store_true", help="train the critic privately")
    tr.add_argument("--epsilon", type=float, default=1.0)
    tr.add_argument("--delta", type=float, default=1e-5)
    tr.add_argument(
        "--noise-multiplier",
        type=float,
        default=0.0,
        help="0 calibrates the multiplier from epsilon/delta and the planned steps",
    )
    tr.add_argument("--clip-norm", type=float, default=1.0)
    tr.add_argument("--allow-dp-any-variant", action="store_true")
    tr.add_argument("--validation-rows", type=int, default=10000)

    gen = sub.add_parser("generate", help="decode synthetic rows from a checkpoint")
    gen.add_argument("--checkpoint", required=True)
    gen.add_argument("--schema", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("-n", "--rows", type=int, required=True)
    gen.add_argument("--seed", type=int, default=0)

    ev = sub.add_parser("evaluate", help="fidelity + utility reports for a synthetic CSV")
    ev.add_argument("--train", required=True)
    ev.add_argument("--test", required=True)
    ev.add_argument("--synth", required=True)
    ev.add_argument("--schema", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--reps", type=int, default=3)

    sw = sub.add_parser("sweep-epsilon", help="train/evaluate across privacy budgets")
    sw.add_argument("--matrix", required=True)
    sw.add_argument("--schema", required=True)
    sw.add_argument("--test", required=True)
    sw.add_argument("--out", required=True)
    sw.add_argument("--seed", type=int, default=0)
    sw.add_argument("--epochs", type=int, default=8)
    sw.add_argument("--epsilons", type=_eps_list, default=[1.0, 10.0, 20.0, 30.0, math.inf])
    sw.add_argument("--seeds", type=int, default=3, help="number of run seeds (seed, seed+1, ...)")
    sw.add_argument("--delta", type=float, default=1e-5)
    sw.add_argument("--clip-norm", type=float, default=1.0)
    sw.add_argument("--batch-size", type=int, default=256)
    sw.add_argument("--noise-dim", type=int, default=100)
    sw.add_argument("--gen-hidden", type=_int_list, default=None)
    sw.add_argument("--critic-hidden", type=_int_list, default=None)
    sw.add_argument("--synth-rows", type=int, default=None)
    return p


def _gan_kwargs(args) -> dict:
    out = {"batch_size": args.batch_size, "noise_dim": args.noise_dim}
    if args.gen_hidden is not None:
        out["gen_hidden"] = args.gen_hidden
    if args.critic_hidden is not None:
        out["critic_hidden"] = args.critic_hidden
    if getattr(args, "lr", None) is not None:
        out["lr"] = args.lr
    return out


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "make-reference-data":
            result = cmd_make_reference_data(args.out, args.seed, args.rows, args.config)
        elif args.command == "preprocess":
            result = cmd_preprocess(args.data, args.schema, args.out, args.seed)
        elif args.command == "train":
            width = load_matrix(args.matrix).shape[1]
            dp = (
                DpConfig(
                    clip_norm=args.clip_norm,
                    noise_multiplier=args.noise_multiplier,
                    epsilon=args.epsilon,
                    delta=args.delta,
                )
                if args.dp
                else None
            )
            config = RunConfig(
                data_matrix=args.matrix,
                schema=args.schema,
                out_dir=args.out,
                seed=args.seed,
                epochs=args.epochs,
                gan=GanConfig(out_width=width, variant=args.variant, **_gan_kwargs(args)),
                dp=dp,
                allow_dp_any_variant=args.allow_dp_any_variant,
                validation_rows=args.validation_rows,
            )
            result = cmd_train(config)
        elif args.command == "generate":
            result = {"csv": str(cmd_generate(args.checkpoint, args.schema, args.out, args.rows, args.seed))}
        elif args.command == "evaluate":
            result = cmd_evaluate(
                args.train, args.test, args.synth, args.schema, args.out, args.seed, args.reps
            )
        else:
            result = cmd_sweep_epsilon(
                args.matrix,
                args.schema,
                args.test,
                args.out,
                seed=args.seed,
                epochs=args.epochs,
                epsilons=tuple(args.epsilons),
                n_seeds=args.seeds,
                delta=args.delta,
                clip_norm=args.clip_norm,
                gan_kwargs=_gan_kwargs(args),
                synth_rows=args.synth_rows,
            )
    except (DpSynthError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    json.dump(result, sys.stdout, indent=2, sort_keys=True, default=str)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
