"""Command line interface: train, bench, decode, verify.

Configuration comes from flags, optionally layered over a JSON config
document (--config); flags win. All subcommands honor --seed end to end.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import bench as bench_mod
from . import data as data_mod
from .model import ConfigError, ModelConfig
from .optim import OptimConfig
from .train import load_checkpoint, train_run
from .decode import greedy_decode
from .verification import run_all

MODEL_FLAGS = ("d", "layers", "context", "chunk", "kind", "kernel", "norm",
               "expansion", "s", "heads")


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with ModelConfig fields (flags win)")
    p.add_argument("--d", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--context", type=int, help="context length T")
    p.add_argument("--chunk", type=int, help="chunk size C")
    p.add_argument("--kind", choices=["flash_quad", "flash", "transformer_pp",
                                      "mhsa_mlp", "linear"])
    p.add_argument("--kernel", choices=["relu2", "softmax"])
    p.add_argument("--norm", choices=["layer", "scale"])
    p.add_argument("--expansion", type=int)
    p.add_argument("--s", type=int, help="shared attention head size")
    p.add_argument("--heads", type=int, help="MHSA baseline head count")


def _model_config(args, **overrides) -> ModelConfig:
    fields = {}
    if args.config:
        with open(args.config) as fh:
            fields.update(json.load(fh))
    for name in MODEL_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            fields[name] = value
    fields.update(overrides)
    return ModelConfig(**fields)


def _cmd_train(args) -> int:
    corpus = data_mod.load_corpus(args.corpus or data_mod.sample_corpus_path())
    cfg = _model_config(args, causal=not args.mlm)
    optim_cfg = OptimConfig(lr_peak=args.lr, warmup_steps=args.warmup,
                            total_steps=args.steps)
    result = train_run(cfg, corpus, steps=args.steps, seed=args.seed,
                       optim_cfg=optim_cfg, batch_size=args.batch,
                       checkpoint_path=args.checkpoint,
                       checkpoint_every=args.checkpoint_every,
                       resume_from=args.resume, log_every=args.log_every)
    final = result.losses[-1]
    print(f"final loss {final:.6f}  perplexity {np.exp(final):.3f}")
    if result.checkpoint:
        print(f"checkpoint written to {result.checkpoint}")
    return 0


def _cmd_bench(args) -> int:
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    lengths = [int(x) for x in args.lengths.split(",")]
    dtype = np.float32 if args.precision == "float32" else np.float64
    records = []
    for kind in kinds:
        records.extend(bench_mod.bench_latency(
            kind, lengths, d=args.d or 64, layers=args.layers or 2,
            chunk=args.chunk or 64, repeats=args.repeats,
            tokens_per_step=args.tokens_per_step, seed=args.seed,
            dtype=dtype, mode="forward" if args.forward_only else "train"))
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        bench_mod.write_csv(records, out)
    finally:
        if args.out:
            out.close()
    for kind in kinds:
        sub = [r for r in records if r.kind == kind]
        if len({r.T for r in sub}) >= 3:
            slope, r2 = bench_mod.fit_exponent(sub)
            print(f"{kind}: log-log slope {slope:.3f} (R^2 {r2:.3f})", file=sys.stderr)
    return 0


def _cmd_decode(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    with open(args.prompt_file, "rb") as fh:
        prompt = fh.read()
    if not prompt:
        print("decode: prompt file is empty", file=sys.stderr)
        return 1
    times: list[float] = []
    out = greedy_decode(model, prompt, args.max_new_tokens,
                        step_times=times if args.timing_csv else None)
    sys.stdout.buffer.write(out)
    sys.stdout.buffer.flush()
    if args.timing_csv:
        with open(args.timing_csv, "w") as fh:
            fh.write("step,ms\n")
            for i, dt in enumerate(times):
                fh.write(f"{i},{dt * 1e3:.4f}\n")
    return 0


def _cmd_verify(args) -> int:
    results = run_all(verbose=True)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="flashkit",
        description="Gated attention units and mixed chunk attention, desk scale.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a byte-level LM", parents=[common])
    _add_model_flags(p_train)
    p_train.add_argument("--corpus", help="corpus file (default: bundled sample)")
    p_train.add_argument("--steps", type=int, default=2000)
    p_train.add_argument("--batch", type=int, default=4)
    p_train.add_argument("--lr", type=float, default=7e-4)
    p_train.add_argument("--warmup", type=int, default=100)
    p_train.add_argument("--mlm", action="store_true", help="masked-LM objective")
    p_train.add_argument("--checkpoint", help="write checkpoints here")
    p_train.add_argument("--checkpoint-every", type=int, default=0)
    p_train.add_argument("--resume", help="resume from this checkpoint")
    p_train.add_argument("--log-every", type=int, default=50)
    p_train.set_defaults(fn=_cmd_train)

    p_bench = sub.add_parser("bench", help="latency across context lengths",
                             parents=[common])
    p_bench.add_argument("--kinds", default="flash,flash_quad")
    p_bench.add_argument("--lengths", default="256,512,1024,2048,4096")
    p_bench.add_argument("--d", type=int, default=64)
    p_bench.add_argument("--layers", type=int, default=2)
    p_bench.add_argument("--chunk", type=int, default=64)
    p_bench.add_argument("--repeats", type=int, default=5)
    p_bench.add_argument("--tokens-per-step", type=int, default=1024)
    p_bench.add_argument("--precision", choices=["float32", "float64"], default="float32")
    p_bench.add_argument("--forward-only", action="store_true")
    p_bench.add_argument("--out", help="CSV path (default: stdout)")
    p_bench.set_defaults(fn=_cmd_bench)

    p_dec = sub.add_parser("decode", help="stream bytes from a checkpoint",
                           parents=[common])
    p_dec.add_argument("--checkpoint", required=True)
    p_dec.add_argument("--prompt-file", required=True, help="raw prompt bytes")
    p_dec.add_argument("--max-new-tokens", type=int, default=128)
    p_dec.add_argument("--greedy", action="store_true", default=True,
                       help="argmax decoding (the only sampler)")
    p_dec.add_argument("--timing-csv", help="write per-step timings here")
    p_dec.set_defaults(fn=_cmd_decode)

    p_ver = sub.add_parser("verify", help="run the invariant/oracle suite",
                           parents=[common])
    p_ver.set_defaults(fn=_cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 0  # downstream closed the pipe; not our error
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"flashkit: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
