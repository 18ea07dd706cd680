"""``hdpl`` command line: train, eval, count-params, grad-check, bench.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .data import CorpusError, load_corpus, sequential_blocks, split_corpus
from .gradcheck import micro_config, run_grad_check
from .hdpl_op import hdpl_forward, hdpl_macs, init_hdpl
from .model import ModelConfig, TransformerModel, count_model_params, model_forward, param_shapes
from .rng import RngState
from .training import NonFiniteLossError, evaluate, init_train_state, metrics_summary, train_loop

log = logging.getLogger("hdpl")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
BYTES_PER_PARAM = 4


class UsageError(Exception):
    pass


def _thread_limit():
    n = os.environ.get("HDPL_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


def _resolve(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    try:
        return cfg.replace(
            mode=getattr(args, "mode", None),
            seed=getattr(args, "seed", None),
            max_steps=getattr(args, "max_steps", None),
            output_dir=getattr(args, "output_dir", None),
            kl_granularity=getattr(args, "kl_granularity", None),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _emit(data: dict, as_json: bool, text: str | None = None) -> None:
    if text and not as_json:
        print(text)
    print(json.dumps(data))


def _load_splits(cfg: RunConfig):
    if not cfg.corpus:
        raise UsageError("no corpus files configured ([run] corpus = ...)")
    missing = [p for p in cfg.corpus if not Path(p).is_file()]
    if missing:
        raise UsageError(f"corpus file(s) not found: {missing}")
    corpus = load_corpus(cfg.corpus)
    if cfg.vocab_size < corpus.vocab_size:
        raise UsageError(f"vocab_size {cfg.vocab_size} smaller than byte vocabulary {corpus.vocab_size}")
    return split_corpus(corpus, cfg.val_fraction, cfg.seq_len)


# ---------------------------------------------------------------------------
# count-params


def param_report(config: ModelConfig) -> dict:
    rows = [{"name": n, "shape": list(s), "count": int(np.prod(s))} for n, s in param_shapes(config)]
    per_block: dict[str, int] = {}
    for r in rows:
        key = ".".join(r["name"].split(".")[:2]) if r["name"].startswith("blocks.") else r["name"]
        per_block[key] = per_block.get(key, 0) + r["count"]
    total = count_model_params(config)
    if total != sum(r["count"] for r in rows):
        raise AssertionError("closed-form count disagrees with tensor enumeration")
    return {
        "mode": config.mode,
        "tensors": rows,
        "per_block": per_block,
        "total": total,
        "params_m": f"{total / 1e6:.2f}M",
        "size_mb": round(total * BYTES_PER_PARAM / 2**20, 2),
    }


def cmd_count_params(args) -> int:
    cfg = _resolve(args)
    report = param_report(cfg.model_config())
    lines = [f"{'tensor':40s} {'shape':>20s} {'count':>12s}"]
    for r in report["tensors"]:
        lines.append(f"{r['name']:40s} {str(tuple(r['shape'])):>20s} {r['count']:>12,d}")
    lines.append("")
    for k, v in report["per_block"].items():
        lines.append(f"{k:40s} {'':>20s} {v:>12,d}")
    lines.append(f"\n{report['mode']}: {report['total']:,d} parameters ({report['params_m']}), {report['size_mb']:.2f} MB")
    _emit(report, args.json, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------
# train


def cmd_train(args) -> int:
    cfg = _resolve(args)
    if args.no_grad_clip:
        cfg = dataclasses.replace(cfg, grad_clip=None)
    train, val = _load_splits(cfg)
    out = Path(cfg.output_dir)
    ckpt_dir = out / "checkpoints"
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(cfg.to_ini())

    tcfg = cfg.train_config()
    if args.resume:
        state = load_checkpoint(args.resume, TransformerModel(cfg.model_config(), seed=cfg.seed))
        state.schedule = cfg.schedule()
    else:
        model = TransformerModel(cfg.model_config(), seed=cfg.seed)
        state = init_train_state(model, cfg.schedule(), tcfg, cfg.seed)
    extra = cfg.to_dict()

    def save(st, path):
        save_checkpoint(st, path, extra)

    metrics_path = out / "metrics.jsonl"
    if not args.resume and metrics_path.exists():
        metrics_path.unlink()
    if state.step == 0:
        save(state, ckpt_dir / "step_0000000.ckpt")
    log.info("training %s model (%d params) for %d steps", cfg.mode, state.model.num_params(), cfg.max_steps)
    t0 = time.perf_counter()
    try:
        state, records = train_loop(state, train, val, tcfg, cfg.max_steps, metrics_path, ckpt_dir, save)
    except NonFiniteLossError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    save(state, ckpt_dir / "final.ckpt")
    summary = {
        "model": cfg.mode,
        "params": state.model.num_params(),
        "params_m": round(state.model.num_params() / 1e6, 2),
        "size_mb": round(state.model.num_params() * BYTES_PER_PARAM / 2**20, 2),
        **metrics_summary(records),
        "wall_s": round(time.perf_counter() - t0, 2),
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    text = format_summary_table([summary])
    _emit(summary, args.json, text)
    return EXIT_OK


def format_summary_table(rows: list[dict]) -> str:
    def fmt(v):
        return f"{v:.4f}" if isinstance(v, float) else "-"

    lines = [f"{'Model':12s} {'Params (M)':>11s} {'Size (MB)':>10s} {'Final Val Loss':>15s} {'Min Val Loss':>13s}"]
    for r in rows:
        lines.append(
            f"{r['model']:12s} {r['params_m']:>11.2f} {r['size_mb']:>10.2f} "
            f"{fmt(r.get('final_val_loss')):>15s} {fmt(r.get('min_val_loss')):>13s}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# eval


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    _, val = _load_splits(cfg)
    model = TransformerModel(cfg.model_config(), seed=cfg.seed)
    state = load_checkpoint(args.checkpoint, model)
    loss = evaluate(state.model, val, cfg.batch_size, cfg.seq_len, cfg.eval_batches)
    report = {"checkpoint": str(args.checkpoint), "step": state.step, "val_loss": loss, "aux_loss": 0.0}
    if args.dump_latents:
        path = Path(args.dump_latents) if args.dump_latents is not True else Path(cfg.output_dir) / "latents.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        n = 0
        with open(path, "w") as fh:
            for b, batch in enumerate(sequential_blocks(val, cfg.batch_size, cfg.seq_len, cfg.eval_batches)):
                res = model_forward(state.model, batch.inputs, training=False, record_latents=True)
                for rec in res.latents:
                    fh.write(
                        json.dumps(
                            {
                                "batch": b,
                                "layer": rec.layer_id,
                                "shape": list(rec.mu.shape),
                                "mu": rec.mu.tolist(),
                                "logvar": rec.logvar.tolist(),
                            }
                        )
                        + "\n"
                    )
                    n += 1
        report["latent_records"] = n
        report["latents_path"] = str(path)
    _emit(report, args.json, f"step {state.step}: val_loss {loss:.6f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check


def cmd_grad_check(args) -> int:
    if args.config:
        cfg = _resolve(args).model_config()
        base = {k: getattr(cfg, k) for k in ("d_model", "n_layers", "n_heads", "head_dim", "d_hidden", "vocab_size", "seq_len", "rank", "k_groups", "beta", "kl_granularity")}
    else:
        base = {}
    configs = [micro_config("baseline", **base), micro_config("hybrid", **base)]
    ctx = ad.inject_adjoint_fault(args.inject_fault) if args.inject_fault else contextlib.nullcontext()
    with ctx:
        report = run_grad_check(configs, seed=args.seed if args.seed is not None else 42, tolerance=args.tolerance)
    lines = [f"{name:50s} {err:.3e} {'ok' if err < report.tolerance else 'FAIL'}" for name, err in report.errors.items()]
    for name, frac in report.clamped.items():
        lines.append(f"{name:50s} {frac:.0%} of KL elements clamped")
    lines.append(f"max relative error {report.max_error:.3e} (tolerance {report.tolerance:g})")
    lines.append("PASS" if report.passed else f"FAIL: {', '.join(report.failures)}")
    data = {"passed": report.passed, "max_error": report.max_error, "tolerance": report.tolerance, "errors": report.errors, "failures": report.failures, "clamped": report.clamped}
    _emit(data, args.json, "\n".join(lines))
    return EXIT_OK if report.passed else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# bench


def _time_it(fn, repeats: int) -> float:
    fn()
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats


def cmd_bench(args) -> int:
    cfg = _resolve(args)
    mc = cfg.model_config()
    b, seq = args.batch_size, min(cfg.seq_len, args.seq_len)
    tokens = b * seq
    rng = RngState(cfg.seed)
    layers = []
    seen = set()
    for name in ("q", "gate", "down"):
        d_in, d_out = mc.projection_dims(name)
        if (d_in, d_out) in seen:
            continue
        seen.add((d_in, d_out))
        x = ad.Tensor(rng.normal(99, (b, seq, d_in)).astype(np.float32))
        dense_w = ad.Tensor((rng.normal(100, (d_out, d_in)) / math.sqrt(d_in)).astype(np.float32), requires_grad=True)
        layer = init_hdpl(d_in, d_out, mc.k_groups, mc.rank, mc.beta, rng)

        def dense_step():
            ad.backward(ad.sum_(ad.linear(x, dense_w)))
            dense_w.grad = None

        def hybrid_step():
            out = hdpl_forward(layer, x, rng, training=True)
            ad.backward(ad.sum_(out.y) + out.aux_loss)

        t_dense = _time_it(dense_step, args.repeats)
        t_hybrid = _time_it(hybrid_step, args.repeats)
        dense_macs = d_in * d_out
        layers.append(
            {
                "shape": [d_in, d_out],
                "dense_tokens_per_sec": tokens / t_dense,
                "hybrid_tokens_per_sec": tokens / t_hybrid,
                "throughput_ratio": t_dense / t_hybrid,
                "dense_flops_per_token": 2 * dense_macs,
                "hybrid_flops_per_token": 2 * hdpl_macs(d_in, d_out, mc.k_groups, mc.rank),
            }
        )
    models = {}
    for mode in ("baseline", "hybrid"):
        model = TransformerModel(ModelConfig(**{**mc.to_dict(), "mode": mode}), seed=cfg.seed)
        toks = RngState(cfg.seed).integers(7, b * (seq + 1), mc.vocab_size).reshape(b, seq + 1)

        def step():
            res = model_forward(model, toks[:, :-1], toks[:, 1:], rng=rng, training=True)
            ad.backward(res.total_loss)
            model.zero_grad()

        models[mode] = {"tokens_per_sec": tokens / _time_it(step, args.repeats), "params": model.num_params()}
    result = {
        "batch_size": b,
        "seq_len": seq,
        "layers": layers,
        "models": models,
        "model_throughput_ratio": models["hybrid"]["tokens_per_sec"] / models["baseline"]["tokens_per_sec"],
    }
    lines = [f"{'layer':>12s} {'dense tok/s':>12s} {'hdpl tok/s':>12s} {'ratio':>7s} {'dense FLOP':>11s} {'hdpl FLOP':>11s}"]
    for r in layers:
        lines.append(
            f"{str(tuple(r['shape'])):>12s} {r['dense_tokens_per_sec']:>12.0f} {r['hybrid_tokens_per_sec']:>12.0f} "
            f"{r['throughput_ratio']:>7.2f} {r['dense_flops_per_token']:>11,d} {r['hybrid_flops_per_token']:>11,d}"
        )
    for mode, m in models.items():
        lines.append(f"{mode:>12s} model: {m['tokens_per_sec']:.0f} tok/s, {m['params']:,d} params")
    _emit(result, args.json, "\n".join(lines))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hdpl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode=True):
        p.add_argument("--config", type=str, default=None)
        if mode:
            p.add_argument("--mode", choices=("baseline", "hybrid"), default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output-dir", type=str, default=None)
        p.add_argument("--kl-granularity", choices=("element", "token"), default=None)
        p.add_argument("--json", action="store_true", help="print only the JSON report")

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.add_argument("--max-steps", type=int, default=None, help="total optimizer steps; also the cosine horizon")
    p.add_argument("--resume", type=str, default=None, help="checkpoint to continue from")
    p.add_argument("--no-grad-clip", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="validation loss of a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument(
        "--dump-latents", nargs="?", const=True, default=None, metavar="PATH",
        help="write tapped (mu, logvar) per hybrid layer as JSONL (default OUTPUT_DIR/latents.jsonl)",
    )
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count-params", help="exact parameter accounting")
    common(p)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    common(p, mode=False)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--inject-fault", default=None, metavar="OP", help="scale one op's adjoint (negative control)")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("bench", help="dense vs hybrid throughput")
    common(p)
    p.add_argument("--batch-size", type=int, default=2)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        with _thread_limit():
            return args.func(args)
    except (ConfigError, UsageError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, OSError, RuntimeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
