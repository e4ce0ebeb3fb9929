"""Command-line entry point: ``tripse {train,eval,gradcheck,params,bench}``.

Exit codes: 0 ok, 1 verification failure, 2 configuration error, 3 data
error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import attention as attn
from . import config as C
from . import data as D
from . import kernels
from . import train as T
from .backbone import BackboneConfig, CheckpointError, ConfigError, build, stage_shapes
from .tensor import BatchNormState, FormatError, Module, Tensor, corrupted_backward, finite_diff_errors, no_grad

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4
RESOLVED_NAME = "config.resolved.txt"
METRICS_NAME = "metrics.csv"
GRADCHECK_TOL = 1e-4


def _fail(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _split_overrides(tokens: list[str]) -> dict:
    """``--key=value`` / ``--key value`` pairs left over by argparse."""
    out, i = {}, 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"missing value for {tok}")
            key, value = tok[2:], tokens[i + 1]
            i += 2
        out[key] = value
    return out


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


# ---------------------------------------------------------------------------
# data wiring


def load_split(cfg: C.RunConfig, split: str, _cache: dict | None = None) -> list[D.Sample]:
    """Samples of one split (Training / PublicTest / PrivateTest) at their native size."""
    samples = _load_split(cfg, split, _cache)
    return samples[:cfg.max_samples_per_split] if cfg.max_samples_per_split else samples


def _load_split(cfg: C.RunConfig, split: str, _cache: dict | None) -> list[D.Sample]:
    if split not in D.FER_SPLITS:
        raise D.DataError(f"unknown split {split!r}")
    if cfg.dataset == "synthetic":
        size = (cfg.image_size, cfg.image_size)
        per = cfg.synth_per_class if split == "Training" else cfg.synth_eval_per_class
        offset = D.FER_SPLITS.index(split)
        return D.synth_dataset(cfg.synth_classes, per, size, cfg.seed + offset, cfg.synth_noise)
    if not cfg.fer_csv:
        raise D.DataError("dataset = fer2013 needs fer_csv")
    cache = {} if _cache is None else _cache
    if "rows" not in cache:
        try:
            with open(cfg.fer_csv, newline="") as f:
                cache["rows"] = D.load_fer_csv(f)
        except OSError as exc:
            raise D.DataError(f"cannot read {cfg.fer_csv}: {exc}") from None
    return [s for s, tag in cache["rows"] if tag == split]


# ---------------------------------------------------------------------------
# train


def cmd_train(argv: list[str]) -> int:
    ap = argparse.ArgumentParser(prog="tripse train", description="Train the mini backbone.")
    ap.add_argument("--config", help="flat key = value run configuration")
    ap.add_argument("--resume", help="checkpoint (last.tsew) to continue from")
    args, rest = ap.parse_known_args(argv)
    try:
        text = Path(args.config).read_text() if args.config else None
        cfg = C.resolve(text, _split_overrides(rest))
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))

    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(C.dump(cfg))

    cache: dict = {}
    try:
        train_samples = load_split(cfg, "Training", cache)
        val_samples = load_split(cfg, cfg.val_split, cache)
        if not train_samples:
            raise D.DataError("training split is empty")
    except D.DataError as exc:
        return _fail(EXIT_DATA, str(exc))

    model = build(C.backbone_config(cfg))
    tcfg = C.train_config(cfg)
    state = None
    if args.resume:
        try:
            state = T.load_checkpoint(args.resume, model)
        except (CheckpointError, FormatError, OSError) as exc:
            return _fail(EXIT_CHECKPOINT, str(exc))
        if state is None:
            return _fail(EXIT_CHECKPOINT, f"{args.resume} has no optimizer section")

    def on_epoch(st: T.TrainState):
        m = st.history[-1]
        print(f"epoch {m.epoch}: loss={m.train_loss:.4f} train_acc={m.train_acc:.4f} "
              f"val_acc={m.val_acc:.4f} lr={m.lr:.3g}", flush=True)
        (out / METRICS_NAME).write_text(T.metrics_csv(st.history))
        T.save_checkpoint(out / "last.tsew", model, st)
        if cfg.checkpoint_every and st.epoch % cfg.checkpoint_every == 0:
            T.save_checkpoint(out / f"epoch_{st.epoch:03d}.tsew", model, st)

    try:
        state = T.fit(model, train_samples, val_samples, tcfg, state, on_epoch)
    except D.DataError as exc:
        return _fail(EXIT_DATA, str(exc))
    if not state.history:
        (out / METRICS_NAME).write_text(T.metrics_csv([]))
        print("best_val_acc=nan epoch=0")
        return EXIT_OK
    best = max(state.history, key=lambda m: (m.val_acc, -m.epoch))
    print(f"best_val_acc={best.val_acc:.6g} epoch={best.epoch}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def cmd_eval(argv: list[str]) -> int:
    ap = argparse.ArgumentParser(prog="tripse eval", description="Evaluate a checkpoint.")
    ap.add_argument("--checkpoint", required=True)
    ap.add_argument("--config", help=f"run config (default: {RESOLVED_NAME} next to the checkpoint)")
    ap.add_argument("--split", choices=D.FER_SPLITS, help="default: the config's val_split")
    ap.add_argument("--fer-csv", help="override the config's fer_csv")
    ap.add_argument("--batch-size", type=int, default=128)
    args = ap.parse_args(argv)

    cfg_path = Path(args.config) if args.config else Path(args.checkpoint).parent / RESOLVED_NAME
    try:
        overrides = {"fer_csv": args.fer_csv} if args.fer_csv else {}
        cfg = C.resolve(cfg_path.read_text(), overrides)
    except (ConfigError, OSError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))

    model = build(C.backbone_config(cfg))
    try:
        T.load_checkpoint(args.checkpoint, model)
    except (CheckpointError, FormatError, OSError) as exc:
        return _fail(EXIT_CHECKPOINT, str(exc))

    split = args.split or cfg.val_split
    try:
        samples = load_split(cfg, split)
    except D.DataError as exc:
        return _fail(EXIT_DATA, str(exc))
    if not samples:
        return _fail(EXIT_DATA, f"split {split} is empty")
    acc = T.evaluate(model, samples, args.batch_size)
    print(f"accuracy={acc:.6g} n={len(samples)}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# gradcheck


def randomize_running_stats(m: Module, rng: np.random.Generator):
    for sub in m.modules():
        if isinstance(sub, BatchNormState):
            c = sub.running_mean.shape[0]
            sub.running_mean = (0.1 * rng.standard_normal(c)).astype(sub.running_mean.dtype)
            sub.running_var = rng.uniform(0.5, 1.5, c).astype(sub.running_var.dtype)


def gradcheck_target(variant: str, shape: tuple[int, ...], kernel: int, ratio: int | None, seed: int,
                     widths=(4, 4, 4, 4), attention="tripse1") -> Module:
    """Build the module under test in eval mode, cast to float64."""
    rng = np.random.default_rng(seed)
    if variant == "backbone":
        n, c, h, w = shape
        cfg = BackboneConfig(in_channels=c, num_classes=3, widths=widths, attention=attention,
                             reduction=ratio, kernel_size=kernel, input_size=(h, w), seed=seed)
        m = build(cfg)
    else:
        _, c, h, w = shape
        m = attn.make_attention(variant, c, h, w, ratio, kernel, rng)
        if m is None:
            raise ConfigError("variant none has no parameters to check")
    randomize_running_stats(m, rng)
    return m.astype(np.float64).eval()


def gradcheck_report(m: Module, shape: tuple[int, ...], eps: float, seed: int) -> list[tuple[str, float]]:
    rng = np.random.default_rng(seed + 1)
    x = Tensor(rng.standard_normal(shape), requires_grad=True)
    probe = m(x)
    weights = Tensor(rng.standard_normal(probe.shape))
    names = ["input"] + [n for n, _ in m.named_parameters()]
    tensors = [x] + m.parameters()
    errs = finite_diff_errors(lambda: (m(x) * weights).sum(), tensors, eps)
    return list(zip(names, errs))


def cmd_gradcheck(argv: list[str]) -> int:
    ap = argparse.ArgumentParser(prog="tripse gradcheck",
                                 description="Finite-difference check of every parameter (float64, eval-mode BN).")
    ap.add_argument("--variant", default="tripse4", choices=[v for v in attn.VARIANTS if v != "none"] + ["backbone"])
    ap.add_argument("--kernel", type=int, default=3)
    ap.add_argument("--shape", default="1,4,5,5")
    ap.add_argument("--eps", type=float, default=1e-6)
    ap.add_argument("--ratio", type=int, default=0, help="SE reduction ratio (0 = variant default)")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--widths", default="4,4,4,4", help="backbone stage widths (variant backbone)")
    ap.add_argument("--attention", default="tripse1", help="attention inside the backbone (variant backbone)")
    ap.add_argument("--tol", type=float, default=GRADCHECK_TOL)
    ap.add_argument("--corrupt-backward", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)

    try:
        shape = _ints(args.shape)
        if len(shape) != 4:
            raise ConfigError("--shape needs four comma-separated extents N,C,H,W")
        m = gradcheck_target(args.variant, shape, args.kernel, args.ratio or None, args.seed,
                             _ints(args.widths), args.attention)
    except (ConfigError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))

    if args.corrupt_backward:
        with corrupted_backward():
            report = gradcheck_report(m, shape, args.eps, args.seed)
    else:
        report = gradcheck_report(m, shape, args.eps, args.seed)
    worst = 0.0
    for name, err in report:
        print(f"{name} max_rel_err={err:.3e}")
        worst = max(worst, err)
    ok = worst <= args.tol
    print(f"max_rel_err={worst:.3e} tol={args.tol:g} {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


# ---------------------------------------------------------------------------
# params


def format_millions(n: int) -> str:
    return f"{n / 1e6:.1f}M"


def cmd_params(argv: list[str]) -> int:
    ap = argparse.ArgumentParser(prog="tripse params", description="Attention parameter overhead per stage.")
    ap.add_argument("--variant", default="tripse1", choices=attn.VARIANTS)
    ap.add_argument("--widths", default="96,192,384,768")
    ap.add_argument("--ratio", type=int, default=0, help="SE reduction ratio (0 = variant default)")
    ap.add_argument("--kernel", type=int, default=7)
    ap.add_argument("--input-size", type=int, default=224)
    ap.add_argument("--stem-stride", type=int, default=4)
    ap.add_argument("--downsample", default="0,1,1,1")
    args = ap.parse_args(argv)
    try:
        cfg = BackboneConfig(widths=_ints(args.widths), downsample=tuple(map(bool, _ints(args.downsample))),
                             stem_stride=args.stem_stride, attention=args.variant, reduction=args.ratio or None,
                             kernel_size=args.kernel, input_size=(args.input_size, args.input_size))
    except (ConfigError, ValueError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    total = 0
    print(f"variant={args.variant} ratio={cfg.se_ratio} kernel={args.kernel}")
    for i, (c, h, w) in enumerate(stage_shapes(cfg), start=1):
        n = attn.variant_param_count(args.variant, c, h, w, cfg.se_ratio, args.kernel)
        total += n
        print(f"stage{i} C={c} H={h} W={w} params={n}")
    print(f"total={total} ({format_millions(total)})")
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench


def time_forward(block: Module, x: Tensor, iters: int, warmup: int = 10) -> list[int]:
    block.eval()
    with no_grad():
        for _ in range(warmup):
            block(x)
        samples = []
        for _ in range(iters):
            t0 = time.perf_counter_ns()
            block(x)
            samples.append(time.perf_counter_ns() - t0)
    return samples


def cmd_bench(argv: list[str]) -> int:
    ap = argparse.ArgumentParser(prog="tripse bench", description="Forward latency of attention blocks.")
    ap.add_argument("--variant", default="ta,tripse1", help="comma-separated variants; overhead is relative to the first")
    ap.add_argument("--shape", default="8,64,28,28")
    ap.add_argument("--iters", type=int, default=20)
    ap.add_argument("--kernel", type=int, default=7)
    ap.add_argument("--ratio", type=int, default=0)
    ap.add_argument("--backend", default="active", choices=["active", "both"] + sorted(kernels.BACKENDS))
    args = ap.parse_args(argv)
    if args.iters < 1:
        return _fail(EXIT_CONFIG, "--iters must be >= 1")
    try:
        shape = _ints(args.shape)
        n, c, h, w = shape
        variants = args.variant.split(",")
        blocks = {v: attn.make_attention(v, c, h, w, args.ratio or None, args.kernel, np.random.default_rng(0))
                  for v in variants}
    except (ValueError, ConfigError) as exc:
        return _fail(EXIT_CONFIG, str(exc))
    if args.backend == "active":
        backends = [kernels.BACKEND]
    elif args.backend == "both":
        backends = sorted(kernels.BACKENDS)
    else:
        backends = [args.backend]
    x = Tensor(np.random.default_rng(1).standard_normal(shape))
    prev = kernels.BACKEND
    try:
        for backend in backends:
            kernels.use_backend(backend)
            means = {}
            for v, blk in blocks.items():
                if blk is None:
                    samples = [0] * args.iters
                    params = 0
                else:
                    samples = time_forward(blk, x, args.iters)
                    params = attn.attention_param_count(blk)
                mean = sum(samples) / len(samples)
                means[v] = mean
                thr = n / (mean * 1e-9) if mean else float("inf")
                print(f"variant={v} backend={backend} shape={args.shape} params={params} iters={args.iters} "
                      f"mean_ns={mean:.0f} min_ns={min(samples)} throughput={thr:.1f}/s")
            base = variants[0]
            for v in variants[1:]:
                if means[base]:
                    print(f"overhead {v} vs {base} backend={backend}: {100 * (means[v] / means[base] - 1):+.1f}%")
    finally:
        kernels.use_backend(prev)
    return EXIT_OK


# ---------------------------------------------------------------------------

COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "params": cmd_params,
    "bench": cmd_bench,
}


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    if not argv or argv[0] in ("-h", "--help") or argv[0] not in COMMANDS:
        print(f"usage: tripse {{{','.join(COMMANDS)}}} [options]", file=sys.stderr)
        return EXIT_OK if argv and argv[0] in ("-h", "--help") else EXIT_CONFIG
    from threadpoolctl import threadpool_limits

    with threadpool_limits(int(os.environ.get("TRIPSE_THREADS", "1"))):
        return COMMANDS[argv[0]](argv[1:])


if __name__ == "__main__":
    sys.exit(main())
