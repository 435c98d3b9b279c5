"""``bflow`` command line: train, eval, sample, bench, perm-decompose, verify.

Exit codes: 0 success, 1 verification failure, 2 invalid input (config,
shapes, missing permutation), 3 training aborted on non-finite loss,
4 permutation decomposition failed its own check.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench as bench_mod
from .butterfly import layer_to_dense
from .checkpoint import checkpoint_read, checkpoint_save, container_bytes
from .config import ConfigError, RunConfig, model_config, train_config, validate
from .data import make_dataset, save_bfdata
from .errors import CorruptCheckpointError, InvalidArgumentError, ShapeMismatchError
from .flow import bits_per_dim, build_model, format_bpd
from .permutation import is_switch_only, perm_decompose, permutation_matrix
from .train import EmaState, TrainingAborted, ema_apply, evaluate, train_loop
from .verify import run_suite

log = logging.getLogger("bflow")

EXIT_OK, EXIT_VERIFY, EXIT_INVALID, EXIT_ABORTED, EXIT_PERM = 0, 1, 2, 3, 4
METRIC_COLUMNS = ("iter", "split", "nll_nats_per_dim", "bpd", "lr", "elapsed_ms")


class UsageError(Exception):
    """Reported on stderr, exit code 2."""


def thread_cap() -> int:
    raw = os.environ.get("BFLW_THREADS")
    if raw is None or raw == "":
        return 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise UsageError(f"BFLW_THREADS must be a positive integer, got {raw!r}")
    return n


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])


def _extras(dataset, ema: EmaState | None) -> dict:
    out = {}
    if dataset.perm is not None:
        out["dataset.perm"] = dataset.perm.astype(np.float64)
    if ema is not None:
        for k, v in ema.shadow.items():
            out[f"ema.{k}"] = v
    return out


def _with_ema(ckpt):
    """Model with any stored EMA shadows substituted."""
    shadow = {k[4:]: v for k, v in ckpt.extras.items() if k.startswith("ema.")}
    if not shadow:
        return ckpt.model
    return ema_apply(EmaState("stored", 0.0, shadow), ckpt.model)


# -- commands ---------------------------------------------------------------


def cmd_train(args) -> int:
    try:
        cfg = RunConfig.load(args.config)
        shape = validate(cfg)
    except (ConfigError, InvalidArgumentError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dataset = make_dataset(cfg.dataset, seed=cfg.seed)
    if dataset.shape != shape:
        raise UsageError(f"dataset shape {dataset.shape} differs from declared {shape}")
    run = cfg.to_dict()
    start, ema = 0, None
    if args.resume:
        try:
            ckpt = checkpoint_read(args.resume)
        except (OSError, CorruptCheckpointError) as exc:
            raise UsageError(f"cannot resume: {exc}") from None
        if ckpt.model.input_shape != shape:
            raise UsageError(f"checkpoint shape {ckpt.model.input_shape} vs dataset {shape}")
        model, start = ckpt.model, ckpt.iteration
        shadow = {k[4:]: v for k, v in ckpt.extras.items() if k.startswith("ema.")}
        if shadow and cfg.ema != "none":
            ema = EmaState(cfg.ema, cfg.ema_decay, shadow)
    else:
        model = build_model(model_config(cfg), shape)
    tcfg = train_config(cfg)

    def on_iter(it, m):
        if cfg.ckpt_every and it % cfg.ckpt_every == 0:
            checkpoint_save(m, out / f"ckpt_{it}.bflw", it, run, _extras(dataset, None))

    try:
        model, metrics = train_loop(model, dataset, tcfg, start_iter=start, callback=on_iter, ema=ema)
    except TrainingAborted as exc:
        write_metrics(out / "metrics.csv", exc.metrics)
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORTED
    write_metrics(out / "metrics.csv", metrics)
    last = max(start, cfg.max_iters)
    checkpoint_save(model, out / "ckpt_final.bflw", last, run, _extras(dataset, model.ema))
    val = [m for m in metrics if m["split"] == "val"]
    if val:
        print(json.dumps({"iter": last, "val_nll_nats_per_dim": val[-1]["nll_nats_per_dim"]}))
    return EXIT_OK


def _load_ckpt(path):
    try:
        return checkpoint_read(path)
    except (OSError, CorruptCheckpointError) as exc:
        raise UsageError(f"cannot load checkpoint: {exc}") from None


def cmd_eval(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    seed = (ckpt.run_config or {}).get("seed", 0)
    try:
        dataset = make_dataset(args.dataset, seed=seed)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from None
    model = _with_ema(ckpt)
    if dataset.shape != model.input_shape:
        raise UsageError(f"shape mismatch: dataset {dataset.shape}, model {model.input_shape}")
    x = dataset.split(args.split)
    try:
        lp = evaluate(model, x)
    except ShapeMismatchError as exc:
        raise UsageError(str(exc)) from None
    n_bits = dataset.n_bits or int((ckpt.run_config or {}).get("n_bits") or 0)
    result = {"n": int(x.shape[0]), "nll_nats_per_dim": -lp / dataset.dim}
    if n_bits > 0:
        result["bpd"] = bits_per_dim(lp, dataset.dim, n_bits)
        print(f"# {format_bpd(result['bpd'])} bits/dim", file=sys.stderr)
    print(json.dumps(result, sort_keys=True))
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt = _load_ckpt(args.ckpt)
    perm = ckpt.extras.get("dataset.perm")
    if args.unscramble and perm is None:
        raise UsageError("checkpoint stores no dataset permutation; cannot unscramble")
    model = _with_ema(ckpt)
    x = model.sample(args.n, seed=args.seed, temperature=args.temperature)
    out = Path(args.out)
    save_bfdata(out, "samples", x)
    print(f"wrote {args.n} samples to {out}")
    if perm is not None:
        p = perm.astype(np.int64)
        flat = x.reshape(x.shape[0], -1)
        un = np.empty_like(flat)
        un[:, p] = flat
        un_path = out.with_name(out.stem + ".unscrambled" + out.suffix)
        save_bfdata(un_path, "samples_unscrambled", un.reshape(x.shape))
        print(f"wrote unscrambled copy to {un_path}")
    return EXIT_OK


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.replace(",", " ").split()]


def cmd_bench(args) -> int:
    ops = [o.strip() for o in args.op.split(",") if o.strip()]
    bad = [o for o in ops if o not in bench_mod.OPS]
    if bad:
        raise UsageError(f"unknown op {bad[0]!r}; choose from {', '.join(bench_mod.OPS)}")
    rows = bench_mod.run_bench(ops, args.dims, args.batch, args.reps, args.block_sizes, args.seed)
    lines = ["op,dim,batch,median_ns,iqr_ns"] + [r.csv_row() for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    for op in ops:
        for b in args.batch:
            sel = [r for r in rows if r.op == op and r.batch == b]
            if op in ("matvec", "inverse") and len(sel) > 1:
                slope = bench_mod.loglog_slope([r.dim for r in sel], [r.median_ns for r in sel])
                print(f"# {op} batch={b}: log-log slope {slope:.3f}", file=sys.stderr)
    return EXIT_OK


def cmd_perm_decompose(args) -> int:
    if args.perm:
        try:
            perm = np.array(_int_list(Path(args.perm).read_text()), dtype=np.int64)
        except (OSError, ValueError) as exc:
            raise UsageError(f"cannot read permutation: {exc}") from None
    else:
        if args.size is None:
            raise UsageError("give --size or --perm")
        perm = np.random.default_rng(args.seed).permutation(args.size)
    try:
        layer = perm_decompose(perm)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from None
    ok = is_switch_only(layer) and np.array_equal(layer_to_dense(layer), permutation_matrix(perm))
    print(f"dim: {layer.dim}")
    print(f"factors: {len(layer.factors)}")
    print(f"levels: {' '.join(str(v) for v in layer.levels)}")
    print(f"verified: {'exact' if ok else 'FAILED'}")
    if args.dump:
        header = {"kind": "butterfly_layer", "dim": layer.dim, "levels": list(layer.levels)}
        arrays = {f"f{i}.w": f.weights for i, f in enumerate(layer.factors)}
        Path(args.dump).write_bytes(container_bytes(header, arrays))
    return EXIT_OK if ok else EXIT_PERM


def cmd_verify(args) -> int:
    checks = run_suite(args.suite)
    lines = ["check,max_err,tol,status"] + [c.csv_row() for c in checks]
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    failed = [c for c in checks if not c.passed]
    for c in failed:
        print(f"FAILED {c.name}: max error {c.max_err:.3e} > tol {c.tol:.1e}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bflow", description="Invertible butterfly flows.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="held-out NLL of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True, help='e.g. "two_rings:n=10000" or "file:path=x.bfdata"')
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw samples into a bfdata file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("-n", type=int, default=100)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--temperature", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.add_argument("--unscramble", action="store_true", help="require the stored permutation")
    s.set_defaults(func=cmd_sample)

    b = sub.add_parser("bench", help="time butterfly primitives")
    b.add_argument("--op", default=",".join(bench_mod.OPS), help="comma-separated ops")
    b.add_argument("--dims", type=_int_list, default=[2**k for k in range(8, 17)])
    b.add_argument("--batch", type=_int_list, default=[64])
    b.add_argument("--block-sizes", type=_int_list, default=[1, 2, 4, 8])
    b.add_argument("--reps", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--out")
    b.set_defaults(func=cmd_bench)

    d = sub.add_parser("perm-decompose", help="factor a permutation into switch-only butterflies")
    src = d.add_mutually_exclusive_group()
    src.add_argument("--size", type=int)
    src.add_argument("--perm", help="file of whitespace/comma separated indices")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--dump", help="write the layer in the BFLW1 container format")
    d.set_defaults(func=cmd_perm_decompose)

    v = sub.add_parser("verify", help="dense-oracle and finite-difference self-checks")
    v.add_argument("--suite", default="all", choices=("core", "blockwise", "flow", "grad", "all"))
    v.add_argument("--out", help="also write the CSV here")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        threads = 1 if args.command == "bench" else thread_cap()
        with threadpool_limits(limits=threads):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
