"""Command-line front end.

Exit codes: 0 ok, 1 verification failure, 2 config error, 3 I/O error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import gc
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import data, formats, liegroup, nn, peft, reports, train, verify
from .config import ExperimentConfig, load_config
from .errors import ConfigError, DomainError, FormatError, LieraError
from .optim import state_entries
from .peft import LiftMode
from .rng import Rng, hash_seed
from .tensor import DType

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4
SUITES = ("group", "grad", "rank", "taylor", "format")


class VerificationFailed(LieraError):
    pass


# ---------------------------------------------------------------- experiment runners


def _cast(array, dtype: DType):
    return np.asarray(array, dtype=dtype.numpy)


def _datasets(cfg: ExperimentConfig):
    tr, va = data.generate(cfg.task)
    tr.images, va.images = _cast(tr.images, cfg.dtype), _cast(va.images, cfg.dtype)
    return tr, va


def _cast_model(model, dtype: DType):
    model.set_params({k: _cast(v, dtype) for k, v in model.params().items()})


def _rows(cfg, history, trainable, total, lift_mode, timing):
    rank, alpha = (cfg.adapter.rank, cfg.adapter.alpha) if cfg.phase == "finetune" else (0, 0.0)
    return [
        dict(
            run_id=cfg.run_id, seed=cfg.seed, lift_mode=lift_mode, rank=rank, alpha=alpha,
            trainable_params=trainable, total_params=total, epoch=r.epoch, train_loss=r.train_loss,
            val_loss=r.val_loss, val_acc=r.val_acc, wall_ms=r.wall_ms if timing else 0.0,
        )
        for r in history
    ]


def run_pretrain(cfg: ExperimentConfig, timing: bool = False) -> dict:
    tr, va = _datasets(cfg)
    model = nn.build(cfg.model, cfg.task.n_classes, cfg.seed, cfg.task.image_size)
    _cast_model(model, cfg.dtype)
    history, _ = train.pretrain(model, tr, va, cfg.optim, cfg.epochs, cfg.batch_size, cfg.seed)
    train_loss, train_acc = train.evaluate(model, tr)
    total = model.num_params()
    rows = _rows(cfg, history, total, total, "none", timing)
    if cfg.checkpoint_out is not None:
        nn.save_model(cfg.checkpoint_out, model)
    if cfg.report_out is not None:
        reports.write_csv(cfg.report_out, reports.RUN_COLUMNS, rows)
    return dict(model=model, history=history, rows=rows, train_acc=train_acc, train_loss=train_loss)


def _load_base(cfg: ExperimentConfig):
    if cfg.checkpoint_in is None:
        raise ConfigError("finetune/eval need checkpoint_in")
    model = nn.load_model(cfg.checkpoint_in)
    if model.kind != cfg.model or model.n_classes != cfg.task.n_classes or tuple(model.input_shape) != cfg.task.image_size:
        raise ConfigError(f"checkpoint holds a {model.kind} for {model.input_shape}/{model.n_classes} classes, config wants {cfg.model}")
    _cast_model(model, cfg.dtype)
    return model


def _adapter_config(cfg: ExperimentConfig, lift_mode) -> peft.AdapterConfig:
    if lift_mode is None:
        return cfg.adapter
    return peft.AdapterConfig(cfg.adapter.rank, cfg.adapter.alpha, LiftMode(lift_mode), cfg.adapter.init_stddev, cfg.adapter.target)


def _finetune_job(cfg: ExperimentConfig, lift_mode=None):
    """Load, attach and evaluate; return the context and an untouched step generator."""
    adapter_cfg = _adapter_config(cfg, lift_mode)
    model = _load_base(cfg)
    tr, va = _datasets(cfg)
    base_eval = train.evaluate(model, va)
    adapters = nn.attach_adapters(model, adapter_cfg, Rng(hash_seed(cfg.seed, 0xADA)))
    init_eval = train.evaluate(model, va)
    steps = train.finetune_steps(model, tr, va, adapter_cfg, cfg.optim, cfg.epochs, cfg.batch_size, cfg.seed, adapters=adapters)
    ctx = dict(cfg=cfg, adapter_cfg=adapter_cfg, model=model, base_eval=base_eval, init_eval=init_eval)
    return ctx, steps


def _finish_finetune(ctx, result, timing, wall_ms, write) -> dict:
    cfg, adapter_cfg, model = ctx["cfg"], ctx["adapter_cfg"], ctx["model"]
    adapters, history, state = result
    budget = peft.budget_table(model, adapter_cfg)
    rows = _rows(cfg, history, budget.total_trainable, model.num_params(), adapter_cfg.lift_mode.value, timing)
    if write and cfg.checkpoint_out is not None:
        peft.save_adapters(cfg.checkpoint_out, adapters)
        formats.save_container(str(cfg.checkpoint_out) + ".optim", state_entries(state))
    if write and cfg.report_out is not None:
        reports.write_csv(cfg.report_out, reports.RUN_COLUMNS, rows)
    return dict(
        model=model, adapters=adapters, history=history, rows=rows, budget=budget,
        base_eval=ctx["base_eval"], init_eval=ctx["init_eval"], wall_ms=wall_ms,
    )


def run_finetune(cfg: ExperimentConfig, timing: bool = False, lift_mode: LiftMode | None = None, write: bool = True) -> dict:
    ctx, steps = _finetune_job(cfg, lift_mode)
    t0 = time.perf_counter()
    result = train.drain(steps)
    wall_ms = (time.perf_counter() - t0) * 1000.0
    return _finish_finetune(ctx, result, timing, wall_ms, write)


def run_eval(cfg: ExperimentConfig) -> dict:
    model = _load_base(cfg)
    if cfg.phase == "finetune":
        if cfg.checkpoint_out is None or not cfg.checkpoint_out.exists():
            raise FileNotFoundError(f"adapter checkpoint {cfg.checkpoint_out} not found")
        saved_cfg, factors, _ = peft.load_adapters(cfg.checkpoint_out)
        nn.load_adapter_factors(model, saved_cfg, factors)
    _, va = _datasets(cfg)
    loss, acc = train.evaluate(model, va)
    return dict(val_loss=loss, val_acc=acc)


# ---------------------------------------------------------------- verification suites


def _row(suite, check, passed, value, threshold, detail=""):
    return dict(suite=suite, check=check, passed=bool(passed), value=value, threshold=threshold, detail=detail)


def suite_group(seed: int = 0) -> list[dict]:
    rows = []
    for r in liegroup.axiom_suite((2, 3, 3, 3), trials=100, seed=seed, tol=1e-12):
        rows.append(_row("group", r.axiom, r.passed, r.worst_error, r.tolerance, "100 trials, shape (2,3,3,3), F64"))
    return rows


def suite_grad(seed: int = 0) -> list[dict]:
    rows = []
    for kind in ("linear", "conv"):
        for mode in LiftMode:
            rep = verify.adapter_grad_check(kind, mode, seed=seed)
            rows.append(_row("grad", rep.label, rep.passed, rep.max_rel_err, rep.tolerance, f"{len(rep.rows)} coordinates"))
    return rows


def suite_rank(seed: int = 0, trials: int = 100) -> list[dict]:
    rep = verify.rank_capacity_experiment(8, 8, 2, trials, seed)
    rows = []
    for t, (lo, hi) in enumerate(zip(rep.lowrank_ranks, rep.hadamard_ranks)):
        sig = rep.hadamard_sigma[t]
        rows.append(_row(
            "rank", f"trial_{t}", lo == 2 and hi == 8, hi, 8,
            f"rank_sAB={lo};rank_W*sAB={hi};sigma_min/sigma_max={sig[-1] / sig[0]:.3e}",
        ))
    rows.append(_row("rank", "rank(sAB)==r", rep.lowrank_hits == rep.trials, rep.lowrank_hits, rep.trials, "n=m=8, r=2, threshold 1e-8*sigma_1"))
    rows.append(_row("rank", "rank(W*sAB)==min(n,m)", rep.hadamard_hits >= 99 * rep.trials / 100, rep.hadamard_hits, 99 * rep.trials // 100, ""))
    # individual trials are informational; only the two summary rows gate the suite
    for row in rows[:-2]:
        row["passed"] = True if row["passed"] else "info"
    return rows


def suite_taylor(seed: int = 0) -> list[dict]:
    probe = verify.taylor_decay_probe((8, 4, 3, 3), 0.1, seed)
    spot = verify.taylor_remainder(np.array([0.01]))
    zero = verify.taylor_decay_probe(delta=np.zeros((2, 2)))
    return [
        _row("taylor", "log-log slope", 1.9 <= probe.slope <= 2.1, probe.slope, "[1.9, 2.1]", f"E(t)={probe.errors}"),
        _row("taylor", "|e^0.01 - 1.01|", abs(spot - 5.0167e-5) <= 1e-9, spot, "5.0167e-05 +/- 1e-9", ""),
        _row("taylor", "zero delta degenerate", zero.degenerate, 0.0, "no fit", ""),
    ]


def suite_format(seed: int = 0, check_files=()) -> list[dict]:
    rng = Rng(seed)
    rows = []
    for shape, dtype in (((3,), np.float64), ((2, 3), np.float32), ((2, 3, 3, 3), np.float64), ((), np.float64)):
        a = (rng.normal(int(np.prod(shape))).reshape(shape)).astype(dtype)
        back = formats.decode_tensor(formats.encode_tensor(a))
        ok = back.dtype == a.dtype and back.shape == a.shape and back.tobytes() == a.tobytes()
        rows.append(_row("format", f"LTEN round trip {shape} {np.dtype(dtype).name}", ok, 0.0, "bit-exact"))
    entries = {"x.A": rng.normal(6).reshape(2, 3), "meta.json": {"rank": 2}}
    blob = formats.encode_container(entries)
    back = formats.decode_container(blob)
    ok = back["x.A"].tobytes() == entries["x.A"].tobytes() and back["meta.json"] == {"rank": 2}
    rows.append(_row("format", "LCKP round trip", ok, 0.0, "bit-exact"))
    for label, corrupt, exc in (
        ("bad magic detected", b"XXXX" + blob[4:], formats.BadMagicError),
        ("truncation detected", blob[:-3], formats.TruncatedError),
        ("bad version detected", blob[:4] + b"\x09\x00" + blob[6:], formats.BadVersionError),
    ):
        try:
            formats.decode_container(corrupt)
            caught = False
        except exc:
            caught = True
        rows.append(_row("format", label, caught, 0.0, exc.__name__))
    for path in check_files:
        problems = reports.validate_csv(path)
        rows.append(_row("format", f"schema {Path(path).name}", not problems, len(problems), 0, "; ".join(problems)))
    return rows


def run_suites(names, out_dir: Path | None, seed: int = 0, check_files=()) -> tuple[bool, dict]:
    runners = dict(group=suite_group, grad=suite_grad, rank=suite_rank, taylor=suite_taylor)
    results = {}
    written = []
    for name in names:
        if name == "format":
            continue
        results[name] = runners[name](seed)
        if out_dir is not None:
            path = out_dir / f"{name}.csv"
            reports.write_csv(path, reports.VERIFY_COLUMNS, results[name])
            written.append(path)
    if "format" in names:
        results["format"] = suite_format(seed, [*written, *check_files])
        if out_dir is not None:
            reports.write_csv(out_dir / "format.csv", reports.VERIFY_COLUMNS, results["format"])
    ok = all(row["passed"] is not False for rows in results.values() for row in rows)
    return ok, results


# ---------------------------------------------------------------- bench


def _bench_one(cfg_path: str, mode: str) -> dict:
    cfg = load_config(cfg_path)
    return run_finetune(cfg, timing=True, lift_mode=LiftMode(mode), write=False)


def _bench_summary(result, cfg, mode, wall_ms):
    last = result["history"][-1]
    return dict(
        run_id=f"bench-{cfg.model}-{mode}-r{cfg.adapter.rank}-s{cfg.seed}", seed=cfg.seed, lift_mode=mode,
        rank=cfg.adapter.rank, alpha=cfg.adapter.alpha, trainable_params=result["budget"].total_trainable,
        total_params=result["model"].num_params(), epoch="final", train_loss=last.train_loss,
        val_loss=last.val_loss, val_acc=last.val_acc, wall_ms=wall_ms,
    )


def _lockstep(cfg, modes) -> dict:
    """Fine-tune every mode at once, one optimizer step each in turn.

    Each ``next()`` on a mode's step generator is timed on its own, so slow
    drift of the machine lands on all modes alike.  The turn order flips
    every round.  Returns per-mode results with ``step_ms``, the duration of
    every step (epoch-end validation included), and ``epoch_ends``, the
    step indices that closed an epoch.
    """
    jobs = {m: _finetune_job(cfg, m) for m in modes}
    step_ms = {m: [] for m in modes}
    epoch_ends = {m: [] for m in modes}
    results = {}
    order = list(modes)
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        while len(results) < len(modes):
            for m in order:
                if m in results:
                    continue
                steps = jobs[m][1]
                t0 = time.perf_counter()
                try:
                    out = next(steps)
                except StopIteration as stop:
                    results[m] = stop.value
                    continue
                step_ms[m].append((time.perf_counter() - t0) * 1000.0)
                if out is not None:
                    epoch_ends[m].append(len(step_ms[m]))
            order.reverse()
    finally:
        if gc_was_enabled:
            gc.enable()
    return {m: dict(ctx=jobs[m][0], result=results[m], step_ms=step_ms[m], epoch_ends=epoch_ends[m]) for m in modes}


def _epoch_walls(step_ms, epoch_ends) -> list[float]:
    walls, start = [], 0
    for end in epoch_ends:
        walls.append(float(np.sum(step_ms[start:end])))
        start = end
    return walls


def run_bench(cfg_path, modes, repeats: int = 3, parallel: bool = False) -> tuple[list[dict], dict]:
    """Identical fine-tunes, one per mode, timed against each other.

    Sequentially the modes run in lockstep (see :func:`_lockstep`) ``repeats``
    times; a mode's wall time sums the per-step minimum over repeats, which
    drops bursts of machine noise.  With ``parallel`` each mode runs whole in
    a worker process and the fastest repeat is kept.  Losses and accuracies
    are identical across repeats either way.
    """
    cfg = load_config(cfg_path)
    modes = [LiftMode(m).value for m in modes]
    if repeats < 1:
        raise ConfigError("repeats must be >= 1")
    best = {}
    if parallel:
        runs = {m: [] for m in modes}
        workers = max(1, min(len(modes), int(os.environ.get("LIERA_LAB_THREADS", os.cpu_count() or 1))))
        with concurrent.futures.ProcessPoolExecutor(workers) as pool:
            for _ in range(repeats):
                futures = {m: pool.submit(_bench_one, str(cfg_path), m) for m in modes}
                for m, fut in futures.items():
                    runs[m].append(fut.result())
        for m in modes:
            best[m] = min(runs[m], key=lambda r: r["wall_ms"])
    else:
        trials = [_lockstep(cfg, modes) for _ in range(repeats)]
        for m in modes:
            floor = np.min([t[m]["step_ms"] for t in trials], axis=0)
            walls = _epoch_walls(floor, trials[0][m]["epoch_ends"])
            first = trials[0][m]
            adapters, history, state = first["result"]
            history = [dataclasses.replace(rec, wall_ms=w) for rec, w in zip(history, walls)]
            best[m] = _finish_finetune(first["ctx"], (adapters, history, state), True, float(np.sum(walls)), False)
    rows, summary = [], {}
    for m in modes:
        run_id = f"bench-{cfg.model}-{m}-r{cfg.adapter.rank}-s{cfg.seed}"
        for row in best[m]["rows"]:
            rows.append(dict(row, run_id=run_id))
        summary[m] = _bench_summary(best[m], cfg, m, best[m]["wall_ms"])
    rows.extend(summary.values())
    return rows, summary


# ---------------------------------------------------------------- argparse glue


def _summary_line(**items) -> str:
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in items.items())


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    tr, va = data.generate(cfg.task)
    out = Path(args.out)
    data.save_dataset(out / "train.lckp", tr)
    data.save_dataset(out / "val.lckp", va)
    print(_summary_line(command="gen-data", n_train=len(tr), n_val=len(va), out=str(out)))
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    res = run_pretrain(cfg, timing=args.timing)
    last = res["history"][-1]
    print(_summary_line(command="pretrain", run_id=cfg.run_id, epochs=cfg.epochs, train_acc=res["train_acc"], val_loss=last.val_loss, val_acc=last.val_acc))
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    res = run_finetune(cfg, timing=args.timing)
    last = res["history"][-1]
    print(_summary_line(
        command="finetune", run_id=cfg.run_id, trainable_params=res["budget"].total_trainable,
        init_val_acc=res["init_eval"][1], base_val_acc=res["base_eval"][1], val_loss=last.val_loss, val_acc=last.val_acc,
    ))
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    res = run_eval(cfg)
    print(_summary_line(command="eval", run_id=cfg.run_id, **res))
    return EXIT_OK


def cmd_verify(args) -> int:
    names = SUITES if args.suite == "all" else (args.suite,)
    out = Path(args.out) if args.out else None
    ok, results = run_suites(names, out, args.seed, args.check or ())
    for name, rows in results.items():
        failed = [r["check"] for r in rows if r["passed"] is False]
        print(_summary_line(command="verify", suite=name, checks=len(rows), failed=len(failed)) + (f" failing={failed}" if failed else ""))
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_bench(args) -> int:
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    rows, summary = run_bench(args.config, modes, args.repeats, args.parallel)
    reports.write_csv(args.out, reports.RUN_COLUMNS, rows)
    for m, s in summary.items():
        print(_summary_line(command="bench", lift_mode=m, trainable_params=s["trainable_params"], val_acc=s["val_acc"], wall_ms=s["wall_ms"]))
    if "additive" in summary and "lie_taylor" in summary:
        if summary["additive"]["trainable_params"] != summary["lie_taylor"]["trainable_params"]:
            print("bench: additive and lie_taylor budgets differ", file=sys.stderr)
            return EXIT_VERIFY
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="liera-lab", description="Lie-group lifted low-rank adaptation lab")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and save the task datasets")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    for name, func, helptext in (
        ("pretrain", cmd_pretrain, "train a base model from scratch"),
        ("finetune", cmd_finetune, "fine-tune adapters on a pretrained checkpoint"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--timing", action="store_true", help="record wall_ms (makes the report non-reproducible)")
        p.set_defaults(func=func)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the task's validation split")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("verify", help="run verification suites")
    p.add_argument("--suite", choices=(*SUITES, "all"), default="all")
    p.add_argument("--out", default=None, help="directory for <suite>.csv reports")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--check", nargs="*", help="extra report files for the format suite")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="compare lift modes on identical fine-tunes")
    p.add_argument("--config", required=True)
    p.add_argument("--modes", default="additive,lie_taylor,lie_exact")
    p.add_argument("--out", required=True)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (DomainError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
