"""Command-line entry point: ``tfcompress <command> ...``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure. Every command
prints a one-line provenance header first (version, seed, config digest).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    """Invalid command-line input (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    # argparse already reports every missing required flag in one message; only the exit code changes
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_INVALID)


def fmt(v) -> str:
    """Six significant digits for every reported number."""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if np.isinf(v):
            return "inf" if v > 0 else "-inf"
        return f"{v:.6g}"
    return str(v)


def provenance(args) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    digest = hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:12]
    seed = getattr(args, "seed", None)
    return f"# tfcompress {__version__} | command={args.command} | seed={'-' if seed is None else seed} | config={digest}"


def _exists(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _spec(args):
    from .graph import SpecError, load_spec

    try:
        return load_spec(args.spec, args.mult, False if args.no_residual else None)
    except (SpecError, FileNotFoundError) as e:
        raise UsageError(str(e)) from None


def _dataset(path):
    from .synthdata import SynthDataset

    return SynthDataset.load(_exists(path, "dataset"))


def _load(path, what="checkpoint"):
    from .io import load_model

    return load_model(_exists(path, what))


def _executable(path):
    """A generator checkpoint, bound to its stored precision assignment when it has one."""
    from .quant import PrecisionAssignment, build_quantized_model
    from .quant.calibrate import Calibration

    model, ck = _load(path)
    if ck.meta.get("kind") != "generator":
        raise UsageError(f"{path} does not hold a generator")
    if not ck.quant:
        return model, model.generate, "fp32"
    a = PrecisionAssignment(ck.quant["assignment"])
    cal = Calibration.from_dict(ck.quant["calibration"]) if ck.quant.get("calibration") else None
    ex = build_quantized_model(model, a, cal)
    return model, ex.generate, ck.quant.get("name", "custom")


def _assignment(token, model):
    from .quant import PRESETS, PrecisionAssignment
    from .quant.executable import PRECISIONS

    if token in PRESETS:
        return PRESETS[token](model.spec)
    if token in PRECISIONS:
        return PrecisionAssignment.uniform(model.layer_names, token)
    a = PrecisionAssignment.load(_exists(token, "assignment file"))
    try:
        a.validate(model.layer_names)
    except (KeyError, ValueError) as e:
        raise UsageError(str(e)) from None
    return a


def _train_cfg(args):
    from .distill.config import TrainConfig

    return TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                       log_every=max(1, args.steps // 10), snapshot_every=max(1, args.steps // 10))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_build(args):
    from .graph import build_model, count_macs, count_params
    from .io import save_model

    spec = _spec(args)
    model = build_model(spec, args.seed)
    save_model(model, args.out, seed=args.seed)
    print(f"built {spec.name} mult={fmt(spec.channel_multiplier)} residuals={spec.residuals_enabled} "
          f"layers={len(model.layer_names)} params={count_params(spec)} macs={count_macs(spec)} -> {args.out}")


def cmd_count(args):
    from .graph import count_macs, count_params, load_spec, per_layer_table

    spec = _spec(args)
    if args.per_layer:
        print("index,name,kind,params,macs")
        for r in per_layer_table(spec):
            print(f"{r['index']},{r['name']},{r['kind']},{r['params']},{r['macs']}")
    p, m = count_params(spec), count_macs(spec)
    print(f"params {p} ({fmt(p / 1e6)}M)")
    print(f"macs {m} ({fmt(m / 1e9)}G)")
    if spec.channel_multiplier != 1.0 or not spec.residuals_enabled:
        base = load_spec(args.spec)
        rp, rm = count_params(base) / p, count_macs(base) / m
        print(f"params reduction {fmt(rp)}x vs {base.name} x1.0 ({'>=' if rp >= 28 else '<'}28x)")
        print(f"macs reduction {fmt(rm)}x vs {base.name} x1.0 ({'>=' if rm >= 28 else '<'}28x)")


def cmd_gen_data(args):
    from .synthdata import generate_dataset

    ds = generate_dataset(args.seed, args.identities, args.clips, args.clip_len)
    ds.save(args.out)
    print(f"dataset {ds.digest()} clips={ds.n_clips} clip_len={ds.clip_len} "
          + " ".join(f"{s}={len(ds.clips(s))}" for s in ("train", "test", "calib")) + f" -> {args.out}")


def cmd_train_expert(args):
    from .io import save_model
    from .synthdata import train_sync_expert

    ds = _dataset(args.data)
    expert, rec = train_sync_expert(ds, args.steps, args.seed)
    save_model(expert, args.out, seed=args.seed, heldout_accuracy=rec.accuracy)
    print(f"expert heldout_accuracy={fmt(rec.accuracy)} final_loss={fmt(rec.history[-1])} -> {args.out}")


def _log_fn(args):
    from .io import RunLog

    return RunLog(args.log) if args.log else None


def cmd_train_teacher(args):
    from .distill.config import SyncSchedule, TeacherObjectiveConfig
    from .distill.train import train_teacher
    from .io import save_model

    spec = _spec(args)
    ds = _dataset(args.data)
    expert, _ = _load(args.expert, "expert")
    obj = TeacherObjectiveConfig(sync_schedule=SyncSchedule(args.sync_schedule))
    res = train_teacher(spec, ds, obj, expert, _train_cfg(args), run_log=_log_fn(args), kind=args.kind)
    save_model(res.model, args.out, seed=args.seed, config_digest=res.meta["config_digest"])
    last = res.history[-1] if res.history else {}
    print(f"trained {args.kind} steps={args.steps} "
          + " ".join(f"{k}={fmt(v)}" for k, v in last.items() if isinstance(v, float)) + f" -> {args.out}")


def cmd_distill(args):
    from .distill.config import StudentObjectiveConfig, SyncSchedule
    from .distill.train import train_student
    from .io import save_model

    spec = _spec(args)
    ds = _dataset(args.data)
    expert, _ = _load(args.expert, "expert")
    teacher, _ = _load(args.teacher, "teacher")
    obj = StudentObjectiveConfig(sync_schedule=SyncSchedule(args.sync_schedule))
    res = train_student(teacher, spec, ds, obj, expert, _train_cfg(args), run_log=_log_fn(args))
    save_model(res.model, args.out, seed=args.seed, config_digest=res.meta["config_digest"], mode="kd")
    last = res.history[-1] if res.history else {}
    print(f"distilled steps={args.steps} "
          + " ".join(f"{k}={fmt(v)}" for k, v in last.items() if isinstance(v, float)) + f" -> {args.out}")


def _calib_items(args, ds):
    from .synthdata import calibration_items

    return calibration_items(ds, args.n, args.seed)


def cmd_calibrate(args):
    from .quant import calibrate

    model, _ = _load(args.model)
    b = _calib_items(args, _dataset(args.data))
    cal = calibrate(model, b.speech, b.faces, args.method, args.percentile)
    Path(args.out).write_text(json.dumps(cal.to_dict()), encoding="utf-8")
    print(f"calibrated {len(cal.qparams)} activation sites on {len(b.speech)} frames ({args.method}) -> {args.out}")


def _calibration(path):
    from .quant.calibrate import Calibration

    return Calibration.from_dict(json.loads(_exists(path, "calibration").read_text(encoding="utf-8")))


def cmd_quantize(args):
    from .io import model_checkpoint, save_checkpoint
    from .quant import build_quantized_model

    model, ck = _load(args.model)
    a = _assignment(args.assignment, model)
    if a.count("int8") and not args.calib:
        raise UsageError("the assignment has INT8 layers: --calib is required")
    cal = _calibration(args.calib) if args.calib else None
    ex = build_quantized_model(model, a, cal)
    quant = {"name": Path(args.assignment).stem if Path(args.assignment).exists() else args.assignment,
             "assignment": dict(a), "calibration": cal.to_dict() if cal else None}
    save_checkpoint(model_checkpoint(model, seed=ck.meta.get("seed"), config_digest=ck.meta.get("config_digest", ""),
                                     quant=quant), args.out)
    print(f"quantized fp32={a.count('fp32')} fp16={a.count('fp16')} int8={a.count('int8')} "
          f"boundary_ops={ex.boundary_ops()} -> {args.out}")


def cmd_sweep(args):
    from .quant import calibrate, select_mixed_precision, sensitivity_sweep
    from .synthdata import eval_items

    model, _ = _load(args.model)
    ds = _dataset(args.data)
    if args.calib:
        cal = _calibration(args.calib)
    else:
        cb = _calib_items(args, ds)
        cal = calibrate(model, cb.speech, cb.faces)
    b = eval_items(ds, "test", args.n_eval, args.seed)
    curve = sensitivity_sweep(model, cal, b.speech, b.faces, args.assignment_axis)
    print(f"axis {curve.axis}, {len(curve.points)} points (boundary index 0 = all-INT8)")
    print("boundary_index,n_fp16,boundary_ops,proxy_fid")
    for p in curve.points:
        print(f"{p.boundary_index},{p.n_fp16},{p.boundary_ops},{fmt(p.proxy_fid)}")
    best = select_mixed_precision(curve, args.max_fp16)
    print(f"selected: {best.count('fp16')} FP16 layers (budget {args.max_fp16 if args.max_fp16 is not None else 'none'})")
    if args.out:
        Path(args.out).write_text(json.dumps(curve.to_dict()), encoding="utf-8")


def cmd_eval(args):
    from .graph import count_macs, count_params
    from .io import RunLog
    from .pipeline import EvalSet, evaluate

    model, generate, precision = _executable(args.model)
    ds = _dataset(args.data)
    expert, _ = _load(args.expert, "expert")
    ev = EvalSet.build(ds, args.n_eval, args.n_sync_clips, args.seed)
    rep = evaluate(generate, ev, expert, args.model_id or Path(args.model).stem, precision,
                   count_macs(model.spec), count_params(model.spec), args.seed, ds.digest())
    if args.log:
        RunLog(args.log).append(rep.record())
    from .metrics import CSV_COLUMNS

    print(",".join(CSV_COLUMNS))
    print(",".join(rep.row()))


def cmd_bench(args):
    from .io import RunLog, bench_generator, speedup_table

    rng = np.random.default_rng(args.seed)
    results = []
    for path in args.model:
        model, generate, precision = _executable(path)
        spec = model.spec
        speech = rng.random((args.batch, *spec.speech_input), np.float32)
        faces = rng.random((args.batch, *spec.face_input), np.float32)
        r = bench_generator(lambda s, f: generate(s, f, batch_size=len(s)), speech, faces, iters=args.iters,
                            threads=args.threads, model_id=Path(path).stem, precision=precision)
        results.append(r)
        if args.log:
            RunLog(args.log).append(r.record())
        print(f"{r.model_id} {r.precision}: median {fmt(r.median_ms)} ms, p10 {fmt(r.p10_ms)}, "
              f"p90 {fmt(r.p90_ms)} ({r.iters} iters, {r.warmup} warmup, {r.threads} threads)")
    print(speedup_table(results, (results[0].model_id, results[0].precision)))


def cmd_report(args):
    from .io import read_runlog
    from .metrics import MetricsReport, reports_to_csv

    reports = []
    for path in args.log:
        reports += [MetricsReport.from_record(r) for r in read_runlog(_exists(path, "run log"), "metrics")]
    text = reports_to_csv(reports, args.out)
    sys.stdout.write(text)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _spec_args(p, default="wav2lip_toy"):
    p.add_argument("--spec", default=default, help="canonical spec name or path to a spec file")
    p.add_argument("--mult", type=float, default=None, help="channel multiplier")
    p.add_argument("--no-residual", action="store_true", help="drop residual layers")


def _train_args(p, steps):
    p.add_argument("--data", required=True)
    p.add_argument("--expert", required=True)
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--log", help="run-log file to append training records to")
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="tfcompress", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, func, help, seed=True):
        p = sub.add_parser(name, help=help)
        if seed:
            p.add_argument("--seed", type=int, required=True)
        p.set_defaults(func=func)
        return p

    p = add("build", cmd_build, "build a randomly initialised generator checkpoint")
    _spec_args(p)
    p.add_argument("--out", required=True)

    p = add("count", cmd_count, "parameter and MAC counts", seed=False)
    _spec_args(p, default="wav2lip_full")
    p.add_argument("--per-layer", action="store_true")

    p = add("gen-data", cmd_gen_data, "generate the synthetic talking-face dataset")
    p.add_argument("--identities", type=int, default=32)
    p.add_argument("--clips", type=int, default=6)
    p.add_argument("--clip-len", type=int, default=48)
    p.add_argument("--out", required=True)

    p = add("train-expert", cmd_train_expert, "train the audio-visual sync expert")
    p.add_argument("--data", required=True)
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--out", required=True)

    p = add("train-teacher", cmd_train_teacher, "adversarial training (teacher, or a no-KD student)")
    _spec_args(p)
    _train_args(p, 2000)
    p.add_argument("--sync-schedule", choices=["all", "mid"], default="all")
    p.add_argument("--kind", default="teacher", help="record kind in the run log")

    p = add("distill", cmd_distill, "distill a student from a trained teacher")
    _spec_args(p)
    _train_args(p, 1000)
    p.add_argument("--teacher", required=True)
    p.add_argument("--sync-schedule", choices=["all", "mid"], default="mid")

    p = add("calibrate", cmd_calibrate, "activation ranges on the calibration pool")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=["minmax", "percentile"], default="percentile")
    p.add_argument("--percentile", type=float, default=99.99)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--out", required=True)

    p = add("quantize", cmd_quantize, "bind a checkpoint to a precision assignment", seed=False)
    p.add_argument("--model", required=True)
    p.add_argument("--assignment", required=True,
                   help="student_mix | teacher_mix | fp32 | fp16 | int8 | path to an assignment file")
    p.add_argument("--calib", help="calibration file (required when any layer is int8)")
    p.add_argument("--out", required=True)

    p = add("sweep", cmd_sweep, "boundary-index quantization sensitivity sweep")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--calib")
    p.add_argument("--assignment-axis", choices=["suffix_fp16", "prefix_fp16"], default="suffix_fp16")
    p.add_argument("--n", type=int, default=1024, help="calibration frames when --calib is not given")
    p.add_argument("--n-eval", type=int, default=256)
    p.add_argument("--max-fp16", type=int, default=None, help="budget: at most this many FP16 layers")
    p.add_argument("--out")

    p = add("eval", cmd_eval, "quality metrics of a (possibly quantized) generator")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--expert", required=True)
    p.add_argument("--model-id")
    p.add_argument("--n-eval", type=int, default=256)
    p.add_argument("--n-sync-clips", type=int, default=12)
    p.add_argument("--log", help="run-log file to append the metrics record to")

    p = add("bench", cmd_bench, "median latency; speedups relative to the first model")
    p.add_argument("--model", required=True, nargs="+")
    p.add_argument("--iters", type=int, default=30)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--log")

    p = add("report", cmd_report, "aggregate metrics records of run logs into one CSV", seed=False)
    p.add_argument("--log", required=True, nargs="+")
    p.add_argument("--out")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    print(provenance(args), flush=True)
    try:
        args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
