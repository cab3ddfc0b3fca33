"""End-to-end toy pipeline: data, expert, teacher, students, quantization, evaluation.

Every stage writes its artifact into a work directory and is skipped when the
artifact already exists, so interrupted runs resume and repeated evaluation
is cheap.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .distill.config import StudentObjectiveConfig, SyncSchedule, TeacherObjectiveConfig, TrainConfig
from .distill.losses import ssim_index as ssim_tensor
from .distill.train import train_student, train_teacher
from .graph.build import GeneratorModel
from .graph.counting import count_macs, count_params
from .graph.spec import load_spec
from .io.checkpoint import load_model, save_model
from .io.runlog import RunLog
from .metrics import MetricsReport, proxy_fid, psnr, sync_proxy_sequences
from .synthdata import SynthDataset, calibration_items, clip_items, eval_items, generate_dataset, train_sync_expert
from .tensor import Tensor, no_grad

TOY_SPEC = "wav2lip_toy"
STUDENT_MULT = 0.25


@dataclass
class PipelineConfig:
    data_seed: int = 0
    n_identities: int = 32
    clips_per_identity: int = 6
    clip_len: int = 48
    expert_seed: int = 0
    expert_steps: int = 1000
    teacher_seed: int = 0
    teacher_steps: int = 2000
    student_steps: int = 1000
    student_seeds: tuple[int, ...] = (0, 1, 2)
    batch_size: int = 16
    lr: float = 1e-3
    n_eval: int = 256
    n_sync_clips: int = 12
    n_calib: int = 1024
    calib_method: str = "percentile"

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:12]


def student_spec(base: str = TOY_SPEC):
    return load_spec(base, channel_multiplier=STUDENT_MULT, residuals_enabled=False)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalSet:
    items: object  # synthdata.Batch
    sync_clips: list  # list of Batch, one per clip, in time order

    @classmethod
    def build(cls, ds: SynthDataset, n_eval: int = 256, n_sync_clips: int = 12, seed: int = 0) -> "EvalSet":
        items = eval_items(ds, "test", n_eval, seed)
        clips = ds.clips("test")[:n_sync_clips]
        return cls(items, [clip_items(ds, int(c), seed) for c in clips])


def evaluate(generate, ev: EvalSet, expert, model_id: str, precision: str = "fp32", macs: int = 0,
             params: int = 0, seed: int | None = None, dataset_id: str = "") -> MetricsReport:
    """Quality of ``generate(speech, faces) -> frames`` on the held-out identities."""
    b = ev.items
    gen = generate(b.speech, b.faces)
    with no_grad():
        ssim = float(ssim_tensor(Tensor(gen.astype(np.float64)), Tensor(b.target.astype(np.float64))).data)
    seqs = [(c.speech, generate(c.speech, c.faces)) for c in ev.sync_clips]
    sync_dist, sync_conf = sync_proxy_sequences(expert, seqs)
    return MetricsReport(model_id, precision, proxy_fid(b.target, gen), ssim, psnr(gen, b.target), sync_dist,
                         sync_conf, macs, params, seed=seed, dataset_id=dataset_id)


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

class Pipeline:
    def __init__(self, workdir: str | Path, cfg: PipelineConfig | None = None, log=print):
        self.cfg = cfg or PipelineConfig()
        self.dir = Path(workdir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.log = log
        self.runlog = RunLog(self.dir / "runlog.jsonl")
        self._ds = None
        self._expert = None
        self._eval = None

    def _timed(self, what: str, fn):
        t0 = time.perf_counter()
        out = fn()
        dt = time.perf_counter() - t0
        self.log(f"[{what}] {dt:.1f}s")
        times = self.stage_times()
        times[what] = dt
        (self.dir / "stage_times.json").write_text(json.dumps(times, indent=1))
        return out

    def stage_times(self) -> dict:
        """Wall seconds of every stage computed in this work directory (cached stages keep their first time)."""
        path = self.dir / "stage_times.json"
        return json.loads(path.read_text()) if path.exists() else {}

    # -- data and expert -----------------------------------------------------
    @property
    def dataset(self) -> SynthDataset:
        if self._ds is None:
            path = self.dir / "data"
            if (path / "manifest.json").exists():
                self._ds = SynthDataset.load(path)
            else:
                c = self.cfg
                self._ds = self._timed("data", lambda: generate_dataset(c.data_seed, c.n_identities,
                                                                        c.clips_per_identity, c.clip_len))
                self._ds.save(path)
        return self._ds

    @property
    def expert(self):
        if self._expert is None:
            path = self.dir / "expert.ckpt"
            if path.exists():
                self._expert, _ = load_model(path)
            else:
                expert, rec = self._timed("expert", lambda: train_sync_expert(
                    self.dataset, self.cfg.expert_steps, self.cfg.expert_seed))
                save_model(expert, path, seed=self.cfg.expert_seed, heldout_accuracy=rec.accuracy)
                self.runlog.append({"kind": "expert", "seed": self.cfg.expert_seed, "accuracy": rec.accuracy,
                                    "final_loss": rec.history[-1]})
                self._expert = expert
        return self._expert

    def expert_accuracy(self) -> float:
        from .io.checkpoint import load_checkpoint

        self.expert
        return float(load_checkpoint(self.dir / "expert.ckpt").meta["heldout_accuracy"])

    @property
    def eval_set(self) -> EvalSet:
        if self._eval is None:
            self._eval = EvalSet.build(self.dataset, self.cfg.n_eval, self.cfg.n_sync_clips)
        return self._eval

    def _train_cfg(self, steps: int, seed: int) -> TrainConfig:
        return TrainConfig(steps=steps, batch_size=self.cfg.batch_size, lr=self.cfg.lr, seed=seed,
                           log_every=max(1, steps // 12), snapshot_every=max(1, steps // 12))

    # -- generators ----------------------------------------------------------
    def teacher(self) -> GeneratorModel:
        path = self.dir / "teacher.ckpt"
        if not path.exists():
            tc = self._train_cfg(self.cfg.teacher_steps, self.cfg.teacher_seed)
            res = self._timed("teacher", lambda: train_teacher(load_spec(TOY_SPEC), self.dataset,
                                                               TeacherObjectiveConfig(), self.expert, tc,
                                                               run_log=self.runlog))
            save_model(res.model, path, seed=tc.seed, config_digest=res.meta["config_digest"])
        return load_model(path)[0]

    def student(self, mode: str, seed: int) -> GeneratorModel:
        """mode: 'kd' (distilled, Mid sync), 'nokd_all' or 'nokd_mid' (student width, teacher objective)."""
        path = self.dir / f"student_{mode}_s{seed}.ckpt"
        if not path.exists():
            tc = self._train_cfg(self.cfg.student_steps, seed)
            spec = student_spec()
            if mode == "kd":
                teacher = self.teacher()
                res = self._timed(f"student {mode} s{seed}", lambda: train_student(
                    teacher, spec, self.dataset, StudentObjectiveConfig(), self.expert, tc, run_log=self.runlog,
                    kind=f"student_{mode}"))
            elif mode in ("nokd_all", "nokd_mid"):
                obj = TeacherObjectiveConfig(sync_schedule=SyncSchedule(mode.split("_")[1]))
                res = self._timed(f"student {mode} s{seed}", lambda: train_teacher(
                    spec, self.dataset, obj, self.expert, tc, run_log=self.runlog, kind=f"student_{mode}"))
            else:
                raise ValueError(f"unknown student mode {mode!r}")
            save_model(res.model, path, seed=seed, config_digest=res.meta["config_digest"], mode=mode)
        return load_model(path)[0]

    # -- evaluation ----------------------------------------------------------
    def evaluate_model(self, model_id: str, generate, spec, precision: str = "fp32", seed=None) -> MetricsReport:
        cache = self.dir / "metrics" / f"{model_id}__{precision}.json"
        if cache.exists():
            return MetricsReport.from_record(json.loads(cache.read_text()))
        rep = evaluate(generate, self.eval_set, self.expert, model_id, precision, count_macs(spec),
                       count_params(spec), seed, self.dataset.digest())
        cache.parent.mkdir(exist_ok=True)
        cache.write_text(json.dumps(rep.record()))
        self.runlog.append(rep.record())
        return rep

    def calibration(self, model: GeneratorModel, name: str):
        from .quant.calibrate import Calibration, calibrate

        path = self.dir / f"calib_{name}.json"
        if path.exists():
            return Calibration.from_dict(json.loads(path.read_text()))
        cb = calibration_items(self.dataset, self.cfg.n_calib)
        cal = self._timed(f"calibrate {name}", lambda: calibrate(model, cb.speech, cb.faces, self.cfg.calib_method))
        path.write_text(json.dumps(cal.to_dict()))
        return cal

    # -- quantization ----------------------------------------------------------
    def precision_reports(self, model: GeneratorModel, model_id: str, mix: str = "student_mix") -> dict:
        """FP32 / FP16 / INT8 / MIX quality of one trained generator."""
        from .quant import PRESETS, PrecisionAssignment, build_quantized_model

        cal = self.calibration(model, model_id)
        names = model.layer_names
        assignments = {
            "fp16": PrecisionAssignment.uniform(names, "fp16"),
            "int8": PrecisionAssignment.uniform(names, "int8"),
            "mix": PRESETS[mix](model.spec),
        }
        out = {"fp32": self.evaluate_model(model_id, model.generate, model.spec)}
        for prec, a in assignments.items():
            ex = build_quantized_model(model, a, cal)
            out[prec] = self.evaluate_model(model_id, ex.generate, model.spec, prec)
        return out

    def sweep(self, model: GeneratorModel, model_id: str, axis: str = "suffix_fp16"):
        from .quant import SweepCurve, SweepPoint, sensitivity_sweep

        path = self.dir / f"sweep_{model_id}_{axis}.json"
        if path.exists():
            d = json.loads(path.read_text())
            return SweepCurve(d["axis"], d["layer_names"], [SweepPoint(**p) for p in d["points"]])
        cal = self.calibration(model, model_id)
        b = self.eval_set.items
        curve = self._timed(f"sweep {model_id}", lambda: sensitivity_sweep(model, cal, b.speech, b.faces, axis))
        path.write_text(json.dumps(curve.to_dict()))
        return curve

    # -- everything ----------------------------------------------------------------
    def run_all(self, ablation: bool = True) -> dict:
        """Train, quantize and evaluate every model; write metrics.csv and summary.json."""
        from .metrics import reports_to_csv

        teacher = self.teacher()
        t_spec = teacher.spec
        reports = [self.evaluate_model("teacher", teacher.generate, t_spec)]
        modes = ("kd", "nokd_all", "nokd_mid") if ablation else ("kd",)
        seeds = self.cfg.student_seeds if ablation else self.cfg.student_seeds[:1]
        for mode in modes:
            for seed in seeds:
                m = self.student(mode, seed)
                reports.append(self.evaluate_model(f"student_{mode}_s{seed}", m.generate, m.spec, seed=seed))
        kd0 = self.student("kd", self.cfg.student_seeds[0])
        prec = self.precision_reports(kd0, f"student_kd_s{self.cfg.student_seeds[0]}")
        reports += [prec[k] for k in ("fp16", "int8", "mix")]
        curve = self.sweep(kd0, f"student_kd_s{self.cfg.student_seeds[0]}")
        reports_to_csv(reports, self.dir / "metrics.csv")
        summary = {
            "config": asdict(self.cfg),
            "config_digest": self.cfg.digest(),
            "dataset": self.dataset.digest(),
            "expert_accuracy": self.expert_accuracy(),
            "reports": [r.record() for r in reports],
            "sweep": curve.to_dict(),
            "stage_times": self.stage_times(),
        }
        (self.dir / "summary.json").write_text(json.dumps(summary, indent=1))
        return summary


def default_workdir(cfg: PipelineConfig | None = None, root: str | Path | None = None) -> Path:
    """Cache location keyed by the pipeline configuration."""
    import os

    cfg = cfg or PipelineConfig()
    root = Path(root or os.environ.get("TFCOMPRESS_CACHE", Path.home() / ".cache" / "tfcompress"))
    return root / f"pipeline-{cfg.digest()}"
