"""Teacher pretraining (adversarial) and student distillation (frozen teacher, no discriminator)."""

from __future__ import annotations

import time
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from ..graph.build import Discriminator, GeneratorModel, SyncExpert, build_discriminator, build_model
from ..graph.spec import GeneratorSpec
from ..synthdata import Batch, SynthDataset, make_batch
from ..tensor import Adam, Tensor, no_grad
from .config import StudentObjectiveConfig, TeacherObjectiveConfig, TrainConfig, config_digest, config_to_dict
from .features import FeatureExtractor, build_feature_extractor
from .losses import (
    ChannelAdapters,
    channel_kd_loss,
    feature_loss,
    gan_losses,
    recon_loss,
    ssim_loss,
    style_loss,
    sync_loss,
    tv_loss,
)

TEACHER_TERMS = ("gan", "recon", "sync")
STUDENT_TERMS = ("ch_kd", "ssim", "feature", "style", "tv", "sync")


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; the model has been restored to its last good state."""

    def __init__(self, step: int, last_good_step: int, last_good: "OrderedDict[str, np.ndarray]", cause: str):
        super().__init__(f"training diverged at step {step} ({cause}); restored state from step {last_good_step}")
        self.step = step
        self.last_good_step = last_good_step
        self.last_good = last_good


@dataclass
class ObjectiveResult:
    total: Tensor
    components: "OrderedDict[str, Tensor]"  # unweighted
    weighted: "OrderedDict[str, float]"
    d_loss: Tensor | None = None


@dataclass
class TrainResult:
    model: GeneratorModel
    history: list[dict] = field(default_factory=list)
    snapshots: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def curve(self, term: str = "total") -> np.ndarray:
        return np.array([h[term] for h in self.history])


# ---------------------------------------------------------------------------
# objectives
# ---------------------------------------------------------------------------

def teacher_weights(cfg: TeacherObjectiveConfig, sync_active: bool) -> "OrderedDict[str, float]":
    return OrderedDict(gan=cfg.lambda_gan, recon=cfg.lambda_recon, sync=cfg.lambda_sync if sync_active else 0.0)


def student_weights(cfg: StudentObjectiveConfig, sync_active: bool) -> "OrderedDict[str, float]":
    return OrderedDict(
        ch_kd=cfg.lambda_cd, ssim=cfg.lambda_ssim, feature=cfg.lambda_feature,
        style=cfg.lambda_style, tv=cfg.lambda_tv, sync=cfg.lambda_sync if sync_active else 0.0,
    )


def combine(weights: "OrderedDict[str, float]", components: dict) -> tuple[Tensor, "OrderedDict[str, float]"]:
    """Weighted sum over the terms with non-zero weight; a gated term contributes exactly 0."""
    total = None
    weighted = OrderedDict()
    for name, w in weights.items():
        if w == 0.0 or name not in components:
            weighted[name] = 0.0
            continue
        c = components[name]
        c = c if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float64))
        term = c * float(w)
        weighted[name] = float(term.data)
        total = term if total is None else total + term
    if total is None:
        total = Tensor(np.zeros((), np.float32))
    return total, weighted


def teacher_objective(
    cfg: TeacherObjectiveConfig,
    batch: Batch,
    generator: GeneratorModel,
    disc: Discriminator,
    expert: SyncExpert,
    step: int = 0,
    total_steps: int = 1,
) -> ObjectiveResult:
    """GAN + reconstruction + (scheduled) sync, on any generator width."""
    active = cfg.sync_schedule.active(step, total_steps)
    weights = teacher_weights(cfg, active)
    gen, _ = generator(Tensor(batch.speech), Tensor(batch.faces))
    comps = OrderedDict()
    d_loss, comps["gan"] = gan_losses(disc, batch.target, gen)
    comps["recon"] = recon_loss(gen, batch.target)
    if weights["sync"] > 0:
        comps["sync"] = sync_loss(expert, batch.speech, gen)
    total, weighted = combine(weights, comps)
    return ObjectiveResult(total, comps, weighted, d_loss)


def teacher_outputs(teacher: GeneratorModel, batch: Batch):
    with no_grad():
        out, taps = teacher(Tensor(batch.speech), Tensor(batch.faces))
    return out.detach(), OrderedDict((k, v.detach()) for k, v in taps.items())


def student_objective(
    cfg: StudentObjectiveConfig,
    batch: Batch,
    teacher: GeneratorModel,
    student: GeneratorModel,
    step: int,
    total_steps: int,
    adapters: ChannelAdapters,
    fx: FeatureExtractor,
    expert: SyncExpert,
) -> ObjectiveResult:
    """Channel KD + output KD against the frozen teacher + (scheduled) sync. No adversarial term."""
    active = cfg.sync_schedule.active(step, total_steps)
    weights = student_weights(cfg, active)
    t_out, t_taps = teacher_outputs(teacher, batch)
    s_out, s_taps = student(Tensor(batch.speech), Tensor(batch.faces))
    comps = OrderedDict()
    if weights["ch_kd"] > 0:
        comps["ch_kd"] = channel_kd_loss(t_taps, s_taps, adapters)
    if weights["ssim"] > 0:
        comps["ssim"] = ssim_loss(s_out, t_out)
    if weights["feature"] > 0:
        comps["feature"] = feature_loss(fx, s_out, t_out)
    if weights["style"] > 0:
        comps["style"] = style_loss(fx, s_out, t_out)
    if weights["tv"] > 0:
        comps["tv"] = tv_loss(s_out)
    if weights["sync"] > 0:
        comps["sync"] = sync_loss(expert, batch.speech, s_out)
    total, weighted = combine(weights, comps)
    return ObjectiveResult(total, comps, weighted)


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

class _Guard:
    """Keeps a copy of the last finite model state and restores it on divergence."""

    def __init__(self, model: GeneratorModel):
        self.model = model
        self.state = _copy_state(model)
        self.step = 0

    def save(self, step: int) -> None:
        self.state = _copy_state(self.model)
        self.step = step

    def abort(self, step: int, cause: str) -> TrainingDiverged:
        self.model.load_state_dict(self.state)
        return TrainingDiverged(step, self.step, self.state, cause)


def _copy_state(model) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.copy()) for k, v in model.state_dict().items())


def _rngs(seed: int, n: int) -> list[np.random.SeedSequence]:
    return np.random.SeedSequence(seed).spawn(n)


def _seed_int(ss: np.random.SeedSequence) -> int:
    return int(ss.generate_state(1)[0])


def _log_point(result: TrainResult, window: list[dict], step: int, t0: float, run_log, kind: str, eval_fn):
    rec = {"kind": kind, "step": step, "wall_s": round(time.perf_counter() - t0, 3)}
    for key in window[0]:
        if key != "step":
            rec[key] = float(np.mean([w[key] for w in window]))
    if eval_fn is not None:
        rec.update(eval_fn(result.model))
    result.snapshots.append(rec)
    if run_log is not None:
        run_log.append(rec)


def train_teacher(
    spec: GeneratorSpec,
    dataset: SynthDataset,
    cfg: TeacherObjectiveConfig,
    expert: SyncExpert,
    train: TrainConfig,
    run_log=None,
    eval_fn=None,
    kind: str = "teacher",
) -> TrainResult:
    """Adversarial pretraining with the GAN + recon + sync objective.

    Also used for the no-KD ablation, by passing a student-width spec.
    """
    s_model, s_disc, s_batch = _rngs(train.seed, 3)
    model = build_model(spec, _seed_int(s_model)).train()
    disc = build_discriminator(_seed_int(s_disc), spec.frame_shape).train()
    expert.freeze()
    rng = np.random.default_rng(s_batch)
    g_opt = Adam(model.parameters(), lr=train.lr, betas=train.betas)
    d_opt = Adam(disc.parameters(), lr=train.lr, betas=train.betas)
    result = TrainResult(model, meta={
        "kind": kind, "seed": train.seed, "spec": spec.digest(), "mult": spec.channel_multiplier, "residuals": spec.residuals_enabled,
        "objective": config_to_dict(cfg), "train": config_to_dict(train), "config_digest": config_digest(cfg, train),
    })
    guard, window, t0 = _Guard(model), [], time.perf_counter()
    for step in range(train.steps):
        batch = make_batch(dataset, train.batch_size, rng)
        try:
            obj = teacher_objective(cfg, batch, model, disc, expert, step, train.steps)
            g_opt.zero_grad()
            obj.total.backward()
            g_opt.step()
            d_opt.zero_grad()
            obj.d_loss.backward()
            d_opt.step()
        except FloatingPointError as e:
            raise guard.abort(step, str(e)) from None
        total = float(obj.total.data)
        if not np.isfinite(total) or not all(np.isfinite(p.data).all() for p in model.parameters()):
            raise guard.abort(step, "non-finite loss or weights")
        rec = {"step": step, "total": total, "d_loss": float(obj.d_loss.data)}
        rec.update({f"w_{k}": v for k, v in obj.weighted.items()})
        rec.update({k: float(v.data) for k, v in obj.components.items()})
        result.history.append(rec)
        window.append(rec)
        if (step + 1) % train.snapshot_every == 0:
            guard.save(step + 1)
        if (step + 1) % train.log_every == 0 or step + 1 == train.steps:
            _log_point(result, window, step + 1, t0, run_log, kind, eval_fn)
            window = []
    model.eval()
    return result


def train_student(
    teacher: GeneratorModel,
    spec: GeneratorSpec,
    dataset: SynthDataset,
    cfg: StudentObjectiveConfig,
    expert: SyncExpert,
    train: TrainConfig,
    fx: FeatureExtractor | None = None,
    run_log=None,
    eval_fn=None,
    kind: str = "student_kd",
) -> TrainResult:
    """Offline distillation from a frozen teacher; adapters train jointly and are dropped at the end."""
    s_model, s_adapt, s_batch = _rngs(train.seed, 3)
    teacher.freeze()
    expert.freeze()
    fx = fx or build_feature_extractor()
    teacher_hash = teacher.weight_hash()
    model = build_model(spec, _seed_int(s_model)).train()
    if model.tap_points != teacher.tap_points:
        raise ValueError("student and teacher decoder taps differ")
    adapters = ChannelAdapters.init(
        OrderedDict((b.name, b.layers[-1].out_ch) for b in spec.face_decoder),
        OrderedDict((b.name, b.layers[-1].out_ch) for b in teacher.spec.face_decoder),
        _seed_int(s_adapt),
    )
    rng = np.random.default_rng(s_batch)
    opt = Adam(model.parameters() + adapters.parameters(), lr=train.lr, betas=train.betas)
    result = TrainResult(model, meta={
        "kind": kind, "seed": train.seed, "spec": spec.digest(), "mult": spec.channel_multiplier, "residuals": spec.residuals_enabled,
        "teacher_hash": teacher_hash, "objective": config_to_dict(cfg), "train": config_to_dict(train),
        "config_digest": config_digest(cfg, train),
    })
    guard, window, t0 = _Guard(model), [], time.perf_counter()
    for step in range(train.steps):
        batch = make_batch(dataset, train.batch_size, rng)
        try:
            obj = student_objective(cfg, batch, teacher, model, step, train.steps, adapters, fx, expert)
            opt.zero_grad()
            obj.total.backward()
            opt.step()
        except FloatingPointError as e:
            raise guard.abort(step, str(e)) from None
        total = float(obj.total.data)
        if not np.isfinite(total) or not all(np.isfinite(p.data).all() for p in model.parameters()):
            raise guard.abort(step, "non-finite loss or weights")
        rec = {"step": step, "total": total}
        rec.update({f"w_{k}": v for k, v in obj.weighted.items()})
        rec.update({k: float(v.data) for k, v in obj.components.items()})
        result.history.append(rec)
        window.append(rec)
        if (step + 1) % train.snapshot_every == 0:
            guard.save(step + 1)
        if (step + 1) % train.log_every == 0 or step + 1 == train.steps:
            _log_point(result, window, step + 1, t0, run_log, kind, eval_fn)
            window = []
    if teacher.weight_hash() != teacher_hash:
        raise RuntimeError("teacher weights changed during distillation")
    model.eval()
    return result
