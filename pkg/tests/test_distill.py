"""Loss terms, objective weighting, schedules and the two training loops."""

from collections import OrderedDict

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import numeric_grad
from tfcompress.distill import (
    ChannelAdapters,
    StudentObjectiveConfig,
    SyncSchedule,
    TeacherObjectiveConfig,
    TrainConfig,
    build_feature_extractor,
    channel_attention,
    channel_kd_loss,
    feature_loss,
    gan_losses,
    gram,
    load_run_config,
    recon_loss,
    ssim_index,
    ssim_loss,
    style_loss,
    sync_loss,
    tv_loss,
)
from tfcompress.distill.losses import SYNC_EPS, gaussian_window
from tfcompress.distill.train import (
    STUDENT_TERMS,
    TrainingDiverged,
    combine,
    student_objective,
    student_weights,
    teacher_objective,
    teacher_weights,
    train_student,
    train_teacher,
)
from tfcompress.graph import build_discriminator, build_model, build_sync_expert, load_spec
from tfcompress.synthdata import make_batch
from tfcompress.tensor import Tensor, no_grad

RNG = np.random.default_rng


def frames(seed, n=2, c=3, h=16, w=16):
    return RNG(seed).random((n, c, h, w))


# -- recon / gan / sync ----------------------------------------------------------------

def test_recon_loss_cases():
    x = frames(0)
    assert float(recon_loss(Tensor(x), x).data) == 0.0
    assert float(recon_loss(Tensor(x + 0.5), x).data) == pytest.approx(0.5, abs=1e-12)
    y = frames(1)
    total = 0.0
    for v in np.nditer(np.abs(x - y)):
        total += float(v)
    assert float(recon_loss(Tensor(x), y).data) == pytest.approx(total / x.size, abs=1e-6)
    with pytest.raises(ValueError):
        recon_loss(Tensor(x), y[:, :2])


def _zero_logit_disc():
    d = build_discriminator(0).astype(np.float64).eval()
    last = list(d.layers.values())[-1]
    last.weight.data[...] = 0.0
    last.bias.data[...] = 0.0
    return d


def test_gan_losses_at_zero_logits():
    d = _zero_logit_disc()
    real = frames(0, 4, h=32, w=32)
    fake = Tensor(frames(1, 4, h=32, w=32), requires_grad=True)
    d_loss, g_loss = gan_losses(d, real, fake)
    assert float(d_loss.data) == pytest.approx(2 * np.log(2), abs=1e-12)
    assert float(g_loss.data) == pytest.approx(np.log(2), abs=1e-12)


def test_gan_losses_perfect_discriminator():
    def perfect(x):
        # +40 logit on real (bright), -40 on fake (dark)
        return Tensor(np.where(x.data.mean(axis=(1, 2, 3)) > 0.5, 40.0, -40.0))

    real = np.full((3, 3, 8, 8), 0.9)
    fake = Tensor(np.full((3, 3, 8, 8), 0.1))
    d_loss, g_loss = gan_losses(perfect, real, fake)
    assert float(d_loss.data) < 1e-15
    assert float(g_loss.data) == pytest.approx(40.0, abs=1e-9)


def test_gan_d_loss_does_not_reach_generator():
    d = build_discriminator(0).astype(np.float64)
    fake = Tensor(frames(2, 2, h=32, w=32), requires_grad=True)
    d_loss, _ = gan_losses(d, frames(3, 2, h=32, w=32), fake)
    d_loss.backward()
    assert fake.grad is None or not np.any(fake.grad)


class _StubExpert:
    """Expert whose embeddings are fixed arrays, to pin the clamp cases."""

    def __init__(self, e_s, e_v):
        self.e_s, self.e_v = e_s, e_v

    def embed_speech(self, speech):
        return Tensor(self.e_s)

    def embed_video(self, frames):
        return Tensor(self.e_v)


def test_sync_loss_at_cosine_one_and_orthogonal():
    e = np.eye(4)[:2]
    f = Tensor(frames(0))
    assert float(sync_loss(_StubExpert(e, e), None, f).data) == pytest.approx(0.0, abs=1e-12)
    orth = np.eye(4)[2:]
    assert float(sync_loss(_StubExpert(e, orth), None, f).data) == pytest.approx(-np.log(SYNC_EPS), rel=1e-12)


# -- structural ---------------------------------------------------------------------------

def ssim_oracle(a, b, c1=1e-4, c2=9e-4):
    """Direct windowed formula, one window position at a time."""
    win = gaussian_window()
    k = win.shape[0]
    vals = []
    for n in range(a.shape[0]):
        for c in range(a.shape[1]):
            for i in range(a.shape[2] - k + 1):
                for j in range(a.shape[3] - k + 1):
                    pa = a[n, c, i : i + k, j : j + k]
                    pb = b[n, c, i : i + k, j : j + k]
                    ma, mb = (win * pa).sum(), (win * pb).sum()
                    va = (win * (pa - ma) ** 2).sum()
                    vb = (win * (pb - mb) ** 2).sum()
                    cab = (win * (pa - ma) * (pb - mb)).sum()
                    vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def test_ssim_window_is_normalised_gaussian():
    w = gaussian_window()
    assert w.shape == (11, 11)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert w[5, 5] == w.max()


def test_ssim_matches_direct_formula():
    a = frames(0, 2, 2, 14, 15)
    b = np.clip(a + RNG(1).normal(0, 0.1, a.shape), 0, 1)
    assert float(ssim_index(Tensor(a), Tensor(b)).data) == pytest.approx(ssim_oracle(a, b), abs=1e-5)


def test_ssim_and_tv_minima():
    a = frames(0, 2, 3, 16, 16)
    assert float(ssim_loss(Tensor(a), Tensor(a)).data) == pytest.approx(0.0, abs=1e-7)
    assert float(tv_loss(Tensor(np.full((2, 3, 8, 8), 0.3))).data) == 0.0


def test_tv_hand_value():
    x = np.zeros((1, 1, 2, 2))
    x[0, 0, 0, 0] = 1.0
    # vertical diffs: [-1, 0] -> mean sq 0.5; horizontal: [-1, 0] -> 0.5
    assert float(tv_loss(Tensor(x)).data) == pytest.approx(1.0)


def test_gram_of_constant_single_channel():
    c = 0.7
    g = gram(Tensor(np.full((1, 1, 5, 4), c)))
    assert g.shape == (1, 1, 1)
    assert float(g.data[0, 0, 0]) == pytest.approx(c * c)


def gram_oracle(f):
    n, c, h, w = f.shape
    out = np.zeros((n, c, c))
    for k in range(n):
        for i in range(c):
            for j in range(c):
                out[k, i, j] = sum(f[k, i, y, x] * f[k, j, y, x] for y in range(h) for x in range(w))
    return out / (c * h * w)


def test_style_loss_matches_gram_oracle():
    fx = build_feature_extractor().astype(np.float64)
    a, b = frames(0, 2, 3, 32, 32), frames(1, 2, 3, 32, 32)
    with no_grad():
        fa = [s.data for s in fx.stages(Tensor(a))]
        fb = [s.data for s in fx.stages(Tensor(b))]
        got = float(style_loss(fx, Tensor(a), Tensor(b)).data)
    want = sum(((gram_oracle(x) - gram_oracle(y)) ** 2).mean() for x, y in zip(fa, fb))
    assert got == pytest.approx(want, rel=1e-5, abs=1e-12)
    np.testing.assert_allclose(gram(Tensor(fa[0])).data, gram_oracle(fa[0]), atol=1e-12)


def test_perceptual_losses_zero_at_identity():
    fx = build_feature_extractor()
    a = Tensor(frames(0, 2, 3, 32, 32).astype(np.float32))
    assert float(feature_loss(fx, a, a).data) == 0.0
    assert float(style_loss(fx, a, a).data) == 0.0


def test_feature_extractor_frozen_and_seeded():
    a, b = build_feature_extractor(5), build_feature_extractor(5)
    assert a.weight_hash() == b.weight_hash()
    assert all(not p.requires_grad for p in a.parameters())
    assert len(a.stages(Tensor(np.zeros((1, 3, 32, 32), np.float32)))) == 4


# -- channel KD --------------------------------------------------------------------------

def _taps(seed, widths=(8, 8, 6, 6, 4, 4, 4), hw=(1, 2, 4, 4, 8, 8, 16)):
    rng = RNG(seed)
    return OrderedDict((f"dec{i + 1}", rng.normal(size=(2, c, s, s))) for i, (c, s) in enumerate(zip(widths, hw)))


def test_channel_kd_zero_for_identical_taps():
    t = _taps(0)
    ad = ChannelAdapters.identity({k: v.shape[1] for k, v in t.items()}, np.float64)
    s = OrderedDict((k, Tensor(v)) for k, v in t.items())
    assert float(channel_kd_loss(t, s, ad).data) == pytest.approx(0.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 12), st.floats(0.01, 100))
def test_channel_attention_sums_to_one(seed, c, scale):
    f = RNG(seed).normal(size=(3, c, 4, 4)) * scale
    a = channel_attention(Tensor(f)).data
    np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(a > 0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_channel_kd_non_negative(seed):
    t = _taps(seed)
    s = OrderedDict((k, Tensor(v)) for k, v in _taps(seed + 1, widths=(2,) * 7).items())
    ad = ChannelAdapters.init({k: 2 for k in t}, {k: v.shape[1] for k, v in t.items()}, seed)
    ad.weights = OrderedDict((k, Tensor(v.data.astype(np.float64), requires_grad=True)) for k, v in ad.weights.items())
    assert float(channel_kd_loss(t, s, ad).data) >= 0.0


def test_channel_kd_rejects_wrong_tap_count_and_shapes():
    t = _taps(0)
    ad = ChannelAdapters.identity({k: v.shape[1] for k, v in t.items()}, np.float64)
    six = OrderedDict(list(t.items())[:6])
    with pytest.raises(ValueError, match="7 taps"):
        channel_kd_loss(six, six, ad)
    bad = OrderedDict((k, Tensor(v[:, :, :1])) for k, v in t.items())
    with pytest.raises(ValueError, match="dec"):
        channel_kd_loss(t, bad, ad)


def test_channel_kd_gradcheck():
    t = _taps(0, widths=(4,) * 7, hw=(1, 2, 2, 3, 3, 4, 4))
    s = _taps(1, widths=(2,) * 7, hw=(1, 2, 2, 3, 3, 4, 4))
    ad = ChannelAdapters.init({k: 2 for k in t}, {k: 4 for k in t}, 0)
    ws = {k: v.data.astype(np.float64) for k, v in ad.weights.items()}
    keys = list(t)

    def f(w_first, s_first):
        a = ChannelAdapters(OrderedDict((k, Tensor(w_first if k == keys[0] else ws[k])) for k in keys))
        st_ = OrderedDict((k, Tensor(s_first if k == keys[0] else s[k])) for k in keys)
        return float(channel_kd_loss(t, st_, a).data)

    w0 = Tensor(ws[keys[0]].copy(), requires_grad=True)
    s0 = Tensor(s[keys[0]].copy(), requires_grad=True)
    a = ChannelAdapters(OrderedDict((k, w0 if k == keys[0] else Tensor(ws[k])) for k in keys))
    st_ = OrderedDict((k, s0 if k == keys[0] else Tensor(s[k])) for k in keys)
    channel_kd_loss(t, st_, a).backward()
    arrays = [ws[keys[0]].copy(), s[keys[0]].copy()]
    for i, ana in enumerate((w0.grad, s0.grad)):
        num = numeric_grad(f, arrays, i)
        assert np.abs(num - ana).max() / max(np.abs(num).max(), 1e-8) < 1e-3


# -- config and weighting -------------------------------------------------------------------

def test_default_weights():
    t = TeacherObjectiveConfig()
    assert (t.lambda_gan, t.lambda_recon, t.lambda_sync) == (0.07, 0.9, 0.03)
    s = StudentObjectiveConfig()
    assert (s.lambda_cd, s.lambda_ssim, s.lambda_feature, s.lambda_style, s.lambda_tv, s.lambda_sync) == (
        10, 10, 10, 10000, 0.00001, 3)
    assert s.sync_schedule == SyncSchedule("mid", 0.5)


def test_config_validation():
    with pytest.raises(ValueError):
        TeacherObjectiveConfig(lambda_gan=-1)
    with pytest.raises(ValueError):
        StudentObjectiveConfig(lambda_tv=-1e-9)
    with pytest.raises(ValueError):
        SyncSchedule("mid", 1.0)
    with pytest.raises(ValueError):
        SyncSchedule("sometimes")
    assert SyncSchedule.parse("mid(0.25)") == SyncSchedule("mid", 0.25)
    assert SyncSchedule.parse("All") == SyncSchedule("all")


def test_teacher_hand_total():
    w = teacher_weights(TeacherObjectiveConfig(), True)
    total, _ = combine(w, {k: Tensor(1.0) for k in w})
    assert float(total.data) == pytest.approx(0.07 + 0.9 + 0.03, abs=1e-7)
    assert float(total.data) == pytest.approx(1.0, abs=1e-7)


def test_student_hand_total():
    w = student_weights(StudentObjectiveConfig(), True)
    total, weighted = combine(w, {k: Tensor(np.float64(1.0)) for k in STUDENT_TERMS})
    assert float(total.data) == pytest.approx(10 + 10 + 10 + 10000 + 1e-5 + 3, abs=1e-7)
    assert weighted["tv"] == 1e-5


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 10_000), st.floats(0.01, 0.99))
def test_mid_schedule_gate(total, frac):
    sched = SyncSchedule("mid", frac)
    assert not sched.active(0, total)
    assert sched.active(total - 1, total) == (total - 1 >= frac * total)
    w = student_weights(StudentObjectiveConfig(sync_schedule=sched), sched.active(0, total))
    assert w["sync"] == 0.0
    assert SyncSchedule("all").active(0, total)


def test_run_config_file(tmp_path):
    p = tmp_path / "run.yaml"
    p.write_text("teacher: {lambda_sync: 0.05}\nstudent: {sync_schedule: all}\ntrain: {steps: 10, seed: 3}\n")
    cfg = load_run_config(p)
    assert cfg["teacher"].lambda_sync == 0.05 and cfg["teacher"].lambda_gan == 0.07
    assert cfg["student"].sync_schedule == SyncSchedule("all")
    assert cfg["train"].steps == 10 and cfg["train"].seed == 3
    p.write_text("optimizer: {}\n")
    with pytest.raises(ValueError, match="optimizer"):
        load_run_config(p)


# -- composite objectives on tiny models -------------------------------------------------------

TINY_T = 0.125
TINY_S = 0.0625


@pytest.fixture(scope="module")
def tiny():
    teacher = build_model(load_spec("wav2lip_toy", TINY_T, False), 0).astype(np.float64).eval().freeze()
    student = build_model(load_spec("wav2lip_toy", TINY_S, False), 1).astype(np.float64).train()
    disc = build_discriminator(2).astype(np.float64).train()
    expert = build_sync_expert(3).astype(np.float64).freeze()
    fx = build_feature_extractor().astype(np.float64)
    adapters = ChannelAdapters.init(
        OrderedDict((b.name, b.layers[-1].out_ch) for b in student.spec.face_decoder),
        OrderedDict((b.name, b.layers[-1].out_ch) for b in teacher.spec.face_decoder), 4)
    for k, v in adapters.weights.items():
        v.data = v.data.astype(np.float64)
    return teacher, student, disc, expert, fx, adapters


def _batch(small_ds, n=2, seed=0):
    b = make_batch(small_ds, n, RNG(seed))
    for k in ("speech", "reference", "masked", "target"):
        setattr(b, k, getattr(b, k).astype(np.float64))
    return b


def _probe_entries(params, n_per, seed):
    """A few (param, index) pairs spread across layers."""
    rng = RNG(seed)
    out = []
    for p in params:
        for _ in range(n_per):
            out.append((p, tuple(int(rng.integers(0, s)) for s in p.data.shape)))
    return out


def _check_param_grads(loss_fn, params, probes, eps=1e-6):
    for p in params:
        p.grad = None
    loss_fn().backward()
    worst = 0.0
    for p, idx in probes:
        ana = p.grad[idx]
        old = p.data[idx]
        p.data[idx] = old + eps
        fp = float(loss_fn().data)
        p.data[idx] = old - eps
        fm = float(loss_fn().data)
        p.data[idx] = old
        num = (fp - fm) / (2 * eps)
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-6))
    return worst


def test_teacher_objective_gradcheck(tiny, small_ds):
    _, student, disc, expert, *_ = tiny
    b = _batch(small_ds)
    cfg = TeacherObjectiveConfig(sync_schedule=SyncSchedule("all"))
    student.eval()  # fixed normalisation so repeated evaluations agree
    layers = [student.layers[n] for n in ("speech1.conv", "face3.conv", "dec4.convt", "out.rgb")]
    params = [l.weight for l in layers]
    worst = _check_param_grads(lambda: teacher_objective(cfg, b, student, disc, expert).total, params,
                               _probe_entries(params, 3, 0))
    assert worst < 1e-3


def test_student_objective_gradcheck(tiny, small_ds):
    teacher, student, _, expert, fx, adapters = tiny
    b = _batch(small_ds, seed=1)
    cfg = StudentObjectiveConfig(sync_schedule=SyncSchedule("all"))
    student.eval()
    params = [student.layers[n].weight for n in ("speech2.conv", "face2.conv", "dec6.convt", "out.rgb")]
    params += [adapters.weights["dec3"]]
    worst = _check_param_grads(
        lambda: student_objective(cfg, b, teacher, student, 0, 1, adapters, fx, expert).total,
        params, _probe_entries(params, 3, 1))
    assert worst < 1e-3


def test_student_objective_has_no_adversarial_term(tiny, small_ds):
    teacher, student, _, expert, fx, adapters = tiny
    b = _batch(small_ds)
    for cfg in (StudentObjectiveConfig(), StudentObjectiveConfig(sync_schedule="all"),
                StudentObjectiveConfig().without_kd()):
        obj = student_objective(cfg, b, teacher, student, 5, 10, adapters, fx, expert)
        assert obj.d_loss is None
        assert "gan" not in obj.components and "gan" not in obj.weighted
        assert set(obj.weighted) == set(STUDENT_TERMS)


def test_student_without_kd_reduces_to_sync_only(tiny, small_ds):
    teacher, student, _, expert, fx, adapters = tiny
    b = _batch(small_ds)
    cfg = StudentObjectiveConfig(sync_schedule="all").without_kd()
    obj = student_objective(cfg, b, teacher, student, 0, 10, adapters, fx, expert)
    assert list(obj.components) == ["sync"]
    assert float(obj.total.data) == pytest.approx(3.0 * float(obj.components["sync"].data), rel=1e-12)


def test_mid_sync_term_exactly_zero_before_switch(tiny, small_ds):
    teacher, student, disc, expert, fx, adapters = tiny
    b = _batch(small_ds)
    obj = student_objective(StudentObjectiveConfig(), b, teacher, student, 0, 10, adapters, fx, expert)
    assert obj.weighted["sync"] == 0.0 and "sync" not in obj.components
    obj = student_objective(StudentObjectiveConfig(), b, teacher, student, 5, 10, adapters, fx, expert)
    assert obj.weighted["sync"] > 0.0
    t = teacher_objective(TeacherObjectiveConfig(), b, student, disc, expert, 0, 10)
    assert t.weighted["sync"] == 0.0


# -- loops -----------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def loop_setup(small_ds):
    expert = build_sync_expert(0).freeze()
    spec_t = load_spec("wav2lip_toy", TINY_T, False)
    spec_s = load_spec("wav2lip_toy", TINY_S, False)
    return expert, spec_t, spec_s


def test_teacher_loop_reduces_recon_and_is_deterministic(small_ds, loop_setup):
    expert, spec_t, _ = loop_setup
    tc = TrainConfig(steps=40, batch_size=8, lr=3e-3, seed=0, log_every=10, snapshot_every=10)
    a = train_teacher(spec_t, small_ds, TeacherObjectiveConfig(), expert, tc)
    b = train_teacher(spec_t, small_ds, TeacherObjectiveConfig(), expert, tc)
    assert np.array_equal(a.curve("total"), b.curve("total"))
    assert a.model.weight_hash() == b.model.weight_hash()
    assert a.curve("recon")[-10:].mean() < a.curve("recon")[:5].mean()
    assert len(a.snapshots) == 4 and a.snapshots[-1]["step"] == 40
    # sync is gated off for the first half (Mid)
    assert all(h["w_sync"] == 0 for h in a.history[:20]) and all(h["w_sync"] > 0 for h in a.history[20:])


def test_student_loop_frozen_teacher_and_expert(small_ds, loop_setup, tmp_path):
    from tfcompress.io import RunLog, read_runlog

    expert, spec_t, spec_s = loop_setup
    teacher = train_teacher(spec_t, small_ds, TeacherObjectiveConfig(), expert,
                            TrainConfig(steps=10, batch_size=8, lr=3e-3)).model
    t_hash, e_hash = teacher.weight_hash(), expert.weight_hash()
    log = RunLog(tmp_path / "run.jsonl")
    tc = TrainConfig(steps=30, batch_size=8, lr=3e-3, seed=1, log_every=10, snapshot_every=10)
    res = train_student(teacher, spec_s, small_ds, StudentObjectiveConfig(), expert, tc, run_log=log)
    assert teacher.weight_hash() == t_hash and expert.weight_hash() == e_hash
    assert res.curve("ch_kd")[-5:].mean() < res.curve("ch_kd")[:5].mean()
    assert all("gan" not in h and "d_loss" not in h for h in res.history)
    recs = read_runlog(tmp_path / "run.jsonl", "student_kd")
    assert [r["step"] for r in recs] == [10, 20, 30]
    again = train_student(teacher, spec_s, small_ds, StudentObjectiveConfig(), expert, tc)
    assert np.array_equal(res.curve(), again.curve())


def test_divergence_restores_last_good_state(small_ds, loop_setup, monkeypatch):
    import tfcompress.distill.train as tr

    expert, spec_t, _ = loop_setup
    calls = {"n": 0}
    real_make_batch = tr.make_batch

    def poisoned(ds, n, rng, split="train"):
        b = real_make_batch(ds, n, rng, split)
        calls["n"] += 1
        if calls["n"] == 13:
            b.target = np.full_like(b.target, np.nan)
        return b

    monkeypatch.setattr(tr, "make_batch", poisoned)
    tc = TrainConfig(steps=30, batch_size=4, lr=1e-3, seed=0, log_every=5, snapshot_every=5)
    with pytest.raises(TrainingDiverged) as e:
        train_teacher(spec_t, small_ds, TeacherObjectiveConfig(), expert, tc)
    err = e.value
    assert err.step == 12 and err.last_good_step == 10
    assert all(np.isfinite(v).all() for v in err.last_good.values())
