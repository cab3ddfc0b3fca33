"""Loss terms for teacher pretraining and student distillation."""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from ..graph.build import Discriminator, SyncExpert
from ..tensor import Tensor, ops
from .features import FeatureExtractor

SYNC_EPS = 1e-7
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
N_TAPS = 7


def _same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name}: shape mismatch {a.shape} vs {b.shape}")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def recon_loss(gen: Tensor, gt) -> Tensor:
    """Mean absolute error."""
    gen, gt = _t(gen), _t(gt)
    _same_shape(gen, gt, "recon_loss")
    return ops.l1_distance(gen, gt)


def gan_losses(disc: Discriminator, real, fake: Tensor) -> tuple[Tensor, Tensor]:
    """Non-saturating BCE: (discriminator loss, generator loss).

    The discriminator term sees ``fake`` detached, so it never reaches the generator.
    """
    real, fake = _t(real), _t(fake)
    d_real = disc(real.detach())
    d_fake = disc(fake.detach())
    d_loss = ops.bce_with_logits(d_real, 1.0) + ops.bce_with_logits(d_fake, 0.0)
    g_loss = ops.bce_with_logits(disc(fake), 1.0)
    return d_loss, g_loss


def sync_probability(expert: SyncExpert, speech, frames: Tensor) -> Tensor:
    e_s = expert.embed_speech(_t(speech).detach())
    e_v = expert.embed_video(_t(frames))
    return (e_s * e_v).sum(axis=1)


def sync_loss(expert: SyncExpert, speech, gen_frames: Tensor, eps: float = SYNC_EPS) -> Tensor:
    """mean(-log clamp(cos(speech, mouth), eps, 1)) under a frozen expert."""
    p = ops.clamp(sync_probability(expert, speech, gen_frames), eps, 1.0)
    return -ops.log(p).mean()


# -- structural ---------------------------------------------------------------

def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _filter(x: Tensor, window: Tensor) -> Tensor:
    n, c, h, w = x.shape
    y = ops.conv2d(x.reshape(n * c, 1, h, w), window)
    return y.reshape(n, c, y.shape[2], y.shape[3])


def ssim_map(a: Tensor, b: Tensor) -> Tensor:
    """Per-pixel SSIM over valid 11x11 Gaussian windows, unit dynamic range."""
    a, b = _t(a), _t(b)
    _same_shape(a, b, "ssim")
    if min(a.shape[-2:]) < SSIM_WINDOW:
        raise ValueError(f"ssim needs frames of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    win = Tensor(gaussian_window().astype(a.dtype)[None, None])
    mu_a, mu_b = _filter(a, win), _filter(b, win)
    saa = _filter(a * a, win) - mu_a * mu_a
    sbb = _filter(b * b, win) - mu_b * mu_b
    sab = _filter(a * b, win) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * sab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (saa + sbb + SSIM_C2)
    return num / den


def ssim_index(a, b) -> Tensor:
    return ssim_map(a, b).mean()


def ssim_loss(a, b) -> Tensor:
    return 1.0 - ssim_index(a, b)


def tv_loss(a) -> Tensor:
    """Mean squared vertical difference plus mean squared horizontal difference."""
    a = _t(a)
    dv = a[:, :, 1:, :] - a[:, :, :-1, :]
    dh = a[:, :, :, 1:] - a[:, :, :, :-1]
    return (dv * dv).mean() + (dh * dh).mean()


# -- perceptual ---------------------------------------------------------------

def gram(f: Tensor) -> Tensor:
    """Per-item C x C Gram matrix F F^T / (C H W)."""
    n, c, h, w = f.shape
    flat = f.reshape(n, c, h * w)
    return ops.matmul(flat, ops.transpose(flat, (0, 2, 1))) / float(c * h * w)


def feature_loss(fx: FeatureExtractor, a, b) -> Tensor:
    fa, fb = fx.stages(_t(a)), fx.stages(_t(b))
    total = None
    for x, y in zip(fa, fb):
        term = ops.l1_distance(x, y)
        total = term if total is None else total + term
    return total


def style_loss(fx: FeatureExtractor, a, b) -> Tensor:
    """Sum over stages of the mean squared Gram-matrix difference."""
    fa, fb = fx.stages(_t(a)), fx.stages(_t(b))
    total = None
    for x, y in zip(fa, fb):
        d = gram(x) - gram(y)
        term = (d * d).mean()
        total = term if total is None else total + term
    return total


# -- channel distillation -----------------------------------------------------

class ChannelAdapters:
    """One bias-free 1x1 conv per decoder tap, lifting student width to teacher width."""

    def __init__(self, weights: "OrderedDict[str, Tensor]"):
        self.weights = weights

    @classmethod
    def init(cls, student_channels: dict, teacher_channels: dict, seed: int) -> "ChannelAdapters":
        if list(student_channels) != list(teacher_channels):
            raise ValueError("student and teacher tap names differ")
        rng = np.random.default_rng(seed)
        w = OrderedDict()
        for name, cs in student_channels.items():
            ct = teacher_channels[name]
            bound = np.sqrt(6.0 / cs)
            w[name] = Tensor(rng.uniform(-bound, bound, (ct, cs, 1, 1)).astype(np.float32), requires_grad=True)
        return cls(w)

    @classmethod
    def identity(cls, channels: dict, dtype=np.float32) -> "ChannelAdapters":
        return cls(OrderedDict((k, Tensor(np.eye(c, dtype=dtype)[:, :, None, None], requires_grad=True))
                               for k, c in channels.items()))

    def parameters(self) -> list[Tensor]:
        return list(self.weights.values())

    def __call__(self, name: str, f: Tensor) -> Tensor:
        return ops.conv2d(f, self.weights[name])


def channel_attention(f: Tensor) -> Tensor:
    """Softmax over channels of the spatially averaged absolute activation."""
    return ops.softmax(ops.global_avg_pool(ops.abs(f)), axis=1)


def channel_kd_loss(teacher_taps: dict, student_taps: dict, adapters: ChannelAdapters) -> Tensor:
    """Mean over taps of KL(attention(teacher) || attention(adapted student)) + feature MSE."""
    if len(teacher_taps) != N_TAPS or len(student_taps) != N_TAPS:
        raise ValueError(f"channel KD needs {N_TAPS} taps, got {len(teacher_taps)} / {len(student_taps)}")
    total = None
    for name, t in teacher_taps.items():
        t = _t(t).detach()
        s = adapters(name, student_taps[name])
        if s.shape != t.shape:
            raise ValueError(f"channel KD tap {name}: adapted student {s.shape} vs teacher {t.shape}")
        a_t = channel_attention(t).data
        log_a_t = np.log(np.maximum(a_t, np.finfo(a_t.dtype).tiny))
        log_a_s = ops.log_softmax(ops.global_avg_pool(ops.abs(s)), axis=1)
        kl = ((log_a_s * -1.0 + Tensor(log_a_t)) * Tensor(a_t)).sum(axis=1).mean()
        d = s - t
        term = kl + (d * d).mean()
        total = term if total is None else total + term
    return total / float(N_TAPS)
