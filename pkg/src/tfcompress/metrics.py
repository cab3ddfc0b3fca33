"""Desk-scale quality metrics: proxy-FID, SSIM/PSNR and lip-sync distance/confidence."""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .distill.features import FeatureExtractor, build_feature_extractor
from .distill.losses import ssim_index as _ssim_tensor
from .tensor import Tensor, no_grad

PSD_TOL = 1e-6
SHRINKAGE = 1e-6
SYNC_RADIUS = 7
INF_TOKEN = "inf"
CSV_COLUMNS = ("model_id", "precision", "proxy_fid", "ssim", "psnr", "sync_dist", "sync_conf", "macs", "params")


@dataclass
class EmbeddingSet:
    x: np.ndarray  # (n, d)
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def from_matrix(cls, x: np.ndarray) -> "EmbeddingSet":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise ValueError(f"need at least 2 embeddings to estimate a covariance, got shape {x.shape}")
        if x.shape[0] < x.shape[1]:
            warnings.warn(f"only {x.shape[0]} samples for {x.shape[1]}-d embeddings; covariance is rank-deficient",
                          stacklevel=2)
        sigma = np.cov(x, rowvar=False)
        return cls(x, x.mean(axis=0), (sigma + sigma.T) / 2)


def _psd_sqrt(m: np.ndarray, what: str) -> np.ndarray:
    w, v = np.linalg.eigh((m + m.T) / 2)
    if w.min() < -PSD_TOL * max(1.0, np.abs(w).max()):
        raise ValueError(f"{what} is not positive semi-definite (min eigenvalue {w.min():.3g})")
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def frechet_distance(mu1, sigma1, mu2, sigma2) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^(1/2)).

    The cross term uses Tr((S1 S2)^(1/2)) = Tr((A S2 A)^(1/2)) with A = S1^(1/2),
    which keeps the product symmetric so an eigendecomposition applies.
    """
    mu1, mu2 = np.atleast_1d(np.asarray(mu1, np.float64)), np.atleast_1d(np.asarray(mu2, np.float64))
    s1, s2 = np.atleast_2d(np.asarray(sigma1, np.float64)), np.atleast_2d(np.asarray(sigma2, np.float64))
    if mu1.shape != mu2.shape or s1.shape != s2.shape or s1.shape != (mu1.size, mu1.size):
        raise ValueError("frechet_distance: dimension mismatch")
    a = _psd_sqrt(s1, "sigma1")
    _psd_sqrt(s2, "sigma2")
    cross = _psd_sqrt(a @ s2 @ a, "sigma1^1/2 sigma2 sigma1^1/2")
    diff = mu1 - mu2
    d = float(diff @ diff + np.trace(s1) + np.trace(s2) - 2.0 * np.trace(cross))
    return max(d, 0.0)


_EMBEDDER: dict[int, FeatureExtractor] = {}


def default_embedder(seed: int = 1234) -> FeatureExtractor:
    if seed not in _EMBEDDER:
        _EMBEDDER[seed] = build_feature_extractor(seed)
    return _EMBEDDER[seed]


def embed_frames(frames: np.ndarray, embedder: FeatureExtractor | None = None) -> EmbeddingSet:
    return EmbeddingSet.from_matrix((embedder or default_embedder()).embed(frames))


def proxy_fid(real_frames: np.ndarray, gen_frames: np.ndarray, embedder: FeatureExtractor | None = None) -> float:
    a = embed_frames(real_frames, embedder)
    b = embed_frames(gen_frames, embedder)
    shrink = SHRINKAGE * np.eye(a.mu.size)
    return frechet_distance(a.mu, a.sigma + shrink, b.mu, b.sigma + shrink)


# ---------------------------------------------------------------------------
# pixel metrics
# ---------------------------------------------------------------------------

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE) on unit-range images; identical inputs give +inf."""
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0.0 else float(10.0 * np.log10(1.0 / mse))


def ssim_index(a: np.ndarray, b: np.ndarray) -> float:
    with no_grad():
        return float(_ssim_tensor(Tensor(np.asarray(a, np.float64)), Tensor(np.asarray(b, np.float64))).data)


# ---------------------------------------------------------------------------
# lip sync
# ---------------------------------------------------------------------------

def sync_distances(expert, speech_windows: np.ndarray, frames: np.ndarray, window_radius: int = SYNC_RADIUS) -> np.ndarray:
    """d[t, tau + r] = ||e_speech(t) - e_video(t + tau)|| for the times where every offset is in range."""
    n = len(speech_windows)
    if len(frames) != n:
        raise ValueError("speech windows and frames must be aligned sequences of equal length")
    if n < 2 * window_radius + 1:
        raise ValueError(f"sequence of {n} frames is shorter than the {2 * window_radius + 1}-frame sync window")
    with no_grad():
        e_s = expert.embed_speech(Tensor(speech_windows)).data.astype(np.float64)
        e_v = expert.embed_video(Tensor(frames)).data.astype(np.float64)
    ts = np.arange(window_radius, n - window_radius)
    taus = np.arange(-window_radius, window_radius + 1)
    diff = e_s[ts][:, None, :] - e_v[ts[:, None] + taus[None]]
    return np.sqrt((diff**2).sum(axis=-1))


def sync_proxy(expert, speech_windows, frames, window_radius: int = SYNC_RADIUS) -> tuple[float, float]:
    """(sync_dist, sync_conf): distance at zero offset, and how far the best offset undercuts the median."""
    d = sync_distances(expert, speech_windows, frames, window_radius)
    r = window_radius
    return float(d[:, r].mean()), float((np.median(d, axis=1) - d.min(axis=1)).mean())


def sync_proxy_sequences(expert, sequences, window_radius: int = SYNC_RADIUS) -> tuple[float, float]:
    """Pool per-time distances over several aligned (speech, frames) sequences."""
    ds = [sync_distances(expert, s, f, window_radius) for s, f in sequences]
    d = np.concatenate(ds, axis=0)
    r = window_radius
    return float(d[:, r].mean()), float((np.median(d, axis=1) - d.min(axis=1)).mean())


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if np.isinf(v):
        return INF_TOKEN if v > 0 else "-" + INF_TOKEN
    return f"{v:.6g}"


@dataclass
class MetricsReport:
    model_id: str
    precision: str
    proxy_fid: float
    ssim: float
    psnr: float
    sync_dist: float
    sync_conf: float
    macs: int = 0
    params: int = 0
    latency_ms: dict = field(default_factory=dict)
    seed: int | None = None
    dataset_id: str = ""

    def __post_init__(self):
        for name in ("proxy_fid", "ssim", "sync_dist", "sync_conf"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"metric {name} is not finite")

    def record(self) -> dict:
        out = asdict(self)
        out["kind"] = "metrics"
        if np.isinf(self.psnr):
            out["psnr"] = INF_TOKEN
        return out

    @classmethod
    def from_record(cls, rec: dict) -> "MetricsReport":
        data = {k: rec[k] for k in cls.__dataclass_fields__ if k in rec}
        if data.get("psnr") == INF_TOKEN:
            data["psnr"] = float("inf")
        return cls(**data)

    def row(self) -> list[str]:
        return [_fmt(getattr(self, c)) for c in CSV_COLUMNS]


def reports_to_csv(reports: list[MetricsReport], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        w.writerow(r.row())
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text
