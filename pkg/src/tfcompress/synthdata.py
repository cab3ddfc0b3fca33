"""Seeded synthetic audio-visual corpus.

Faces are parametric drawings (oval head, two eyes, elliptical mouth whose
height follows a per-frame aperture). Speech frames are 16-bin band
profiles whose energy centroid tracks the same aperture, plus
identity-coloured noise, so a generator can learn speech -> mouth shape.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

N_BANDS = 16
FRAME_HW = (32, 32)
SPEECH_WINDOW = 5
MOUTH_MIN_HEIGHT = 0.6
MOUTH_MAX_HEIGHT = 4.2
NOISE_AMPLITUDE = 0.1
NEGATIVE_MARGIN = 0.1
SPLITS = ("train", "val", "test", "calib")


@dataclass(frozen=True)
class IdentityParams:
    face_radius: tuple[float, float]
    face_center: tuple[float, float]
    skin: tuple[float, float, float]
    background: tuple[float, float, float]
    eye: tuple[float, float, float]
    lip: tuple[float, float, float]
    mouth_width: float
    timbre: tuple[float, ...]

    @classmethod
    def sample(cls, rng: np.random.Generator) -> "IdentityParams":
        timbre = np.convolve(rng.random(N_BANDS + 4), np.ones(5) / 5, mode="valid")
        timbre = timbre / timbre.mean()
        return cls(
            face_radius=(float(rng.uniform(9.0, 11.5)), float(rng.uniform(11.0, 13.5))),
            face_center=(float(rng.uniform(14.5, 17.5)), float(rng.uniform(14.0, 16.5))),
            skin=tuple(float(v) for v in rng.uniform([0.55, 0.35, 0.25], [0.95, 0.75, 0.6])),
            background=tuple(float(v) for v in rng.uniform(0.0, 0.45, 3)),
            eye=tuple(float(v) for v in rng.uniform(0.0, 0.25, 3)),
            lip=tuple(float(v) for v in rng.uniform([0.35, 0.0, 0.05], [0.65, 0.15, 0.2])),
            mouth_width=float(rng.uniform(4.0, 6.0)),
            timbre=tuple(float(v) for v in timbre),
        )


def mouth_height(aperture) -> np.ndarray:
    """Vertical semi-axis of the mouth ellipse; closed lips at aperture 0."""
    a = np.clip(np.asarray(aperture, dtype=np.float64), 0.0, 1.0)
    return MOUTH_MIN_HEIGHT + a * (MOUTH_MAX_HEIGHT - MOUTH_MIN_HEIGHT)


def _soft_ellipse(yy, xx, cy, cx, ry, rx, softness=0.6):
    d = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2)
    scale = np.maximum(np.minimum(ry, rx) / softness, 4.0)
    return 1.0 / (1.0 + np.exp(np.clip((d - 1.0) * scale, -50, 50)))


def render_frames(ident: IdentityParams, aperture: np.ndarray, seed: int) -> np.ndarray:
    """Render (T, 3, H, W) float32 frames; a pure function of its arguments."""
    aperture = np.asarray(aperture, dtype=np.float64)
    t = len(aperture)
    rng = np.random.default_rng(seed)
    # slow head drift, sub-pixel
    drift = np.cumsum(rng.normal(0.0, 0.25, size=(t, 2)), axis=0)
    drift = np.clip(drift - drift.mean(axis=0), -1.5, 1.5)
    h, w = FRAME_HW
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy, xx = yy[None], xx[None]
    cy = ident.face_center[1] + drift[:, 1, None, None]
    cx = ident.face_center[0] + drift[:, 0, None, None]
    ry, rx = ident.face_radius[1], ident.face_radius[0]
    face = _soft_ellipse(yy, xx, cy, cx, ry, rx)
    eyes = _soft_ellipse(yy, xx, cy - 0.3 * ry, cx - 0.4 * rx, 1.4, 1.6, 0.4)
    eyes = np.maximum(eyes, _soft_ellipse(yy, xx, cy - 0.3 * ry, cx + 0.4 * rx, 1.4, 1.6, 0.4))
    mh = mouth_height(aperture)[:, None, None]
    mouth = _soft_ellipse(yy, xx, cy + 0.5 * ry, cx, mh, ident.mouth_width, 0.4)
    out = np.empty((t, 3, h, w), dtype=np.float64)
    for c in range(3):
        img = ident.background[c] * (1 - face) + ident.skin[c] * face
        img = img * (1 - eyes) + ident.eye[c] * eyes
        img = img * (1 - mouth) + ident.lip[c] * mouth
        out[:, c] = img
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def aperture_track(length: int, rng: np.random.Generator) -> np.ndarray:
    """Syllable-like mouth openness in [0, 1]: random targets every 3 frames, lightly smoothed."""
    n_knots = length // 3 + 3
    knots = rng.uniform(0.0, 1.0, n_knots)
    knots[rng.random(n_knots) < 0.25] = 0.0
    track = np.interp(np.arange(length + 4), np.arange(n_knots) * 3, knots)
    track = np.convolve(track, [0.25, 0.5, 0.25], mode="same")[2 : length + 2]
    return np.clip(track, 0.0, 1.0)


def speech_features(aperture: np.ndarray, ident: IdentityParams, rng: np.random.Generator) -> np.ndarray:
    """(T, 16) band profiles: energy centroid encodes aperture; noise is shaped by the identity's timbre."""
    bands = np.arange(N_BANDS, dtype=np.float64)
    centroid = 2.0 + 11.0 * np.asarray(aperture)[:, None]
    profile = np.exp(-((bands[None] - centroid) ** 2) / (2 * 1.5**2))
    timbre = np.asarray(ident.timbre)[None]
    noise = NOISE_AMPLITUDE * timbre * (0.5 + rng.standard_normal(profile.shape))
    return (profile + noise).astype(np.float32)


@dataclass
class SynthDataset:
    seed: int
    identities: list[IdentityParams]
    clip_identity: np.ndarray  # (n_clips,)
    clip_seed: np.ndarray  # (n_clips,) render seeds
    speech: np.ndarray  # (n_clips, T, 16)
    aperture: np.ndarray  # (n_clips, T)
    frames: np.ndarray  # (n_clips, T, 3, H, W)
    splits: dict[str, list[int]] = field(default_factory=dict)

    @property
    def n_clips(self) -> int:
        return len(self.clip_identity)

    @property
    def clip_len(self) -> int:
        return self.speech.shape[1]

    def clips(self, split: str) -> np.ndarray:
        ids = set(self.splits[split])
        return np.array([i for i, ident in enumerate(self.clip_identity) if int(ident) in ids], dtype=np.int64)

    def speech_window(self, clip: int, t: int) -> np.ndarray:
        """(1, 16, 5) window centred on ``t``; edges replicate."""
        half = SPEECH_WINDOW // 2
        idx = np.clip(np.arange(t - half, t + half + 1), 0, self.clip_len - 1)
        return self.speech[clip, idx].T[None]

    def speech_windows(self, clips: np.ndarray, ts: np.ndarray) -> np.ndarray:
        half = SPEECH_WINDOW // 2
        idx = np.clip(ts[:, None] + np.arange(-half, half + 1)[None], 0, self.clip_len - 1)
        win = self.speech[clips[:, None], idx]  # (N, 5, 16)
        return np.ascontiguousarray(win.transpose(0, 2, 1)[:, None])

    def digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for arr in (self.speech, self.aperture, self.frames, self.clip_identity):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    # -- persistence ---------------------------------------------------------
    def save(self, path: str | Path) -> None:
        path = Path(path)
        (path / "clips").mkdir(parents=True, exist_ok=True)
        manifest = {
            "format": "tfcompress-synth",
            "version": 1,
            "seed": self.seed,
            "n_identities": len(self.identities),
            "n_clips": self.n_clips,
            "clip_len": self.clip_len,
            "frame_shape": list(self.frames.shape[2:]),
            "splits": self.splits,
            "identities": [asdict(i) for i in self.identities],
            "clip_identity": [int(v) for v in self.clip_identity],
            "clip_seed": [int(v) for v in self.clip_seed],
            "digest": self.digest(),
        }
        (path / "manifest.json").write_text(json.dumps(manifest, indent=1))
        for i in range(self.n_clips):
            with open(path / "clips" / f"clip_{i:05d}.bin", "wb") as f:
                for arr in (self.speech[i], self.aperture[i], self.frames[i]):
                    _write_blob(f, arr)

    @classmethod
    def load(cls, path: str | Path) -> "SynthDataset":
        path = Path(path)
        m = json.loads((path / "manifest.json").read_text())
        speech, aperture, frames = [], [], []
        for i in range(m["n_clips"]):
            with open(path / "clips" / f"clip_{i:05d}.bin", "rb") as f:
                speech.append(_read_blob(f))
                aperture.append(_read_blob(f))
                frames.append(_read_blob(f))
        ds = cls(
            seed=m["seed"],
            identities=[IdentityParams(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})
                        for d in m["identities"]],
            clip_identity=np.array(m["clip_identity"], dtype=np.int64),
            clip_seed=np.array(m["clip_seed"], dtype=np.int64),
            speech=np.stack(speech),
            aperture=np.stack(aperture),
            frames=np.stack(frames),
            splits={k: list(v) for k, v in m["splits"].items()},
        )
        if ds.digest() != m["digest"]:
            raise ValueError(f"dataset at {path} does not match its manifest digest")
        return ds


def _write_blob(f, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    f.write(struct.pack("<I", arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(b"f32\0")
    f.write(arr.tobytes())


def _read_blob(f) -> np.ndarray:
    (ndim,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
    tag = f.read(4)
    if tag != b"f32\0":
        raise ValueError(f"unsupported dtype tag {tag!r}")
    n = int(np.prod(dims)) if dims else 1
    data = np.frombuffer(f.read(4 * n), dtype="<f4")
    if data.size != n:
        raise ValueError("truncated clip blob")
    return data.reshape(dims).astype(np.float32)


def split_identities(n: int, rng: np.random.Generator) -> dict[str, list[int]]:
    """Disjoint identity pools; train keeps whatever the held-out pools leave."""
    order = [int(v) for v in rng.permutation(n)]
    if n < 4:
        return {"train": order, "val": [], "test": [], "calib": []}
    n_val = max(1, round(0.07 * n))
    n_test = max(1, round(0.19 * n))
    n_cal = max(1, round(0.19 * n))
    out = {
        "val": order[:n_val],
        "test": order[n_val : n_val + n_test],
        "calib": order[n_val + n_test : n_val + n_test + n_cal],
        "train": order[n_val + n_test + n_cal :],
    }
    return {k: sorted(v) for k, v in out.items()}


def generate_dataset(seed: int, n_identities: int = 32, clips_per_identity: int = 6, clip_len: int = 48) -> SynthDataset:
    if min(n_identities, clips_per_identity, clip_len) < 1:
        raise ValueError("n_identities, clips_per_identity and clip_len must all be >= 1")
    root = np.random.default_rng(seed)
    identities = [IdentityParams.sample(root) for _ in range(n_identities)]
    splits = split_identities(n_identities, root)
    clip_identity, clip_seed, speech, aperture, frames = [], [], [], [], []
    # deterministic merge order: (identity, clip index)
    for ident_id, ident in enumerate(identities):
        for k in range(clips_per_identity):
            cseed = int(np.random.SeedSequence([seed, ident_id, k]).generate_state(1)[0])
            rng = np.random.default_rng(cseed)
            # stored precision is the source of truth, so frames re-render exactly from it
            a = aperture_track(clip_len, rng).astype(np.float32)
            speech.append(speech_features(a, ident, rng))
            aperture.append(a)
            frames.append(render_frames(ident, a, cseed))
            clip_identity.append(ident_id)
            clip_seed.append(cseed)
    return SynthDataset(
        seed=seed,
        identities=identities,
        clip_identity=np.array(clip_identity, dtype=np.int64),
        clip_seed=np.array(clip_seed, dtype=np.int64),
        speech=np.stack(speech),
        aperture=np.stack(aperture),
        frames=np.stack(frames),
        splits=splits,
    )


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    speech: np.ndarray  # (N, 1, 16, 5)
    reference: np.ndarray  # (N, 3, H, W)
    masked: np.ndarray  # (N, 3, H, W), lower half zero
    target: np.ndarray  # (N, 3, H, W)
    clip: np.ndarray
    t: np.ndarray
    ref_t: np.ndarray

    @property
    def faces(self) -> np.ndarray:
        """Generator face input: reference frame then masked pose frame (6 channels)."""
        return np.concatenate([self.reference, self.masked], axis=1)

    def __len__(self) -> int:
        return len(self.clip)


def mask_lower_half(frames: np.ndarray) -> np.ndarray:
    out = frames.copy()
    out[..., frames.shape[-2] // 2 :, :] = 0.0
    return out


def assemble(ds: SynthDataset, clips: np.ndarray, ts: np.ndarray, ref_ts: np.ndarray) -> Batch:
    target = ds.frames[clips, ts]
    return Batch(
        speech=ds.speech_windows(clips, ts),
        reference=ds.frames[clips, ref_ts],
        masked=mask_lower_half(target),
        target=target,
        clip=clips,
        t=ts,
        ref_t=ref_ts,
    )


def _other_timestep(ts: np.ndarray, length: int, rng: np.random.Generator) -> np.ndarray:
    off = rng.integers(1, length, size=len(ts))
    return (ts + off) % length


def make_batch(ds: SynthDataset, batch_size: int, rng: np.random.Generator, split: str = "train") -> Batch:
    """Random training items; reference frames come from another timestep of the same clip."""
    if ds.clip_len < 2:
        raise ValueError("clips need at least 2 frames to draw a distinct reference")
    pool = ds.clips(split)
    if len(pool) == 0:
        raise ValueError(f"split {split!r} is empty")
    clips = pool[rng.integers(0, len(pool), size=batch_size)]
    ts = rng.integers(0, ds.clip_len, size=batch_size)
    return assemble(ds, clips, ts, _other_timestep(ts, ds.clip_len, rng))


def eval_items(ds: SynthDataset, split: str = "test", n: int = 256, seed: int = 0) -> Batch:
    """Fixed held-out item list for metric evaluation."""
    rng = np.random.default_rng(seed)
    pool = ds.clips(split)
    if len(pool) == 0:
        raise ValueError(f"split {split!r} is empty")
    flat = np.array([(c, t) for c in pool for t in range(ds.clip_len)])
    pick = flat[rng.choice(len(flat), size=min(n, len(flat)), replace=False)]
    pick = pick[np.lexsort((pick[:, 1], pick[:, 0]))]
    clips, ts = pick[:, 0], pick[:, 1]
    return assemble(ds, clips, ts, _other_timestep(ts, ds.clip_len, rng))


def clip_items(ds: SynthDataset, clip: int, seed: int = 0) -> Batch:
    """Every timestep of one clip, in order (for sequence-level sync metrics)."""
    rng = np.random.default_rng([seed, clip])
    ts = np.arange(ds.clip_len)
    return assemble(ds, np.full(ds.clip_len, clip), ts, _other_timestep(ts, ds.clip_len, rng))


def calibration_items(ds: SynthDataset, n: int = 1024, seed: int = 0) -> Batch:
    """Calibration frames from the held-out calibration identity pool."""
    return eval_items(ds, "calib", n, seed)


# ---------------------------------------------------------------------------
# audio-visual pairs
# ---------------------------------------------------------------------------

@dataclass
class PairSet:
    speech: np.ndarray  # (N, 1, 16, 5)
    frames: np.ndarray  # (N, 3, H, W)
    label: np.ndarray  # (N,) 1 = in sync


def make_unsynced_pairs(
    ds: SynthDataset, shift: int, n: int, rng: np.random.Generator, split: str = "train", margin: float = NEGATIVE_MARGIN
) -> PairSet:
    """Half aligned pairs, half negatives (time-shifted by >= ``shift`` or identity-swapped).

    Negatives whose mouth apertures coincide within ``margin`` are redrawn:
    such a pair looks in sync and would only add label noise.
    """
    if shift < 1:
        raise ValueError("shift must be >= 1")
    pool = ds.clips(split)
    if len(pool) == 0:
        raise ValueError(f"split {split!r} is empty")
    n_pos = n // 2
    clips = pool[rng.integers(0, len(pool), size=n)]
    ts = rng.integers(0, ds.clip_len, size=n)
    f_clip, f_t = clips.copy(), ts.copy()
    for i in range(n_pos, n):
        for _ in range(100):
            if rng.random() < 0.5 and ds.clip_len > 2 * shift:
                off = int(rng.integers(shift, ds.clip_len - shift + 1))
                fc, ft = clips[i], (ts[i] + off) % ds.clip_len
            else:
                fc = pool[rng.integers(0, len(pool))]
                if ds.clip_identity[fc] == ds.clip_identity[clips[i]] and len(set(ds.clip_identity[pool])) > 1:
                    continue
                ft = ts[i]
            if abs(ds.aperture[fc, ft] - ds.aperture[clips[i], ts[i]]) >= margin:
                break
        f_clip[i], f_t[i] = fc, ft
    label = np.zeros(n, dtype=np.float32)
    label[:n_pos] = 1.0
    return PairSet(ds.speech_windows(clips, ts), ds.frames[f_clip, f_t], label)


# ---------------------------------------------------------------------------
# sync expert
# ---------------------------------------------------------------------------

@dataclass
class ExpertTraining:
    history: list[float]
    accuracy: float
    threshold: float = 0.5


def expert_scores(expert, pairs: PairSet, batch_size: int = 256) -> np.ndarray:
    from .tensor import Tensor, no_grad

    out = []
    with no_grad():
        for i in range(0, len(pairs.label), batch_size):
            e_s, e_v = expert(Tensor(pairs.speech[i : i + batch_size]), Tensor(pairs.frames[i : i + batch_size]))
            out.append((e_s.data * e_v.data).sum(axis=1))
    return np.concatenate(out)


def expert_accuracy(expert, pairs: PairSet, threshold: float = 0.5) -> float:
    return float(((expert_scores(expert, pairs) > threshold) == (pairs.label > 0.5)).mean())


def degrade(frames: np.ndarray, rng: np.random.Generator, p: float = 0.5) -> np.ndarray:
    """Randomly blur and add noise to a fraction ``p`` of frames.

    Generated mouths are softer than rendered ones; training the expert on
    both keeps its scores meaningful (and non-zero) on generator outputs.
    """
    out = frames.copy()
    pick = rng.random(len(frames)) < p
    if not pick.any():
        return out
    x = out[pick]
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    blur = sum(padded[:, :, i : i + x.shape[2], j : j + x.shape[3]] for i in range(3) for j in range(3)) / 9.0
    alpha = rng.uniform(0.0, 1.0, (len(x), 1, 1, 1))
    x = (1 - alpha) * x + alpha * blur + rng.normal(0.0, 0.03, x.shape)
    out[pick] = np.clip(x, 0.0, 1.0).astype(frames.dtype)
    return out


def train_sync_expert(
    ds: SynthDataset, steps: int, seed: int, batch_size: int = 64, lr: float = 1e-3, shift: int = 3,
    eval_split: str = "test", augment: bool = True, head_act: str = "sigmoid",
):
    """Contrastive audio-visual expert: BCE on the cosine of the two unit embeddings.

    Returns the frozen expert and its training record (held-out pair accuracy at threshold 0.5).
    """
    from .graph.build import build_sync_expert
    from .tensor import Adam, Tensor, ops

    ss_model, ss_data, ss_eval = np.random.SeedSequence(seed).spawn(3)
    expert = build_sync_expert(int(ss_model.generate_state(1)[0]), (1, N_BANDS, SPEECH_WINDOW), FRAME_HW,
                               head_act=head_act).train()
    opt = Adam(expert.parameters(), lr=lr)
    rng = np.random.default_rng(ss_data)
    history = []
    for step in range(steps):
        pairs = make_unsynced_pairs(ds, shift, batch_size, rng)
        frames = degrade(pairs.frames, rng) if augment else pairs.frames
        e_s, e_v = expert(Tensor(pairs.speech), Tensor(frames))
        p = ops.clamp((e_s * e_v).sum(axis=1), 1e-7, 1 - 1e-7)
        y = Tensor(pairs.label)
        loss = -(y * ops.log(p) + (1.0 - y) * ops.log(1.0 - p)).mean()
        if not np.isfinite(loss.data):
            raise FloatingPointError(f"sync expert training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        history.append(float(loss.data))
    expert.freeze()
    held_out = make_unsynced_pairs(ds, shift, 1024, np.random.default_rng(ss_eval), split=eval_split)
    return expert, ExpertTraining(history, expert_accuracy(expert, held_out))
