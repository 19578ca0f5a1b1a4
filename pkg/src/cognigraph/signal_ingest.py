"""Behavioural signal ingestion: landmark normalisation, log-mel audio,
dyad windowing, clip file I/O and a synthetic dyad generator.

Landmark arrays are ``T x 68 x 2`` (x, y) and live in a unit frame whose
mean-face centroid sits at (0.5, 0.5).
"""

from __future__ import annotations

import json
import logging
import warnings
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

N_LANDMARKS = 68
N_MELS = 64
N_CATEGORIES = 4
INPUT_FRAMES = 80
MAX_DELAY = 25
CANDIDATE_FRAMES = INPUT_FRAMES + MAX_DELAY
DEFAULT_STRIDE = 40
LOG_FLOOR = 1e-6


class DegenerateClipError(ValueError):
    pass


class ShortClipWarning(UserWarning):
    pass


# ---------------------------------------------------------------------------
# Mean face
# ---------------------------------------------------------------------------


def _arc(cx, cy, rx, ry, start, stop, n):
    t = np.linspace(start, stop, n)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


def _ring(cx, cy, rx, ry, n):
    t = np.linspace(np.pi, -np.pi, n, endpoint=False)
    return np.stack([cx + rx * np.cos(t), cy + ry * np.sin(t)], axis=1)


@dataclass(frozen=True)
class MeanFaceTemplate:
    points: np.ndarray

    @classmethod
    def default(cls) -> "MeanFaceTemplate":
        """A 68-point face in the iBUG ordering (jaw, brows, nose, eyes, mouth)."""
        brow_curve = 0.04 * np.sin(np.linspace(0, np.pi, 5))
        parts = [
            _arc(0.5, 0.42, 0.38, 0.40, np.pi, 0.0, 17),
            np.stack([np.linspace(0.20, 0.42, 5), 0.30 - brow_curve], axis=1),
            np.stack([np.linspace(0.58, 0.80, 5), 0.30 - brow_curve], axis=1),
            np.stack([np.full(4, 0.5), np.linspace(0.38, 0.55, 4)], axis=1),
            np.stack([np.linspace(0.43, 0.57, 5), 0.60 + 0.01 * np.sin(np.linspace(0, np.pi, 5))], axis=1),
            _ring(0.33, 0.40, 0.07, 0.03, 6),
            _ring(0.67, 0.40, 0.07, 0.03, 6),
            _ring(0.50, 0.70, 0.14, 0.06, 12),
            _ring(0.50, 0.70, 0.09, 0.025, 8),
        ]
        pts = np.concatenate(parts, axis=0)
        pts = pts - pts.mean(axis=0) + 0.5
        pts.setflags(write=False)
        return cls(points=pts)

    def __post_init__(self):
        if self.points.shape != (N_LANDMARKS, 2):
            raise ValueError(f"template must be 68x2, got {self.points.shape}")


# ---------------------------------------------------------------------------
# Landmarks
# ---------------------------------------------------------------------------


@dataclass
class LandmarkSequence:
    points: np.ndarray
    frame_rate: float = 25.0
    degenerate_frames: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.points.ndim != 3 or self.points.shape[1:] != (N_LANDMARKS, 2):
            raise ValueError(f"landmarks must be Tx68x2, got {self.points.shape}")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("landmark coordinates must be finite")

    @property
    def frames(self) -> int:
        return self.points.shape[0]


def _is_degenerate(frame: np.ndarray) -> bool:
    sv = np.linalg.svd(frame - frame.mean(axis=0), compute_uv=False)
    return sv[0] < 1e-12 or sv[1] < 1e-9 * sv[0]


def similarity_align(frame: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Rotation + isotropic scale + translation of ``frame`` onto ``target``
    minimising the summed squared point distance (no reflection)."""
    mu_x = frame.mean(axis=0)
    mu_y = target.mean(axis=0)
    xc = frame - mu_x
    yc = target - mu_y
    u, s, vt = np.linalg.svd(yc.T @ xc)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    diag = np.array([1.0, d])
    rot = u @ np.diag(diag) @ vt
    scale = (s * diag).sum() / (xc**2).sum()
    return scale * xc @ rot.T + mu_y


def normalize_landmarks(
    raw: np.ndarray,
    template: MeanFaceTemplate | None = None,
    frame_rate: float = 25.0,
) -> LandmarkSequence:
    """Align every frame to the mean face with its own similarity transform.

    Degenerate frames (all points collinear or coincident) are replaced by
    linear interpolation between the nearest valid frames.
    """
    template = template or MeanFaceTemplate.default()
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[1:] != (N_LANDMARKS, 2):
        raise ValueError(f"raw landmarks must be Tx68x2, got {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("raw landmark coordinates must be finite")

    n = raw.shape[0]
    out = np.empty_like(raw)
    bad = [t for t in range(n) if _is_degenerate(raw[t])]
    if len(bad) == n:
        raise DegenerateClipError("every frame of the clip is degenerate")
    for t in range(n):
        if t not in bad:
            out[t] = similarity_align(raw[t], template.points)
    if bad:
        logger.warning("interpolating %d degenerate frame(s)", len(bad))
        good = np.setdiff1d(np.arange(n), bad)
        flat = out.reshape(n, -1)
        for c in range(flat.shape[1]):
            flat[bad, c] = np.interp(bad, good, flat[good, c])
    np.clip(out, 0.0, 1.0, out=out)
    return LandmarkSequence(points=out, frame_rate=frame_rate, degenerate_frames=bad)


# ---------------------------------------------------------------------------
# Audio
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS, fmin: float = 0.0, fmax: float | None = None):
    """Triangular HTK-mel filterbank, shape ``n_mels x (n_fft // 2 + 1)``."""
    fmax = sample_rate / 2 if fmax is None else fmax
    hz_pts = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fft_freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    lower, centre, upper = hz_pts[:-2, None], hz_pts[1:-1, None], hz_pts[2:, None]
    rising = (fft_freqs - lower) / (centre - lower)
    falling = (upper - fft_freqs) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


@dataclass
class MelSpectrogram:
    bins: np.ndarray

    @property
    def frames(self) -> int:
        return self.bins.shape[0]


def compute_logmel(
    waveform: np.ndarray,
    sample_rate: int,
    video_frame_rate: float = 25.0,
    n_frames: int | None = None,
    n_mels: int = N_MELS,
    window_ms: float = 40.0,
) -> MelSpectrogram:
    """Log-mel spectra from a Hann window and hop of ``window_ms``.

    The frame count is forced to the video's (``n_frames`` or, if omitted,
    duration x frame rate): surplus frames are dropped, missing ones repeat
    the last frame.
    """
    x = np.asarray(waveform, dtype=np.float64).ravel()
    duration = x.size / sample_rate
    if n_frames is None:
        n_frames = int(np.floor(duration * video_frame_rate + 1e-9))
    video_duration = n_frames / video_frame_rate
    if duration < 0.5 * video_duration:
        raise ValueError(
            f"audio lasts {duration:.3f}s, less than half the video's {video_duration:.3f}s"
        )

    win = int(round(window_ms * 1e-3 * sample_rate))
    n_fft = 1 << (win - 1).bit_length()
    hann = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    n_avail = max(0, (x.size - win) // win + 1)
    if n_avail == 0:
        x = np.pad(x, (0, win - x.size))
        n_avail = 1
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::win][:n_avail]
    power = np.abs(np.fft.rfft(frames * hann, n=n_fft, axis=1)) ** 2
    logmel = np.log(power @ mel_filterbank(sample_rate, n_fft, n_mels).T + LOG_FLOOR)

    if logmel.shape[0] >= n_frames:
        logmel = logmel[:n_frames]
    else:
        pad = np.repeat(logmel[-1:], n_frames - logmel.shape[0], axis=0)
        logmel = np.concatenate([logmel, pad], axis=0)
    return MelSpectrogram(bins=logmel)


def standardize_spectrogram(spec: MelSpectrogram) -> MelSpectrogram:
    mu = spec.bins.mean()
    sd = spec.bins.std()
    return MelSpectrogram(bins=(spec.bins - mu) / (sd if sd > 1e-12 else 1.0))


def one_hot_categories(labels, n_classes: int = N_CATEGORIES) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError("category label out of range")
    return np.eye(n_classes)[labels]


# ---------------------------------------------------------------------------
# Windows
# ---------------------------------------------------------------------------


@dataclass
class SpeakerStreams:
    landmarks: np.ndarray
    audio: np.ndarray | None = None
    categories: np.ndarray | None = None

    @property
    def frames(self) -> int:
        return self.landmarks.shape[0]


@dataclass
class DyadWindow:
    speaker_audio: np.ndarray | None
    speaker_landmarks: np.ndarray
    listener_gt_candidates: np.ndarray
    start_frame: int
    speaker_categories: np.ndarray | None = None


def window_starts(n_frames: int, start: int = 0, stride: int = DEFAULT_STRIDE) -> list[int]:
    if stride < 1:
        raise ValueError("stride must be positive")
    return list(range(start, n_frames - CANDIDATE_FRAMES + 1, stride))


def window_dyad(
    speaker: SpeakerStreams,
    listener: LandmarkSequence | np.ndarray,
    start: int = 0,
    stride: int = DEFAULT_STRIDE,
) -> list[DyadWindow]:
    """Cut a clip into 80-frame speaker inputs paired with 105-frame
    listener candidates that start at the same clip frame."""
    listener_pts = listener.points if isinstance(listener, LandmarkSequence) else np.asarray(listener)
    n = min(speaker.frames, listener_pts.shape[0])
    if speaker.audio is not None and speaker.audio.shape[0] < n:
        raise ValueError("speaker audio shorter than the landmark streams")
    if n < start + CANDIDATE_FRAMES:
        warnings.warn(
            f"clip of {n} frames is shorter than {start + CANDIDATE_FRAMES}; no windows produced",
            ShortClipWarning,
            stacklevel=2,
        )
        return []
    out = []
    for s in window_starts(n, start, stride):
        sl = slice(s, s + INPUT_FRAMES)
        out.append(
            DyadWindow(
                speaker_audio=None if speaker.audio is None else speaker.audio[sl],
                speaker_landmarks=speaker.landmarks[sl],
                listener_gt_candidates=listener_pts[s : s + CANDIDATE_FRAMES],
                start_frame=s,
                speaker_categories=None if speaker.categories is None else speaker.categories[sl],
            )
        )
    return out


# ---------------------------------------------------------------------------
# Synthetic dyads
# ---------------------------------------------------------------------------

TRAIT_NAMES = ("ope", "con", "ext", "agr", "neu")
TONE_FREQS = (300.0, 700.0, 1500.0, 3000.0)


@dataclass(frozen=True)
class SynthConfig:
    frames: int = 600
    delay: int = 7
    noise: float = 0.0
    frame_rate: float = 25.0
    sample_rate: int = 16000
    map: str = "random"  # "random" | "identity"
    motion_dim: int = 6
    motion_scale: float = 0.02
    smoothing: int = 5
    persistence: float = 0.9
    world_seed: int = 1234
    with_categories: bool = False

    def __post_init__(self):
        if not 0 <= self.delay <= MAX_DELAY:
            raise ValueError(f"delay must lie in [0, {MAX_DELAY}], got {self.delay}")
        if self.map not in ("random", "identity"):
            raise ValueError(f"unknown map {self.map!r}")


@dataclass
class SynthDyad:
    speaker_waveform: np.ndarray
    sample_rate: int
    speaker_landmarks: np.ndarray
    listener_landmarks: np.ndarray
    delay: int
    traits: np.ndarray
    map_params: dict
    audio_envelope: np.ndarray
    speaker_categories: np.ndarray | None = None


def _world(cfg: SynthConfig):
    """Experiment-wide constants shared by every subject."""
    rng = np.random.default_rng(cfg.world_seed)
    k = cfg.motion_dim
    # unit-variance coefficients give per-coordinate displacement std of 1
    spread = np.sqrt(2 * N_LANDMARKS / k)
    speaker_basis = spread * np.linalg.qr(rng.standard_normal((2 * N_LANDMARKS, k)))[0]
    listener_basis = spread * np.linalg.qr(rng.standard_normal((2 * N_LANDMARKS, k)))[0]
    w_dir = np.linalg.qr(rng.standard_normal((k, k)))[0]
    w_audio = rng.standard_normal((k, len(TONE_FREQS))) / np.sqrt(len(TONE_FREQS))
    mix = 0.7 * np.eye(5) + 0.3 * rng.uniform(-1, 1, (5, 5))
    mix /= np.abs(mix).sum(axis=1, keepdims=True)
    return speaker_basis, listener_basis, w_dir, w_audio, mix


def _smooth_process(rng, n, dims, smoothing, a):
    z = np.zeros((n, dims))
    eps = rng.standard_normal((n, dims))
    for t in range(1, n):
        z[t] = a * z[t - 1] + np.sqrt(1 - a * a) * eps[t]
    if smoothing > 1:
        kern = np.ones(smoothing) / smoothing
        z = np.stack([np.convolve(z[:, d], kern, mode="same") for d in range(dims)], axis=1)
    return z / (z.std(axis=0, keepdims=True) + 1e-12)


SUBJECT_PARAM_RANGES = {
    "gain": (0.5, 1.5),
    "audio_reliance": (0.0, 1.0),
    "squash": (0.5, 3.0),
    "bias_level": (-0.5, 0.5),
    "drive": (0.5, 1.5),
}


def subject_map_params(seed: int) -> dict:
    rng = np.random.default_rng([seed, 17])
    return {k: float(rng.uniform(lo, hi)) for k, (lo, hi) in SUBJECT_PARAM_RANGES.items()}


def traits_from_params(params: dict, mix: np.ndarray) -> np.ndarray:
    """Affine trait rule on the subject's map parameters, clamped to [0, 1]."""
    z = np.array(
        [2 * (params[k] - lo) / (hi - lo) - 1 for k, (lo, hi) in SUBJECT_PARAM_RANGES.items()]
    )
    return np.clip(0.5 + 0.45 * mix @ z, 0.0, 1.0)


def synth_dyad(cfg: SynthConfig, seed: int) -> SynthDyad:
    """Generate one speaker/listener clip pair whose listener reacts to the
    speaker through a seeded per-subject map after ``cfg.delay`` frames."""
    template = MeanFaceTemplate.default().points.reshape(-1)
    speaker_basis, listener_basis, w_dir, w_audio, mix = _world(cfg)
    rng = np.random.default_rng(seed)
    params = subject_map_params(seed)

    n = cfg.frames
    total = n + MAX_DELAY
    coeff = _smooth_process(rng, total, cfg.motion_dim, cfg.smoothing, cfg.persistence)
    env = 1.0 / (1.0 + np.exp(-1.5 * _smooth_process(rng, total, len(TONE_FREQS), cfg.smoothing, cfg.persistence)))
    speaker_full = template + cfg.motion_scale * coeff @ speaker_basis.T

    if cfg.map == "identity":
        listener_full = speaker_full.copy()
    else:
        drive = params["drive"] * coeff @ w_dir.T + params["audio_reliance"] * 2.0 * (env - 0.5) @ w_audio.T
        u = np.tanh(params["squash"] * (drive + params["bias_level"])) / params["squash"]
        listener_full = template + params["gain"] * cfg.motion_scale * u @ listener_basis.T

    # listener frame t reacts to speaker frame t - delay
    off = MAX_DELAY
    speaker = speaker_full[off:]
    listener = listener_full[off - cfg.delay : off - cfg.delay + n]
    if cfg.noise > 0:
        listener = listener + cfg.noise * rng.standard_normal(listener.shape)

    spf = int(round(cfg.sample_rate / cfg.frame_rate))
    t = np.arange(n * spf) / cfg.sample_rate
    frame_env = np.repeat(env[off:], spf, axis=0)
    wav = sum(0.2 * frame_env[:, k] * np.sin(2 * np.pi * f * t) for k, f in enumerate(TONE_FREQS))

    cats = None
    if cfg.with_categories:
        seg = rng.integers(0, N_CATEGORIES, size=n // 40 + 1)
        cats = one_hot_categories(np.repeat(seg, 40)[:n])

    return SynthDyad(
        speaker_waveform=wav.astype(np.float64),
        sample_rate=cfg.sample_rate,
        speaker_landmarks=speaker.reshape(n, N_LANDMARKS, 2),
        listener_landmarks=listener.reshape(n, N_LANDMARKS, 2),
        delay=cfg.delay,
        traits=traits_from_params(params, mix),
        map_params=params,
        audio_envelope=env[off:],
        speaker_categories=cats,
    )


# ---------------------------------------------------------------------------
# Files
# ---------------------------------------------------------------------------


def save_landmarks(prefix: str | Path, points: np.ndarray, meta: dict) -> Path:
    """Write ``<prefix>.landmarks.npy`` (float32) and ``<prefix>.meta.json``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    arr_path = prefix.with_name(prefix.name + ".landmarks.npy")
    np.save(arr_path, np.asarray(points, dtype=np.float32))
    for key in ("frame_rate", "subject_id", "role"):
        if key not in meta:
            raise ValueError(f"landmark metadata needs {key!r}")
    prefix.with_name(prefix.name + ".meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1))
    return arr_path


def load_landmarks(prefix: str | Path) -> tuple[np.ndarray, dict]:
    prefix = Path(prefix)
    pts = np.load(prefix.with_name(prefix.name + ".landmarks.npy"))
    if pts.ndim != 3 or pts.shape[1:] != (N_LANDMARKS, 2):
        raise ValueError(f"{prefix}: landmark array must be Tx68x2, got {pts.shape}")
    meta = json.loads(prefix.with_name(prefix.name + ".meta.json").read_text())
    return pts.astype(np.float64), meta


def save_wav(path: str | Path, waveform: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.asarray(waveform), -1.0, 1.0)
    pcm = np.round(pcm * 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def load_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        sr = w.getframerate()
        data = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return data.astype(np.float64) / 32767.0, sr


def preprocess_dyad(
    speaker_landmarks: np.ndarray,
    listener_landmarks: np.ndarray,
    waveform: np.ndarray | None,
    sample_rate: int | None,
    frame_rate: float = 25.0,
    categories: np.ndarray | None = None,
    stride: int = DEFAULT_STRIDE,
    template: MeanFaceTemplate | None = None,
) -> list[DyadWindow]:
    """Raw clip streams -> normalised, standardised, windowed samples."""
    spk = normalize_landmarks(speaker_landmarks, template, frame_rate)
    lst = normalize_landmarks(listener_landmarks, template, frame_rate)
    audio = None
    if waveform is not None:
        mel = compute_logmel(waveform, sample_rate, frame_rate, n_frames=spk.frames)
        audio = standardize_spectrogram(mel).bins
    return window_dyad(SpeakerStreams(spk.points, audio, categories), lst, stride=stride)
