"""Deterministic latent speech feature extractor and pitch estimator.

Features are 32-d projections of 40 triangular log filterbank bands at
50 Hz (hop 160 at 8 kHz), i.e. exactly two feature frames per video frame.
The extractor is a fixed analytic function (no training), so the "clean"
feature distribution is reproducible bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .corpus import Corpus, SAMPLE_RATE
from .errors import ContractViolation, DependencyError
from .utils import read_f32, read_json, write_f32, write_json

FEATURE_VERSION = "fbank40-proj32-f0ac-v1"

WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
N_BANDS = 40
N_FEATURES = 32
LOG_FLOOR = 1e-5
FEATURE_SCALE = 0.25
PROJECTION_SEED = 40032
FRAME_RATE = SAMPLE_RATE // HOP_LENGTH  # 50 Hz

F0_MIN_HZ = 80.0
F0_MAX_HZ = 400.0
F0_MIN_LAG = SAMPLE_RATE // int(F0_MAX_HZ)   # 20
F0_MAX_LAG = SAMPLE_RATE // int(F0_MIN_HZ)   # 100
F0_WINDOW = 320                              # centered on each hop span
VOICED_CORR_MIN = 0.5
VOICED_RMS_MIN = 0.02
VOICED_MIN_SUPPORT = F0_WINDOW // 2          # real (non-padded) samples required
OCTAVE_GUARD = 0.97

SOURCE_EXTRACTED = "extracted"
SOURCE_TEACHER_FORCED = "ttv_teacher_forced"
SOURCE_FREE_RUNNING = "ttv_free_running"
_SOURCES = (SOURCE_EXTRACTED, SOURCE_TEACHER_FORCED, SOURCE_FREE_RUNNING)


@dataclass
class FeatureSequence:
    values: np.ndarray          # (T, 32) float32
    source: str
    frame_rate: int = FRAME_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] != N_FEATURES:
            raise ContractViolation(f"features must be (T, {N_FEATURES})")
        if not np.isfinite(self.values).all():
            raise ContractViolation("features must be finite")
        if self.source not in _SOURCES:
            raise ContractViolation(f"unknown feature source {self.source!r}")

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class PitchTrack:
    f0_hz: np.ndarray           # 0 where unvoiced
    voiced: np.ndarray = field(default=None)

    def __post_init__(self):
        self.f0_hz = np.asarray(self.f0_hz, dtype=np.float32)
        if self.voiced is None:
            self.voiced = self.f0_hz > 0
        self.voiced = np.asarray(self.voiced, dtype=bool)
        if self.f0_hz.shape != self.voiced.shape:
            raise ContractViolation("f0 and voiced mask lengths differ")

    def __len__(self) -> int:
        return len(self.f0_hz)


def _mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_inv(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def _filterbank() -> np.ndarray:
    """(N_BANDS, N_FFT//2+1) triangular filters, mel-spaced over 0..Nyquist."""
    edges_hz = _mel_inv(np.linspace(_mel(0.0), _mel(SAMPLE_RATE / 2), N_BANDS + 2))
    bins_hz = np.arange(N_FFT // 2 + 1) * SAMPLE_RATE / N_FFT
    bank = np.zeros((N_BANDS, N_FFT // 2 + 1))
    for b in range(N_BANDS):
        lo, mid, hi = edges_hz[b], edges_hz[b + 1], edges_hz[b + 2]
        up = (bins_hz - lo) / max(mid - lo, 1e-9)
        down = (hi - bins_hz) / max(hi - mid, 1e-9)
        bank[b] = np.clip(np.minimum(up, down), 0.0, None)
    return bank


def _projection() -> np.ndarray:
    """Fixed 40->32 matrix with orthonormal rows (M @ M.T == I)."""
    rng = np.random.default_rng(PROJECTION_SEED)
    q, r = np.linalg.qr(rng.standard_normal((N_BANDS, N_BANDS)))
    q = q * np.sign(np.diag(r))  # fix LAPACK sign ambiguity
    return q.T[:N_FEATURES].astype(np.float64)


_BANK = _filterbank()
_PROJ = _projection()
_WINDOW = np.hanning(WIN_LENGTH + 1)[:WIN_LENGTH]


def _frame_count(n_samples: int) -> int:
    return -(-n_samples // HOP_LENGTH)  # ceil division


def _framed(waveform: np.ndarray) -> np.ndarray:
    """(T, WIN_LENGTH) frame matrix; frame t starts at t*HOP, zero-padded tail."""
    wave = np.asarray(waveform, dtype=np.float64).ravel()
    if wave.size == 0:
        raise ContractViolation("empty waveform")
    n_frames = _frame_count(wave.size)
    padded = np.zeros(n_frames * HOP_LENGTH + (WIN_LENGTH - HOP_LENGTH))
    padded[: wave.size] = wave
    idx = np.arange(WIN_LENGTH)[None, :] + HOP_LENGTH * np.arange(n_frames)[:, None]
    return padded[idx]


def log_filterbank(waveform) -> np.ndarray:
    """(T, 40) floored log band magnitudes, shifted to 0 at the floor."""
    frames = _framed(waveform) * _WINDOW[None, :]
    mag = np.abs(np.fft.rfft(frames, n=N_FFT, axis=1))
    bands = mag @ _BANK.T
    return FEATURE_SCALE * np.log(np.maximum(bands, LOG_FLOOR) / LOG_FLOOR)


def extract_features(waveform) -> FeatureSequence:
    """Latent speech features: log filterbank through the fixed projection."""
    values = log_filterbank(waveform) @ _PROJ.T
    return FeatureSequence(values.astype(np.float32), source=SOURCE_EXTRACTED)


def _f0_framed(waveform):
    """(T, F0_WINDOW) windows centered on each hop span, plus real-sample counts."""
    wave = np.asarray(waveform, dtype=np.float64).ravel()
    if wave.size == 0:
        raise ContractViolation("empty waveform")
    n_frames = _frame_count(wave.size)
    left = (F0_WINDOW - HOP_LENGTH) // 2
    padded = np.concatenate([np.zeros(left), wave, np.zeros(n_frames * HOP_LENGTH + F0_WINDOW)])
    idx = np.arange(F0_WINDOW)[None, :] + HOP_LENGTH * np.arange(n_frames)[:, None]
    starts = HOP_LENGTH * np.arange(n_frames) - left
    support = np.minimum(starts + F0_WINDOW, wave.size) - np.maximum(starts, 0)
    return padded[idx], support


def estimate_f0(waveform, n_frames: int = None) -> PitchTrack:
    """Per-feature-frame autocorrelation pitch with an octave guard.

    Voiced iff the normalized autocorrelation peak reaches VOICED_CORR_MIN,
    the frame RMS reaches VOICED_RMS_MIN, and at least half the analysis
    window holds real samples. Candidate lags are parabola-refined local
    maxima; among those within OCTAVE_GUARD of the best, the smallest lag
    wins (harmonic stacks repeat at lag multiples).
    """
    frames, support = _f0_framed(waveform)
    if n_frames is not None:
        frames = frames[:n_frames]
        support = support[:n_frames]
    frames = frames - frames.mean(axis=1, keepdims=True)
    n, w = frames.shape

    rms = np.sqrt((frames ** 2).mean(axis=1))
    fft_len = 1 << int(np.ceil(np.log2(2 * w)))
    spectra = np.fft.rfft(frames, n=fft_len, axis=1)
    ac = np.fft.irfft(spectra * np.conj(spectra), axis=1)[:, : F0_MAX_LAG + 2]

    energy = np.cumsum(frames ** 2, axis=1)
    total = energy[:, -1]

    f0 = np.zeros(n, dtype=np.float32)
    voiced = np.zeros(n, dtype=bool)
    lags = np.arange(F0_MIN_LAG, F0_MAX_LAG + 1)
    for i in range(n):
        if rms[i] < VOICED_RMS_MIN or support[i] < VOICED_MIN_SUPPORT:
            continue
        head = energy[i, w - lags - 1]
        tail = total[i] - np.where(lags > 0, energy[i, lags - 1], 0.0)
        denom = np.sqrt(np.maximum(head * tail, 1e-12))
        r = ac[i, lags] / denom
        local_max = np.ones(len(r), dtype=bool)
        local_max[1:] &= r[1:] >= r[:-1]
        local_max[:-1] &= r[:-1] >= r[1:]
        peaks = []  # (refined lag, refined correlation) per local max
        for j in np.nonzero(local_max)[0]:
            lag, value = float(lags[j]), float(r[j])
            if 0 < j < len(r) - 1:
                denom2 = r[j - 1] - 2.0 * r[j] + r[j + 1]
                if abs(denom2) > 1e-12:
                    delta = float(np.clip(0.5 * (r[j - 1] - r[j + 1]) / denom2, -0.5, 0.5))
                    lag += delta
                    value -= 0.25 * (r[j - 1] - r[j + 1]) * delta
            peaks.append((lag, value))
        best = max(v for _, v in peaks)
        if best < VOICED_CORR_MIN:
            continue
        lag = min(l for l, v in peaks if v >= OCTAVE_GUARD * best)
        f0[i] = np.clip(SAMPLE_RATE / lag, F0_MIN_HZ, F0_MAX_HZ)
        voiced[i] = True
    return PitchTrack(f0, voiced)


# ---------------------------------------------------------------------------
# per-utterance cache

def ensure_feature_cache(corpus: Corpus) -> None:
    """Compute and store features + f0 for every utterance (idempotent).

    Caches are invalidated by FEATURE_VERSION, recorded both per utterance
    and in the corpus manifest.
    """
    stale = corpus.manifest.get("feature_version") != FEATURE_VERSION
    for split, ids in corpus.splits.items():
        for uid in ids:
            udir = corpus.utterance_dir(uid)
            info_path = udir / "features.json"
            if not stale and info_path.exists():
                info = read_json(info_path)
                if info.get("version") == FEATURE_VERSION:
                    continue
            wave = corpus.waveform(uid)
            feats = extract_features(wave)
            pitch = estimate_f0(wave, n_frames=len(feats))
            write_f32(udir / "features.f32", feats.values)
            write_f32(udir / "f0.f32", pitch.f0_hz)
            write_json(
                info_path,
                {
                    "version": FEATURE_VERSION,
                    "shape": list(feats.values.shape),
                    "f0_file": "f0.f32",
                },
            )
    corpus.manifest["feature_version"] = FEATURE_VERSION
    write_json(corpus.root / "manifest.json", corpus.manifest)


def load_cached_features(corpus: Corpus, utterance_id: str) -> FeatureSequence:
    udir = corpus.utterance_dir(utterance_id)
    info_path = udir / "features.json"
    if not info_path.exists():
        raise DependencyError(f"feature cache missing for {utterance_id} (run ensure_feature_cache)")
    info = read_json(info_path)
    if info.get("version") != FEATURE_VERSION:
        raise DependencyError(
            f"feature cache for {utterance_id} has version {info.get('version')!r}, "
            f"need {FEATURE_VERSION!r}"
        )
    values = read_f32(udir / "features.f32", tuple(info["shape"]))
    return FeatureSequence(values, source=SOURCE_EXTRACTED)


def load_cached_f0(corpus: Corpus, utterance_id: str) -> PitchTrack:
    udir = corpus.utterance_dir(utterance_id)
    if not (udir / "f0.f32").exists():
        raise DependencyError(f"f0 cache missing for {utterance_id}")
    return PitchTrack(read_f32(udir / "f0.f32"))
