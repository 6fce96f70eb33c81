"""Procedural paired (text, audio, video, landmarks, pitch) corpus.

Each utterance is driven by one articulation trajectory so the audio and
video branches are synchronized by construction (ground-truth sync offset
is exactly zero). Faces are parametric ellipse renders; voices are
harmonic oscillators. Everything is a pure function of (corpus_seed, ids),
so regeneration is bit-identical.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import CorpusConfig
from .errors import ConfigError, ContractViolation, DependencyError
from .utils import read_f32, read_json, rng_for, write_f32, write_json

CORPUS_VERSION = "corpus-v1"

SAMPLE_RATE = 8000
FPS = 25
SAMPLES_PER_FRAME = SAMPLE_RATE // FPS  # 320
FRAME_SIZE = 48
HALF_FRAME = FRAME_SIZE // 2

N_TOKENS = 21  # silence id 0 + 20 articulated symbols
SILENCE_ID = 0
MIN_TOKENS, MAX_TOKENS = 4, 12
MIN_DURATION, MAX_DURATION = 2, 10
MIN_UTTERANCE_FRAMES = 36  # floor so every clip supports offset-search sync metrics

# mouth geometry (pixels)
APERTURE_PX = 5.0      # vertical mouth semi-axis at aperture 1.0
MOUTH_HALF_W0 = 4.0    # horizontal semi-axis = MOUTH_HALF_W0 + MOUTH_HALF_W1 * width
MOUTH_HALF_W1 = 5.0
LIP_PX = 1.5
EYE_Y = 16.0
EYE_RADIUS = 1.8
CANONICAL_EYE_DIST = 13.0

AMP_SCALE = 0.35
N_HARMONICS = 6
SMOOTH_KERNEL = np.array([1.0, 2.0, 3.0, 2.0, 1.0]) / 9.0

_YY, _XX = np.mgrid[0:FRAME_SIZE, 0:FRAME_SIZE].astype(np.float64)


@dataclass(frozen=True)
class SpeakerSpec:
    """Identity parameters; derived deterministically from (corpus_seed, speaker_id)."""

    speaker_id: int
    base_pitch_hz: float
    harmonic_amps: tuple        # 6 values in [0, 1]
    face_hue: float
    face_geometry: tuple        # (head_ax, head_ay, eye_spacing, mouth_y)

    @property
    def eye_spacing(self) -> float:
        return self.face_geometry[2]

    @property
    def mouth_y(self) -> float:
        return self.face_geometry[3]


@dataclass(frozen=True)
class TokenSpec:
    token_id: int
    aperture: float
    width: float
    pitch_factor: float
    formant_shift: float


@dataclass
class ArticulationTrajectory:
    """Per-video-frame articulation targets (unsmoothed, piecewise constant)."""

    aperture: np.ndarray
    width: np.ndarray
    pitch_factor: np.ndarray
    formant_shift: np.ndarray
    voiced: np.ndarray

    def __len__(self) -> int:
        return len(self.aperture)


@dataclass
class Utterance:
    utterance_id: str
    speaker_id: int
    tokens: np.ndarray
    durations_frames: np.ndarray
    waveform: np.ndarray
    frames: np.ndarray          # (N, 48, 48, 3) in [0, 1]
    landmarks: np.ndarray       # (N, 4, 2) as (x, y): left, right, top, bottom
    pitch_hz: np.ndarray        # per video frame; meaningful where voiced

    @property
    def n_frames(self) -> int:
        return len(self.frames)


def speaker_spec(corpus_seed: int, speaker_id: int) -> SpeakerSpec:
    rng = rng_for("speaker", corpus_seed, speaker_id)
    base_pitch = float(rng.uniform(130.0, 270.0))
    # moderate timbre spread: identity rides on pitch + timbre without
    # drowning the per-token formant envelope the recognizer depends on
    amps = tuple(float(a) for a in rng.uniform(0.5, 1.0, size=N_HARMONICS))
    hue = float(rng.uniform(0.0, 1.0))
    geometry = (
        float(rng.uniform(16.0, 21.0)),  # head_ax
        float(rng.uniform(18.0, 23.0)),  # head_ay
        float(rng.uniform(10.0, 16.0)),  # eye_spacing
        float(rng.uniform(32.0, 38.0)),  # mouth_y
    )
    return SpeakerSpec(speaker_id, base_pitch, amps, hue, geometry)


def token_table(corpus_seed: int) -> list:
    """Articulation table shared by all speakers of one corpus.

    Each articulated token gets stratified draws (shuffled grids) so the 20
    symbols stay well separated on every axis; silence is pinned closed.
    """
    rng = rng_for("tokens", corpus_seed)
    n = N_TOKENS - 1

    def grid(lo, hi):
        values = np.linspace(lo, hi, n)
        return values[rng.permutation(n)]

    apertures = grid(0.35, 1.0)
    widths = grid(0.5, 1.0)
    pitch_factors = np.exp(grid(np.log(0.8), np.log(1.25)))
    formant_shifts = grid(-1.0, 1.0)

    table = [TokenSpec(SILENCE_ID, 0.0, 0.75, 1.0, 0.0)]
    for i in range(n):
        table.append(
            TokenSpec(
                i + 1,
                float(apertures[i]),
                float(widths[i]),
                float(pitch_factors[i]),
                float(formant_shifts[i]),
            )
        )
    return table


def token_duration_means(corpus_seed: int) -> np.ndarray:
    """Per-token mean duration (video frames); gives durations a learnable signal.

    Means start at 4 so sampled durations stay >= 3 and every token keeps
    a few coarticulation-free interior frames.
    """
    rng = rng_for("durations", corpus_seed)
    means = np.empty(N_TOKENS)
    means[SILENCE_ID] = 3.5
    means[1:] = np.linspace(4.0, 9.5, N_TOKENS - 1)[rng.permutation(N_TOKENS - 1)]
    return means


def _hsv_rgb(h, s, v):
    return np.array(colorsys.hsv_to_rgb(h % 1.0, s, v))


def _blend(canvas, color, alpha):
    canvas *= (1.0 - alpha)[..., None]
    canvas += alpha[..., None] * color[None, None, :]


def _soft_ellipse(cx, cy, ax, ay, sharpness=0.35):
    # alpha 1 inside, soft ramp to 0 at the boundary; zero outside the ellipse
    r = np.sqrt(((_XX - cx) / max(ax, 1e-9)) ** 2 + ((_YY - cy) / max(ay, 1e-9)) ** 2)
    return np.clip((1.0 - r) / sharpness, 0.0, 1.0)


def render_face(speaker: SpeakerSpec, aperture: float, width: float):
    """Render one 48x48x3 frame plus 4 mouth landmarks (left, right, top, bottom).

    Pure function; the mouth ellipse's vertical semi-axis is APERTURE_PX *
    aperture, so aperture 0 collapses the top and bottom lip landmarks.
    """
    if not (0.0 <= aperture <= 1.0):
        raise ContractViolation(f"aperture must be in [0, 1], got {aperture}")
    if not (0.5 <= width <= 1.0):
        raise ContractViolation(f"width must be in [0.5, 1], got {width}")

    head_ax, head_ay, eye_spacing, mouth_y = speaker.face_geometry
    hue = speaker.face_hue

    background = np.full(3, 0.10) + 0.04 * _hsv_rgb(hue + 0.5, 0.3, 1.0)
    canvas = np.tile(background, (FRAME_SIZE, FRAME_SIZE, 1))

    skin = _hsv_rgb(hue, 0.35, 0.85)
    _blend(canvas, skin, _soft_ellipse(HALF_FRAME, HALF_FRAME, head_ax, head_ay, 0.06))

    eye_color = np.array([0.08, 0.06, 0.05])
    for ex in (HALF_FRAME - eye_spacing / 2.0, HALF_FRAME + eye_spacing / 2.0):
        d = np.sqrt((_XX - ex) ** 2 + (_YY - EYE_Y) ** 2)
        _blend(canvas, eye_color, np.clip((1.0 - d / EYE_RADIUS) / 0.35, 0.0, 1.0))

    cx = float(HALF_FRAME)
    half_w = MOUTH_HALF_W0 + MOUTH_HALF_W1 * width
    half_h = APERTURE_PX * aperture

    lip_color = _hsv_rgb(0.99, 0.55, 0.55)
    _blend(canvas, lip_color, _soft_ellipse(cx, mouth_y, half_w + LIP_PX, half_h + LIP_PX))
    if half_h > 1e-9:
        cavity = np.array([0.06, 0.03, 0.03])
        _blend(canvas, cavity, _soft_ellipse(cx, mouth_y, half_w, half_h))

    landmarks = np.array(
        [
            [cx - half_w, mouth_y],
            [cx + half_w, mouth_y],
            [cx, mouth_y - half_h],
            [cx, mouth_y + half_h],
        ],
        dtype=np.float32,
    )
    return canvas.astype(np.float32), landmarks


def mouth_region_mask(speaker: SpeakerSpec) -> np.ndarray:
    """Bounding box that contains every pixel any mouth render can touch."""
    half_w = MOUTH_HALF_W0 + MOUTH_HALF_W1 * 1.0 + LIP_PX + 1.0
    half_h = APERTURE_PX + LIP_PX + 1.0
    mask = (np.abs(_XX - HALF_FRAME) <= half_w) & (np.abs(_YY - speaker.mouth_y) <= half_h)
    return mask


def expand_articulation(table, tokens, durations) -> ArticulationTrajectory:
    """Piecewise-constant per-frame articulation from tokens and durations."""
    tokens = np.asarray(tokens, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    if len(tokens) != len(durations):
        raise ContractViolation("tokens and durations must have equal length")
    if np.any(durations < 1):
        raise ContractViolation("durations must be positive")
    active = np.repeat(tokens, durations)
    spec = lambda field: np.array([getattr(table[t], field) for t in active])
    return ArticulationTrajectory(
        aperture=spec("aperture"),
        width=spec("width"),
        pitch_factor=spec("pitch_factor"),
        formant_shift=spec("formant_shift"),
        voiced=active != SILENCE_ID,
    )


def smooth_trajectory(values: np.ndarray) -> np.ndarray:
    """Fixed 5-frame triangular smoothing with edge-value padding."""
    padded = np.concatenate([values[:1], values[:1], values, values[-1:], values[-1:]])
    return np.convolve(padded, SMOOTH_KERNEL, mode="valid")


_PEAK_PAIRS = np.array(
    [(i, j) for i in range(1, N_HARMONICS + 1) for j in range(i, N_HARMONICS + 1)],
    dtype=np.float64,
)  # 21 unordered pairs; tokens use the first 20


def formant_peaks(formant_shift):
    """Two resonance-peak harmonic indices encoded by formant_shift.

    Tokens map onto unordered integer peak pairs, so any two codes differ
    by at least one full harmonic step; this keeps spectral signatures
    separable across speakers regardless of base pitch.
    """
    idx = np.clip(
        np.round((np.asarray(formant_shift, dtype=np.float64) + 1.0) / 2.0 * 19.0), 0, 19
    ).astype(np.int64)
    pair = _PEAK_PAIRS[idx]
    return pair[..., 0], pair[..., 1]


def _harmonic_weights(harmonic_amps, formant_shift):
    """L2-normalized harmonic amplitudes with a two-peak resonance envelope.

    The envelope floor keeps every harmonic present so the autocorrelation
    pitch estimator never mistakes a sub-period for the fundamental.
    """
    k = np.arange(1, N_HARMONICS + 1, dtype=np.float64)
    p1, p2 = formant_peaks(formant_shift)
    bumps = np.exp(-((k - p1[..., None]) ** 2) / (2.0 * 0.8 ** 2)) + np.exp(
        -((k - p2[..., None]) ** 2) / (2.0 * 0.8 ** 2)
    )
    envelope = 0.1 + 0.9 * np.minimum(bumps, 1.0)
    weights = np.asarray(harmonic_amps, dtype=np.float64) * envelope
    norm = np.sqrt((weights ** 2).sum(axis=-1, keepdims=True))
    return weights / np.maximum(norm, 1e-12)


def synthesize_voice(speaker: SpeakerSpec, traj: ArticulationTrajectory) -> np.ndarray:
    """Harmonic-oscillator voice for one articulation trajectory.

    Aperture and formant trajectories are smoothed with the triangular
    kernel before upsampling; pitch stays piecewise constant per token so
    recorded per-frame pitch is exact. Amplitude is proportional to the
    smoothed aperture (silence renders as true silence).
    """
    n = len(traj)
    if n < 1:
        raise ContractViolation("trajectory must have at least one frame")

    aperture_s = smooth_trajectory(traj.aperture)

    n_samples = n * SAMPLES_PER_FRAME
    sample_t = np.arange(n_samples, dtype=np.float64)
    frame_centers = (np.arange(n) + 0.5) * SAMPLES_PER_FRAME

    amp = np.interp(sample_t, frame_centers, AMP_SCALE * aperture_s)
    f0_frame = speaker.base_pitch_hz * traj.pitch_factor
    f0 = np.repeat(f0_frame, SAMPLES_PER_FRAME)

    # coarticulation: smooth in harmonic-weight space, never through the
    # peak-code lookup (blending codes would fabricate a third token's
    # signature at boundaries); renormalize so RMS stays proportional to
    # the smoothed aperture
    weights_frame = _harmonic_weights(speaker.harmonic_amps, traj.formant_shift)  # (n, 6)
    weights_frame = np.stack(
        [smooth_trajectory(weights_frame[:, k]) for k in range(N_HARMONICS)], axis=1
    )
    weights_frame /= np.maximum(
        np.sqrt((weights_frame ** 2).sum(axis=1, keepdims=True)), 1e-12
    )
    weights = np.empty((n_samples, N_HARMONICS))
    for k in range(N_HARMONICS):
        weights[:, k] = np.interp(sample_t, frame_centers, weights_frame[:, k])

    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    wave = np.zeros(n_samples)
    for k in range(N_HARMONICS):
        wave += weights[:, k] * np.sin((k + 1) * phase)
    wave *= amp
    return wave.astype(np.float32)


def render_utterance_frames(speaker: SpeakerSpec, traj: ArticulationTrajectory):
    frames = np.empty((len(traj), FRAME_SIZE, FRAME_SIZE, 3), dtype=np.float32)
    landmarks = np.empty((len(traj), 4, 2), dtype=np.float32)
    for i in range(len(traj)):
        frames[i], landmarks[i] = render_face(speaker, float(traj.aperture[i]), float(traj.width[i]))
    return frames, landmarks


def _sample_utterance_text(rng, dur_means):
    """Token/duration sampler; rejects drafts shorter than the frame floor."""
    while True:
        n_tok = int(rng.integers(MIN_TOKENS, MAX_TOKENS + 1))
        tokens = np.zeros(n_tok, dtype=np.int64)
        for i in range(1, n_tok - 1):
            while True:
                if i < n_tok - 2 and rng.random() < 0.15:
                    candidate = SILENCE_ID
                else:
                    candidate = int(rng.integers(1, N_TOKENS))
                if candidate != tokens[i - 1]:
                    tokens[i] = candidate
                    break
        jitter = rng.uniform(-1.5, 1.5, size=n_tok)
        durations = np.clip(
            np.round(dur_means[tokens] + jitter), MIN_DURATION, MAX_DURATION
        ).astype(np.int64)
        if durations.sum() >= MIN_UTTERANCE_FRAMES:
            return tokens, durations


def build_utterance(corpus_seed: int, utt_index: int, speaker_ids, table=None, dur_means=None) -> Utterance:
    """Deterministically generate utterance number `utt_index`."""
    if table is None:
        table = token_table(corpus_seed)
    if dur_means is None:
        dur_means = token_duration_means(corpus_seed)
    rng = rng_for("utterance", corpus_seed, utt_index)
    speaker_id = int(speaker_ids[rng.integers(len(speaker_ids))])
    speaker = speaker_spec(corpus_seed, speaker_id)
    tokens, durations = _sample_utterance_text(rng, dur_means)

    traj = expand_articulation(table, tokens, durations)
    waveform = synthesize_voice(speaker, traj)
    frames, landmarks = render_utterance_frames(speaker, traj)
    pitch = (speaker.base_pitch_hz * traj.pitch_factor).astype(np.float32)

    return Utterance(
        utterance_id=f"u{utt_index:05d}",
        speaker_id=speaker_id,
        tokens=tokens,
        durations_frames=durations,
        waveform=waveform,
        frames=frames,
        landmarks=landmarks,
        pitch_hz=pitch,
    )


def make_corpus(out_dir, config: CorpusConfig):
    """Generate the full corpus tree; returns a Corpus reader over it.

    Layout: `<out>/<split>/<utterance_id>/{audio.f32, frames.f32, meta.json}`
    plus `manifest.json`, `speakers.json`, `tokens.json` at the root. The
    test split draws only from held-out speakers.
    """
    config.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seed = config.seed
    train_speakers = list(range(config.n_train_speakers))
    heldout = list(
        range(config.n_train_speakers, config.n_train_speakers + config.n_heldout_speakers)
    )
    table = token_table(seed)
    dur_means = token_duration_means(seed)

    split_plan = (
        [("train", i, train_speakers) for i in range(config.n_train)]
        + [("val", config.n_train + i, train_speakers) for i in range(config.n_val)]
        + [
            ("test", config.n_train + config.n_val + i, heldout)
            for i in range(config.n_test)
        ]
    )

    splits = {"train": [], "val": [], "test": []}
    utterances = {}
    for split, index, pool in split_plan:
        utt = build_utterance(seed, index, pool, table, dur_means)
        udir = out_dir / split / utt.utterance_id
        udir.mkdir(parents=True, exist_ok=True)
        write_f32(udir / "audio.f32", utt.waveform)
        write_f32(udir / "frames.f32", utt.frames)
        write_json(
            udir / "meta.json",
            {
                "utterance_id": utt.utterance_id,
                "speaker_id": utt.speaker_id,
                "tokens": utt.tokens.tolist(),
                "durations_frames": utt.durations_frames.tolist(),
                "landmarks": utt.landmarks.tolist(),
                "pitch_hz": utt.pitch_hz.tolist(),
                "n_frames": utt.n_frames,
            },
        )
        splits[split].append(utt.utterance_id)
        utterances[utt.utterance_id] = {
            "split": split,
            "speaker_id": utt.speaker_id,
            "n_frames": utt.n_frames,
        }

    all_speakers = train_speakers + heldout
    write_json(
        out_dir / "speakers.json",
        {
            str(sid): {
                "speaker_id": sid,
                "base_pitch_hz": speaker_spec(seed, sid).base_pitch_hz,
                "harmonic_amps": list(speaker_spec(seed, sid).harmonic_amps),
                "face_hue": speaker_spec(seed, sid).face_hue,
                "face_geometry": list(speaker_spec(seed, sid).face_geometry),
            }
            for sid in all_speakers
        },
    )
    write_json(
        out_dir / "tokens.json",
        {
            "table": [
                {
                    "token_id": t.token_id,
                    "aperture": t.aperture,
                    "width": t.width,
                    "pitch_factor": t.pitch_factor,
                    "formant_shift": t.formant_shift,
                }
                for t in table
            ],
            "duration_means": dur_means.tolist(),
        },
    )
    write_json(
        out_dir / "manifest.json",
        {
            "version": CORPUS_VERSION,
            "corpus_seed": seed,
            "config": {
                "n_train_speakers": config.n_train_speakers,
                "n_heldout_speakers": config.n_heldout_speakers,
                "n_train": config.n_train,
                "n_val": config.n_val,
                "n_test": config.n_test,
            },
            "speakers": {"train": train_speakers, "test": heldout},
            "splits": splits,
            "utterances": utterances,
        },
    )
    return Corpus(out_dir)


class Corpus:
    """Read-only view over a generated corpus directory."""

    def __init__(self, root):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise DependencyError(f"no corpus manifest at {manifest_path}")
        self.manifest = read_json(manifest_path)
        if self.manifest.get("version") != CORPUS_VERSION:
            raise DependencyError(
                f"corpus version {self.manifest.get('version')!r} != {CORPUS_VERSION!r}"
            )
        self.seed = self.manifest["corpus_seed"]
        self._table = None
        self._speakers = {}

    @property
    def splits(self) -> dict:
        return self.manifest["splits"]

    def split_ids(self, split: str) -> list:
        return list(self.manifest["splits"][split])

    def utterance_dir(self, utterance_id: str) -> Path:
        info = self.manifest["utterances"].get(utterance_id)
        if info is None:
            raise DependencyError(f"unknown utterance id {utterance_id!r}")
        return self.root / info["split"] / utterance_id

    def meta(self, utterance_id: str) -> dict:
        return read_json(self.utterance_dir(utterance_id) / "meta.json")

    def waveform(self, utterance_id: str) -> np.ndarray:
        return read_f32(self.utterance_dir(utterance_id) / "audio.f32")

    def frames(self, utterance_id: str) -> np.ndarray:
        n = self.manifest["utterances"][utterance_id]["n_frames"]
        return read_f32(
            self.utterance_dir(utterance_id) / "frames.f32",
            (n, FRAME_SIZE, FRAME_SIZE, 3),
        )

    def n_frames(self, utterance_id: str) -> int:
        return self.manifest["utterances"][utterance_id]["n_frames"]

    def frame_window(self, utterance_id: str, start: int, count: int) -> np.ndarray:
        """Read `count` consecutive frames without loading the whole clip."""
        n = self.n_frames(utterance_id)
        if start < 0 or start + count > n:
            raise ContractViolation(
                f"frame window [{start}, {start + count}) out of range for {utterance_id} ({n} frames)"
            )
        frame_floats = FRAME_SIZE * FRAME_SIZE * 3
        path = self.utterance_dir(utterance_id) / "frames.f32"
        with open(path, "rb") as fh:
            fh.seek(start * frame_floats * 4)
            data = np.frombuffer(fh.read(count * frame_floats * 4), dtype=np.float32)
        return data.reshape(count, FRAME_SIZE, FRAME_SIZE, 3).copy()

    def frame(self, utterance_id: str, index: int) -> np.ndarray:
        return self.frame_window(utterance_id, index, 1)[0]

    def speaker(self, speaker_id: int) -> SpeakerSpec:
        if speaker_id not in self._speakers:
            all_ids = self.manifest["speakers"]["train"] + self.manifest["speakers"]["test"]
            if speaker_id not in all_ids:
                raise ConfigError(f"unknown speaker id {speaker_id}")
            self._speakers[speaker_id] = speaker_spec(self.seed, speaker_id)
        return self._speakers[speaker_id]

    def token_table(self) -> list:
        if self._table is None:
            self._table = token_table(self.seed)
        return self._table

    def train_speaker_ids(self) -> list:
        return list(self.manifest["speakers"]["train"])
