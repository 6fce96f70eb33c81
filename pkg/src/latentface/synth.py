"""Waveform synthesizer: latent features + F0 + reference style -> audio.

The decoder pairs the two feature frames of each video frame into one
video-rate unit and upsamples x8, x8, x5 transposed convolutions to land
on exactly 320 samples per video frame (160 per feature frame). A
harmonic excitation derived from the F0 input is injected at sample rate,
so output pitch follows the conditioning F0; a 16-d style embedding from
reference audio carries speaker identity and is trained jointly with a
speaker-classification head.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as TF

from . import checkpoint as ckpt
from .config import SynthConfig
from .corpus import Corpus, SAMPLE_RATE, SAMPLES_PER_FRAME
from .errors import ContractViolation, DivergenceAbort
from .features import (
    F0_MAX_HZ,
    F0_MIN_HZ,
    FeatureSequence,
    HOP_LENGTH,
    N_FEATURES,
    PitchTrack,
    estimate_f0,
    load_cached_f0,
    load_cached_features,
    log_filterbank,
)
from .utils import configure_torch, derive_seed, rng_for

SYNTH_VERSION = "synth-v1"
STYLE_DIM = 16
MIN_REFERENCE_SAMPLES = SAMPLE_RATE // 2  # 0.5 s
F0_REF_HZ = 220.0
EXCITATION_HARMONICS = 4
COND_CHANNELS = N_FEATURES + 2  # features + (log f0, voiced flag)


@dataclass
class StyleEmbedding:
    vector: np.ndarray
    source_utterance_id: str = None

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float32)
        if self.vector.shape != (STYLE_DIM,) or not np.isfinite(self.vector).all():
            raise ContractViolation(f"style embedding must be {STYLE_DIM} finite values")


class StyleEncoder(nn.Module):
    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(40, 64, 5, stride=2, padding=2), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv1d(64, 64, 5, stride=2, padding=2), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv1d(64, 64, 3, padding=1), nn.GroupNorm(4, 64), nn.SiLU(),
        )
        self.head = nn.Linear(64, STYLE_DIM)

    def forward(self, banks: torch.Tensor) -> torch.Tensor:
        return self.head(self.net(banks.permute(0, 2, 1)).mean(dim=2))


class WaveDecoder(nn.Module):
    def __init__(self):
        super().__init__()
        in_ch = 2 * COND_CHANNELS + STYLE_DIM  # paired feature frames + style
        self.pre = nn.Conv1d(in_ch, 128, 5, padding=2)
        self.up1 = nn.ConvTranspose1d(128, 64, 16, stride=8, padding=4)
        self.n1 = nn.GroupNorm(4, 64)
        self.up2 = nn.ConvTranspose1d(64, 32, 16, stride=8, padding=4)
        self.n2 = nn.GroupNorm(4, 32)
        self.up3 = nn.ConvTranspose1d(32, 16, 15, stride=5, padding=5)
        self.out1 = nn.Conv1d(16 + 1, 16, 7, padding=3)
        self.out2 = nn.Conv1d(16, 1, 7, padding=3)

    def forward(self, cond: torch.Tensor, excitation: torch.Tensor) -> torch.Tensor:
        h = TF.silu(self.pre(cond))
        h = TF.silu(self.n1(self.up1(h)))
        h = TF.silu(self.n2(self.up2(h)))
        h = TF.silu(self.up3(h))
        h = torch.cat([h, excitation], dim=1)
        return torch.tanh(self.out2(TF.silu(self.out1(h))))


class SynthModel(nn.Module):
    def __init__(self, n_speakers: int = 1):
        super().__init__()
        self.style_encoder = StyleEncoder()
        self.decoder = WaveDecoder()
        self.speaker_head = nn.Linear(STYLE_DIM, n_speakers)


def harmonic_excitation(f0_hz: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    """Sample-rate excitation with energy at k*f0; zero on unvoiced frames."""
    f0 = np.repeat(np.asarray(f0_hz, dtype=np.float64), HOP_LENGTH)
    gate = np.repeat(np.asarray(voiced, dtype=np.float64), HOP_LENGTH)
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    exc = np.zeros_like(f0)
    for k in range(1, EXCITATION_HARMONICS + 1):
        exc += np.sin(k * phase) / k
    return (0.3 * gate * exc).astype(np.float32)


def _f0_channels(track: PitchTrack) -> np.ndarray:
    log_f0 = np.where(track.voiced, np.log(np.maximum(track.f0_hz, 1.0) / F0_REF_HZ), 0.0)
    return np.stack([log_f0, track.voiced.astype(np.float32)], axis=1).astype(np.float32)


def _conditioning(features: np.ndarray, track: PitchTrack, style: np.ndarray):
    """(1, 2*COND+STYLE, T/2) video-rate conditioning + (1, 1, T*160) excitation.

    Odd-length feature sequences are padded by one repeated frame; callers
    trim the waveform back to exactly T*160.
    """
    feats = np.asarray(features, dtype=np.float32)
    t = len(feats)
    cond = np.concatenate([feats, _f0_channels(track)], axis=1)  # (T, 34)
    exc = harmonic_excitation(track.f0_hz, track.voiced)
    if t % 2 == 1:
        cond = np.concatenate([cond, cond[-1:]], axis=0)
        exc = np.concatenate([exc, exc[-HOP_LENGTH:]])
    pairs = cond.reshape(-1, 2 * COND_CHANNELS)  # frame pairs stacked into channels
    style_map = np.broadcast_to(style[None, :], (len(pairs), STYLE_DIM))
    video_rate = np.concatenate([pairs, style_map], axis=1)
    return (
        torch.from_numpy(video_rate.T[None].copy()),
        torch.from_numpy(exc[None, None].copy()),
        t * HOP_LENGTH,
    )


@torch.no_grad()
def encode_style(model: SynthModel, reference_waveform, source_utterance_id=None) -> StyleEmbedding:
    """Deterministic 16-d style embedding of >= 0.5 s of reference audio."""
    wave = np.asarray(reference_waveform, dtype=np.float32)
    if wave.ndim != 1 or len(wave) < MIN_REFERENCE_SAMPLES:
        raise ContractViolation(
            f"style reference must be >= {MIN_REFERENCE_SAMPLES} samples, got {wave.shape}"
        )
    model.eval()
    banks = log_filterbank(wave)
    vector = model.style_encoder(torch.from_numpy(banks.astype(np.float32))[None])[0]
    return StyleEmbedding(vector.numpy(), source_utterance_id)


@torch.no_grad()
def synthesize_speech(model: SynthModel, features: FeatureSequence, f0: PitchTrack, style: StyleEmbedding) -> np.ndarray:
    """Waveform of exactly features.T * 160 samples; deterministic."""
    if len(features) != len(f0):
        raise ContractViolation(
            f"features ({len(features)}) and f0 ({len(f0)}) lengths must match"
        )
    model.eval()
    cond, exc, n_samples = _conditioning(features.values, f0, style.vector)
    wave = model.decoder(cond, exc)[0, 0].numpy()
    return wave[:n_samples].astype(np.float32)


def adapt_f0_to_reference(f0: PitchTrack, reference_waveform) -> PitchTrack:
    """Rescale a predicted pitch track to the reference speaker's median F0.

    Style conditioning carries speaker identity; the duration-free pitch
    contour from the text model is population-average, so voice transfer
    re-anchors it to the reference's median voiced pitch.
    """
    ref = estimate_f0(np.asarray(reference_waveform))
    if not ref.voiced.any() or not f0.voiced.any():
        return f0
    scale = np.median(ref.f0_hz[ref.voiced]) / np.median(f0.f0_hz[f0.voiced])
    scaled = np.where(f0.voiced, np.clip(f0.f0_hz * scale, F0_MIN_HZ, F0_MAX_HZ), 0.0)
    return PitchTrack(scaled.astype(np.float32), f0.voiced.copy())


# ---------------------------------------------------------------------------
# training

def _stft_mag(wave: torch.Tensor, n_fft: int) -> torch.Tensor:
    window = torch.hann_window(n_fft)
    spec = torch.stft(
        wave, n_fft, hop_length=n_fft // 4, win_length=n_fft,
        window=window, center=True, return_complex=True,
    )
    return spec.abs()


def multi_resolution_stft_l1(pred: torch.Tensor, target: torch.Tensor, fft_sizes) -> torch.Tensor:
    """Mean L1 over linear STFT magnitudes at several resolutions."""
    return sum(
        TF.l1_loss(_stft_mag(pred, n), _stft_mag(target, n)) for n in fft_sizes
    ) / len(fft_sizes)


def train_synth(corpus: Corpus, config: SynthConfig, seed: int, out_dir) -> str:
    configure_torch()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(derive_seed("synth-init", seed))

    speakers = corpus.train_speaker_ids()
    label_of = {sid: i for i, sid in enumerate(speakers)}
    model = SynthModel(n_speakers=len(speakers))
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    train_ids = corpus.split_ids("train")
    features = {uid: load_cached_features(corpus, uid).values for uid in train_ids}
    f0s = {uid: load_cached_f0(corpus, uid) for uid in train_ids}
    waves = {uid: corpus.waveform(uid) for uid in train_ids}
    banks = {uid: log_filterbank(waves[uid]).astype(np.float32) for uid in train_ids}
    by_speaker = {}
    for uid in train_ids:
        by_speaker.setdefault(corpus.meta(uid)["speaker_id"], []).append(uid)

    crop_feat = 2 * config.crop_frames
    crop_samples = config.crop_frames * SAMPLES_PER_FRAME
    curves = []
    for epoch in range(config.epochs):
        rng = rng_for("synth-epoch", seed, epoch)
        order = rng.permutation(len(train_ids))
        model.train()
        sums = np.zeros(4)
        batches = 0
        for bi in range(0, len(order), config.batch_size):
            ids = [train_ids[i] for i in order[bi : bi + config.batch_size]]
            conds, excs, targets, ref_banks, labels = [], [], [], [], []
            for uid in ids:
                feats = features[uid]
                vmax = len(feats) // 2 - config.crop_frames
                v0 = int(rng.integers(0, vmax + 1))
                sl = slice(2 * v0, 2 * v0 + crop_feat)
                track = f0s[uid]
                crop_track = PitchTrack(track.f0_hz[sl], track.voiced[sl])
                cond = np.concatenate([feats[sl], _f0_channels(crop_track)], axis=1)
                conds.append(cond.reshape(-1, 2 * COND_CHANNELS))
                excs.append(harmonic_excitation(crop_track.f0_hz, crop_track.voiced))
                targets.append(waves[uid][v0 * SAMPLES_PER_FRAME : v0 * SAMPLES_PER_FRAME + crop_samples])
                speaker = corpus.meta(uid)["speaker_id"]
                pool = [r for r in by_speaker[speaker] if r != uid] or [uid]
                ref = pool[rng.integers(len(pool))]
                ref_banks.append(banks[ref])
                labels.append(label_of[speaker])

            max_bank = max(len(b) for b in ref_banks)
            bank_pad = np.zeros((len(ids), max_bank, 40), dtype=np.float32)
            for i, b in enumerate(ref_banks):
                bank_pad[i, : len(b)] = b
            style = model.style_encoder(torch.from_numpy(bank_pad))

            cond_t = torch.from_numpy(np.stack(conds).astype(np.float32)).permute(0, 2, 1)
            style_map = style[:, :, None].expand(-1, -1, cond_t.shape[2])
            cond_t = torch.cat([cond_t, style_map], dim=1)
            exc_t = torch.from_numpy(np.stack(excs))[:, None, :]
            target_t = torch.from_numpy(np.stack(targets).astype(np.float32))

            pred = model.decoder(cond_t, exc_t)[:, 0]
            spectral = multi_resolution_stft_l1(pred, target_t, config.fft_sizes)
            wave_l1 = TF.l1_loss(pred, target_t)
            aux = TF.cross_entropy(model.speaker_head(style), torch.tensor(labels))
            total = spectral + config.wave_l1_weight * wave_l1 + config.speaker_aux_weight * aux
            if not torch.isfinite(total):
                raise DivergenceAbort(
                    f"non-finite synth loss (epoch {epoch}, batch {bi})",
                    phase="synth", epoch=epoch, batch=bi, component="total",
                )
            opt.zero_grad()
            total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sums += np.array([spectral.item(), wave_l1.item(), aux.item(), total.item()])
            batches += 1
        curves.append([epoch] + list(sums / batches))

    with open(out_dir / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "spectral", "wave_l1", "speaker_aux", "total"])
        writer.writerows(curves)

    meta = {"component": "synth", "seed": seed, "epochs": config.epochs, "n_speakers": len(speakers)}
    return ckpt.save_checkpoint(out_dir / "checkpoint", ckpt.module_tensors(model), SYNTH_VERSION, meta)


def load_synth(path):
    configure_torch()
    tensors, index = ckpt.load_checkpoint(path, expected_version=SYNTH_VERSION)
    model = SynthModel(n_speakers=index["meta"]["n_speakers"])
    ckpt.load_module(model, tensors)
    model.eval()
    return model, index["meta"]
