"""Auxiliary trained networks used as losses and metrics.

Six kinds: `sync` (audio-visual sync scorer), `perceptual` (fixed random
conv pyramid), `identity` (face embedder), `speaker` (voice embedder),
`landmark` (mouth landmark regressor), `recognizer` (per-frame token
classifier). Each trains on the corpus train split, records its val score
in its checkpoint, and refuses to load below its floor so downstream
metrics can't silently run on junk experts.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as TF

from . import checkpoint as ckpt
from .config import ExpertsConfig
from .corpus import Corpus, FRAME_SIZE, HALF_FRAME, SILENCE_ID, N_TOKENS
from .errors import ContractViolation, DependencyError, DivergenceAbort, TrainingFailure
from .features import load_cached_features, log_filterbank
from .utils import auc_score, configure_torch, derive_seed, rng_for

EXPERTS_VERSION = "experts-v1"
SYNC_WINDOW = 5            # video frames
SYNC_FEATURE_WINDOW = 10   # feature frames
SYNC_TAU = 0.1
SYNC_NEG_MIN_OFFSET = 5    # training negatives
SYNC_VAL_MIN_OFFSET = 10   # validation negatives
EMBED_DIM = 64
ID_EMBED_DIM = 32

KINDS = ("sync", "perceptual", "identity", "speaker", "landmark", "recognizer")


def levenshtein(a, b) -> int:
    """Edit distance between two token sequences (standard DP)."""
    a, b = list(a), list(b)
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i] + [0] * len(b)
        for j, y in enumerate(b, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y))
        prev = cur
    return prev[len(b)]


def _t(x) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


def _check_finite(loss, *, phase, epoch, batch, component="loss"):
    if not torch.isfinite(loss):
        raise DivergenceAbort(
            f"non-finite {component} in {phase} (epoch {epoch}, batch {batch})",
            phase=phase, epoch=epoch, batch=batch, component=component,
        )


# ---------------------------------------------------------------------------
# networks

class SyncExpert(nn.Module):
    """Twin encoders scoring video lower-half windows against feature windows."""

    def __init__(self):
        super().__init__()
        self.video_net = nn.Sequential(
            nn.Conv2d(SYNC_WINDOW * 3, 32, 4, 2, 1), nn.GroupNorm(4, 32), nn.SiLU(),
            nn.Conv2d(32, 64, 4, 2, 1), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv2d(64, 64, 4, 2, 1), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Flatten(), nn.Linear(64 * 3 * 6, 128), nn.SiLU(), nn.Linear(128, EMBED_DIM),
        )
        self.feature_net = nn.Sequential(
            nn.Conv1d(32, 64, 3, padding=1), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv1d(64, 64, 3, padding=1), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Flatten(), nn.Linear(64 * SYNC_FEATURE_WINDOW, 128), nn.SiLU(),
            nn.Linear(128, EMBED_DIM),
        )

    def forward_video(self, windows: torch.Tensor) -> torch.Tensor:
        # (B, 5, 24, 48, 3) -> stack frames into channels
        b = windows.shape[0]
        x = windows.permute(0, 1, 4, 2, 3).reshape(b, SYNC_WINDOW * 3, HALF_FRAME, FRAME_SIZE)
        return self.video_net(x)

    def forward_features(self, windows: torch.Tensor) -> torch.Tensor:
        return self.feature_net(windows.permute(0, 2, 1))  # (B, 10, 32) -> (B, 32, 10)

    def _validate_video(self, windows):
        expected = (SYNC_WINDOW, HALF_FRAME, FRAME_SIZE, 3)
        if windows.ndim != 5 or tuple(windows.shape[1:]) != expected:
            raise ContractViolation(
                f"sync video windows must be (B, {expected}), got {tuple(windows.shape)}"
            )

    def _validate_features(self, windows):
        expected = (SYNC_FEATURE_WINDOW, 32)
        if windows.ndim != 3 or tuple(windows.shape[1:]) != expected:
            raise ContractViolation(
                f"sync feature windows must be (B, {expected}), got {tuple(windows.shape)}"
            )

    @torch.no_grad()
    def embed_video(self, windows) -> np.ndarray:
        windows = np.asarray(windows)
        self._validate_video(windows)
        self.eval()
        return self.forward_video(_t(windows)).numpy()

    @torch.no_grad()
    def embed_features(self, windows) -> np.ndarray:
        windows = np.asarray(windows)
        self._validate_features(windows)
        self.eval()
        return self.forward_features(_t(windows)).numpy()

    @torch.no_grad()
    def scores(self, video_windows, feature_windows) -> np.ndarray:
        """Batched cosine similarities in [-1, 1]."""
        v = self.embed_video(video_windows)
        f = self.embed_features(feature_windows)
        if len(v) != len(f):
            raise ContractViolation("sync score batch sizes differ")
        num = (v * f).sum(axis=1)
        den = np.linalg.norm(v, axis=1) * np.linalg.norm(f, axis=1) + 1e-8
        return (num / den).astype(np.float64)


def sync_scores(expert: SyncExpert, video_windows, feature_windows) -> np.ndarray:
    return expert.scores(video_windows, feature_windows)


class _FrameEncoder(nn.Module):
    def __init__(self, out_dim):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 4, 2, 1), nn.GroupNorm(4, 32), nn.SiLU(),
            nn.Conv2d(32, 64, 4, 2, 1), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv2d(64, 64, 4, 2, 1), nn.GroupNorm(4, 64), nn.SiLU(),
        )
        self.head = nn.Linear(64, out_dim)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        x = self.net(frames.permute(0, 3, 1, 2))
        return self.head(x.mean(dim=(2, 3)))


class IdentityEmbedder(nn.Module):
    """Face identity embedding trained with a speaker-classification head."""

    def __init__(self, n_classes: int):
        super().__init__()
        self.encoder = _FrameEncoder(ID_EMBED_DIM)
        self.classifier = nn.Linear(ID_EMBED_DIM, n_classes)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.encoder(frames))

    @torch.no_grad()
    def embed(self, frames) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[1:] != (FRAME_SIZE, FRAME_SIZE, 3):
            raise ContractViolation(f"identity embed expects (B, 48, 48, 3), got {frames.shape}")
        self.eval()
        return self.encoder(_t(frames)).numpy()


class SpeakerEmbedder(nn.Module):
    """Voice identity embedding over 40-band log filterbanks."""

    def __init__(self, n_classes: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(40, 64, 5, stride=2, padding=2), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv1d(64, 64, 5, stride=2, padding=2), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv1d(64, 64, 3, padding=1), nn.GroupNorm(4, 64), nn.SiLU(),
        )
        self.head = nn.Linear(64, ID_EMBED_DIM)
        self.classifier = nn.Linear(ID_EMBED_DIM, n_classes)

    def embed_banks(self, banks: torch.Tensor) -> torch.Tensor:
        x = self.net(banks.permute(0, 2, 1))
        return self.head(x.mean(dim=2))

    def forward(self, banks: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.embed_banks(banks))

    @torch.no_grad()
    def embed_waveform(self, waveform) -> np.ndarray:
        self.eval()
        banks = log_filterbank(np.asarray(waveform))
        return self.embed_banks(_t(banks)[None])[0].numpy()


class LandmarkRegressor(nn.Module):
    """Frame -> 4 mouth landmarks, pixel coordinates."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 4, 2, 1), nn.GroupNorm(4, 32), nn.SiLU(),
            nn.Conv2d(32, 64, 4, 2, 1), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv2d(64, 64, 4, 2, 1), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Flatten(), nn.Linear(64 * 6 * 6, 128), nn.SiLU(), nn.Linear(128, 8),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.net(frames.permute(0, 3, 1, 2)).reshape(-1, 4, 2)

    @torch.no_grad()
    def regress(self, frames) -> np.ndarray:
        frames = np.asarray(frames)
        if frames.ndim != 4 or frames.shape[1:] != (FRAME_SIZE, FRAME_SIZE, 3):
            raise ContractViolation(f"landmark regress expects (B, 48, 48, 3), got {frames.shape}")
        self.eval()
        return self.forward(_t(frames)).numpy()


class TokenRecognizer(nn.Module):
    """Per-feature-frame token classifier; decodes by collapse-and-strip."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(32, 64, 5, padding=2), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv1d(64, 64, 5, padding=2), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv1d(64, 64, 5, padding=2), nn.GroupNorm(4, 64), nn.SiLU(),
            nn.Conv1d(64, N_TOKENS, 1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        return self.net(features.permute(0, 2, 1))  # (B, 21, T)

    @torch.no_grad()
    def frame_labels(self, feature_values) -> np.ndarray:
        self.eval()
        logits = self.forward(_t(np.asarray(feature_values))[None])[0]
        return logits.argmax(dim=0).numpy()

    def decode(self, feature_values) -> list:
        """Greedy frame decode, collapse duplicate runs, strip silences."""
        labels = self.frame_labels(feature_values)
        out = []
        prev = None
        for label in labels:
            if label != prev:
                if label != SILENCE_ID:
                    out.append(int(label))
                prev = label
        return out


class PerceptualPyramid(nn.Module):
    """Fixed random 3-stage conv pyramid; never trained, seeded and frozen."""

    def __init__(self, seed: int):
        super().__init__()
        self.seed = seed
        torch.manual_seed(derive_seed("perceptual-pyramid", seed))
        self.stages = nn.ModuleList(
            [
                nn.Conv2d(3, 16, 3, 2, 1),
                nn.Conv2d(16, 32, 3, 2, 1),
                nn.Conv2d(32, 64, 3, 2, 1),
            ]
        )
        for p in self.parameters():
            p.requires_grad_(False)

    def stage_maps(self, frames: torch.Tensor) -> list:
        """Feature maps per stage; input is channel-first (B, 3, H, W)."""
        x = frames
        maps = []
        for stage in self.stages:
            x = TF.silu(stage(x))
            maps.append(x)
        return maps

    @torch.no_grad()
    def embed(self, frames) -> np.ndarray:
        """(B, 64) pooled top-stage features (the FID embedding); HWC numpy input."""
        frames = np.asarray(frames)
        self.eval()
        out = []
        for i in range(0, len(frames), 256):
            maps = self.stage_maps(_t(frames[i : i + 256]).permute(0, 3, 1, 2))
            out.append(maps[-1].mean(dim=(2, 3)).numpy())
        return np.concatenate(out, axis=0)

    def distance(self, frames_a: torch.Tensor, frames_b: torch.Tensor) -> torch.Tensor:
        """Sum of per-stage MSEs (the perceptual loss; differentiable)."""
        maps_a = self.stage_maps(frames_a)
        maps_b = self.stage_maps(frames_b)
        return sum(TF.mse_loss(a, b) for a, b in zip(maps_a, maps_b))


# ---------------------------------------------------------------------------
# training

def _sync_window_batch(corpus, features, ids, rng, negatives: bool, min_offset: int):
    """(video, feature, label) triples; negatives shift the feature window."""
    videos, feats, labels = [], [], []
    for uid in ids:
        n = corpus.n_frames(uid)
        start = int(rng.integers(0, n - SYNC_WINDOW + 1))
        window = corpus.frame_window(uid, start, SYNC_WINDOW)[:, HALF_FRAME:, :, :]
        videos.append(window)
        feats.append(features[uid][2 * start : 2 * start + SYNC_FEATURE_WINDOW])
        labels.append(1.0)
        if negatives:
            offset = _sample_offset(rng, start, n, min_offset)
            videos.append(window)
            feats.append(features[uid][2 * (start + offset) : 2 * (start + offset) + SYNC_FEATURE_WINDOW])
            labels.append(0.0)
    return np.stack(videos), np.stack(feats), np.array(labels, dtype=np.float32)


def _sample_offset(rng, start, n_frames, min_offset):
    choices = []
    hi = n_frames - SYNC_WINDOW
    for off in range(-(start), hi - start + 1):
        if abs(off) >= min_offset:
            choices.append(off)
    if not choices:
        raise ContractViolation(f"clip too short for offset >= {min_offset}")
    return int(choices[rng.integers(len(choices))])


def _load_split_features(corpus, split):
    return {uid: load_cached_features(corpus, uid).values for uid in corpus.split_ids(split)}


def _train_sync(corpus, config: ExpertsConfig, seed):
    torch.manual_seed(derive_seed("sync-init", seed))
    model = SyncExpert()
    opt = torch.optim.Adam(model.parameters(), lr=config.sync_lr)
    train_ids = corpus.split_ids("train")
    features = _load_split_features(corpus, "train")

    for epoch in range(config.sync_epochs):
        rng = rng_for("sync-epoch", seed, epoch)
        order = rng.permutation(len(train_ids))
        model.train()
        for bi in range(0, len(order), config.batch_size // 2):
            ids = [train_ids[i] for i in order[bi : bi + config.batch_size // 2]]
            if not ids:
                continue
            videos, feats, labels = _sync_window_batch(
                corpus, features, ids, rng, negatives=True, min_offset=SYNC_NEG_MIN_OFFSET
            )
            v = model.forward_video(_t(videos))
            f = model.forward_features(_t(feats))
            cos = TF.cosine_similarity(v, f, dim=1, eps=1e-8)
            loss = TF.binary_cross_entropy_with_logits(cos / SYNC_TAU, _t(labels))
            _check_finite(loss, phase="sync", epoch=epoch, batch=bi)
            opt.zero_grad()
            loss.backward()
            opt.step()

    score = _sync_val_auc(model, corpus)
    return model, score, {}


def _sync_val_auc(model, corpus, min_offset=SYNC_VAL_MIN_OFFSET):
    val_ids = corpus.split_ids("val")
    features = _load_split_features(corpus, "val")
    rng = rng_for("sync-val", corpus.seed)
    pos, neg = [], []
    for uid in val_ids:
        n = corpus.n_frames(uid)
        for start in np.linspace(0, n - SYNC_WINDOW, 4).astype(int):
            window = corpus.frame_window(uid, int(start), SYNC_WINDOW)[:, HALF_FRAME:, :, :]
            fpos = features[uid][2 * start : 2 * start + SYNC_FEATURE_WINDOW]
            offset = _sample_offset(rng, int(start), n, min_offset)
            fneg = features[uid][2 * (start + offset) : 2 * (start + offset) + SYNC_FEATURE_WINDOW]
            scores = model.scores(np.stack([window, window]), np.stack([fpos, fneg]))
            pos.append(scores[0])
            neg.append(scores[1])
    return auc_score(pos, neg)


def _train_identity(corpus, config: ExpertsConfig, seed):
    torch.manual_seed(derive_seed("identity-init", seed))
    speakers = corpus.train_speaker_ids()
    label_of = {sid: i for i, sid in enumerate(speakers)}
    model = IdentityEmbedder(len(speakers))
    opt = torch.optim.Adam(model.parameters(), lr=config.identity_lr)
    train_ids = corpus.split_ids("train")

    for epoch in range(config.identity_epochs):
        rng = rng_for("identity-epoch", seed, epoch)
        order = rng.permutation(len(train_ids))
        model.train()
        for bi in range(0, len(order), config.batch_size):
            ids = [train_ids[i] for i in order[bi : bi + config.batch_size]]
            frames = np.stack(
                [corpus.frame(uid, int(rng.integers(corpus.n_frames(uid)))) for uid in ids]
            )
            labels = torch.tensor([label_of[corpus.meta(uid)["speaker_id"]] for uid in ids])
            loss = TF.cross_entropy(model(_t(frames)), labels)
            _check_finite(loss, phase="identity", epoch=epoch, batch=bi)
            opt.zero_grad()
            loss.backward()
            opt.step()

    score = _embedder_val_auc(model.embed, corpus, modality="frame")
    return model, score, {"n_classes": len(speakers)}


def _train_speaker(corpus, config: ExpertsConfig, seed):
    torch.manual_seed(derive_seed("speaker-init", seed))
    speakers = corpus.train_speaker_ids()
    label_of = {sid: i for i, sid in enumerate(speakers)}
    model = SpeakerEmbedder(len(speakers))
    opt = torch.optim.Adam(model.parameters(), lr=config.speaker_lr)
    train_ids = corpus.split_ids("train")
    banks = {uid: log_filterbank(corpus.waveform(uid)) for uid in train_ids}
    crop = 50  # 1 s of filterbank frames

    for epoch in range(config.speaker_epochs):
        rng = rng_for("speaker-epoch", seed, epoch)
        order = rng.permutation(len(train_ids))
        model.train()
        for bi in range(0, len(order), config.batch_size):
            ids = [train_ids[i] for i in order[bi : bi + config.batch_size]]
            batch = []
            for uid in ids:
                bank = banks[uid]
                start = int(rng.integers(0, max(1, len(bank) - crop)))
                batch.append(bank[start : start + crop])
            labels = torch.tensor([label_of[corpus.meta(uid)["speaker_id"]] for uid in ids])
            loss = TF.cross_entropy(model(_t(np.stack(batch))), labels)
            _check_finite(loss, phase="speaker", epoch=epoch, batch=bi)
            opt.zero_grad()
            loss.backward()
            opt.step()

    score = _embedder_val_auc(
        lambda waves: np.stack([model.embed_waveform(w) for w in waves]),
        corpus,
        modality="waveform",
    )
    return model, score, {"n_classes": len(speakers)}


def _embedder_val_auc(embed_fn, corpus, modality):
    """Same-speaker vs cross-speaker cosine AUC on the val split."""
    val_ids = corpus.split_ids("val")
    rng = rng_for("embedder-val", corpus.seed, modality)
    items, speakers = [], []
    for uid in val_ids:
        meta = corpus.meta(uid)
        if modality == "frame":
            items.append(corpus.frame(uid, int(rng.integers(corpus.n_frames(uid)))))
        else:
            items.append(corpus.waveform(uid))
        speakers.append(meta["speaker_id"])
    emb = embed_fn(np.stack(items) if modality == "frame" else items)
    emb = emb / (np.linalg.norm(emb, axis=1, keepdims=True) + 1e-8)
    sims = emb @ emb.T
    same, cross = [], []
    for i in range(len(val_ids)):
        for j in range(i + 1, len(val_ids)):
            (same if speakers[i] == speakers[j] else cross).append(sims[i, j])
    return auc_score(same, cross)


def _train_landmark(corpus, config: ExpertsConfig, seed):
    torch.manual_seed(derive_seed("landmark-init", seed))
    model = LandmarkRegressor()
    opt = torch.optim.Adam(model.parameters(), lr=config.landmark_lr)
    train_ids = corpus.split_ids("train")

    for epoch in range(config.landmark_epochs):
        rng = rng_for("landmark-epoch", seed, epoch)
        order = rng.permutation(len(train_ids))
        model.train()
        for bi in range(0, len(order), config.batch_size):
            ids = [train_ids[i] for i in order[bi : bi + config.batch_size]]
            frames, targets = [], []
            for uid in ids:
                meta = corpus.meta(uid)
                idx = int(rng.integers(meta["n_frames"]))
                frames.append(corpus.frame(uid, idx))
                targets.append(np.asarray(meta["landmarks"][idx], dtype=np.float32))
            pred = model(_t(np.stack(frames)))
            loss = TF.mse_loss(pred, _t(np.stack(targets)))
            _check_finite(loss, phase="landmark", epoch=epoch, batch=bi)
            opt.zero_grad()
            loss.backward()
            opt.step()

    score = _landmark_val_error(model, corpus)
    return model, score, {}


def _landmark_val_error(model, corpus):
    errors = []
    rng = rng_for("landmark-val", corpus.seed)
    for uid in corpus.split_ids("val"):
        meta = corpus.meta(uid)
        idx = sorted(rng.choice(meta["n_frames"], size=min(4, meta["n_frames"]), replace=False))
        frames = np.stack([corpus.frame(uid, int(i)) for i in idx])
        target = np.asarray(meta["landmarks"], dtype=np.float32)[idx]
        pred = model.regress(frames)
        errors.append(np.linalg.norm(pred - target, axis=2).mean())
    return float(np.mean(errors))


def _frame_token_labels(meta) -> np.ndarray:
    """Token id per feature frame (two feature frames per video frame)."""
    video_tokens = np.repeat(np.asarray(meta["tokens"]), np.asarray(meta["durations_frames"]))
    return np.repeat(video_tokens, 2)


def _train_recognizer(corpus, config: ExpertsConfig, seed):
    torch.manual_seed(derive_seed("recognizer-init", seed))
    model = TokenRecognizer()
    opt = torch.optim.Adam(model.parameters(), lr=config.recognizer_lr)
    train_ids = corpus.split_ids("train")
    features = _load_split_features(corpus, "train")
    labels = {uid: _frame_token_labels(corpus.meta(uid)) for uid in train_ids}
    crop = 32

    for epoch in range(config.recognizer_epochs):
        rng = rng_for("recognizer-epoch", seed, epoch)
        order = rng.permutation(len(train_ids))
        model.train()
        for bi in range(0, len(order), config.batch_size):
            ids = [train_ids[i] for i in order[bi : bi + config.batch_size]]
            xs, ys = [], []
            for uid in ids:
                feats = features[uid]
                start = int(rng.integers(0, max(1, len(feats) - crop)))
                xs.append(feats[start : start + crop])
                ys.append(labels[uid][start : start + crop])
            logits = model(_t(np.stack(xs)))
            loss = TF.cross_entropy(logits, torch.from_numpy(np.stack(ys)).long())
            _check_finite(loss, phase="recognizer", epoch=epoch, batch=bi)
            opt.zero_grad()
            loss.backward()
            opt.step()

    score = recognizer_val_ter(model, corpus)
    return model, score, {}


def reference_token_sequence(tokens) -> list:
    """Ground-truth sequence for TER: silences stripped."""
    return [int(t) for t in tokens if t != SILENCE_ID]


def recognizer_val_ter(model, corpus, split="val") -> float:
    total_dist, total_ref = 0, 0
    for uid in corpus.split_ids(split):
        feats = load_cached_features(corpus, uid).values
        decoded = model.decode(feats)
        ref = reference_token_sequence(corpus.meta(uid)["tokens"])
        total_dist += levenshtein(decoded, ref)
        total_ref += len(ref)
    return total_dist / max(total_ref, 1)


_TRAINERS = {
    "sync": (_train_sync, "sync_floor", True),
    "identity": (_train_identity, "identity_floor", True),
    "speaker": (_train_speaker, "speaker_floor", True),
    "landmark": (_train_landmark, "landmark_floor", False),
    "recognizer": (_train_recognizer, "recognizer_floor", False),
}


def train_expert(kind: str, corpus: Corpus, config: ExpertsConfig, seed: int, out_dir) -> str:
    """Train one expert, persist its checkpoint, return the checkpoint hash.

    Raises TrainingFailure (carrying the score) if the val floor is unmet.
    """
    configure_torch()
    if kind == "perceptual":
        model = PerceptualPyramid(config.perceptual_seed)
        meta = {
            "kind": "perceptual",
            "seed": config.perceptual_seed,
            "corpus_seed": corpus.seed,
            "val_score": None,
            "floor": None,
            "higher_better": None,
        }
        return ckpt.save_checkpoint(out_dir, ckpt.module_tensors(model), EXPERTS_VERSION, meta)
    if kind not in _TRAINERS:
        raise ContractViolation(f"unknown expert kind {kind!r}")

    train_fn, floor_field, higher_better = _TRAINERS[kind]
    floor = getattr(config, floor_field)
    model, score, extras = train_fn(corpus, config, seed)
    ok = score >= floor if higher_better else score <= floor
    if not ok:
        raise TrainingFailure(
            f"{kind} expert finished at {score:.4f}, floor {floor}",
            kind=kind, score=score, floor=floor,
        )
    meta = {
        "kind": kind,
        "val_score": float(score),
        "floor": float(floor),
        "higher_better": higher_better,
        "corpus_seed": corpus.seed,
        "seed": seed,
        **extras,
    }
    return ckpt.save_checkpoint(out_dir, ckpt.module_tensors(model), EXPERTS_VERSION, meta)


def load_expert(path, expected_kind: str = None):
    """Load an expert and enforce its recorded floor; returns (model, meta)."""
    configure_torch()
    tensors, index = ckpt.load_checkpoint(path, expected_version=EXPERTS_VERSION)
    meta = index["meta"]
    kind = meta.get("kind")
    if expected_kind is not None and kind != expected_kind:
        raise DependencyError(f"expert at {path} is {kind!r}, expected {expected_kind!r}")
    if kind == "sync":
        model = SyncExpert()
    elif kind == "identity":
        model = IdentityEmbedder(meta["n_classes"])
    elif kind == "speaker":
        model = SpeakerEmbedder(meta["n_classes"])
    elif kind == "landmark":
        model = LandmarkRegressor()
    elif kind == "recognizer":
        model = TokenRecognizer()
    elif kind == "perceptual":
        model = PerceptualPyramid(meta["seed"])
    else:
        raise DependencyError(f"unknown expert kind {kind!r} in {path}")
    ckpt.load_module(model, tensors)
    model.eval()
    if kind not in ("perceptual",):
        score, floor = meta["val_score"], meta["floor"]
        ok = score >= floor if meta["higher_better"] else score <= floor
        if not ok:
            raise DependencyError(
                f"{kind} expert at {path} is below its floor ({score} vs {floor}); refusing to use it"
            )
    return model, meta
