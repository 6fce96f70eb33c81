"""Text-to-feature variational model.

A conditional VAE: a text encoder produces per-token Gaussian priors over
the 32-d latent feature space, a posterior encoder reads real feature
sequences, and a decoder reconstructs features plus pitch from latents.
Token-to-frame alignment is discovered with monotonic alignment search and
distilled into a duration predictor for free-running inference.
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
from .config import TTVConfig
from .corpus import Corpus, N_TOKENS
from .errors import ContractViolation, DivergenceAbort
from .features import (
    F0_MAX_HZ,
    F0_MIN_HZ,
    FeatureSequence,
    N_FEATURES,
    PitchTrack,
    SOURCE_FREE_RUNNING,
    SOURCE_TEACHER_FORCED,
    load_cached_f0,
    load_cached_features,
)
from .mas import mas_from_log_likelihoods, frame_log_likelihoods
from .utils import configure_torch, derive_seed, rng_for

TTV_VERSION = "ttv-v1"
F0_REF_HZ = 220.0
LOG_SIGMA_MIN, LOG_SIGMA_MAX = -6.0, 2.0
HIDDEN = 64


def kl_divergence(mu_q, log_sigma_q, mu_p, log_sigma_p) -> np.ndarray:
    """Per-dimension KL(q || p) between diagonal Gaussians (closed form)."""
    mu_q, log_sigma_q, mu_p, log_sigma_p = (
        np.asarray(a, dtype=np.float64) for a in (mu_q, log_sigma_q, mu_p, log_sigma_p)
    )
    return 0.5 * (
        np.exp(2.0 * log_sigma_q - 2.0 * log_sigma_p)
        + (mu_q - mu_p) ** 2 * np.exp(-2.0 * log_sigma_p)
        - 1.0
        + 2.0 * log_sigma_p
        - 2.0 * log_sigma_q
    )


def _kl_torch(mu_q, ls_q, mu_p, ls_p):
    return 0.5 * (
        torch.exp(2.0 * ls_q - 2.0 * ls_p)
        + (mu_q - mu_p) ** 2 * torch.exp(-2.0 * ls_p)
        - 1.0
        + 2.0 * (ls_p - ls_q)
    )


class ResBlock1d(nn.Module):
    def __init__(self, channels, kernel):
        super().__init__()
        pad = kernel // 2
        self.conv1 = nn.Conv1d(channels, channels, kernel, padding=pad)
        self.norm1 = nn.GroupNorm(4, channels)
        self.conv2 = nn.Conv1d(channels, channels, kernel, padding=pad)
        self.norm2 = nn.GroupNorm(4, channels)

    def forward(self, x):
        h = TF.silu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return TF.silu(x + h)


class TextEncoder(nn.Module):
    def __init__(self, hidden=HIDDEN):
        super().__init__()
        self.embed = nn.Embedding(N_TOKENS, hidden)
        self.blocks = nn.Sequential(*[ResBlock1d(hidden, 5) for _ in range(4)])
        self.mu_head = nn.Conv1d(hidden, N_FEATURES, 1)
        self.ls_head = nn.Conv1d(hidden, N_FEATURES, 1)

    def forward(self, tokens):
        h = self.blocks(self.embed(tokens).permute(0, 2, 1))
        mu = self.mu_head(h)
        ls = torch.clamp(self.ls_head(h), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return h, mu, ls


class PosteriorEncoder(nn.Module):
    def __init__(self, hidden=HIDDEN):
        super().__init__()
        self.pre = nn.Conv1d(N_FEATURES, hidden, 5, padding=2)
        self.blocks = nn.Sequential(*[ResBlock1d(hidden, 5) for _ in range(4)])
        self.mu_head = nn.Conv1d(hidden, N_FEATURES, 1)
        self.ls_head = nn.Conv1d(hidden, N_FEATURES, 1)

    def forward(self, features):
        h = self.blocks(self.pre(features))
        return self.mu_head(h), torch.clamp(self.ls_head(h), LOG_SIGMA_MIN, LOG_SIGMA_MAX)


class Decoder(nn.Module):
    def __init__(self, hidden=HIDDEN):
        super().__init__()
        self.pre = nn.Conv1d(N_FEATURES, hidden, 5, padding=2)
        self.blocks = nn.Sequential(*[ResBlock1d(hidden, 5) for _ in range(6)])
        self.feat_head = nn.Conv1d(hidden, N_FEATURES, 1)
        self.f0_head = nn.Sequential(
            nn.Conv1d(hidden, 16, 3, padding=1), nn.SiLU(), nn.Conv1d(16, 2, 1)
        )

    def forward(self, z):
        h = self.blocks(self.pre(z))
        f0_out = self.f0_head(h)
        return self.feat_head(h), f0_out[:, 0], f0_out[:, 1]  # features, voiced logit, log f0


class DurationPredictor(nn.Module):
    def __init__(self, hidden=HIDDEN):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv1d(hidden, hidden, 3, padding=1), nn.GroupNorm(4, hidden), nn.SiLU(),
            nn.Conv1d(hidden, hidden, 3, padding=1), nn.GroupNorm(4, hidden), nn.SiLU(),
            nn.Conv1d(hidden, 1, 1),
        )

    def forward(self, text_hidden):
        return self.net(text_hidden.detach())[:, 0]  # log duration per token


class TTVModel(nn.Module):
    def __init__(self):
        super().__init__()
        self.text_encoder = TextEncoder()
        self.posterior_encoder = PosteriorEncoder()
        self.decoder = Decoder()
        self.duration_predictor = DurationPredictor()


@dataclass
class TTVOutput:
    features: FeatureSequence
    f0: PitchTrack
    durations: np.ndarray
    posterior: tuple = None  # (mu_q, log_sigma_q) when teacher-forced training stats wanted

    def __post_init__(self):
        if len(self.features) != int(np.sum(self.durations)):
            raise ContractViolation("TTV output length must equal the duration sum")


def _decode(model: TTVModel, z: torch.Tensor):
    feats, voiced_logit, log_f0 = model.decoder(z)
    features = feats[0].T.numpy()
    voiced = torch.sigmoid(voiced_logit[0]).numpy() >= 0.5
    f0 = np.clip(F0_REF_HZ * np.exp(log_f0[0].numpy()), F0_MIN_HZ, F0_MAX_HZ)
    f0 = np.where(voiced, f0, 0.0).astype(np.float32)
    return features, PitchTrack(f0, voiced)


def _expand_prior(mu, ls, durations):
    idx = torch.repeat_interleave(
        torch.arange(mu.shape[2]), torch.from_numpy(np.asarray(durations, dtype=np.int64))
    )
    return mu[:, :, idx], ls[:, :, idx]


def _sample_latent(mu, ls, temperature, seed):
    if temperature <= 0.0:
        return mu
    gen = torch.Generator().manual_seed(derive_seed("ttv-sample", seed))
    eps = torch.randn(mu.shape, generator=gen)
    return mu + temperature * torch.exp(ls) * eps


@torch.no_grad()
def infer_teacher_forced(model: TTVModel, tokens, durations, temperature=0.0, seed=0) -> TTVOutput:
    """Decode from the prior expanded with ground-truth durations.

    `durations` are in feature frames; the output length equals their sum
    exactly, so pre-existing video alignment is preserved.
    """
    model.eval()
    tokens = np.asarray(tokens, dtype=np.int64)
    durations = np.asarray(durations, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise ContractViolation("tokens must be a non-empty 1-d sequence")
    if len(durations) != len(tokens) or np.any(durations < 1):
        raise ContractViolation("need one positive duration per token")
    _, mu_p, ls_p = model.text_encoder(torch.from_numpy(tokens)[None])
    mu_e, ls_e = _expand_prior(mu_p, ls_p, durations)
    z = _sample_latent(mu_e, ls_e, temperature, seed)
    features, pitch = _decode(model, z)
    return TTVOutput(
        features=FeatureSequence(features, source=SOURCE_TEACHER_FORCED),
        f0=pitch,
        durations=durations,
    )


@torch.no_grad()
def predict_durations(model: TTVModel, tokens) -> np.ndarray:
    """Duration predictor output per token, in feature frames (min 1)."""
    model.eval()
    tokens = np.asarray(tokens, dtype=np.int64)
    h, _, _ = model.text_encoder(torch.from_numpy(tokens)[None])
    log_d = model.duration_predictor(h)[0].numpy()
    return np.maximum(np.round(np.exp(log_d)), 1.0).astype(np.int64)


@torch.no_grad()
def infer_free_running(model: TTVModel, tokens, temperature=0.0, seed=0, even_length=False) -> TTVOutput:
    """Decode from the prior expanded with predicted durations.

    `even_length` pads the final token by one feature frame when the
    predicted total is odd, so downstream video (2 feature frames per
    video frame) divides evenly.
    """
    model.eval()
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 1 or len(tokens) == 0:
        raise ContractViolation("tokens must be a non-empty 1-d sequence")
    durations = predict_durations(model, tokens)
    if even_length and durations.sum() % 2 == 1:
        durations[-1] += 1
    _, mu_p, ls_p = model.text_encoder(torch.from_numpy(tokens)[None])
    mu_e, ls_e = _expand_prior(mu_p, ls_p, durations)
    z = _sample_latent(mu_e, ls_e, temperature, seed)
    features, pitch = _decode(model, z)
    return TTVOutput(
        features=FeatureSequence(features, source=SOURCE_FREE_RUNNING),
        f0=pitch,
        durations=durations,
    )


# ---------------------------------------------------------------------------
# training

def _collate(corpus, ids, features, f0s):
    tokens = [np.asarray(corpus.meta(uid)["tokens"], dtype=np.int64) for uid in ids]
    n_tok = np.array([len(t) for t in tokens])
    t_len = np.array([len(features[uid]) for uid in ids])
    b, nmax, tmax = len(ids), n_tok.max(), t_len.max()
    tok_pad = np.zeros((b, nmax), dtype=np.int64)
    feat_pad = np.zeros((b, tmax, N_FEATURES), dtype=np.float32)
    f0_pad = np.zeros((b, tmax), dtype=np.float32)
    voiced_pad = np.zeros((b, tmax), dtype=np.float32)
    for i, uid in enumerate(ids):
        tok_pad[i, : n_tok[i]] = tokens[i]
        feat_pad[i, : t_len[i]] = features[uid]
        track = f0s[uid]
        f0_pad[i, : t_len[i]] = track.f0_hz[: t_len[i]]
        voiced_pad[i, : t_len[i]] = track.voiced[: t_len[i]].astype(np.float32)
    return tok_pad, n_tok, feat_pad, f0_pad, voiced_pad, t_len


def _mas_batch(mu_q, mu_p, ls_p, n_tok, t_len):
    """Per-sample MAS on detached tensors; returns padded durations + expansion."""
    b, _, nmax = mu_p.shape
    durations = np.zeros((b, nmax), dtype=np.int64)
    expansions = []
    for i in range(b):
        logp = frame_log_likelihoods(
            mu_q[i, :, : t_len[i]].T.numpy(),
            mu_p[i, :, : n_tok[i]].T.numpy(),
            ls_p[i, :, : n_tok[i]].T.numpy(),
        )
        path = mas_from_log_likelihoods(logp)
        durations[i, : n_tok[i]] = path.durations
        expansions.append(path.expansion)
    return durations, expansions


def train_ttv(corpus: Corpus, config: TTVConfig, seed: int, out_dir) -> str:
    """Train the model; writes checkpoint + loss-curve CSV, returns checkpoint hash."""
    configure_torch()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(derive_seed("ttv-init", seed))
    model = TTVModel()
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    train_ids = corpus.split_ids("train")
    features = {uid: load_cached_features(corpus, uid).values for uid in train_ids}
    f0s = {uid: load_cached_f0(corpus, uid) for uid in train_ids}

    curves = []
    for epoch in range(config.epochs):
        rng = rng_for("ttv-epoch", seed, epoch)
        order = rng.permutation(len(train_ids))
        model.train()
        sums = np.zeros(5)
        batches = 0
        for bi in range(0, len(order), config.batch_size):
            ids = [train_ids[i] for i in order[bi : bi + config.batch_size]]
            tok, n_tok, feat, f0, voiced, t_len = _collate(corpus, ids, features, f0s)
            tokens_t = torch.from_numpy(tok)
            feats_t = torch.from_numpy(feat).permute(0, 2, 1)  # (B, 32, T)
            frame_mask = torch.from_numpy(
                (np.arange(feat.shape[1])[None, :] < t_len[:, None]).astype(np.float32)
            )
            token_mask = torch.from_numpy(
                (np.arange(tok.shape[1])[None, :] < n_tok[:, None]).astype(np.float32)
            )

            h_text, mu_p, ls_p = model.text_encoder(tokens_t)
            mu_q, ls_q = model.posterior_encoder(feats_t)
            with torch.no_grad():
                durations, expansions = _mas_batch(mu_q, mu_p, ls_p, n_tok, t_len)

            eps = torch.randn(
                mu_q.shape,
                generator=torch.Generator().manual_seed(derive_seed("ttv-z", seed, epoch, bi)),
            )
            z = mu_q + torch.exp(ls_q) * eps

            # expand the prior along the MAS path (padded frames point at token 0,
            # masked out of every loss)
            idx = np.zeros((len(ids), feat.shape[1]), dtype=np.int64)
            for i, exp in enumerate(expansions):
                idx[i, : t_len[i]] = exp
            gather = torch.from_numpy(idx)[:, None, :].expand(-1, N_FEATURES, -1)
            mu_pe = torch.gather(mu_p, 2, gather)
            ls_pe = torch.gather(ls_p, 2, gather)

            dec_feat, voiced_logit, log_f0 = model.decoder(z)

            fm = frame_mask[:, None, :]
            denom = fm.sum() * N_FEATURES
            recon = (torch.abs(dec_feat - feats_t) * fm).sum() / denom
            kl = (_kl_torch(mu_q, ls_q, mu_pe, ls_pe) * fm).sum() / denom

            log_d_pred = model.duration_predictor(h_text)
            log_d_target = torch.log(torch.from_numpy(durations.astype(np.float32)).clamp(min=1.0))
            dur = ((log_d_pred - log_d_target) ** 2 * token_mask).sum() / token_mask.sum()

            voiced_t = torch.from_numpy(voiced)
            f0_t = torch.from_numpy(np.log(np.maximum(f0, 1.0) / F0_REF_HZ).astype(np.float32))
            vdenom = (voiced_t * frame_mask).sum().clamp(min=1.0)
            f0_l1 = (torch.abs(log_f0 - f0_t) * voiced_t * frame_mask).sum() / vdenom
            f0_bce = (
                TF.binary_cross_entropy_with_logits(voiced_logit, voiced_t, reduction="none")
                * frame_mask
            ).sum() / frame_mask.sum()
            f0_loss = f0_l1 + f0_bce

            total = (
                recon
                + config.lambda_kl * kl
                + config.lambda_dur * dur
                + config.lambda_f0 * f0_loss
            )
            for name, value in (
                ("recon", recon), ("kl", kl), ("duration", dur), ("f0", f0_loss), ("total", total),
            ):
                _check_finite_component(value, epoch, bi, name)
            opt.zero_grad()
            total.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
            opt.step()
            sums += np.array([recon.item(), kl.item(), dur.item(), f0_loss.item(), total.item()])
            batches += 1
        curves.append([epoch] + list(sums / batches))

    with open(out_dir / "train_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "recon", "kl", "duration", "f0", "total"])
        writer.writerows(curves)

    val = evaluate_teacher_forced(model, corpus, split="val")
    meta = {
        "component": "ttv",
        "seed": seed,
        "epochs": config.epochs,
        "val_teacher_l1": val["teacher_l1"],
        "val_mean_baseline_l1": val["mean_baseline_l1"],
        "val_duration_pearson": val["duration_pearson"],
    }
    return ckpt.save_checkpoint(out_dir / "checkpoint", ckpt.module_tensors(model), TTV_VERSION, meta)


def _check_finite_component(value, epoch, batch, component):
    if not torch.isfinite(value):
        raise DivergenceAbort(
            f"non-finite {component} loss (epoch {epoch}, batch {batch})",
            phase="ttv", epoch=epoch, batch=batch, component=component,
        )


def load_ttv(path):
    configure_torch()
    tensors, index = ckpt.load_checkpoint(path, expected_version=TTV_VERSION)
    model = TTVModel()
    ckpt.load_module(model, tensors)
    model.eval()
    return model, index["meta"]


def evaluate_teacher_forced(model: TTVModel, corpus: Corpus, split="val") -> dict:
    """Teacher-forced L1 vs the corpus-mean baseline + duration correlation."""
    ids = corpus.split_ids(split)
    train_feats = [load_cached_features(corpus, uid).values for uid in corpus.split_ids("train")]
    mean_vector = np.concatenate(train_feats, axis=0).mean(axis=0)

    l1_model, l1_baseline = [], []
    dur_pred_all, dur_true_all = [], []
    for uid in ids:
        meta = corpus.meta(uid)
        gt = load_cached_features(corpus, uid).values
        durations = 2 * np.asarray(meta["durations_frames"], dtype=np.int64)
        out = infer_teacher_forced(model, meta["tokens"], durations)
        l1_model.append(np.abs(out.features.values - gt).mean())
        l1_baseline.append(np.abs(mean_vector[None, :] - gt).mean())
        dur_pred_all.extend(predict_durations(model, meta["tokens"]).tolist())
        dur_true_all.extend(durations.tolist())
    from .utils import pearson

    return {
        "teacher_l1": float(np.mean(l1_model)),
        "mean_baseline_l1": float(np.mean(l1_baseline)),
        "duration_pearson": pearson(dur_pred_all, dur_true_all),
    }
