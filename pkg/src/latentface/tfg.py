"""Talking-face generator: masked-face inpainting conditioned on speech features.

The generator is a per-frame U-net over a 6-channel stack (silent identity
reference + lower-half-masked target frame). The flattened 10x32 condition
window replaces an audio encoder: it is projected to a vector, combined
with a frame-index embedding (the five frames of a window share one
condition window), and concatenated at the bottleneck. Stage 1 trains with
a stabilized synchronization loss (balanced shifted negatives, clamped
probabilities); stage 2 fine-tunes with a vanilla positive-only sync term
at a small weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as TF

from .config import TFGConfig
from .corpus import Corpus, FRAME_SIZE, HALF_FRAME, render_face
from .errors import ContractViolation, DivergenceAbort
from .experts import SYNC_FEATURE_WINDOW, SYNC_WINDOW
from .utils import configure_torch

TFG_VERSION = "tfg-v1"
WINDOW = SYNC_WINDOW                 # 5 video frames per training window
COND_WINDOW = SYNC_FEATURE_WINDOW    # 10 feature frames per window
SYNC_EPS = 1e-7


@dataclass
class FaceWindow:
    target_frames: np.ndarray    # (5, 48, 48, 3)
    masked_frames: np.ndarray    # (5, 48, 48, 3), rows 24.. zeroed
    silent_reference: np.ndarray  # (48, 48, 3)
    condition: np.ndarray        # (10, 32)
    utterance_id: str
    start_frame: int

    def __post_init__(self):
        if self.masked_frames.shape != self.target_frames.shape:
            raise ContractViolation("masked/target frame shapes differ")
        if not np.array_equal(
            self.masked_frames[:, :HALF_FRAME], self.target_frames[:, :HALF_FRAME]
        ):
            raise ContractViolation("masked frames must keep the target upper halves")
        if self.condition.shape != (COND_WINDOW, 32):
            raise ContractViolation(f"condition window must be (10, 32), got {self.condition.shape}")


def mask_lower_half(frames: np.ndarray) -> np.ndarray:
    masked = np.array(frames, copy=True)
    masked[..., HALF_FRAME:, :, :] = 0.0
    return masked


def silent_reference(corpus: Corpus, speaker_id: int) -> np.ndarray:
    """Closed-mouth identity frame straight from the corpus face model."""
    frame, _ = render_face(corpus.speaker(speaker_id), aperture=0.0, width=1.0)
    return frame


def build_face_window(frames, features, silent_ref, utterance_id, start) -> FaceWindow:
    target = np.asarray(frames[start : start + WINDOW])
    if len(target) != WINDOW:
        raise ContractViolation(f"window start {start} out of range")
    condition = np.asarray(features[2 * start : 2 * start + COND_WINDOW])
    return FaceWindow(
        target_frames=target,
        masked_frames=mask_lower_half(target),
        silent_reference=np.asarray(silent_ref),
        condition=condition,
        utterance_id=utterance_id,
        start_frame=start,
    )


# ---------------------------------------------------------------------------
# networks

class Generator(nn.Module):
    def __init__(self):
        super().__init__()
        def down(cin, cout):
            return nn.Sequential(nn.Conv2d(cin, cout, 4, 2, 1), nn.GroupNorm(4, cout), nn.SiLU())

        self.e1 = down(6, 32)      # 48 -> 24
        self.e2 = down(32, 64)     # 24 -> 12
        self.e3 = down(64, 96)     # 12 -> 6
        self.e4 = down(96, 128)    # 6 -> 3
        self.cond_proj = nn.Sequential(
            nn.Linear(COND_WINDOW * 32, 64), nn.SiLU(), nn.Linear(64, 64)
        )
        self.frame_embed = nn.Embedding(WINDOW, 8)
        self.fuse = nn.Sequential(nn.Conv2d(128 + 64 + 8, 128, 1), nn.SiLU())
        self.d4 = nn.ConvTranspose2d(128, 96, 4, 2, 1)
        self.c4 = nn.Sequential(nn.Conv2d(192, 96, 3, 1, 1), nn.GroupNorm(4, 96), nn.SiLU())
        self.d3 = nn.ConvTranspose2d(96, 64, 4, 2, 1)
        self.c3 = nn.Sequential(nn.Conv2d(128, 64, 3, 1, 1), nn.GroupNorm(4, 64), nn.SiLU())
        self.d2 = nn.ConvTranspose2d(64, 32, 4, 2, 1)
        self.c2 = nn.Sequential(nn.Conv2d(64, 32, 3, 1, 1), nn.GroupNorm(4, 32), nn.SiLU())
        self.d1 = nn.ConvTranspose2d(32, 16, 4, 2, 1)
        self.c1 = nn.Sequential(nn.Conv2d(16 + 6, 16, 3, 1, 1), nn.SiLU())
        self.out = nn.Conv2d(16, 3, 3, 1, 1)

    def forward(self, reference: torch.Tensor, masked: torch.Tensor, condition: torch.Tensor) -> torch.Tensor:
        """reference (B,3,48,48), masked (B,5,3,48,48), condition (B,10,32) -> (B,5,3,48,48)."""
        b = masked.shape[0]
        ref = reference[:, None].expand(-1, WINDOW, -1, -1, -1)
        x = torch.cat([ref, masked], dim=2).reshape(b * WINDOW, 6, FRAME_SIZE, FRAME_SIZE)

        e1 = self.e1(x)
        e2 = self.e2(e1)
        e3 = self.e3(e2)
        e4 = self.e4(e3)

        cond = self.cond_proj(condition.reshape(b, -1))
        cond = cond[:, None, :].expand(-1, WINDOW, -1).reshape(b * WINDOW, -1)
        fidx = torch.arange(WINDOW, device=x.device).repeat(b)
        ctx = torch.cat([cond, self.frame_embed(fidx)], dim=1)
        ctx = ctx[:, :, None, None].expand(-1, -1, e4.shape[2], e4.shape[3])
        h = self.fuse(torch.cat([e4, ctx], dim=1))

        h = self.c4(torch.cat([self.d4(h), e3], dim=1))
        h = self.c3(torch.cat([self.d3(h), e2], dim=1))
        h = self.c2(torch.cat([self.d2(h), e1], dim=1))
        h = self.c1(torch.cat([self.d1(h), x], dim=1))
        out = torch.sigmoid(self.out(h))
        return out.reshape(b, WINDOW, 3, FRAME_SIZE, FRAME_SIZE)


class Discriminator(nn.Module):
    """Single-frame real/fake classifier."""

    def __init__(self):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(3, 32, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(32, 64, 4, 2, 1), nn.GroupNorm(4, 64), nn.LeakyReLU(0.2),
            nn.Conv2d(64, 96, 4, 2, 1), nn.GroupNorm(4, 96), nn.LeakyReLU(0.2),
            nn.Conv2d(96, 128, 4, 2, 1), nn.GroupNorm(4, 128), nn.LeakyReLU(0.2),
            nn.Conv2d(128, 1, 3, 1, 1),
        )

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        return self.net(frames).mean(dim=(1, 2, 3))


# ---------------------------------------------------------------------------
# losses

@dataclass
class GenLosses:
    adv: float
    perceptual: float
    pixel_l1: float
    sync: float
    total: float
    stage: int

    def __post_init__(self):
        for name in ("adv", "perceptual", "pixel_l1", "sync", "total"):
            if not np.isfinite(getattr(self, name)):
                raise DivergenceAbort(
                    f"non-finite generator loss component {name!r}",
                    phase=f"tfg-stage{self.stage}", component=name,
                )
        if self.stage not in (1, 2):
            raise ContractViolation("stage must be 1 or 2")


def _sync_probability(sync_expert, video: torch.Tensor, cond: torch.Tensor, tau: float):
    v = sync_expert.forward_video(video)
    f = sync_expert.forward_features(cond)
    cos = TF.cosine_similarity(v, f, dim=1, eps=1e-8)
    return torch.clamp(torch.sigmoid(cos / tau), SYNC_EPS, 1.0 - SYNC_EPS)


def stabilized_sync_loss(sync_expert, video, cond_pos, cond_neg, tau) -> torch.Tensor:
    """Balanced positive + shifted-negative BCE on temperature-scaled cosine."""
    p_pos = _sync_probability(sync_expert, video, cond_pos, tau)
    p_neg = _sync_probability(sync_expert, video, cond_neg, tau)
    return -0.5 * (torch.log(p_pos).mean() + torch.log(1.0 - p_neg).mean())


def vanilla_sync_loss(sync_expert, video, cond_pos, tau) -> torch.Tensor:
    """Positive-only BCE (stage-2 fine-tuning variant)."""
    return -torch.log(_sync_probability(sync_expert, video, cond_pos, tau)).mean()


def lower_half_windows(frames: torch.Tensor) -> torch.Tensor:
    """(B, 5, 3, 48, 48) generator output -> (B, 5, 24, 48, 3) sync windows."""
    return frames[:, :, :, HALF_FRAME:, :].permute(0, 1, 3, 4, 2)


def tfg_losses(
    generated: torch.Tensor,
    target: torch.Tensor,
    discriminator,
    pyramid,
    sync_expert,
    cond_pos: torch.Tensor,
    cond_neg,
    stage: int,
    config: TFGConfig,
    adv_weight: float = None,
    sync_weight: float = None,
):
    """Generator objective; returns (total tensor, GenLosses record)."""
    if stage not in (1, 2):
        raise ContractViolation("stage must be 1 or 2")
    flat_gen = generated.reshape(-1, 3, FRAME_SIZE, FRAME_SIZE)
    flat_tgt = target.reshape(-1, 3, FRAME_SIZE, FRAME_SIZE)

    adv = TF.binary_cross_entropy_with_logits(
        discriminator(flat_gen), torch.ones(flat_gen.shape[0])
    )
    perceptual = pyramid.distance(flat_gen, flat_tgt)
    pixel = TF.l1_loss(generated, target)
    if stage == 1:
        sync = stabilized_sync_loss(
            sync_expert, lower_half_windows(generated), cond_pos, cond_neg, config.sync_tau
        )
        if sync_weight is None:
            sync_weight = config.sync_weight_stage1
    else:
        sync = vanilla_sync_loss(
            sync_expert, lower_half_windows(generated), cond_pos, config.sync_tau
        )
        if sync_weight is None:
            sync_weight = config.sync_weight_stage2
    if adv_weight is None:
        adv_weight = config.adv_weight

    total = (
        config.pixel_weight * pixel
        + config.perceptual_weight * perceptual
        + adv_weight * adv
        + sync_weight * sync
    )
    record = GenLosses(
        adv=float(adv.item()),
        perceptual=float(perceptual.item()),
        pixel_l1=float(pixel.item()),
        sync=float(sync.item()),
        total=float(total.item()),
        stage=stage,
    )
    return total, record


class DivergenceGuard:
    """Halves the adversarial weight after a long run of near-perfect D accuracy."""

    def __init__(self, config: TFGConfig):
        self.threshold = config.guard_accuracy
        self.patience = config.guard_steps
        self.adv_weight = config.adv_weight
        self.streak = 0

    def update(self, accuracy: float):
        if accuracy > self.threshold:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.patience:
            self.streak = 0
            self.adv_weight /= 2.0
            return {"event": "adv_weight_halved", "adv_weight": self.adv_weight}
        return None


def discriminator_step(disc, disc_opt, generated: torch.Tensor, target: torch.Tensor):
    """One D update; returns (loss, accuracy over real+fake frames)."""
    flat_gen = generated.detach().reshape(-1, 3, FRAME_SIZE, FRAME_SIZE)
    flat_tgt = target.reshape(-1, 3, FRAME_SIZE, FRAME_SIZE)
    logits_real = disc(flat_tgt)
    logits_fake = disc(flat_gen)
    loss = 0.5 * (
        TF.binary_cross_entropy_with_logits(logits_real, torch.ones_like(logits_real))
        + TF.binary_cross_entropy_with_logits(logits_fake, torch.zeros_like(logits_fake))
    )
    if not torch.isfinite(loss):
        raise DivergenceAbort("non-finite discriminator loss", phase="tfg", component="disc")
    disc_opt.zero_grad()
    loss.backward()
    disc_opt.step()
    accuracy = 0.5 * (
        (logits_real > 0).float().mean().item() + (logits_fake <= 0).float().mean().item()
    )
    return float(loss.item()), accuracy


# ---------------------------------------------------------------------------
# inference

@torch.no_grad()
def generate_faces(model: Generator, silent_ref, masked_frames, condition) -> np.ndarray:
    """One window: (5, 48, 48, 3) frames in [0, 1]; deterministic."""
    model.eval()
    silent_ref = np.asarray(silent_ref, dtype=np.float32)
    masked_frames = np.asarray(masked_frames, dtype=np.float32)
    condition = np.asarray(condition, dtype=np.float32)
    if silent_ref.shape != (FRAME_SIZE, FRAME_SIZE, 3):
        raise ContractViolation(f"silent reference must be (48, 48, 3), got {silent_ref.shape}")
    if masked_frames.shape != (WINDOW, FRAME_SIZE, FRAME_SIZE, 3):
        raise ContractViolation(f"masked frames must be (5, 48, 48, 3), got {masked_frames.shape}")
    if condition.shape != (COND_WINDOW, 32):
        raise ContractViolation(f"condition must be (10, 32), got {condition.shape}")
    out = model(
        torch.from_numpy(silent_ref).permute(2, 0, 1)[None],
        torch.from_numpy(masked_frames).permute(0, 3, 1, 2)[None],
        torch.from_numpy(condition)[None],
    )
    return out[0].permute(0, 2, 3, 1).numpy()


@torch.no_grad()
def generate_clip(model: Generator, gt_frames, features, silent_ref) -> np.ndarray:
    """Regenerate a clip window-by-window (stride 5, last window right-aligned).

    Masked upper halves come from the ground-truth frames, mirroring the
    training setup; lower halves are synthesized from the condition.
    """
    configure_torch()
    model.eval()
    gt_frames = np.asarray(gt_frames, dtype=np.float32)
    features = np.asarray(features, dtype=np.float32)
    n = len(gt_frames)
    if n < WINDOW:
        raise ContractViolation(f"clip must have >= {WINDOW} frames")
    if len(features) != 2 * n:
        raise ContractViolation("clip conditioning must have 2 feature frames per video frame")

    starts = list(range(0, n - WINDOW + 1, WINDOW))
    if starts[-1] != n - WINDOW:
        starts.append(n - WINDOW)
    ref_t = torch.from_numpy(np.asarray(silent_ref, dtype=np.float32)).permute(2, 0, 1)[None]
    out = np.empty_like(gt_frames)
    masked = mask_lower_half(gt_frames)
    for start in starts:
        win = torch.from_numpy(masked[start : start + WINDOW]).permute(0, 3, 1, 2)[None]
        cond = torch.from_numpy(features[2 * start : 2 * start + COND_WINDOW])[None]
        frames = model(ref_t, win, cond)[0].permute(0, 2, 3, 1).numpy()
        out[start : start + WINDOW] = frames
    return out
