"""Evaluation metric kernels: SSIM, PSNR, FID, sync scores, LMD, CSIM, TER, SECS.

All kernels are deterministic numpy; the embedding-based metrics take the
relevant expert (or a bare embedding callable) so they stay unit-testable.
"""

from __future__ import annotations

import numpy as np
from scipy.signal import fftconvolve

from .corpus import CANONICAL_EYE_DIST, HALF_FRAME
from .errors import ContractViolation
from .utils import cosine

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
PSNR_CAP_DB = 100.0
PSNR_MSE_FLOOR = 1e-10
LSE_WINDOW = 5          # video frames per sync window
LSE_MAX_OFFSET = 15


def _gaussian_kernel():
    half = (SSIM_WINDOW - 1) / 2.0
    coords = np.arange(SSIM_WINDOW) - half
    g = np.exp(-(coords ** 2) / (2.0 * SSIM_SIGMA ** 2))
    kernel = np.outer(g, g)
    return kernel / kernel.sum()

_SSIM_KERNEL = _gaussian_kernel()


def ssim(a, b) -> float:
    """Mean SSIM over channels and valid 11x11 Gaussian window positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"ssim shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    if a.ndim != 3:
        raise ContractViolation("ssim expects HxW or HxWxC frames")
    if a.min() < -1e-9 or a.max() > 1 + 1e-9 or b.min() < -1e-9 or b.max() > 1 + 1e-9:
        raise ContractViolation("ssim inputs must lie in [0, 1]")

    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    values = []
    for ch in range(a.shape[2]):
        x, y = a[:, :, ch], b[:, :, ch]
        mu_x = fftconvolve(x, _SSIM_KERNEL, mode="valid")
        mu_y = fftconvolve(y, _SSIM_KERNEL, mode="valid")
        xx = fftconvolve(x * x, _SSIM_KERNEL, mode="valid") - mu_x * mu_x
        yy = fftconvolve(y * y, _SSIM_KERNEL, mode="valid") - mu_y * mu_y
        xy = fftconvolve(x * y, _SSIM_KERNEL, mode="valid") - mu_x * mu_y
        score = ((2 * mu_x * mu_y + c1) * (2 * xy + c2)) / (
            (mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)
        )
        values.append(score.mean())
    return float(np.mean(values))


def psnr(a, b) -> float:
    """PSNR in dB for unit dynamic range; capped at 100 for near-identical inputs."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation(f"psnr shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP_DB
    return float(-10.0 * np.log10(mse))


def _sqrtm_psd(mat):
    """Symmetric PSD square root via eigendecomposition; clips negatives."""
    sym = (mat + mat.T) / 2.0
    eigvals, eigvecs = np.linalg.eigh(sym)
    clip = float(np.abs(eigvals[eigvals < 0]).sum())
    eigvals = np.clip(eigvals, 0.0, None)
    return (eigvecs * np.sqrt(eigvals)) @ eigvecs.T, clip


def fid_from_features(fa, fb):
    """Frechet distance between Gaussian fits; returns (fid, clipped_eig_mass)."""
    fa = np.atleast_2d(np.asarray(fa, dtype=np.float64))
    fb = np.atleast_2d(np.asarray(fb, dtype=np.float64))
    if fa.shape[0] == 1:
        fa = fa.T
    if fb.shape[0] == 1:
        fb = fb.T
    mu_a, mu_b = fa.mean(axis=0), fb.mean(axis=0)
    cov_a = np.atleast_2d(np.cov(fa, rowvar=False))
    cov_b = np.atleast_2d(np.cov(fb, rowvar=False))

    sqrt_a, clip1 = _sqrtm_psd(cov_a)
    inner = sqrt_a @ cov_b @ sqrt_a
    eigvals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    clip2 = float(np.abs(eigvals[eigvals < 0]).sum())
    tr_sqrt = float(np.sqrt(np.clip(eigvals, 0.0, None)).sum())

    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0), clip1 + clip2


def fid(frames_a, frames_b, embed_fn, min_frames: int = 64):
    """FID between two frame sets under a fixed embedding function."""
    frames_a = np.asarray(frames_a)
    frames_b = np.asarray(frames_b)
    if len(frames_a) < min_frames or len(frames_b) < min_frames:
        raise ContractViolation(f"fid needs at least {min_frames} frames per set")
    return fid_from_features(embed_fn(frames_a), embed_fn(frames_b))


def _normalized(embeddings, eps=1e-8):
    arr = np.asarray(embeddings, dtype=np.float64)
    return arr / (np.linalg.norm(arr, axis=-1, keepdims=True) + eps)


def lse(frames, feature_values, sync_expert, max_offset: int = LSE_MAX_OFFSET):
    """Sync confidence and distance over a +-max_offset video-frame search.

    For every eligible window position the embedding L2 distance (on unit
    normalized embeddings) is computed across offsets; LSE-D is the mean
    distance at offset zero, LSE-C the mean of (median over offsets -
    minimum over offsets).
    """
    frames = np.asarray(frames)
    feats = np.asarray(feature_values)
    n = len(frames)
    min_len = LSE_WINDOW + 2 * max_offset
    if n < min_len:
        raise ContractViolation(f"lse needs clips of >= {min_len} frames, got {n}")
    if len(feats) != 2 * n:
        raise ContractViolation(
            f"lse needs exactly 2 feature frames per video frame ({len(feats)} vs {2 * n})"
        )

    positions = np.arange(max_offset, n - LSE_WINDOW - max_offset + 1)
    video_windows = np.stack(
        [frames[p : p + LSE_WINDOW, HALF_FRAME:, :, :] for p in positions]
    )
    starts = np.arange(0, n - LSE_WINDOW + 1)
    feature_windows = np.stack([feats[2 * s : 2 * s + 2 * LSE_WINDOW] for s in starts])

    v_emb = _normalized(sync_expert.embed_video(video_windows))
    f_emb = _normalized(sync_expert.embed_features(feature_windows))

    offsets = np.arange(-max_offset, max_offset + 1)
    dists = np.empty((len(positions), len(offsets)))
    for oi, off in enumerate(offsets):
        idx = positions + off
        dists[:, oi] = np.linalg.norm(v_emb - f_emb[idx], axis=1)
    zero_col = max_offset
    lse_d = float(dists[:, zero_col].mean())
    lse_c = float((np.median(dists, axis=1) - dists.min(axis=1)).mean())
    return lse_c, lse_d


def lmd(gen_frames, gt_frames, landmark_expert, eye_distance: float) -> float:
    """Mouth landmark distance in pixels, scaled to a canonical eye distance."""
    gen = np.asarray(gen_frames)
    gt = np.asarray(gt_frames)
    if gen.shape != gt.shape:
        raise ContractViolation("lmd frame sets must have equal shapes")
    lm_gen = landmark_expert.regress(gen)
    lm_gt = landmark_expert.regress(gt)
    per_point = np.linalg.norm(lm_gen - lm_gt, axis=-1)  # (N, 4)
    return float(per_point.mean() * (CANONICAL_EYE_DIST / eye_distance))


def csim(gen_frames, reference_frame, identity_expert) -> float:
    """Cosine similarity of mean generated identity embedding vs the reference's."""
    gen_emb = np.asarray(identity_expert.embed(np.asarray(gen_frames))).mean(axis=0)
    ref_emb = np.asarray(identity_expert.embed(np.asarray(reference_frame)[None]))[0]
    return cosine(gen_emb, ref_emb)


def ter(decoded_tokens, reference_tokens) -> float:
    """Token error rate: edit distance over reference length."""
    from .experts import levenshtein

    reference_tokens = list(reference_tokens)
    if not reference_tokens:
        raise ContractViolation("ter reference must be non-empty")
    return levenshtein(list(decoded_tokens), reference_tokens) / len(reference_tokens)


def secs(waveform_a, waveform_b, speaker_expert) -> float:
    """Speaker embedding cosine similarity between two waveforms."""
    emb_a = speaker_expert.embed_waveform(np.asarray(waveform_a))
    emb_b = speaker_expert.embed_waveform(np.asarray(waveform_b))
    return cosine(emb_a, emb_b)
