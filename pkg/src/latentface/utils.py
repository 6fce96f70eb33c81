"""Small shared helpers: seeding, raw-tensor IO, hashing, canonical JSON."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

import numpy as np


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a tuple of strings/ints.

    All randomness in the repo flows through numpy PCG64 generators (or
    torch generators) seeded by this function, so any artifact can be
    regenerated from its identifying tuple.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def rng_for(*parts) -> np.random.Generator:
    """PCG64 generator keyed by an identifying tuple."""
    return np.random.default_rng(derive_seed(*parts))


def write_f32(path, array) -> None:
    arr = np.ascontiguousarray(array, dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(arr.tobytes())


def read_f32(path, shape=None) -> np.ndarray:
    data = np.fromfile(path, dtype=np.float32)
    if shape is not None:
        data = data.reshape(shape)
    return data


def canonical_json(obj) -> str:
    """Deterministic JSON encoding (sorted keys, fixed separators)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, sort_keys=True, indent=2)
        fh.write("\n")


def read_json(path):
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def auc_score(pos_scores, neg_scores) -> float:
    """Rank-based AUC of positives over negatives (ties count half)."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one score on each side")
    all_scores = np.concatenate([pos, neg])
    order = np.argsort(all_scores, kind="mergesort")
    ranks = np.empty_like(order, dtype=np.float64)
    ranks[order] = np.arange(1, all_scores.size + 1)
    # average ranks over tied groups
    sorted_scores = all_scores[order]
    i = 0
    while i < sorted_scores.size:
        j = i
        while j + 1 < sorted_scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = ranks[order[i : j + 1]].mean()
        i = j + 1
    rank_sum = ranks[: pos.size].sum()
    return float((rank_sum - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size))


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size or a.size < 2:
        raise ValueError("pearson needs two equal-length vectors of size >= 2")
    a = a - a.mean()
    b = b - b.mean()
    denom = np.sqrt((a * a).sum() * (b * b).sum())
    if denom == 0:
        return 0.0
    return float((a * b).sum() / denom)


def cosine(a, b, eps: float = 1e-8) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return float(np.dot(a, b) / (np.linalg.norm(a) * np.linalg.norm(b) + eps))


def write_wav(path, waveform, sample_rate: int) -> None:
    """PCM16 mono WAV via the stdlib."""
    import wave as wave_mod

    samples = np.clip(np.asarray(waveform, dtype=np.float64), -1.0, 1.0)
    pcm = (samples * 32767.0).round().astype("<i2")
    with wave_mod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


def read_wav(path) -> np.ndarray:
    import wave as wave_mod

    with wave_mod.open(str(path), "rb") as fh:
        if fh.getsampwidth() != 2 or fh.getnchannels() != 1:
            raise ValueError("expected mono PCM16 WAV")
        pcm = np.frombuffer(fh.readframes(fh.getnframes()), dtype="<i2")
    return (pcm.astype(np.float32) / 32767.0).astype(np.float32)


_TORCH_CONFIGURED = False


def configure_torch() -> None:
    """Pin torch's CPU thread count once per process (reproducibility)."""
    global _TORCH_CONFIGURED
    if _TORCH_CONFIGURED:
        return
    import torch

    threads = os.environ.get("LATENTFACE_THREADS")
    n = int(threads) if threads else min(4, os.cpu_count() or 1)
    torch.set_num_threads(max(1, n))
    _TORCH_CONFIGURED = True


def default_home() -> Path:
    return Path(os.environ.get("LATENTFACE_HOME", "latentface_home"))
