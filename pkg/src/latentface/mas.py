"""Monotonic alignment search: max-likelihood token-to-frame alignment.

Dynamic program over Q[i, t] = max(Q[i, t-1], Q[i-1, t-1]) + logp(i, t)
with ties broken toward staying on the current token. The returned path is
monotone and surjective (every token gets at least one frame).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import AlignmentError, ContractViolation

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class AlignmentPath:
    durations: np.ndarray   # (N_tok,) positive ints summing to T
    expansion: np.ndarray   # (T,) token index per frame, monotone non-decreasing

    def __post_init__(self):
        self.durations = np.asarray(self.durations, dtype=np.int64)
        self.expansion = np.asarray(self.expansion, dtype=np.int64)
        if np.any(self.durations < 1):
            raise ContractViolation("alignment durations must all be >= 1")
        if self.durations.sum() != len(self.expansion):
            raise ContractViolation("durations must sum to the frame count")
        if np.any(np.diff(self.expansion) < 0):
            raise ContractViolation("expansion must be monotone non-decreasing")


def frame_log_likelihoods(frame_latents, mu, log_sigma) -> np.ndarray:
    """(N_tok, T) diagonal-Gaussian log density of each frame under each token."""
    x = np.asarray(frame_latents, dtype=np.float64)          # (T, D)
    mu = np.asarray(mu, dtype=np.float64)                    # (N, D)
    ls = np.asarray(log_sigma, dtype=np.float64)             # (N, D)
    diff = x[None, :, :] - mu[:, None, :]                    # (N, T, D)
    inv_var = np.exp(-2.0 * ls)[:, None, :]
    logp = -0.5 * (diff * diff * inv_var).sum(axis=2)
    logp -= (ls.sum(axis=1) + 0.5 * x.shape[1] * _LOG_2PI)[:, None]
    return logp


def mas_from_log_likelihoods(logp: np.ndarray) -> AlignmentPath:
    """Run the DP on a precomputed (N_tok, T) log-likelihood matrix."""
    n_tok, n_frames = logp.shape
    if n_frames < n_tok:
        raise AlignmentError(
            f"alignment infeasible: {n_frames} frames < {n_tok} tokens"
        )
    neg = -np.inf
    q = np.full(n_tok, neg)
    q[0] = logp[0, 0]
    switched = np.zeros((n_tok, n_frames), dtype=bool)
    for t in range(1, n_frames):
        stay = q
        switch = np.concatenate(([neg], q[:-1]))
        switched[:, t] = switch > stay  # tie prefers staying on the token
        q = logp[:, t] + np.maximum(stay, switch)

    expansion = np.empty(n_frames, dtype=np.int64)
    i = n_tok - 1
    expansion[n_frames - 1] = i
    for t in range(n_frames - 1, 0, -1):
        if switched[i, t]:
            i -= 1
        expansion[t - 1] = i
    durations = np.bincount(expansion, minlength=n_tok)
    return AlignmentPath(durations=durations, expansion=expansion)


def mas_align(frame_latents, mu, log_sigma) -> AlignmentPath:
    """Best monotone surjective alignment of frames to token priors."""
    x = np.asarray(frame_latents)
    mu = np.asarray(mu)
    if x.ndim != 2 or mu.ndim != 2 or x.shape[1] != mu.shape[1]:
        raise ContractViolation("frame latents and prior must share the feature dim")
    return mas_from_log_likelihoods(frame_log_likelihoods(x, mu, log_sigma))


def path_log_prob(logp: np.ndarray, expansion) -> float:
    """Sum of per-frame log likelihoods along a path, left to right."""
    total = 0.0
    for t, i in enumerate(np.asarray(expansion, dtype=np.int64)):
        total += float(logp[i, t])
    return total
