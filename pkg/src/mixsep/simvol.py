"""Similarity volumes between audio and visual feature maps.

A volume ``S[k, f, t, h, w]`` holds, for every head ``k``, the channel dot
product between the audio feature at ``(f, t)`` and the visual feature at
``(h, w)``.  Heads are combined by max, by sum, or by selecting one; the
pooled score takes a spatial max and then averages over frequency and time.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .diffmath import ShapeError, Tensor

HEAD_MODES = ("total-max", "total-sum", "sound", "speech")


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def similarity_volume(a, v) -> Tensor:
    """``a [C,K,F,T]`` and ``v [C,K,H,W]`` -> ``S [K,F,T,H,W]``."""
    a, v = _t(a), _t(v)
    if a.ndim != 4 or v.ndim != 4:
        raise ShapeError(f"expected a [C,K,F,T] and v [C,K,H,W], got {a.shape} and {v.shape}")
    C, K, F, T = a.shape
    Cv, Kv, H, W = v.shape
    if (C, K) != (Cv, Kv):
        raise ShapeError(f"channel/head extents differ: a has (C={C}, K={K}), v has (C={Cv}, K={Kv})")
    am = a.transpose(1, 2, 3, 0).reshape(K, F * T, C)
    vm = v.reshape(C, K, H * W).transpose(1, 0, 2)
    return (am @ vm).reshape(K, F, T, H, W)


def pairwise_volumes(A, V) -> Tensor:
    """Volumes for every (audio i, image j): ``[B_a, B_v, K, F, T, H, W]``."""
    A, V = _t(A), _t(V)
    Ba, C, K, F, T = A.shape
    Bv, Cv, Kv, H, W = V.shape
    if (C, K) != (Cv, Kv):
        raise ShapeError(f"channel/head extents differ: {A.shape} vs {V.shape}")
    am = A.transpose(2, 0, 3, 4, 1).reshape(K, Ba * F * T, C)
    vm = V.transpose(2, 1, 0, 3, 4).reshape(K, C, Bv * H * W)
    S = (am @ vm).reshape(K, Ba, F, T, Bv, H, W)
    return S.transpose(1, 4, 0, 2, 3, 5, 6)


def paired_volumes(A, V) -> Tensor:
    """Volumes of matched pairs only: ``[B, K, F, T, H, W]``."""
    A, V = _t(A), _t(V)
    B, C, K, F, T = A.shape
    Bv, Cv, Kv, H, W = V.shape
    if (B, C, K) != (Bv, Cv, Kv):
        raise ShapeError(f"batch/channel/head extents differ: {A.shape} vs {V.shape}")
    am = A.transpose(0, 2, 3, 4, 1).reshape(B * K, F * T, C)
    vm = V.transpose(0, 2, 1, 3, 4).reshape(B * K, C, H * W)
    return (am @ vm).reshape(B, K, F, T, H, W)


def aggregate(S, mode) -> Tensor:
    """Collapse the head axis (fifth from the end).

    ``mode`` is ``"max"``, ``"sum"``, an int head index, or one of
    :data:`HEAD_MODES`.
    """
    S = _t(S)
    if S.ndim < 5:
        raise ShapeError(f"volume must have rank >= 5, got {S.shape}")
    K = S.shape[-5]
    mode = {"total-max": "max", "total-sum": "sum", "sound": 0, "speech": 1}.get(mode, mode)
    if mode == "max":
        return S.max(axes=S.ndim - 5)
    if mode == "sum":
        return S.sum(axes=S.ndim - 5)
    if isinstance(mode, (int, np.integer)) and not isinstance(mode, bool):
        if not 0 <= mode < K:
            raise ValueError(f"head index {mode} invalid for K={K}")
        index = (Ellipsis, int(mode), slice(None), slice(None), slice(None), slice(None))
        return S[index]
    raise ValueError(f"unknown aggregation mode {mode!r}")


def pooled_score(S_agg) -> Tensor:
    """Spatial max, then mean over frequency and time: ``[..., F,T,H,W] -> [...]``."""
    S_agg = _t(S_agg)
    if S_agg.ndim < 4:
        raise ShapeError(f"aggregated volume must have rank >= 4, got {S_agg.shape}")
    n = S_agg.ndim
    return S_agg.max(axes=(n - 2, n - 1)).mean(axes=(n - 4, n - 3))


def heatmap(S_agg, frame_range: tuple[int, int] | None = None) -> np.ndarray:
    """Mean over frequency and the frames in ``[t0, t1)`` -> ``[H, W]``."""
    S = S_agg.data if isinstance(S_agg, Tensor) else np.asarray(S_agg)
    if S.ndim != 4:
        raise ShapeError(f"expected [F,T,H,W], got {S.shape}")
    T = S.shape[1]
    t0, t1 = (0, T) if frame_range is None else (int(frame_range[0]), int(frame_range[1]))
    if not 0 <= t0 < t1 <= T:
        raise ValueError(f"frame range [{t0}, {t1}) empty or outside [0, {T})")
    return S[:, t0:t1].mean(axis=(0, 1))


def feature_frames(t0: int, t1: int, patch_t: int, T: int) -> tuple[int, int]:
    """Map an input-frame interval to the feature frames it touches."""
    a = max(0, t0 // patch_t)
    b = min(T, -(-t1 // patch_t))
    return a, max(b, a + 1)


def upsample_bilinear(m: np.ndarray, out_hw: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape
    H, W = out_hw

    def coords(n_in, n_out):
        x = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        x = np.clip(x, 0, n_in - 1)
        lo = np.floor(x).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, x - lo

    y0, y1, fy = coords(h, H)
    x0, x1, fx = coords(w, W)
    top = m[y0][:, x0] * (1 - fx) + m[y0][:, x1] * fx
    bot = m[y1][:, x0] * (1 - fx) + m[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def write_pgm(path: str | Path, m: np.ndarray) -> None:
    """8-bit binary PGM (P5), min-max normalised."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    scaled = np.zeros_like(m) if hi <= lo else (m - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())
