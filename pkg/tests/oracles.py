"""Slow, obviously-correct reference implementations used by the tests."""

import math

import numpy as np


def volume_loops(a, v):
    C, K, F, T = a.shape
    _, _, H, W = v.shape
    S = np.zeros((K, F, T, H, W))
    for k in range(K):
        for f in range(F):
            for t in range(T):
                for h in range(H):
                    for w in range(W):
                        S[k, f, t, h, w] = sum(float(a[c, k, f, t]) * float(v[c, k, h, w]) for c in range(C))
    return S


def pooled_loops(S):
    F, T, H, W = S.shape
    total = 0.0
    for f in range(F):
        for t in range(T):
            best = -math.inf
            for h in range(H):
                for w in range(W):
                    best = max(best, float(S[f, t, h, w]))
            total += best
    return total / (F * T)


def heatmap_loops(S, t0, t1):
    F, T, H, W = S.shape
    out = np.zeros((H, W))
    for h in range(H):
        for w in range(W):
            acc = 0.0
            for f in range(F):
                for t in range(t0, t1):
                    acc += float(S[f, t, h, w])
            out[h, w] = acc / (F * (t1 - t0))
    return out


def ap_loops(scores, positives):
    """Mean over positives of the precision among pixels scoring at least as high."""
    s = [float(x) for x in np.ravel(scores)]
    y = [bool(x > 0.5) for x in np.ravel(positives)]
    precisions = []
    for i, si in enumerate(s):
        if not y[i]:
            continue
        above = [j for j in range(len(s)) if s[j] >= si]
        hits = sum(1 for j in above if y[j])
        precisions.append(hits / len(above))
    return math.fsum(precisions) / len(precisions)


def infonce_loops(scores, tau):
    """Symmetric InfoNCE: mean of the row-wise and column-wise cross-entropies."""
    S = np.asarray(scores, dtype=np.float64) / tau
    B = S.shape[0]
    a2i = i2a = 0.0
    for i in range(B):
        a2i += -(S[i, i] - math.log(sum(math.exp(S[i, j]) for j in range(B))))
        i2a += -(S[i, i] - math.log(sum(math.exp(S[j, i]) for j in range(B))))
    return (a2i + i2a) / (2 * B)
