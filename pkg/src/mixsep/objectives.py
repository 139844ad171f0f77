"""Contrastive objectives and the stability regularisers."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diffmath as dm
from .diffmath import ShapeError, Tensor
from .model import SOUND_HEAD, SPEECH_HEAD
from .simvol import aggregate, pairwise_volumes, pooled_score


@dataclass
class LossWeights:
    cor: float = 1.0
    dis: float = 1.0
    disreg: float = 0.05
    splice: float = 0.01
    cal: float = 0.1
    nonneg: float = 0.01
    tv: float = 0.01

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if val < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {val}")

    @classmethod
    def zero_regularizers(cls, **kw) -> "LossWeights":
        base = dict(disreg=0.0, splice=0.0, cal=0.0, nonneg=0.0, tv=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class BatchFeatures:
    """Encoded batch: clean sound/speech, their mixture, and both image sets.

    Audio tensors are ``[B, C, K, F, T]``, image tensors ``[B, C, K, H, W]``.
    """

    aA: Tensor
    aP: Tensor
    am: Tensor
    vA: Tensor
    vP: Tensor

    def __post_init__(self):
        sizes = {t.shape[0] for t in (self.aA, self.aP, self.am, self.vA, self.vP)}
        if len(sizes) != 1:
            raise ShapeError(f"feature batches disagree in size: {sorted(sizes)}")

    @property
    def B(self) -> int:
        return self.aA.shape[0]


@dataclass
class RegInputs:
    """Per-step inputs of the regularisers that are not features."""

    splice_sound: np.ndarray | None = None   # [B, T] soft masks at feature resolution
    splice_speech: np.ndarray | None = None
    nonneg_seed: int = 0
    omega: int = 64


def _diag(M: Tensor) -> Tensor:
    B = M.shape[0]
    return M.take(np.arange(B) * (B + 1))


def infonce_symmetric(scores, tau) -> Tensor:
    """Mean of the audio->image and image->audio InfoNCE losses.

    ``scores[i, j]`` is the similarity of audio ``i`` and image ``j``.
    """
    scores = scores if isinstance(scores, Tensor) else Tensor(scores)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ShapeError(f"score matrix must be square, got {scores.shape}")
    if scores.shape[0] < 2:
        raise ShapeError("InfoNCE needs a batch of at least 2")
    tau_val = tau.data if isinstance(tau, Tensor) else tau
    if not np.all(np.asarray(tau_val) > 0):
        raise ValueError(f"temperature must be positive, got {float(np.asarray(tau_val))}")
    logits = scores / tau
    a2v = _diag(dm.log_softmax(logits, axis=1)).mean()
    v2a = _diag(dm.log_softmax(logits.transpose(), axis=1)).mean()
    return (a2v + v2a) * -0.5


def score_matrix(A: Tensor, V: Tensor, mode) -> Tensor:
    """Pooled score of every (audio i, image j) under a head aggregation."""
    return pooled_score(aggregate(pairwise_volumes(A, V), mode))


def correspondence_loss(batch: BatchFeatures, tau, volumes: dict | None = None) -> Tensor:
    """InfoNCE of clean sound and clean speech against their images, heads max-pooled."""
    SA = volumes["A"] if volumes else pairwise_volumes(batch.aA, batch.vA)
    SP = volumes["P"] if volumes else pairwise_volumes(batch.aP, batch.vP)
    return (infonce_symmetric(pooled_score(aggregate(SA, "max")), tau)
            + infonce_symmetric(pooled_score(aggregate(SP, "max")), tau))


def disentanglement_loss(batch: BatchFeatures, tau, volumes: dict | None = None) -> Tensor:
    """InfoNCE of the mixture's sound head vs sound images and speech head vs speech images."""
    SmA = volumes["mA"] if volumes else pairwise_volumes(batch.am, batch.vA)
    SmP = volumes["mP"] if volumes else pairwise_volumes(batch.am, batch.vP)
    return (infonce_symmetric(pooled_score(aggregate(SmA, SOUND_HEAD)), tau)
            + infonce_symmetric(pooled_score(aggregate(SmP, SPEECH_HEAD)), tau))


def disentanglement_regularizer(S) -> Tensor:
    """Mean absolute product of the two heads of ``S [..., 2, F, T, H, W]``."""
    S = S if isinstance(S, Tensor) else Tensor(S)
    if S.ndim < 5 or S.shape[-5] != 2:
        raise ShapeError(f"disentanglement regulariser needs K=2 on axis -5, got {S.shape}")
    return (aggregate(S, 0) * aggregate(S, 1)).abs().mean()


def splice_regularizer(S_agg, splice_mask, eps: float = 1e-8) -> Tensor:
    """Mean of ``S**2`` weighted by the splice mask along time.

    ``S_agg`` is ``[..., T, H, W]``; ``splice_mask`` broadcasts against
    ``S_agg.shape[:-2]``.
    """
    S = S_agg if isinstance(S_agg, Tensor) else Tensor(S_agg)
    m = np.asarray(splice_mask, dtype=S.dtype)
    w = np.broadcast_to(m[..., None, None], S.shape).astype(S.dtype)
    total = float(w.sum(dtype=np.float64))
    return (S.square() * Tensor(w, dtype=S.dtype)).sum() * (1.0 / max(total, eps))


def calibration_regularizer(tau) -> Tensor:
    """``max(log tau, 0) ** 2``."""
    tau = tau if isinstance(tau, Tensor) else Tensor(np.asarray(tau, dtype=np.float64), dtype=np.float64)
    if not np.all(tau.data > 0):
        raise ValueError("temperature must be positive")
    return tau.log().clamp_min(0.0).square().sum()


def nonneg_regularizer(volumes, omega: int, rng: np.random.Generator) -> Tensor:
    """Mean of ``min(value, 0)**2`` over ``omega`` uniformly sampled coordinates."""
    if omega < 1:
        raise ValueError("omega must be >= 1")
    vols = [v if isinstance(v, Tensor) else Tensor(v) for v in volumes]
    sizes = np.array([v.size for v in vols], dtype=np.int64)
    picks = rng.integers(0, int(sizes.sum()), size=omega)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    parts = []
    for k, v in enumerate(vols):
        sel = picks[(picks >= offsets[k]) & (picks < offsets[k + 1])] - offsets[k]
        if sel.size:
            parts.append(v.take(sel))
    vals = dm.concat(parts) if len(parts) > 1 else parts[0]
    return (-vals).relu().square().sum() * (1.0 / omega)


def tv_regularizer(S_agg) -> Tensor:
    """Mean squared difference between consecutive time steps of ``[..., T, H, W]``."""
    S = S_agg if isinstance(S_agg, Tensor) else Tensor(S_agg)
    if S.ndim < 3 or S.shape[-3] < 2:
        raise ShapeError(f"total variation needs T >= 2 on axis -3, got {S.shape}")
    lead = (slice(None),) * (S.ndim - 3)
    a = S[lead + (slice(0, -1),)]
    b = S[lead + (slice(1, None),)]
    return (a - b).square().mean()


def _positives(S: Tensor) -> Tensor:
    idx = np.arange(S.shape[0])
    return S[idx, idx]


def _negatives(S: Tensor) -> Tensor:
    B = S.shape[0]
    ii, jj = np.nonzero(~np.eye(B, dtype=bool))
    return S[ii, jj]


@dataclass
class LossOutput:
    total: Tensor
    terms: dict[str, float] = field(default_factory=dict)


def total_loss(batch: BatchFeatures, tau, weights: LossWeights,
               reg_inputs: RegInputs | None = None) -> LossOutput:
    """Weighted sum of correspondence, disentanglement and regularisers.

    Terms whose weight is zero are skipped entirely, so with every weight
    but ``cor``/``dis`` at zero the result is exactly ``L_cor + L_dis``.
    """
    reg = reg_inputs or RegInputs()
    vols = {"A": pairwise_volumes(batch.aA, batch.vA), "P": pairwise_volumes(batch.aP, batch.vP),
            "mA": pairwise_volumes(batch.am, batch.vA), "mP": pairwise_volumes(batch.am, batch.vP)}
    terms: dict[str, Tensor] = {}
    total = None

    def add(name: str, weight: float, value: Tensor):
        nonlocal total
        terms[name] = value
        part = value if weight == 1.0 else value * weight
        total = part if total is None else total + part

    if weights.cor > 0:
        add("L_cor", weights.cor, correspondence_loss(batch, tau, vols))
    if weights.dis > 0:
        add("L_dis", weights.dis, disentanglement_loss(batch, tau, vols))
    need_pos = weights.disreg > 0 or weights.splice > 0 or weights.tv > 0
    pos = {k: _positives(v) for k, v in vols.items()} if need_pos else {}
    if weights.disreg > 0:
        value = (disentanglement_regularizer(pos["A"]) + disentanglement_regularizer(pos["P"])
                 + disentanglement_regularizer(pos["mA"]) + disentanglement_regularizer(pos["mP"])) * 0.25
        add("L_DisReg", weights.disreg, value)
    if weights.splice > 0:
        B, K, F, T, H, W = pos["A"].shape
        ms = reg.splice_sound if reg.splice_sound is not None else np.zeros((B, T))
        mp = reg.splice_speech if reg.splice_speech is not None else np.zeros((B, T))
        S = dm.concat([pos["A"], pos["P"]], axis=0).reshape(2 * B, K * F, T, H, W)
        mask = np.concatenate([ms, mp], axis=0)[:, None, :]
        add("L_Splice", weights.splice, splice_regularizer(S, mask))
    if weights.cal > 0:
        add("L_Cal", weights.cal, calibration_regularizer(tau))
    if weights.nonneg > 0:
        rng = np.random.default_rng(reg.nonneg_seed)
        negs = [_negatives(vols[k]) for k in ("A", "P", "mA", "mP")]
        add("L_NonNeg", weights.nonneg, nonneg_regularizer(negs, reg.omega, rng))
    if weights.tv > 0:
        value = (tv_regularizer(pos["A"]) + tv_regularizer(pos["P"])
                 + tv_regularizer(pos["mA"]) + tv_regularizer(pos["mP"])) * 0.25
        add("L_TV", weights.tv, value)
    if total is None:
        raise ValueError("every loss weight is zero")
    breakdown = {k: float(v.data) for k, v in terms.items()}
    breakdown["total"] = float(total.data)
    for k, v in breakdown.items():
        if not math.isfinite(v):
            raise FloatingPointError(f"non-finite loss term {k}: {breakdown}")
    return LossOutput(total, breakdown)
