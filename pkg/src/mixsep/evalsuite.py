"""Evaluation protocols: grounding, simultaneous grounding, retrieval, disentanglement."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import synthworld as sw
from .diffmath import Tensor
from .model import SOUND_HEAD, SPEECH_HEAD, MixSepModel
from .simvol import (HEAD_MODES, aggregate, feature_frames, heatmap, paired_volumes, pairwise_volumes,
                     pooled_score, upsample_bilinear)

_DISTRACTOR_STREAM = 21
N_SWEEP = 19


@dataclass
class MetricsReport:
    task: str
    head_mode: str
    n: int = 0
    mAP: float | None = None
    mIoU: float | None = None
    iou_threshold: float | None = None
    recall: dict | None = None
    pred_dis: float | None = None
    act_dis: float | None = None
    skipped: int = 0
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


# ---------------------------------------------------------------------------
# metric primitives
# ---------------------------------------------------------------------------

def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """AP with pixels ranked by score; tied scores share one operating point.

    Each positive contributes the precision over all pixels scoring at least
    as high as it.  The sum is taken with ``math.fsum`` so the result does not
    depend on summation order.
    """
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(positives).reshape(-1) > 0.5
    n_pos = int(y.sum())
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive")
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    # last index of each run of tied scores
    ends = np.r_[np.nonzero(np.diff(s_sorted))[0], s_sorted.size - 1]
    cum_tp = np.cumsum(y_sorted)[ends]
    counts = ends + 1
    pos_in_group = np.diff(np.r_[0, cum_tp])
    precisions = cum_tp / counts
    return math.fsum(np.repeat(precisions, pos_in_group).tolist()) / n_pos


def iou(pred: np.ndarray, mask: np.ndarray) -> float:
    p = np.asarray(pred, dtype=bool)
    m = np.asarray(mask) > 0.5
    union = np.logical_or(p, m).sum()
    return float(np.logical_and(p, m).sum() / union) if union else 1.0


def segmentation_metrics(heatmaps, masks) -> dict:
    """Per-image AP averaged over images, and mean IoU at the best shared threshold.

    Candidate thresholds are the 5th..95th percentiles (19 steps) of all
    heatmap scores pooled over the dataset, taken as actual score values so
    the sweep depends only on score ranks; a pixel is predicted foreground
    when its score is strictly above the threshold.  Samples with an empty
    mask are skipped and counted.
    """
    heatmaps = [np.asarray(h, dtype=np.float64) for h in heatmaps]
    masks = [np.asarray(m) for m in masks]
    if len(heatmaps) != len(masks):
        raise ValueError(f"{len(heatmaps)} heatmaps but {len(masks)} masks")
    keep, skipped = [], 0
    for h, m in zip(heatmaps, masks):
        if h.shape != m.shape:
            raise ValueError(f"heatmap shape {h.shape} != mask shape {m.shape}")
        if (m > 0.5).any():
            keep.append((h, m))
        else:
            skipped += 1
    if not keep:
        return {"mAP": float("nan"), "mIoU": float("nan"), "threshold": float("nan"), "n": 0, "skipped": skipped}
    aps = [average_precision(h, m) for h, m in keep]
    pooled = np.concatenate([h.reshape(-1) for h, _ in keep])
    qs = np.linspace(5, 95, N_SWEEP)
    thresholds = np.unique(np.percentile(pooled, qs, method="lower"))
    best, best_thr = -1.0, float(thresholds[0])
    for thr in thresholds:
        miou = float(np.mean([iou(h > thr, m) for h, m in keep]))
        if miou > best:
            best, best_thr = miou, float(thr)
    return {"mAP": float(np.mean(aps)), "mIoU": best, "threshold": best_thr, "n": len(keep), "skipped": skipped}


def target_ranks(scores: np.ndarray, axis: int) -> np.ndarray:
    """0-based rank of the diagonal entry along ``axis``; ties favour lower indices."""
    S = np.asarray(scores, dtype=np.float64)
    if axis == 0:
        S = S.T
    B = S.shape[0]
    diag = S[np.arange(B), np.arange(B)][:, None]
    cols = np.arange(S.shape[1])[None, :]
    ahead = (S > diag) | ((S == diag) & (cols < np.arange(B)[:, None]))
    return ahead.sum(axis=1)


def retrieval(scores, k: int) -> tuple[float, float]:
    """``(R@k image->audio, R@k audio->image)`` for ``scores[audio, image]``."""
    S = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ValueError(f"score matrix must be square, got {S.shape}")
    if not 1 <= k <= S.shape[0]:
        raise ValueError(f"k={k} outside [1, {S.shape[0]}]")
    i2a = float(np.mean(target_ranks(S, axis=0) < k))
    a2i = float(np.mean(target_ranks(S, axis=1) < k))
    return i2a, a2i


def pred_dis_from_volumes(volumes, labels) -> float:
    """Accuracy of predicting the audio type as the head with larger mean |S|."""
    vols = np.asarray(volumes, dtype=np.float64)
    strength = np.abs(vols).reshape(vols.shape[0], vols.shape[1], -1).mean(axis=2)
    pred = strength.argmax(axis=1)
    return float(np.mean(pred == np.asarray(labels)))


def act_dis_from_scores(head_scores, labels) -> float:
    """One minus the rate at which the wrong-type head is active.

    ``head_scores[i, k]`` is the pooled score of head ``k`` on sample ``i``'s
    own pair.  A head is active when it exceeds its median over the set.
    """
    hs = np.asarray(head_scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    theta = np.median(hs, axis=0)
    wrong = 1 - labels
    wrong_active = hs[np.arange(len(labels)), wrong] > theta[wrong]
    return float(1.0 - wrong_active.mean())


# ---------------------------------------------------------------------------
# model-level protocols
# ---------------------------------------------------------------------------

def holdout_indices(n: int, holdout: int = 64) -> np.ndarray:
    return np.arange(max(0, n - holdout), n)


def _chunks(n: int, size: int = 64):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


def _paired_agg(model: MixSepModel, audios: np.ndarray, images: np.ndarray, mode) -> np.ndarray:
    out = []
    for sl in _chunks(len(audios)):
        S = paired_volumes(model.encode_audios(audios[sl]), model.encode_images(images[sl]))
        out.append(aggregate(S, mode).data if mode is not None else S.data)
    return np.concatenate(out)


def _distractor(config: sw.WorldConfig, kind: str, exclude: list[int], seed: int, index: int) -> np.ndarray:
    rng = sw.make_rng(seed, _DISTRACTOR_STREAM, index)
    choices = [c for c in range(config.n_classes) if c not in exclude]
    cls = int(choices[int(rng.integers(0, len(choices)))])
    lvl = int(rng.integers(0, config.n_levels))
    render = sw.render_sound if kind == sw.SOUND else sw.render_speech
    return render(cls, rng, config, lvl).grid


def prepare_audio(split: sw.Split, config: sw.WorldConfig, indices, mixed: bool | str, seed: int) -> np.ndarray:
    """Clean audio of the split, optionally mixed with an off-screen distractor.

    The distractor is of the opposite kind and of a class not in the scene.
    Passing ``mixed="silence"`` mixes with silence instead.
    """
    audio = split.arrays["audio"][indices]
    if not mixed:
        return audio
    other = sw.SPEECH if split.name == "sound" else sw.SOUND
    out = np.empty_like(audio)
    for j, i in enumerate(indices):
        if mixed == "silence":
            d = np.zeros_like(audio[j])
        else:
            d = _distractor(config, other, [split.meta[i]["class"]], seed, int(i))
        out[j] = np.clip(audio[j] + d, 0.0, 1.0)
    return out


def _speech_frames(spans: np.ndarray, patch_t: int, T: int):
    t0 = int(spans[:, 1].min())
    t1 = int(spans[:, 2].max())
    return feature_frames(t0, t1, patch_t, T)


def _heat(agg: np.ndarray, frames, hw) -> np.ndarray:
    m = upsample_bilinear(heatmap(agg, frames), hw)
    lo, hi = m.min(), m.max()
    return (m - lo) / (hi - lo) if hi > lo else np.zeros_like(m)


def eval_grounding(model: MixSepModel, split: sw.Split, config: sw.WorldConfig, head_mode: str,
                   mixed: bool | str = False, indices=None, seed: int = 0) -> MetricsReport:
    """Heatmaps of every sample's own pair scored against its object mask."""
    if head_mode not in HEAD_MODES:
        raise ValueError(f"head mode must be one of {HEAD_MODES}")
    indices = holdout_indices(len(split)) if indices is None else np.asarray(indices)
    audio = prepare_audio(split, config, indices, mixed, seed)
    aggs = _paired_agg(model, audio, split.arrays["image"][indices], head_mode)
    hw = (config.H_img, config.W_img)
    heats = []
    for j, i in enumerate(indices):
        frames = None
        if split.name == "speech":
            frames = _speech_frames(split.spans["spans"][i], model.config.audio_patch_t, aggs.shape[2])
        heats.append(_heat(aggs[j], frames, hw))
    seg = segmentation_metrics(heats, split.arrays["mask"][indices])
    kind = ("mixed-with-offscreen" if mixed is True else "mixed-with-silence" if mixed == "silence"
            else f"clean-{split.name}")
    return MetricsReport("grounding", head_mode, n=seg["n"], mAP=seg["mAP"], mIoU=seg["mIoU"],
                         iou_threshold=seg["threshold"], skipped=seg["skipped"],
                         notes={"split": split.name, "audio": kind, "mAP_pooling": "per-image mean",
                                "iou_threshold_sweep": "dataset-level 5-95th percentile, 19 steps"})


def eval_simultaneous(model: MixSepModel, split: sw.Split, config: sw.WorldConfig,
                      head_mode: str = "specialized", swap_masks: bool = False) -> dict[str, MetricsReport]:
    """Both orderings of every two-object scene, one mixture each.

    The sound heatmap is scored against the sounding object and the speech
    heatmap (over the spoken frames) against the named object.
    """
    n = len(split)
    arr = split.arrays
    hw = (config.H_img, config.W_img)
    modes = {"sound": SOUND_HEAD, "speech": SPEECH_HEAD} if head_mode == "specialized" else \
        {"sound": head_mode, "speech": head_mode}
    heats = {"sound": [], "speech": []}
    masks = {"sound": [], "speech": []}
    for o in (0, 1):
        S_all = _paired_agg(model, arr[f"mix{o}"], arr["image"], None)
        for i in range(n):
            snd_obj, sph_obj = o, 1 - o
            if swap_masks:
                snd_obj, sph_obj = sph_obj, snd_obj
            agg = aggregate(S_all[i], modes["sound"]).data
            heats["sound"].append(_heat(agg, None, hw))
            masks["sound"].append(arr[f"mask{snd_obj}"][i])
            agg = aggregate(S_all[i], modes["speech"]).data
            frames = _speech_frames(split.spans[f"spans{1 - o}"][i], model.config.audio_patch_t, agg.shape[1])
            heats["speech"].append(_heat(agg, frames, hw))
            masks["speech"].append(arr[f"mask{sph_obj}"][i])
    out = {}
    for kind in ("sound", "speech"):
        seg = segmentation_metrics(heats[kind], masks[kind])
        out[kind] = MetricsReport("simultaneous", head_mode, n=seg["n"], mAP=seg["mAP"], mIoU=seg["mIoU"],
                                  iou_threshold=seg["threshold"], skipped=seg["skipped"],
                                  notes={"audio_type": kind, "orderings": 2, "scenes": n})
    return out


def retrieval_scores(model: MixSepModel, audios: np.ndarray, images: np.ndarray, head_mode: str) -> np.ndarray:
    mode = {"total-sum": "sum", "total-max": "max", "sound": SOUND_HEAD, "speech": SPEECH_HEAD}[head_mode]
    A = model.encode_audios(audios)
    V = model.encode_images(images)
    return pooled_score(aggregate(pairwise_volumes(A, V), mode)).data


def eval_retrieval(model: MixSepModel, split: sw.Split, config: sw.WorldConfig, head_mode: str,
                   mixed: bool | str = False, k: int = 10, indices=None, seed: int = 0) -> MetricsReport:
    """Cross-modal retrieval inside a gallery (default: the 64 held-out samples)."""
    if head_mode not in HEAD_MODES:
        raise ValueError(f"head mode must be one of {HEAD_MODES}")
    indices = holdout_indices(len(split)) if indices is None else np.asarray(indices)
    audio = prepare_audio(split, config, indices, mixed, seed)
    S = retrieval_scores(model, audio, split.arrays["image"][indices], head_mode)
    recall = {}
    for kk in sorted({1, 5, k}):
        if kk <= len(indices):
            i2a, a2i = retrieval(S, kk)
            recall[f"R@{kk}"] = {"I2A": i2a, "A2I": a2i}
    return MetricsReport("retrieval", head_mode, n=len(indices), recall=recall,
                         notes={"split": split.name, "mixed": bool(mixed), "gallery": len(indices),
                                "chance_R@k": k / len(indices)})


def positive_volumes(model: MixSepModel, split: sw.Split, indices) -> np.ndarray:
    return _paired_agg(model, split.arrays["audio"][indices], split.arrays["image"][indices], None)


def eval_disentangle(model: MixSepModel, sound: sw.Split, speech: sw.Split, indices_sound=None,
                     indices_speech=None) -> MetricsReport:
    """Pred.Dis and Act.Dis on clean sound and clean speech pairs."""
    i_s = holdout_indices(len(sound)) if indices_sound is None else np.asarray(indices_sound)
    i_p = holdout_indices(len(speech)) if indices_speech is None else np.asarray(indices_speech)
    vols = np.concatenate([positive_volumes(model, sound, i_s), positive_volumes(model, speech, i_p)])
    labels = np.r_[np.zeros(len(i_s), int), np.ones(len(i_p), int)]
    head_scores = np.stack([pooled_score(vols[:, k]).data for k in range(vols.shape[1])], axis=1)
    return MetricsReport("disentangle", "per-head", n=len(labels),
                         pred_dis=pred_dis_from_volumes(vols, labels),
                         act_dis=act_dis_from_scores(head_scores, labels),
                         notes={"act_threshold": "per-head median pooled score"})
