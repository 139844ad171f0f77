"""Two-stage optimisation: aligner warm-up on L_cor, then end-to-end training."""

from __future__ import annotations

import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import synthworld as sw
from . import diffmath as dm
from .diffmath import Tensor
from .model import MixSepModel, load_opt_state
from .objectives import BatchFeatures, LossWeights, RegInputs, correspondence_loss, disentanglement_loss, total_loss

log = logging.getLogger(__name__)

# reference constants of the full-scale recipe; desk defaults below differ
FULL_SCALE_BATCH_SIZE = 64
FULL_SCALE_WARMUP_STEPS = 3_000
FULL_SCALE_TOTAL_STEPS = 800_000

_BATCH_STREAM = 11
_EPOCH_STREAM = 12


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    batch_size: int = 8
    warmup_steps: int = 200
    total_steps: int = 2000
    lr_warmup: float = 1e-3
    lr_main: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 500
    splice_prob: float = 0.5
    omega: int = 64
    holdout: int = 64
    cor_only: bool = False
    dis_only: bool = False
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.cor_only and self.dis_only:
            raise ValueError("cor_only and dis_only are mutually exclusive")
        if not 0.0 <= self.splice_prob <= 1.0:
            raise ValueError("splice_prob must lie in [0, 1]")
        if self.omega < 1 or self.checkpoint_interval < 1:
            raise ValueError("omega and checkpoint_interval must be >= 1")

    def effective_weights(self) -> LossWeights:
        w = asdict(self.weights)
        if self.cor_only:
            w["dis"] = 0.0
        if self.dis_only:
            w["cor"] = 0.0
        return LossWeights(**w)


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

def optimizer_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                   state: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> None:
    """In-place Adam update of every parameter that has a gradient.

    ``state`` holds ``t`` and per-name ``m``/``v`` moments.
    """
    state["t"] = state.get("t", 0) + 1
    t = state["t"]
    moments = state.setdefault("slots", {})
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        slot = moments.get(name)
        if slot is None:
            slot = moments[name] = {"m": np.zeros_like(p), "v": np.zeros_like(p)}
        m, v = slot["m"], slot["v"]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        update = (lr / c1) * m / (np.sqrt(v / c2) + eps)
        p -= update.astype(p.dtype)


# ---------------------------------------------------------------------------
# data
# ---------------------------------------------------------------------------

@dataclass
class TrainData:
    config: sw.WorldConfig
    sound: sw.Split
    speech: sw.Split
    holdout: int

    @classmethod
    def load(cls, data_dir: str | Path, holdout: int = 64) -> "TrainData":
        manifest = sw.load_manifest(data_dir)
        return cls(sw.config_from_manifest(manifest), sw.load_split(data_dir, "sound"),
                   sw.load_split(data_dir, "speech"), holdout)

    def n_train(self, split: sw.Split) -> int:
        n = len(split) - self.holdout
        if n < 2:
            raise ValueError(f"split {split.name} has {len(split)} samples; holdout {self.holdout} leaves too few")
        return n


@dataclass
class RawBatch:
    images_A: np.ndarray      # [B, 3, H, W]
    audio_A: np.ndarray       # [B, F_a, T_a], possibly spliced
    images_P: np.ndarray
    audio_P: np.ndarray
    mixture: np.ndarray       # clamp(clean sound + clean speech)
    clean_A: np.ndarray
    clean_P: np.ndarray
    splice_A: np.ndarray      # [B, T_a] soft masks
    splice_P: np.ndarray
    index_A: np.ndarray
    index_P: np.ndarray

    @property
    def B(self) -> int:
        return self.images_A.shape[0]


def _draw(seed: int, stream: int, step: int, B: int, n: int) -> np.ndarray:
    """Indices for ``step``: walks seeded per-epoch permutations, reshuffling on wrap."""
    out = np.empty(B, dtype=np.int64)
    for i in range(B):
        pos = step * B + i
        epoch, off = divmod(pos, n)
        perm = sw.make_rng(seed, _EPOCH_STREAM, stream * 1_000_003 + epoch).permutation(n)
        out[i] = perm[off]
    return out


def assemble_batch(data: TrainData, seed: int, step: int, B: int, splice_prob: float = 0.5) -> RawBatch:
    """Draw ``B`` sound pairs and ``B`` speech pairs, pair them index-wise, and mix."""
    idx_A = _draw(seed, 0, step, B, data.n_train(data.sound))
    idx_P = _draw(seed, 1, step, B, data.n_train(data.speech))
    rng = sw.make_rng(seed, _BATCH_STREAM, step)
    snd, sph = data.sound.arrays, data.speech.arrays
    clean_A = snd["audio"][idx_A]
    clean_P = sph["audio"][idx_P]
    mixture = np.clip(clean_A + clean_P, 0.0, 1.0).astype(np.float32)
    T = data.config.T_a
    audio_A, audio_P = clean_A.copy(), clean_P.copy()
    masks = {0: np.zeros((B, T), np.float32), 1: np.zeros((B, T), np.float32)}
    for kind, audio, split in ((0, audio_A, data.sound), (1, audio_P, data.speech)):
        n = data.n_train(split)
        for i in range(B):
            if rng.random() >= splice_prob:
                continue
            donor = int(rng.integers(0, n))
            sig = sw.AudioSignal(audio[i], "sound" if kind == 0 else "speech", np.zeros((2, T), np.float32))
            don = sw.AudioSignal(split.arrays["audio"][donor], sig.kind, np.zeros((2, T), np.float32))
            spliced, m = sw.splice_negative(sig, don, rng)
            audio[i] = spliced.grid
            masks[kind][i] = m
    return RawBatch(snd["image"][idx_A], audio_A, sph["image"][idx_P], audio_P, mixture,
                    clean_A, clean_P, masks[0], masks[1], idx_A, idx_P)


def downsample_mask(mask: np.ndarray, patch_t: int) -> np.ndarray:
    """Average a ``[..., T_a]`` frame mask over each time patch."""
    *lead, T = mask.shape
    return mask.reshape(*lead, T // patch_t, patch_t).mean(axis=-1)


def encode_batch(model: MixSepModel, raw: RawBatch) -> BatchFeatures:
    return BatchFeatures(aA=model.encode_audios(raw.audio_A), aP=model.encode_audios(raw.audio_P),
                         am=model.encode_audios(raw.mixture), vA=model.encode_images(raw.images_A),
                         vP=model.encode_images(raw.images_P))


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------

class Trainer:
    """Owns a model, its optimiser state and the training log."""

    def __init__(self, model: MixSepModel, data: TrainData, config: TrainConfig,
                 out_dir: str | Path | None = None):
        self.model = model
        self.data = data
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.opt_state: dict = {}
        self.phase = "warmup" if config.warmup_steps > 0 else "main"
        self.log_records: list[dict] = []
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)

    # -- checkpoint plumbing ---------------------------------------------------
    def checkpoint(self, name: str) -> Path | None:
        if self.out_dir is None:
            return None
        path = self.out_dir / "checkpoints" / name
        slots = self.opt_state.get("slots", {})
        self.model.save(path, extra={"phase": self.phase, "opt_t": int(self.opt_state.get("t", 0)),
                                     "train_config": asdict(self.config)},
                        opt_state=slots)
        return path

    @classmethod
    def resume(cls, path: str | Path, data: TrainData, config: TrainConfig,
               out_dir: str | Path | None = None) -> "Trainer":
        model, meta = MixSepModel.load(path)
        trainer = cls(model, data, config, out_dir)
        trainer.phase = meta.get("phase", "main")
        names = [n for n, _ in model.named_parameters()]
        slots = load_opt_state(path, names)
        trainer.opt_state = {"t": int(meta.get("opt_t", 0)), "slots": slots}
        return trainer

    def _write_log(self, record: dict) -> None:
        self.log_records.append(record)
        if self.out_dir is not None:
            with open(self.out_dir / "train_log.jsonl", "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")

    # -- one step ----------------------------------------------------------------
    def _step(self, step: int, lr: float, warm: bool) -> dict:
        cfg = self.config
        model = self.model
        raw = assemble_batch(self.data, cfg.seed, step, cfg.batch_size, cfg.splice_prob)
        model.zero_grad()
        feats = encode_batch(model, raw)
        if warm:
            loss = (disentanglement_loss(feats, model.tau) if cfg.dis_only
                    else correspondence_loss(feats, model.tau))
            terms = {"L_dis" if cfg.dis_only else "L_cor": float(loss.data)}
            terms["total"] = terms[next(iter(terms))]
            if not math.isfinite(terms["total"]):
                raise TrainingError(f"non-finite loss at step {step}: {terms}")
        else:
            pt = model.config.audio_patch_t
            reg = RegInputs(downsample_mask(raw.splice_A, pt), downsample_mask(raw.splice_P, pt),
                            nonneg_seed=int(sw.make_rng(cfg.seed, _BATCH_STREAM + 1, step).integers(2**31)),
                            omega=cfg.omega)
            try:
                out = total_loss(feats, model.tau, cfg.effective_weights(), reg)
            except FloatingPointError as exc:
                raise TrainingError(f"step {step}: {exc}") from exc
            loss, terms = out.total, out.terms
        loss.backward()
        trainable = model.trainable()
        params = {n: p.data for n, p in trainable}
        grads = {n: p.grad for n, p in trainable if p.grad is not None}
        optimizer_step(params, grads, self.opt_state, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        model.clamp_tau()
        model.step = step + 1
        record = {"phase": "warmup" if warm else "main", "step": step, "tau": float(model.tau.data)}
        record.update(terms)
        self._write_log(record)
        return record

    def warmup(self) -> None:
        """Aligner-only steps on L_cor with frozen backbones."""
        cfg = self.config
        if self.phase != "warmup":
            return
        self.model.freeze_backbones(True)
        for step in range(self.model.step, cfg.warmup_steps):
            self._step(step, cfg.lr_warmup, warm=True)
            if (step + 1) % cfg.checkpoint_interval == 0:
                self.checkpoint(f"step{step + 1:06d}")
        self.model.freeze_backbones(False)
        self.phase = "main"
        self.opt_state = {}
        if cfg.warmup_steps > 0:
            self.checkpoint("warmup")

    def train(self) -> None:
        """End-to-end steps on the total objective, checkpointing on interval and at the end."""
        cfg = self.config
        if self.phase == "warmup":
            self.warmup()
        self.model.freeze_backbones(False)
        end = cfg.warmup_steps + cfg.total_steps
        for step in range(self.model.step, end):
            self._step(step, cfg.lr_main, warm=False)
            if (step + 1 - cfg.warmup_steps) % cfg.checkpoint_interval == 0:
                self.checkpoint(f"step{step + 1:06d}")
        self.checkpoint("final")


def warmup(model: MixSepModel, data: TrainData, config: TrainConfig, out_dir=None) -> Trainer:
    trainer = Trainer(model, data, config, out_dir)
    trainer.warmup()
    return trainer


def train(model: MixSepModel, data: TrainData, config: TrainConfig, out_dir=None) -> Trainer:
    trainer = Trainer(model, data, config, out_dir)
    trainer.train()
    return trainer


def fixed_batch_loss(model: MixSepModel, data: TrainData, B: int = 8, seed: int = 12345) -> float:
    """L_cor on a fixed batch drawn from the held-out tail of both splits."""
    nA, nP = len(data.sound), len(data.speech)
    idx_A = np.arange(nA - data.holdout, nA)[:B]
    idx_P = np.arange(nP - data.holdout, nP)[:B]
    snd, sph = data.sound.arrays, data.speech.arrays
    mixture = np.clip(snd["audio"][idx_A] + sph["audio"][idx_P], 0, 1)
    feats = BatchFeatures(model.encode_audios(snd["audio"][idx_A]), model.encode_audios(sph["audio"][idx_P]),
                          model.encode_audios(mixture), model.encode_images(snd["image"][idx_A]),
                          model.encode_images(sph["image"][idx_P]))
    return float(correspondence_loss(feats, Tensor(model.tau.data)).data)


# ---------------------------------------------------------------------------
# gradient oracle on a tiny batch
# ---------------------------------------------------------------------------

def grad_check_batch(world: sw.WorldConfig, seed: int = 0, B: int = 2) -> RawBatch:
    """A ``B``-pair batch rendered straight from the world, every clip spliced."""
    pairs = {s: [sw.gen_pair(world, s, i)[0] for i in range(B + 1)] for s in ("sound", "speech")}
    rng = sw.make_rng(seed, _BATCH_STREAM + 2, 0)
    T = world.T_a
    stacked = {s: {k: np.stack([p[k] for p in pairs[s][:B]]) for k in ("image", "audio")} for s in pairs}
    clean_A, clean_P = stacked["sound"]["audio"], stacked["speech"]["audio"]
    spliced, masks = {}, {}
    for s, kind in (("sound", sw.SOUND), ("speech", sw.SPEECH)):
        donor = sw.AudioSignal(pairs[s][B]["audio"], kind, np.zeros((2, T), np.float32))
        outs = [sw.splice_negative(sw.AudioSignal(a, kind, np.zeros((2, T), np.float32)), donor, rng)
                for a in stacked[s]["audio"]]
        spliced[s] = np.stack([o[0].grid for o in outs])
        masks[s] = np.stack([o[1] for o in outs])
    mixture = np.clip(clean_A + clean_P, 0.0, 1.0).astype(np.float32)
    idx = np.arange(B)
    return RawBatch(stacked["sound"]["image"], spliced["sound"], stacked["speech"]["image"], spliced["speech"],
                    mixture, clean_A, clean_P, masks["sound"], masks["speech"], idx, idx)


def gradient_check(model: MixSepModel, raw: RawBatch, weights: LossWeights | None = None,
                   coords: int | None = 24, eps: float = 1e-5, seed: int = 0, omega: int = 64) -> dict[str, float]:
    """Worst finite-difference relative error of L_cor, L_dis and L_total.

    Gradients are taken with respect to every live parameter and the temperature.
    ``coords`` limits the number of perturbed coordinates per tensor.
    """
    weights = weights or LossWeights()
    names = [n for n, _ in model.named_parameters()]
    values = [p for _, p in model.named_parameters()]
    pt = model.config.audio_patch_t
    reg = RegInputs(downsample_mask(raw.splice_A, pt), downsample_mask(raw.splice_P, pt),
                    nonneg_seed=seed, omega=omega)
    saved = model.params

    def run(which: str):
        def f(*leaves):
            model.params = OrderedDict(saved)
            model.params.update(zip(names[:-1], leaves[:-1]))
            try:
                feats = encode_batch(model, raw)
                tau = leaves[-1]
                if which == "L_cor":
                    return correspondence_loss(feats, tau)
                if which == "L_dis":
                    return disentanglement_loss(feats, tau)
                return total_loss(feats, tau, weights, reg).total
            finally:
                model.params = saved
        return dm.finite_diff_check(f, values, eps=eps, coords=coords, seed=seed)

    return {which: run(which) for which in ("L_cor", "L_dis", "L_total")}
