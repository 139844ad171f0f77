"""Patch-perceptron encoders with K-headed aligners.

Both modalities go through the same recipe: cut the input into
non-overlapping patches, run a two-layer perceptron on each patch (the
backbone), then an aligner made of a channel-wise layernorm and a 1x1 linear
map that produces ``C * K`` channels.  The result is laid out as
``[C, K, ...spatial]`` per sample.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import diffmath as dm
from .diffmath import Tensor

SOUND_HEAD = 0   # N
SPEECH_HEAD = 1  # N'
TAU_MIN = 1e-3


@dataclass
class ModelConfig:
    C_D: int = 32
    C_H: int = 32
    C: int = 16
    K: int = 2
    patch: int = 8
    audio_patch_f: int = 8
    audio_patch_t: int = 8
    tau_init: float = 1.0
    silence_ref: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.K != 2:
            raise ValueError("the aligner has exactly two heads (sound, speech)")
        for name in ("C_D", "C_H", "C", "patch", "audio_patch_f", "audio_patch_t"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.tau_init <= 0:
            raise ValueError("tau_init must be positive")


def patchify(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    """``[B, ch, Y, X]`` -> ``[B, Y/ph, X/pw, ch*ph*pw]``."""
    B, ch, Y, X = x.shape
    if Y % ph or X % pw:
        raise ValueError(f"extents {(Y, X)} not divisible by patch {(ph, pw)}")
    x = x.reshape(B, ch, Y // ph, ph, X // pw, pw)
    return np.ascontiguousarray(x.transpose(0, 2, 4, 1, 3, 5)).reshape(B, Y // ph, X // pw, ch * ph * pw)


class MixSepModel:
    """Visual and audio encoders, their aligners, and the temperature."""

    BACKBONE_PREFIXES = ("visual.backbone.", "audio.backbone.")

    def __init__(self, config: ModelConfig | None = None):
        self.config = config or ModelConfig()
        c = self.config
        rng = np.random.default_rng(c.seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        v_in = 3 * c.patch * c.patch
        a_in = c.audio_patch_f * c.audio_patch_t
        for mod, d_in, width in (("visual", v_in, c.C_D), ("audio", a_in, c.C_H)):
            self._linear(rng, f"{mod}.backbone.fc1", d_in, width)
            self._linear(rng, f"{mod}.backbone.fc2", width, width)
            self.params[f"{mod}.aligner.norm.gain"] = Tensor(np.ones(width), requires_grad=True)
            self.params[f"{mod}.aligner.norm.bias"] = Tensor(np.zeros(width), requires_grad=True)
            self._linear(rng, f"{mod}.aligner.proj", width, c.C * c.K)
        self.tau = Tensor(np.asarray(c.tau_init), requires_grad=True)
        for name in self.inert_parameters():
            self.params[name].requires_grad = False
        self.frozen = False
        self.step = 0

    def _linear(self, rng, name: str, d_in: int, d_out: int) -> None:
        bound = 1.0 / np.sqrt(d_in)
        self.params[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, (d_in, d_out)), requires_grad=True)
        self.params[f"{name}.bias"] = Tensor(rng.uniform(-bound, bound, d_out), requires_grad=True)

    # -- parameter bookkeeping ---------------------------------------------
    def is_backbone(self, name: str) -> bool:
        return name.startswith(self.BACKBONE_PREFIXES)

    def inert_parameters(self) -> tuple[str, ...]:
        """Parameters that cancel out of every output and are never trained.

        Under the silence reference the audio aligner's additive terms appear
        in both the patch response and the silence response.
        """
        if not self.config.silence_ref:
            return ()
        return ("audio.aligner.norm.bias", "audio.aligner.proj.bias")

    def freeze_backbones(self, flag: bool) -> None:
        self.frozen = bool(flag)
        for name, p in self.params.items():
            if self.is_backbone(name):
                p.requires_grad = not self.frozen

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        """Every tensor the optimiser may touch, temperature last."""
        inert = self.inert_parameters()
        return [(n, p) for n, p in self.params.items() if n not in inert] + [("tau", self.tau)]

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if p.requires_grad]

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.grad = None

    def n_parameters(self) -> int:
        return sum(p.size for _, p in self.named_parameters())

    # -- forward -------------------------------------------------------------
    def _mlp_align(self, mod: str, patches: np.ndarray, silence_ref: bool = False) -> Tensor:
        """``[B, Y, X, d_in]`` patches -> aligned ``[B, C, K, Y, X]``.

        With ``silence_ref`` the response to an all-zero patch is subtracted,
        so empty patches map to the zero feature.
        """
        P = self.params
        B, Y, X, d_in = patches.shape
        flat = patches.reshape(B * Y * X, d_in)
        if silence_ref:
            flat = np.concatenate([flat, np.zeros((1, d_in), flat.dtype)])
        x = Tensor(flat, dtype=P[f"{mod}.backbone.fc1.weight"].dtype)
        h = (x @ P[f"{mod}.backbone.fc1.weight"] + P[f"{mod}.backbone.fc1.bias"]).relu()
        h = h @ P[f"{mod}.backbone.fc2.weight"] + P[f"{mod}.backbone.fc2.bias"]
        h = dm.channelwise_layernorm(h, -1, P[f"{mod}.aligner.norm.gain"], P[f"{mod}.aligner.norm.bias"])
        z = h @ P[f"{mod}.aligner.proj.weight"] + P[f"{mod}.aligner.proj.bias"]
        if silence_ref:
            z = z[:-1] - z[-1:]
        c = self.config
        return z.reshape(B, Y, X, c.C, c.K).transpose(0, 3, 4, 1, 2)

    def encode_images(self, images: np.ndarray) -> Tensor:
        """``[B, 3, H_img, W_img]`` -> ``[B, C, K, H, W]``."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[1] != 3:
            raise ValueError(f"expected [B, 3, H, W] images, got {images.shape}")
        p = self.config.patch
        return self._mlp_align("visual", patchify(images, p, p))

    def encode_audios(self, grids: np.ndarray) -> Tensor:
        """``[B, F_a, T_a]`` -> ``[B, C, K, F, T]``."""
        grids = np.asarray(grids, dtype=np.float32)
        if grids.ndim != 3:
            raise ValueError(f"expected [B, F_a, T_a] grids, got {grids.shape}")
        c = self.config
        return self._mlp_align("audio", patchify(grids[:, None], c.audio_patch_f, c.audio_patch_t),
                               silence_ref=c.silence_ref)

    def encode_image(self, image: np.ndarray) -> Tensor:
        """Single image ``[3, H_img, W_img]`` -> ``[C, K, H, W]``."""
        return self.encode_images(np.asarray(image)[None])[0]

    def encode_audio(self, grid: np.ndarray) -> Tensor:
        """Single grid ``[F_a, T_a]`` -> ``[C, K, F, T]``."""
        return self.encode_audios(np.asarray(grid)[None])[0]

    def clamp_tau(self) -> None:
        np.maximum(self.tau.data, TAU_MIN, out=self.tau.data)

    # -- checkpoints -----------------------------------------------------------
    def state_arrays(self) -> OrderedDict[str, np.ndarray]:
        return OrderedDict((n, p.data) for n, p in self.params.items())

    def save(self, path: str | Path, extra: dict | None = None,
             opt_state: dict[str, dict[str, np.ndarray]] | None = None) -> None:
        """Write one tensor file per parameter plus ``params.json``."""
        out = Path(path)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, p in self.params.items():
            dm.save_tensor(out / f"{name}.t32", p.data)
            entries.append({"name": name, "shape": list(p.shape)})
        if opt_state:
            for key, slots in opt_state.items():
                for slot, arr in slots.items():
                    dm.save_tensor(out / f"opt.{slot}.{key}.t32", arr)
        meta = {"params": entries, "tau": float(self.tau.data), "step": int(self.step),
                "model_config": asdict(self.config), "frozen": self.frozen,
                "has_opt_state": bool(opt_state)}
        meta.update(extra or {})
        (out / "params.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> tuple["MixSepModel", dict]:
        src = Path(path)
        meta_path = src / "params.json"
        if not meta_path.is_file():
            raise FileNotFoundError(f"no checkpoint at {src} (missing params.json)")
        meta = json.loads(meta_path.read_text())
        model = cls(ModelConfig(**meta["model_config"]))
        for entry in meta["params"]:
            arr = dm.load_tensor(src / f"{entry['name']}.t32")
            if list(arr.shape) != entry["shape"]:
                raise ValueError(f"{entry['name']}: shape {arr.shape} != {entry['shape']}")
            model.params[entry["name"]].data = arr.copy()
        model.tau.data = np.asarray(meta["tau"], dtype=np.float32)
        model.step = int(meta["step"])
        model.freeze_backbones(meta.get("frozen", False))
        return model, meta


def load_opt_state(path: str | Path, names: list[str]) -> dict[str, dict[str, np.ndarray]]:
    src = Path(path)
    state = {}
    for name in names:
        m = src / f"opt.m.{name}.t32"
        if m.is_file():
            state[name] = {"m": dm.load_tensor(m), "v": dm.load_tensor(src / f"opt.v.{name}.t32")}
    return state
