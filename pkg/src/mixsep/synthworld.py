"""Procedural audio-visual world with known ground truth.

Scenes are small RGB images holding one or two textured rectangles.  Every
object has a class and an intensity level; its "sound" is a harmonic stack
keyed by the class, its "speech" a three-blob token keyed by the class, and
both are rendered at the object's level.  The level gives each sample an
identity beyond its class, so cross-modal retrieval inside a gallery is not
limited by class collisions.

Randomness comes from counter-based Philox streams keyed by
``(seed, stream, index)``, so any sample can be generated independently of
the others.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diffmath import load_tensor, save_tensor

SOUND, SPEECH, MIXTURE, SILENCE = "sound", "speech", "mixture", "silence"
KIND_ROW = {SOUND: 0, SPEECH: 1}
SPLITS = ("sound", "speech", "extended")
LEVEL_FLOOR = 0.2  # intensity of the dimmest level
_STREAM = {"sound": 1, "speech": 2, "extended": 3, "identity": 4}

# hue wheel for class colours; entries never proportional to each other
_PALETTE = np.array([
    [1.00, 0.15, 0.10], [0.10, 0.85, 0.20], [0.15, 0.25, 1.00], [0.95, 0.85, 0.10],
    [0.85, 0.10, 0.90], [0.10, 0.90, 0.90], [1.00, 0.55, 0.10], [0.55, 0.30, 1.00],
    [0.60, 1.00, 0.45], [1.00, 0.45, 0.65], [0.35, 0.60, 0.25], [0.25, 0.45, 0.60],
], dtype=np.float64)


class PlacementError(RuntimeError):
    """No non-overlapping placement was found for an object."""


@dataclass
class WorldConfig:
    n_classes: int = 8
    n_levels: int = 8
    H_img: int = 32
    W_img: int = 32
    F_a: int = 32
    T_a: int = 64
    band_overlap: float = 0.5
    seed: int = 0
    n_sound: int = 512
    n_speech: int = 512
    n_extended: int = 128

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if self.n_classes > len(_PALETTE):
            raise ValueError(f"n_classes must be <= {len(_PALETTE)}")
        if self.n_levels < 1:
            raise ValueError("n_levels must be >= 1")
        for name in ("H_img", "W_img", "F_a", "T_a"):
            if getattr(self, name) < 4:
                raise ValueError(f"{name} must be >= 4")
        if not 0.0 <= self.band_overlap <= 1.0:
            raise ValueError("band_overlap must lie in [0, 1]")
        for name in ("n_sound", "n_speech", "n_extended"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    def split_size(self, split: str) -> int:
        return {"sound": self.n_sound, "speech": self.n_speech, "extended": self.n_extended}[split]

    @property
    def n_identities(self) -> int:
        return self.n_classes * self.n_levels

    def level_value(self, level: int) -> float:
        """Intensity of a level: geometric steps from 0.2 up to 1.0."""
        if not 0 <= level < self.n_levels:
            raise ValueError(f"level {level} outside [0, {self.n_levels})")
        if self.n_levels == 1:
            return 1.0
        return float(LEVEL_FLOOR ** (1.0 - level / (self.n_levels - 1)))

    # frequency layout ------------------------------------------------------
    def sound_band(self) -> tuple[int, int]:
        hi = int(round(self.F_a * (1.0 + self.band_overlap) / 2.0))
        return 0, max(hi, 1)

    def speech_band(self) -> tuple[int, int]:
        lo = int(round(self.F_a * (1.0 - self.band_overlap) / 2.0))
        return min(lo, self.F_a - 1), self.F_a


def make_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, stream, index)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, stream, index])))


# ---------------------------------------------------------------------------
# data records
# ---------------------------------------------------------------------------

@dataclass
class SceneSample:
    image: np.ndarray                       # [3, H, W] in [0, 1]
    objects: list[tuple[int, tuple[int, int, int, int]]]  # (class, (y0, x0, y1, x1))
    masks: list[np.ndarray]                 # [H, W] binary per object
    levels: list[int] = field(default_factory=list)


@dataclass
class AudioSignal:
    grid: np.ndarray                        # [F_a, T_a] in [0, 1]
    kind: str
    provenance: np.ndarray                  # [2, T_a] rows: sound, speech
    token_spans: list[tuple[int, int, int]] = field(default_factory=list)
    cls: int = -1
    level: int = -1


def silence(config: WorldConfig) -> AudioSignal:
    return AudioSignal(np.zeros((config.F_a, config.T_a), np.float32), SILENCE,
                       np.zeros((2, config.T_a), np.float32))


# ---------------------------------------------------------------------------
# scenes
# ---------------------------------------------------------------------------

def class_color(cls: int) -> np.ndarray:
    return _PALETTE[cls]


def _texture(cls: int, h: int, w: int) -> np.ndarray:
    """Class-keyed stripe pattern with values in {0.55, 1.0}."""
    period = 2 + cls % 3
    yy, xx = np.mgrid[0:h, 0:w]
    orient = cls % 4
    coord = [yy, xx, yy + xx, yy - xx + w][orient]
    return np.where((coord // period) % 2 == 0, 1.0, 0.55)


def _sample_box(rng: np.random.Generator, config: WorldConfig):
    H, W = config.H_img, config.W_img
    area = H * W
    frac = rng.uniform(0.10, 0.25)
    aspect = rng.uniform(0.75, 1.0 / 0.75)
    h = min(H, max(1, int(round(np.sqrt(frac * area * aspect)))))
    w = min(W, max(1, int(round(np.sqrt(frac * area / aspect)))))
    if not 0.10 <= h * w / area <= 0.25:
        return None
    y0 = int(rng.integers(0, H - h + 1))
    x0 = int(rng.integers(0, W - w + 1))
    return (y0, x0, y0 + h, x0 + w)


def _disjoint(a, b) -> bool:
    return a[2] <= b[0] or b[2] <= a[0] or a[3] <= b[1] or b[3] <= a[1]


def _layout(rng: np.random.Generator, config: WorldConfig, n: int, attempts: int = 100):
    """Sample ``n`` pairwise-disjoint boxes; ``None`` after ``attempts`` failures."""
    for _ in range(attempts):
        boxes = []
        for _ in range(n):
            box = _sample_box(rng, config)
            if box is None or not all(_disjoint(box, t) for t in boxes):
                break
            boxes.append(box)
        if len(boxes) == n:
            return boxes
    return None


def gen_scene(rng: np.random.Generator, config: WorldConfig, classes: list[int],
              levels: list[int] | None = None, seed_hint: object = None) -> SceneSample:
    """Render ``classes`` as non-overlapping textured patches.

    Each patch covers 10-25% of the image.  The background is faint grey noise.
    """
    if len(classes) not in (1, 2):
        raise ValueError("a scene holds one or two objects")
    if any(not 0 <= c < config.n_classes for c in classes):
        raise ValueError(f"class ids {classes} outside [0, {config.n_classes})")
    if levels is None:
        levels = [config.n_levels - 1] * len(classes)
    H, W = config.H_img, config.W_img
    image = np.broadcast_to(rng.uniform(0.0, 0.15, size=(1, H, W)), (3, H, W)).copy()
    boxes = _layout(rng, config, len(classes))
    if boxes is None:
        raise PlacementError(f"could not place classes {classes} without overlap (seed {seed_hint})")
    masks = []
    for cls, lvl, box in zip(classes, levels, boxes):
        y0, x0, y1, x1 = box
        g = config.level_value(lvl)
        tex = _texture(cls, y1 - y0, x1 - x0)
        image[:, y0:y1, x0:x1] = class_color(cls)[:, None, None] * tex[None] * g
        mask = np.zeros((H, W), np.float32)
        mask[y0:y1, x0:x1] = 1.0
        masks.append(mask)
    return SceneSample(np.clip(image, 0.0, 1.0).astype(np.float32),
                       list(zip(classes, boxes)), masks, list(levels))


# ---------------------------------------------------------------------------
# audio
# ---------------------------------------------------------------------------

def sound_rows(cls: int, config: WorldConfig) -> list[int]:
    """Harmonic rows {f0, 2 f0, 3 f0} of a class inside the sound band."""
    lo, hi = config.sound_band()
    f0 = 1 + cls
    return [lo + k * f0 for k in (1, 2, 3) if lo + k * f0 < hi]


def speech_rows(cls: int, config: WorldConfig) -> list[int]:
    """Formant rows (one per blob) of a class inside the speech band."""
    lo, hi = config.speech_band()
    span = hi - lo
    step = max(1, span // config.n_classes)
    third = max(1, span // 3)
    return [lo + (step * cls + j * third) % span for j in range(3)]


def _envelope(rng: np.random.Generator, T: int) -> np.ndarray:
    env = np.zeros(T, np.float32)
    on = bool(rng.integers(0, 2))
    t = 0
    while t < T:
        length = int(rng.integers(4, 13))
        if on:
            env[t:t + length] = 1.0
        t += length
        on = not on
    if env.sum() == 0:
        start = int(rng.integers(0, T - 4 + 1))
        env[start:start + 4] = 1.0
    return env


def render_sound(cls: int, rng: np.random.Generator, config: WorldConfig, level: int | None = None) -> AudioSignal:
    """Harmonic stack of a class, gated by a random on/off envelope."""
    if not 0 <= cls < config.n_classes:
        raise ValueError(f"invalid class {cls}")
    level = config.n_levels - 1 if level is None else level
    g = config.level_value(level)
    env = _envelope(rng, config.T_a)
    grid = np.zeros((config.F_a, config.T_a), np.float32)
    for r in sound_rows(cls, config):
        grid[r] = env * g
    prov = np.zeros((2, config.T_a), np.float32)
    prov[0] = env > 0
    return AudioSignal(grid, SOUND, prov, [], cls, level)


BLOB_LEN = 6
BLOB_GAP = 1


def render_speech(cls: int, rng: np.random.Generator, config: WorldConfig, level: int | None = None) -> AudioSignal:
    """Three formant blobs spoken in order, starting at a random frame."""
    if not 0 <= cls < config.n_classes:
        raise ValueError(f"invalid class {cls}")
    level = config.n_levels - 1 if level is None else level
    g = config.level_value(level)
    F, T = config.F_a, config.T_a
    blob = min(BLOB_LEN, max(1, (T - 2 * BLOB_GAP) // 3))
    word = 3 * blob + 2 * BLOB_GAP
    start = int(rng.integers(0, max(T - word, 0) + 1))
    grid = np.zeros((F, T), np.float32)
    lo, hi = config.speech_band()
    for j, r in enumerate(speech_rows(cls, config)):
        t0 = start + j * (blob + BLOB_GAP)
        grid[r, t0:t0 + blob] = g
        if r + 1 < hi:
            grid[r + 1, t0:t0 + blob] = 0.5 * g
    end = min(start + word, T)
    prov = np.zeros((2, T), np.float32)
    prov[1, start:end] = 1.0
    return AudioSignal(grid, SPEECH, prov, [(cls, start, end)], cls, level)


def mix(a: AudioSignal, b: AudioSignal) -> AudioSignal:
    """Additive mixture clamped to [0, 1]."""
    if a.grid.shape != b.grid.shape:
        raise ValueError(f"grid extents differ: {a.grid.shape} vs {b.grid.shape}")
    if MIXTURE in (a.kind, b.kind):
        raise ValueError("cannot mix a mixture")
    grid = np.clip(a.grid + b.grid, 0.0, 1.0).astype(np.float32)
    prov = np.maximum(a.provenance, b.provenance)
    spans = list(a.token_spans) + list(b.token_spans)
    return AudioSignal(grid, MIXTURE, prov, spans)


def splice_negative(audio: AudioSignal, donor: AudioSignal, rng: np.random.Generator,
                    rho: float | None = None, ramp: int = 2) -> tuple[AudioSignal, np.ndarray]:
    """Overwrite a contiguous stretch of frames with the donor's frames.

    The stretch covers ``rho * T`` frames with ``rho ~ U[0.1, 0.3]`` unless
    ``rho`` is given; ``rho = 0`` disables splicing.  The returned soft mask
    is 1 on the stretch with linear ramps of ``ramp`` frames inside each edge.
    """
    if audio.grid.shape != donor.grid.shape:
        raise ValueError(f"grid extents differ: {audio.grid.shape} vs {donor.grid.shape}")
    T = audio.grid.shape[1]
    if rho is None:
        rho = rng.uniform(0.1, 0.3)
    length = int(round(rho * T))
    mask = np.zeros(T, np.float32)
    if length <= 0:
        return audio, mask
    start = int(rng.integers(0, T - length + 1))
    grid = audio.grid.copy()
    grid[:, start:start + length] = donor.grid[:, start:start + length]
    mask[start:start + length] = 1.0
    r = min(ramp, length // 2)
    for i in range(r):
        w = (i + 1) / (r + 1)
        mask[start + i] = w
        mask[start + length - 1 - i] = w
    prov = audio.provenance.copy()
    prov[:, start:start + length] = donor.provenance[:, start:start + length]
    out = AudioSignal(grid, audio.kind, prov, list(audio.token_spans), audio.cls, audio.level)
    return out, mask


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

def identity_of(config: WorldConfig, split: str, index: int) -> tuple[int, int]:
    """(class, level) of a one-object sample.

    Consecutive blocks of ``n_classes * n_levels`` samples are a seeded
    permutation of all identities, so every such block is collision-free.
    """
    n = config.n_identities
    block, pos = divmod(index, n)
    perm = make_rng(config.seed, _STREAM["identity"], _STREAM[split] * 1_000_003 + block).permutation(n)
    ident = int(perm[pos])
    return ident // config.n_levels, ident % config.n_levels


def gen_pair(config: WorldConfig, split: str, index: int) -> tuple[dict, dict]:
    """One sound pair or speech pair: scene, its mask and the matching audio."""
    cls, lvl = identity_of(config, split, index)
    rng = make_rng(config.seed, _STREAM[split], index)
    scene = gen_scene(rng, config, [cls], [lvl], seed_hint=(config.seed, split, index))
    render = render_sound if split == "sound" else render_speech
    audio = render(cls, rng, config, lvl)
    rec = {"image": scene.image, "mask": scene.masks[0], "audio": audio.grid,
           "prov": audio.provenance,
           "box": np.asarray(scene.objects[0][1], np.float32)}
    if split == "speech":
        rec["spans"] = np.asarray(audio.token_spans, np.float32).reshape(-1, 3)
    meta = {"class": cls, "level": lvl}
    return rec, meta


def gen_extended(config: WorldConfig, index: int) -> tuple[dict, dict]:
    """Two-object scene with sound and speech renders for both objects.

    ``mix0`` = sound of object 0 + speech of object 1, ``mix1`` the reverse.
    """
    rng = make_rng(config.seed, _STREAM["extended"], index)
    classes = [int(c) for c in rng.choice(config.n_classes, size=2, replace=False)]
    levels = [int(v) for v in rng.integers(0, config.n_levels, size=2)]
    scene = gen_scene(rng, config, classes, levels, seed_hint=(config.seed, "extended", index))
    sounds = [render_sound(c, rng, config, v) for c, v in zip(classes, levels)]
    speeches = [render_speech(c, rng, config, v) for c, v in zip(classes, levels)]
    mixes = [mix(sounds[0], speeches[1]), mix(sounds[1], speeches[0])]
    rec = {"image": scene.image, "mask0": scene.masks[0], "mask1": scene.masks[1]}
    for j in range(2):
        rec[f"sound{j}"] = sounds[j].grid
        rec[f"speech{j}"] = speeches[j].grid
        rec[f"spans{j}"] = np.asarray(speeches[j].token_spans, np.float32).reshape(-1, 3)
        rec[f"mix{j}"] = mixes[j].grid
        rec[f"mixprov{j}"] = mixes[j].provenance
    return rec, {"classes": classes, "levels": levels}


def make_datasets(config: WorldConfig, out_dir: str | Path) -> dict:
    """Write the three splits plus ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    manifest = {"format": "mixsep-world v1", "config": asdict(config),
                "class_names": [f"class{c}" for c in range(config.n_classes)],
                "splits": {}}
    for split in SPLITS:
        n = config.split_size(split)
        sdir = out / split
        try:
            sdir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create {sdir}: {exc}") from exc
        metas, fields = [], []
        for i in range(n):
            rec, meta = gen_extended(config, i) if split == "extended" else gen_pair(config, split, i)
            fields = sorted(rec)
            for name, arr in rec.items():
                path = sdir / f"{i}.{name}.t32"
                try:
                    save_tensor(path, arr)
                except OSError as exc:
                    raise OSError(f"cannot write {path}: {exc}") from exc
            metas.append(meta)
        manifest["splits"][split] = {"count": n, "fields": fields, "samples": metas}
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    return manifest


@dataclass
class Split:
    """In-memory split: every field stacked along a leading sample axis."""

    name: str
    arrays: dict[str, np.ndarray]
    meta: list[dict]
    spans: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.meta)


def load_manifest(data_dir: str | Path) -> dict:
    path = Path(data_dir) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise OSError(f"{path}: corrupt manifest ({exc})") from exc


def load_split(data_dir: str | Path, split: str) -> Split:
    manifest = load_manifest(data_dir)
    if split not in manifest["splits"]:
        raise KeyError(f"split {split!r} not in manifest")
    info = manifest["splits"][split]
    n = info["count"]
    arrays: dict[str, list] = {}
    spans: dict[str, list] = {}
    for i in range(n):
        for name in info["fields"]:
            arr = load_tensor(Path(data_dir) / split / f"{i}.{name}.t32")
            (spans if name.startswith("spans") else arrays).setdefault(name, []).append(arr)
    stacked = {k: np.stack(v) for k, v in arrays.items()}
    return Split(split, stacked, info["samples"], spans)


def config_from_manifest(manifest: dict) -> WorldConfig:
    return WorldConfig(**manifest["config"])
