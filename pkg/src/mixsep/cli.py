"""Command-line entry point.

Subcommands: ``gen-data``, ``train``, ``eval``, ``inspect``, ``grad-check``
and ``print-default-config``.  Structured settings live in a JSON run
configuration (``config_version: 1``); a few flags override its scalars.

Exit codes: 0 ok, 1 check failure, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

from threadpoolctl import threadpool_limits

from . import evalsuite as ev
from . import synthworld as sw
from .model import SOUND_HEAD, SPEECH_HEAD, MixSepModel, ModelConfig
from .objectives import LossWeights
from .simvol import HEAD_MODES, aggregate, heatmap, paired_volumes, upsample_bilinear, write_pgm
from .trainer import TrainConfig, TrainData, Trainer, TrainingError, grad_check_batch, gradient_check

log = logging.getLogger("mixsep")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
CONFIG_VERSION = 1
GRAD_TOL = 1e-3
SEED_ENV = "MIXSEP_SEED"


class ConfigError(ValueError):
    """Raised for malformed or inconsistent run configurations."""


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

@dataclass
class LossSection:
    cor: float = 1.0
    dis: float = 1.0
    disreg: float = 0.05
    splice: float = 0.01
    cal: float = 0.1
    nonneg: float = 0.01
    tv: float = 0.01
    cor_only: bool = False
    dis_only: bool = False


@dataclass
class EvalSection:
    k: int = 10
    distractor_seed: int = 0


_SECTIONS = {"world": sw.WorldConfig, "model": ModelConfig, "train": TrainConfig,
             "loss": LossSection, "eval": EvalSection}
# fields a section's dataclass has but the run configuration owns elsewhere
_OWNED_ELSEWHERE = {"seed", "weights", "cor_only", "dis_only"}


def _section_defaults(cls) -> dict:
    skip = set() if cls is LossSection else _OWNED_ELSEWHERE
    inst = cls()
    return {f.name: getattr(inst, f.name) for f in fields(cls) if f.name not in skip}


@dataclass
class RunConfig:
    seed: int = 0
    world: dict = field(default_factory=lambda: _section_defaults(sw.WorldConfig))
    model: dict = field(default_factory=lambda: _section_defaults(ModelConfig))
    train: dict = field(default_factory=lambda: _section_defaults(TrainConfig))
    loss: dict = field(default_factory=lambda: _section_defaults(LossSection))
    eval: dict = field(default_factory=lambda: _section_defaults(EvalSection))

    def to_dict(self) -> dict:
        out = {"config_version": CONFIG_VERSION, "seed": self.seed}
        out.update({name: dict(getattr(self, name)) for name in _SECTIONS})
        return out

    # typed views ----------------------------------------------------------
    def world_config(self) -> sw.WorldConfig:
        return _build("world", sw.WorldConfig, seed=self.seed, **self.world)

    def model_config(self) -> ModelConfig:
        return _build("model", ModelConfig, seed=self.seed, **self.model)

    def loss_weights(self) -> LossWeights:
        w = {k: v for k, v in self.loss.items() if k not in ("cor_only", "dis_only")}
        return _build("loss", LossWeights, **w)

    def train_config(self) -> TrainConfig:
        return _build("train", TrainConfig, seed=self.seed, weights=self.loss_weights(),
                      cor_only=self.loss["cor_only"], dis_only=self.loss["dis_only"], **self.train)


def _build(section: str, cls, **kw):
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _check_type(where: str, value, default):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
        want = "boolean"
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
        want = "integer"
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        want = "number"
    else:
        ok, want = True, type(default).__name__
    if not ok:
        raise ConfigError(f"{where}: expected {want}, got {json.dumps(value)}")
    return float(value) if isinstance(default, float) else value


def config_from_dict(raw: dict, source: str = "<config>") -> RunConfig:
    """Validate a decoded JSON document against the schema."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}: top level must be a JSON object")
    version = raw.get("config_version")
    if version != CONFIG_VERSION:
        raise ConfigError(f"{source}: config_version must be {CONFIG_VERSION}, got {json.dumps(version)}")
    allowed = {"config_version", "seed", *_SECTIONS}
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{source}: unknown key '{key}' (allowed: {', '.join(sorted(allowed))})")
    cfg = RunConfig()
    if "seed" in raw:
        cfg.seed = _check_type(f"{source}: seed", raw["seed"], 0)
    for name in _SECTIONS:
        if name not in raw:
            continue
        body = raw[name]
        if not isinstance(body, dict):
            raise ConfigError(f"{source}: section '{name}' must be an object")
        current = getattr(cfg, name)
        for key, value in body.items():
            if key not in current:
                raise ConfigError(f"{source}: unknown key '{name}.{key}' "
                                  f"(allowed: {', '.join(sorted(current))})")
            current[key] = _check_type(f"{source}: {name}.{key}", value, current[key])
    # build every typed view once so range errors surface now
    cfg.world_config()
    cfg.model_config()
    cfg.train_config()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise OSError(f"cannot read config {p}: {exc.strerror or exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return config_from_dict(raw, str(p))


def resolve_config(args) -> RunConfig:
    """Config file, then the seed environment variable, then flags."""
    cfg = load_config(getattr(args, "config", None))
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    for flag, key in (("warmup_steps", "warmup_steps"), ("total_steps", "total_steps"),
                      ("checkpoint_interval", "checkpoint_interval")):
        value = getattr(args, flag, None)
        if value is not None:
            cfg.train[key] = value
    cfg.train_config()
    return cfg


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_print_default_config(args) -> int:
    print(json.dumps(RunConfig().to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gen_data(args) -> int:
    cfg = resolve_config(args)
    manifest = sw.make_datasets(cfg.world_config(), args.out)
    counts = {name: s["count"] for name, s in manifest["splits"].items()}
    print(json.dumps({"out": str(args.out), "seed": cfg.seed, "splits": counts}, sort_keys=True))
    return EXIT_OK


def _load_data(path, holdout: int) -> TrainData:
    try:
        return TrainData.load(path, holdout)
    except FileNotFoundError as exc:
        raise OSError(f"dataset not found under {path}: {exc}") from exc


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    tcfg = cfg.train_config()
    data_dir = args.data
    if data_dir is None:
        data_dir = Path(args.out) / "data"
        if not (data_dir / "manifest.json").is_file():
            sw.make_datasets(cfg.world_config(), data_dir)
    data = _load_data(data_dir, tcfg.holdout)
    if asdict(data.config) != asdict(cfg.world_config()):
        log.warning("dataset world config differs from the run config; using the dataset's")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    if args.resume:
        trainer = Trainer.resume(args.resume, data, tcfg, out)
    else:
        trainer = Trainer(MixSepModel(cfg.model_config()), data, tcfg, out)
    try:
        trainer.train()
    except TrainingError as exc:
        log.error("%s", exc)
        return EXIT_CHECK
    last = trainer.log_records[-1] if trainer.log_records else {}
    print(json.dumps({"out": str(out), "steps": trainer.model.step, "last": last}, sort_keys=True))
    return EXIT_OK


TASKS = ("simul", "grounding", "retrieval", "leakage", "disentangle")


@dataclass
class ReportSpec:
    """One named evaluation, computed lazily so that filters skip the work."""

    name: str
    task: str
    split: str
    head: str
    mixed: bool
    run: Callable[[], ev.MetricsReport]


def report_specs(model: MixSepModel, data_dir, holdout: int = 64, k: int = 10,
                 distractor_seed: int = 0) -> list[ReportSpec]:
    """Every evaluation protocol on the held-out tail of each split."""
    data = _load_data(data_dir, holdout)
    wc = data.config
    snd, sph = data.sound, data.speech
    i_s = ev.holdout_indices(len(snd), holdout)
    i_p = ev.holdout_indices(len(sph), holdout)
    specs: list[ReportSpec] = []
    simul_cache: dict[str, dict] = {}

    def simul(mode, kind):
        if mode not in simul_cache:
            simul_cache[mode] = ev.eval_simultaneous(model, sw.load_split(data_dir, "extended"), wc, mode)
        return simul_cache[mode][kind]

    for mode in ("specialized", "total-max", "total-sum"):
        for kind in ("sound", "speech"):
            specs.append(ReportSpec(f"simultaneous/{kind}/{mode}", "simul", "extended", mode, True,
                                    lambda m=mode, kd=kind: simul(m, kd)))
    for split, idx, own, other in ((snd, i_s, "sound", "speech"), (sph, i_p, "speech", "sound")):
        for mode in (own, "total-max", "total-sum"):
            for mixed in (False, True):
                tag = "mixed" if mixed else "clean"
                specs.append(ReportSpec(
                    f"grounding/{split.name}/{mode}/{tag}", "grounding", split.name, mode, mixed,
                    lambda sp=split, ix=idx, m=mode, mx=mixed: ev.eval_grounding(
                        model, sp, wc, m, mixed=mx, indices=ix, seed=distractor_seed)))
                specs.append(ReportSpec(
                    f"retrieval/{split.name}/{mode}/{tag}", "retrieval", split.name, mode, mixed,
                    lambda sp=split, ix=idx, m=mode, mx=mixed: ev.eval_retrieval(
                        model, sp, wc, m, mixed=mx, k=k, indices=ix, seed=distractor_seed)))
        specs.append(ReportSpec(f"leakage/{split.name}/{other}", "leakage", split.name, other, False,
                                lambda sp=split, ix=idx, o=other: ev.eval_retrieval(
                                    model, sp, wc, o, k=k, indices=ix)))
    specs.append(ReportSpec("disentangle", "disentangle", "sound+speech", "per-head", False,
                            lambda: ev.eval_disentangle(model, snd, sph, i_s, i_p)))
    return specs


def select_specs(specs: list[ReportSpec], task=None, split=None, head=None, mixed=False) -> list[ReportSpec]:
    out = []
    for s in specs:
        if task and s.task != task:
            continue
        if split and split not in s.split.split("+"):
            continue
        if head and s.head != head:
            continue
        if mixed and not s.mixed:
            continue
        out.append(s)
    return out


def full_report(model: MixSepModel, data_dir, holdout: int = 64, k: int = 10,
                distractor_seed: int = 0, **filters) -> list[dict]:
    specs = select_specs(report_specs(model, data_dir, holdout, k, distractor_seed), **filters)
    return [{"name": s.name, **s.run().to_dict()} for s in specs]


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    model, meta = MixSepModel.load(args.checkpoint)
    reports = full_report(model, args.data, cfg.train["holdout"], cfg.eval["k"], cfg.eval["distractor_seed"],
                          task=args.task, split=args.split, head=args.head, mixed=args.mixed)
    if not reports:
        raise ConfigError("no evaluation matches the given --task/--split/--head/--mixed filters")
    doc = {"checkpoint": str(args.checkpoint), "step": meta.get("step"), "reports": reports}
    text = json.dumps(doc, indent=2, sort_keys=True)
    out = Path(args.out) if args.out else Path(args.checkpoint) / "metrics.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text + "\n")
    print(text)
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, _ = MixSepModel.load(args.checkpoint)
    split = sw.load_split(args.data, args.split)
    if not 0 <= args.index < len(split):
        raise ConfigError(f"index {args.index} outside split '{args.split}' of size {len(split)}")
    arr = split.arrays
    image = arr["image"][args.index]
    audio = arr[f"mix{args.order}"][args.index] if args.split == "extended" else arr["audio"][args.index]
    S = paired_volumes(model.encode_audios(audio[None]), model.encode_images(image[None]))[0]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, head in (("sound", SOUND_HEAD), ("speech", SPEECH_HEAD)):
        m = upsample_bilinear(heatmap(aggregate(S, head)), image.shape[1:])
        path = out / f"{args.split}_{args.index}_{name}.pgm"
        write_pgm(path, m)
        written.append(str(path))
    print(json.dumps({"heatmaps": written}))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cfg = resolve_config(args)
    raw = grad_check_batch(cfg.world_config(), cfg.seed, B=2)
    model = MixSepModel(cfg.model_config())
    errors = gradient_check(model, raw, cfg.loss_weights(), coords=args.coords, eps=args.eps, seed=cfg.seed)
    ok = all(v < GRAD_TOL for v in errors.values())
    print(json.dumps({"max_rel_error": errors, "tolerance": GRAD_TOL, "ok": ok}, sort_keys=True))
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mixsep", description=__doc__.split("\n\n")[0])
    p.add_argument("--threads", type=int, default=1, help="cap on BLAS/OpenMP threads (default 1)")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True):
        if config:
            sp.add_argument("--config", help="run configuration JSON (defaults when omitted)")
        if seed:
            sp.add_argument("--seed", type=int, help=f"override the config seed (after ${SEED_ENV})")

    sp = sub.add_parser("print-default-config", help="print the default run configuration")
    sp.set_defaults(func=cmd_print_default_config)

    sp = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(sp)
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="warm-up then end-to-end training")
    common(sp)
    sp.add_argument("--data", help="dataset directory (default: generate into <out>/data)")
    sp.add_argument("--out", required=True, help="run directory (log and checkpoints)")
    sp.add_argument("--resume", help="checkpoint directory to resume from")
    sp.add_argument("--warmup-steps", type=int, help="override train.warmup_steps")
    sp.add_argument("--total-steps", type=int, help="override train.total_steps")
    sp.add_argument("--checkpoint-interval", type=int, help="override train.checkpoint_interval")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="run every evaluation protocol on a checkpoint")
    common(sp)
    sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--out", help="report path (default <checkpoint>/metrics.json)")
    sp.add_argument("--task", choices=TASKS, help="only this protocol (default all)")
    sp.add_argument("--split", choices=sw.SPLITS, help="only evaluations on this split")
    sp.add_argument("--head", choices=HEAD_MODES + ("specialized",), help="only this head mode")
    sp.add_argument("--mixed", action="store_true", help="only evaluations with off-screen distractors")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("inspect", help="write per-head heatmaps of one sample as PGM")
    sp.add_argument("--checkpoint", required=True, help="checkpoint directory")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--split", default="extended", choices=sw.SPLITS, help="split (default extended)")
    sp.add_argument("--index", type=int, default=0, help="sample index (default 0)")
    sp.add_argument("--order", type=int, default=0, choices=(0, 1),
                    help="mixture ordering of an extended scene (default 0)")
    sp.add_argument("--out", required=True, help="output directory")
    sp.set_defaults(func=cmd_inspect)

    sp = sub.add_parser("grad-check", help="finite-difference check of the losses on a B=2 batch")
    common(sp)
    sp.add_argument("--eps", type=float, default=1e-5, help="central-difference step (default 1e-5)")
    sp.add_argument("--coords", type=int, default=24, help="coordinates per tensor (default 24)")
    sp.set_defaults(func=cmd_grad_check)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    with threadpool_limits(limits=args.threads):
        try:
            return args.func(args)
        except OSError as exc:
            print(f"i/o error: {exc}", file=sys.stderr)
            return EXIT_IO
        except ValueError as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
