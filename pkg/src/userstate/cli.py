"""Command line entry point.

Commands::

    userstate synth       generate a synthetic dataset (manifest + clip files)
    userstate preprocess  normalize landmark clips, encode waveforms into latents
    userstate train-codec train the audio codec on the waveforms of a dataset
    userstate train       cross-validated semi-supervised training
    userstate distill     inspect the distilled pools a checkpoint selects
    userstate evaluate    score a checkpoint on the labeled items of a dataset
    userstate report      render a stored evaluation report

Every command reads one JSON run configuration (``--config``); unknown keys
are rejected. Artifacts go into ``<out>/<timestamp>-<hash>`` (or ``--run-dir``)
and carry the hash of the resolved configuration.

Exit codes: 0 success, 1 a pipeline stage failed (a ``failure.json`` record
is written), 2 invalid configuration or missing inputs.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import MfccConfig, chunk_stream
from .augment import AugmentPolicy
from .backbones import BundleSpec, ModelBundle, load_bundle, save_bundle
from .codec import CodecConfig, CodecTrainConfig, latents_for_segment, load_codec, save_codec, split_corpus, train_codec
from .core_data import (
    NEUTRAL, LabeledSet, PairedSet, SegmentEntry, SegmentManifest, TrainConfig, TrainingData, UnlabeledPool,
    load_manifest, read_clip, save_manifest, write_clip,
)
from .evaluation import EvalReport, cross_validate, evaluate_bundle, render_confusion, render_f1_table, summarize
from .face import normalize_clip
from .synth import GeneratorSpec, generate_labeled, generate_unlabeled, waveform_segment
from .trainer import AugmentSettings, distill_pool, train

log = logging.getLogger("userstate")


class ConfigError(ValueError):
    pass


class MissingInputError(FileNotFoundError):
    pass


@dataclass(frozen=True)
class SynthSection:
    labeled: int = 60
    unlabeled: int = 500
    rare_rate: float = 0.15
    noise: float = 0.2
    label_noise: float = 0.0
    balanced: bool = True
    waveform: bool = False


@dataclass(frozen=True)
class AugmentSection:
    n: int = 2
    m: int = 10
    fill: str = "zero"


@dataclass(frozen=True)
class RunSection:
    distill_every: int = 1
    normalize_mode: str = "relative_to_first"


SECTIONS = {
    "train": TrainConfig,
    "model": BundleSpec,
    "codec": CodecConfig,
    "codec_train": CodecTrainConfig,
    "mfcc": MfccConfig,
    "augment": AugmentSection,
    "synth": SynthSection,
    "run": RunSection,
}
MODEL_PRESETS = {"toy": BundleSpec.toy(), "full": BundleSpec()}


def _plain(value):
    if isinstance(value, tuple):
        return [_plain(v) for v in value]
    return value


def _section_dict(obj) -> dict:
    return {k: _plain(v) for k, v in dataclasses.asdict(obj).items()}


def _build(cls, values: dict, where: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown config key {where}.{unknown[0]}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where} section: {exc}") from exc


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    train: TrainConfig = field(default_factory=lambda: TrainConfig(total_epochs=30, folds=2))
    model: BundleSpec = field(default_factory=BundleSpec.toy)
    codec: CodecConfig = field(default_factory=CodecConfig)
    codec_train: CodecTrainConfig = field(default_factory=CodecTrainConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)
    augment: AugmentSection = field(default_factory=AugmentSection)
    synth: SynthSection = field(default_factory=SynthSection)
    run: RunSection = field(default_factory=RunSection)

    @classmethod
    def from_dict(cls, raw: dict, seed: int | None = None, published_preset: bool = False) -> "RunConfig":
        unknown = sorted(set(raw) - set(SECTIONS) - {"seed"})
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]}")
        base = cls()
        values = {}
        for name, section_cls in SECTIONS.items():
            section = raw.get(name, {})
            if name == "model" and isinstance(section, str):
                if section not in MODEL_PRESETS:
                    raise ConfigError(f"unknown model preset {section!r}")
                values[name] = MODEL_PRESETS[section]
                continue
            if not isinstance(section, dict):
                raise ConfigError(f"config section {name} must be an object")
            merged = {**_section_dict(getattr(base, name)), **section}
            values[name] = _build(section_cls, merged, name)
        run_seed = raw.get("seed", 0) if seed is None else seed
        if not isinstance(run_seed, int):
            raise ConfigError("config key seed must be an integer")
        train_cfg = values["train"]
        if published_preset:
            train_cfg = TrainConfig.published_preset()
            values["model"] = BundleSpec()
        values["train"] = dataclasses.replace(train_cfg, seed=run_seed)
        values["codec_train"] = dataclasses.replace(values["codec_train"], seed=run_seed, checkpoint_dir=None)
        return cls(seed=run_seed, **values)

    def to_dict(self) -> dict:
        return {"seed": self.seed, **{name: _section_dict(getattr(self, name)) for name in SECTIONS}}

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def augment_settings(self) -> AugmentSettings:
        a = self.augment
        return AugmentSettings(AugmentPolicy(n=a.n, m=a.m, fill=a.fill),
                               AugmentPolicy.for_landmarks(n=a.n, m=a.m, fill=a.fill))


def load_config(path, seed=None, published_preset=False) -> RunConfig:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise MissingInputError(f"config file not found: {p}")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    return RunConfig.from_dict(raw, seed=seed, published_preset=published_preset)


# ---------------------------------------------------------------- datasets

@dataclass
class LoadedData:
    manifest: SegmentManifest
    paired: PairedSet
    audio_only: LabeledSet
    face_only: LabeledSet
    pool_audio: UnlabeledPool
    pool_face: UnlabeledPool
    pool_ids: dict


def _read_normalized(path: Path, modality: str):
    arr, normalized = read_clip(path)
    if modality == "face" and not normalized:
        raise ConfigError(f"{path} holds un-normalized landmarks; run `userstate preprocess` first")
    return arr


def _audit_labels(data_dir: Path) -> dict:
    p = data_dir / "audit.json"
    return json.loads(p.read_text()) if p.is_file() else {}


def load_dataset(data_dir) -> LoadedData:
    data_dir = Path(data_dir)
    manifest = load_manifest(data_dir / "manifest.jsonl")
    missing = []
    for e in manifest:
        for clip in (e.audio_clip, e.face_clip):
            if clip is not None and not (data_dir / clip).is_file():
                missing.append(clip)
        if e.audio and e.audio_clip is None or e.face and e.face_clip is None:
            missing.append(f"{e.media_id}: clip path")
    if missing:
        raise MissingInputError("missing inputs: " + ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else ""))
    audit = _audit_labels(data_dir)
    paired, a_only, f_only = ([], [], []), ([], []), ([], [])
    pool = {"audio": ([], [], []), "face": ([], [], [])}
    for e in manifest:
        if e.audio and e.audio_clip.endswith(".npy"):
            raise ConfigError(f"{e.audio_clip} is a waveform; run `userstate preprocess` with a codec first")
        a = _read_normalized(data_dir / e.audio_clip, "audio") if e.audio else None
        f = _read_normalized(data_dir / e.face_clip, "face") if e.face else None
        if e.label is None:
            for name, x in (("audio", a), ("face", f)):
                if x is not None:
                    pool[name][0].append(x)
                    pool[name][1].append(audit.get(e.media_id, -1))
                    pool[name][2].append(e.media_id)
        elif a is not None and f is not None:
            paired[0].append(a), paired[1].append(f), paired[2].append(e.label)
        elif a is not None:
            a_only[0].append(a), a_only[1].append(e.label)
        else:
            f_only[0].append(f), f_only[1].append(e.label)

    def stack(items, shape):
        return np.stack(items) if items else np.zeros((0,) + shape, np.float32)

    A, F = (30, 50, 1), (30, 68, 3)
    pools = {}
    for name, shape in (("audio", A), ("face", F)):
        hidden = np.asarray(pool[name][1], dtype=np.int64)
        pools[name] = UnlabeledPool(stack(pool[name][0], shape), name,
                                    hidden if len(hidden) and np.all(hidden >= 0) else None, f"raw-{name}")
    return LoadedData(manifest, PairedSet(stack(paired[0], A), stack(paired[1], F), paired[2]),
                      LabeledSet(stack(a_only[0], A), a_only[1]), LabeledSet(stack(f_only[0], F), f_only[1]),
                      pools["audio"], pools["face"], {k: v[2] for k, v in pool.items()})


# ---------------------------------------------------------------- run dirs

class Run:
    """Output directory of one command invocation."""

    def __init__(self, cfg: RunConfig, command: str, out: str | None, run_dir: str | None):
        self.cfg = cfg
        self.hash = cfg.hash()
        if run_dir:
            self.dir = Path(run_dir)
        else:
            stamp = time.strftime("%Y%m%d-%H%M%S")
            self.dir = Path(out or "runs") / f"{stamp}-{self.hash[:12]}"
        self.dir.mkdir(parents=True, exist_ok=True)
        self.command = command
        (self.dir / "config.json").write_text(json.dumps(
            {"command": command, "config_hash": self.hash, "config": cfg.to_dict()}, indent=2, sort_keys=True))

    def write_json(self, name: str, payload: dict):
        payload = {"config_hash": self.hash, **payload}
        (self.dir / name).write_text(json.dumps(payload, indent=2, sort_keys=True))

    def fail(self, stage: str, exc: BaseException):
        self.write_json("failure.json", {"command": self.command, "stage": stage,
                                         "error": f"{type(exc).__name__}: {exc}",
                                         "traceback": traceback.format_exc()})


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig, run: Run):
    s = cfg.synth
    spec = GeneratorSpec(noise=s.noise, label_noise=s.label_noise, seed=cfg.seed)
    data = run.dir / "data"
    (data / "clips").mkdir(parents=True, exist_ok=True)
    labeled = generate_labeled(s.labeled, spec, balanced=s.balanced, normalize=False)
    pa, pf = generate_unlabeled(s.unlabeled, spec, s.rare_rate, normalize=False) if s.unlabeled else (None, None)
    entries, audit = [], {}
    wave_rng = np.random.default_rng([cfg.seed, 33])

    def add(media_id, audio, face, label, audit_label):
        if s.waveform:
            a_path = f"clips/{media_id}_audio.npy"
            np.save(data / a_path, waveform_segment(audit_label, wave_rng, s.noise).astype(np.float32))
        else:
            a_path = f"clips/{media_id}_audio.clip"
            write_clip(data / a_path, audio, normalized=True)
        f_path = f"clips/{media_id}_face.clip"
        write_clip(data / f_path, face, normalized=False)
        entries.append(SegmentEntry(media_id, 0.0, 1.0, audio=True, face=True, label=label,
                                    audio_clip=a_path, face_clip=f_path))

    for i in range(len(labeled)):
        add(f"l{i:05d}", labeled.audio[i], labeled.face_raw[i], int(labeled.labels[i]), int(labeled.true_labels[i]))
    for i in range(s.unlabeled):
        mid = f"u{i:05d}"
        audit[mid] = int(pa.hidden_labels[i])
        add(mid, pa.items[i], pf.items[i], None, audit[mid])
    save_manifest(SegmentManifest(tuple(entries)), data / "manifest.jsonl")
    (data / "audit.json").write_text(json.dumps(audit, sort_keys=True))
    run.write_json("synth.json", {"data": str(data), "labeled": s.labeled, "unlabeled": s.unlabeled,
                                  "hidden_non_neutral": int(sum(v != NEUTRAL for v in audit.values()))})
    print(data)


def cmd_preprocess(args, cfg: RunConfig, run: Run):
    src = Path(args.data)
    manifest = load_manifest(src / "manifest.jsonl")
    needs_codec = any(e.audio and e.audio_clip and e.audio_clip.endswith(".npy") for e in manifest)
    codec = None
    if needs_codec:
        if not args.codec:
            raise MissingInputError("dataset holds waveforms; pass --codec with a trained codec checkpoint")
        codec = load_codec(args.codec)
    out = run.dir / "data"
    (out / "clips").mkdir(parents=True, exist_ok=True)
    entries = []
    for e in manifest:
        a_path = f_path = None
        if e.audio:
            if e.audio_clip.endswith(".npy"):
                chunks = list(chunk_stream(np.load(src / e.audio_clip)))[:30]
                lat = latents_for_segment(chunks, codec, cfg.mfcc).latents
            else:
                lat, _ = read_clip(src / e.audio_clip)
            a_path = f"clips/{e.media_id}_audio.clip"
            write_clip(out / a_path, lat, normalized=True)
        if e.face:
            frames, normalized = read_clip(src / e.face_clip)
            if not normalized:
                frames = normalize_clip(frames, cfg.run.normalize_mode).frames
            f_path = f"clips/{e.media_id}_face.clip"
            write_clip(out / f_path, frames, normalized=True)
        entries.append(dataclasses.replace(e, audio_clip=a_path, face_clip=f_path))
    save_manifest(SegmentManifest(tuple(entries)), out / "manifest.jsonl")
    if (src / "audit.json").is_file():
        (out / "audit.json").write_text((src / "audit.json").read_text())
    run.write_json("preprocess.json", {"source": str(src), "data": str(out), "entries": len(entries)})
    print(out)


def cmd_train_codec(args, cfg: RunConfig, run: Run):
    src = Path(args.data)
    manifest = load_manifest(src / "manifest.jsonl")
    waves = [src / e.audio_clip for e in manifest if e.audio and e.audio_clip and e.audio_clip.endswith(".npy")]
    if not waves:
        raise MissingInputError(f"no waveform (.npy) audio in {src}")
    chunks = np.stack([c for w in waves for c in chunk_stream(np.load(w))]).astype(np.float32)
    split = split_corpus(len(chunks), tuple(args.split), seed=cfg.seed)
    tc = dataclasses.replace(cfg.codec_train, checkpoint_dir=str(run.dir / "codec_checkpoints"))
    res = train_codec(chunks, split, cfg.codec, tc, cfg.mfcc)
    save_codec(res.model, run.dir / "codec.pt", extra={"config_hash": run.hash, "best_epoch": res.best_epoch})
    with open(run.dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for r in res.history:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    run.write_json("codec_summary.json", {"chunks": len(chunks), "best_epoch": res.best_epoch,
                                          "test_loss": res.test_loss, "aborted": res.aborted})
    print(run.dir / "codec.pt")


def _fold_trainer(cfg: RunConfig, data: LoadedData, run: Run, metrics_fh):
    def trainer(train_set: PairedSet, val_set: PairedSet, fold: int):
        audio = LabeledSet(np.concatenate([train_set.audio, data.audio_only.x]),
                           np.concatenate([train_set.y, data.audio_only.y]))
        face = LabeledSet(np.concatenate([train_set.face, data.face_only.x]),
                          np.concatenate([train_set.y, data.face_only.y]))
        td = TrainingData(audio, face, train_set, data.pool_audio, data.pool_face)
        bundle = ModelBundle(cfg.model, seed=cfg.seed * 100 + fold)

        def on_epoch(record):
            metrics_fh.write(json.dumps({"fold": fold, **record}, sort_keys=True) + "\n")
            metrics_fh.flush()

        res = train(bundle, td, cfg.train, val=val_set, augment=cfg.augment_settings(),
                    distill_every=cfg.run.distill_every, on_epoch=on_epoch)
        res.restore_best()
        save_bundle(bundle, run.dir / f"fold{fold}_best.pt", run.hash,
                    {"fold": fold, "best_epoch": res.best_epoch, "val_macro_f1": res.best_score})
        return bundle
    return trainer


def cmd_train(args, cfg: RunConfig, run: Run):
    data = load_dataset(args.data)
    if len(data.paired) < max(cfg.train.folds, 2):
        raise ConfigError(f"need at least {max(cfg.train.folds, 2)} paired labeled items, found {len(data.paired)}")
    with open(run.dir / "metrics.jsonl", "w", encoding="utf-8") as fh:
        report = cross_validate(data.paired, _fold_trainer(cfg, data, run, fh), folds=cfg.train.folds, seed=cfg.seed)
    report.meta = {"config_hash": run.hash, "data": str(args.data)}
    (run.dir / "report.json").write_text(report.to_json())
    (run.dir / "table.txt").write_text(render_f1_table(report) + "\n")
    print(render_f1_table(report))


def cmd_distill(args, cfg: RunConfig, run: Run):
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise MissingInputError(f"missing artifact: checkpoint {ckpt}")
    bundle, _ = load_bundle(ckpt)
    data = load_dataset(args.data)
    tau = cfg.train.fixmatch_threshold
    out = {"threshold": tau ** 3}
    for name, net, pool in (("audio", bundle.audio, data.pool_audio), ("face", bundle.face, data.pool_face)):
        dp = distill_pool(net, pool, tau)
        entry = {"pool_size": len(pool), "kept": len(dp), "media_ids": [data.pool_ids[name][i] for i in dp.items]}
        if pool.hidden_labels is not None and len(dp):
            entry["hidden_non_neutral_fraction"] = float(np.mean(pool.hidden_labels[dp.items] != NEUTRAL))
        out[name] = entry
    run.write_json("distilled.json", out)
    print(json.dumps({k: (v if not isinstance(v, dict) else {kk: vv for kk, vv in v.items() if kk != "media_ids"})
                      for k, v in out.items()}))


def cmd_evaluate(args, cfg: RunConfig, run: Run):
    missing = [c for c in args.checkpoint if not Path(c).is_file()]
    if missing:
        raise MissingInputError("missing artifact: checkpoint " + ", ".join(missing))
    data = load_dataset(args.data)
    if len(data.paired) == 0:
        raise ConfigError("dataset has no paired labeled items to evaluate on")
    per_ckpt = {h: [] for h in ("audio", "face", "fusion")}
    for c in args.checkpoint:
        bundle, _ = load_bundle(c)
        for h, v in evaluate_bundle(bundle, data.paired).items():
            per_ckpt[h].append(v)
    report = EvalReport(summarize(per_ckpt), len(args.checkpoint), single_fold=len(args.checkpoint) == 1,
                        meta={"config_hash": run.hash, "checkpoints": list(args.checkpoint)})
    (run.dir / "report.json").write_text(report.to_json())
    print(render_f1_table(report))


def cmd_report(args, cfg: RunConfig, run: Run):
    path = Path(args.report)
    if not path.is_file():
        raise MissingInputError(f"missing artifact: report {path}")
    report = EvalReport.from_dict(json.loads(path.read_text()))
    text = render_f1_table(report) + "\n\n" + "\n\n".join(render_confusion(report, h) for h in report.heads)
    (run.dir / "report.txt").write_text(text + "\n")
    print(text)


COMMANDS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train-codec": cmd_train_codec, "train": cmd_train,
    "distill": cmd_distill, "evaluate": cmd_evaluate, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="userstate", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", default="runs", help="root for per-run output directories")
        p.add_argument("--run-dir", help="exact output directory (skips timestamp naming)")
        p.add_argument("--paper-preset", "--published-preset", dest="published_preset", action="store_true",
                       help="use the published training hyperparameters")
        p.add_argument("--dry-run", action="store_true", help="print the resolved config and exit")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    add("synth", "generate a synthetic dataset")
    p = add("preprocess", "normalize landmarks and encode waveforms")
    p.add_argument("--data")
    p.add_argument("--codec")
    p = add("train-codec", "train the audio codec")
    p.add_argument("--data")
    p.add_argument("--split", type=float, nargs=3, default=(0.99, 0.005, 0.005))
    p = add("train", "cross-validated training")
    p.add_argument("--data")
    p = add("distill", "inspect distilled pools")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True)
    p = add("evaluate", "score checkpoints on labeled data")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True, nargs="+")
    p = add("report", "render a stored report")
    p.add_argument("--report", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format='{"level": "%(levelname)s", "logger": "%(name)s", "msg": "%(message)s"}')
    try:
        cfg = load_config(args.config, seed=args.seed, published_preset=args.published_preset)
    except (ConfigError, MissingInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.dry_run:
        print(json.dumps({"config_hash": cfg.hash(), "config": cfg.to_dict()}, indent=2, sort_keys=True))
        return 0
    if getattr(args, "data", "") is None:
        print(f"error: {args.command} needs --data", file=sys.stderr)
        return 2
    run = Run(cfg, args.command, args.out, args.run_dir)
    try:
        COMMANDS[args.command](args, cfg, run)
    except (ConfigError, MissingInputError) as exc:
        run.fail(args.command, exc)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # any aborted stage leaves a failure record
        run.fail(args.command, exc)
        print(f"error: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
