"""Command-line entry point: ``partmotion <subcommand> [options]``.

Exit codes: 0 success, 1 annotation validation failure, 2 configuration or
usage error, 3 runtime failure. Errors are also printed to stderr as one JSON
object ``{"error": CODE, "message": ..., "detail": ...}``.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotation_schema import (
    PartId, TimedLabel, dataset_stats, fill_unknown_gaps, loads, read_annotations, validate_annotation,
    write_annotations,
)
from .errors import AnnotationError, ConfigError, PartMotionError

# --------------------------------------------------------------------------- configuration


@dataclass
class PathsConfig:
    dataset: str = "data/synth"
    checkpoint: str = "runs/generator.pt"
    retrieval: str = "runs/retrieval.pt"
    reports: str = "runs/reports"


@dataclass
class DataConfig:
    num_sequences: int = 2000
    min_frames: int = 100
    max_frames: int = 140
    fps: float = 20.0
    sparsify: float = 0.0


@dataclass
class ModelConfig:
    width: int = 256
    depth: int = 4
    heads: int = 4
    ff_mult: int = 4
    dropout: float = 0.1
    max_frames: int = 200


@dataclass
class TrainingConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 2e-4
    weight_decay: float = 0.01
    mask_rate: float = 0.25
    action_drop: float = 0.1
    sequence_drop: float = 0.1
    log_every: int = 50


@dataclass
class EncoderConfig:
    name: str = "toy-hash:256"
    pca_dim: int = 50


@dataclass
class RetrievalSection:
    steps: int = 600
    batch_size: int = 64
    embed_dim: int = 64
    hidden: int = 128
    temperature: float = 0.07
    tau: float = 0.9
    min_pairs: int = 200


@dataclass
class EvalConfig:
    repeats: int = 20
    batch_size: int = 32
    diversity_pairs: int = 300


@dataclass
class AgentConfig:
    backend: str = "mock"
    endpoint: str = ""
    model: str = ""
    timeout: float = 120.0
    max_retries: int = 3
    rate_limit: float = 30.0
    max_attempts: int = 3
    parallelism: int = 4
    rules: str = ""
    template: str = ""


@dataclass
class RunSection:
    seed: int = 0
    threads: int = 1


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    paths: PathsConfig = field(default_factory=PathsConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    retrieval: RetrievalSection = field(default_factory=RetrievalSection)
    eval: EvalConfig = field(default_factory=EvalConfig)
    agent: AgentConfig = field(default_factory=AgentConfig)
    base_dir: Path = field(default_factory=Path.cwd)

    def path(self, key: str) -> Path:
        p = Path(getattr(self.paths, key))
        return p if p.is_absolute() else self.base_dir / p


def _convert(value: str, typ, where: str):
    try:
        if typ is bool:
            return value.strip().lower() in ("1", "true", "yes", "on")
        return typ(value)
    except ValueError:
        raise ConfigError("BAD_VALUE", f"{where}: cannot parse {value!r} as {typ.__name__}") from None


def load_config(path: str | Path | None) -> RunConfig:
    """Read an INI file; every section maps onto one :class:`RunConfig` field."""
    cfg = RunConfig()
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError("MISSING_CONFIG", f"config file {path} not found")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as e:
        raise ConfigError("BAD_CONFIG", str(e)) from None
    cfg.base_dir = path.resolve().parent
    sections = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "base_dir"}
    for name in parser.sections():
        if name not in sections:
            raise ConfigError("UNKNOWN_SECTION", f"[{name}] is not a config section")
        target = getattr(cfg, name)
        known = {f.name: f for f in dataclasses.fields(target)}
        for key, value in parser[name].items():
            if key not in known:
                raise ConfigError("UNKNOWN_KEY", f"[{name}] {key} is not a recognised key")
            typ = type(getattr(target, key))
            setattr(target, key, _convert(value, typ, f"[{name}] {key}"))
    return cfg


# --------------------------------------------------------------------------- helpers


def _out(msg: str) -> None:
    print(msg, flush=True)


def _setup(cfg: RunConfig) -> None:
    import torch

    torch.set_num_threads(max(1, cfg.run.threads))


def _load_split(cfg: RunConfig, split: str):
    from .dataset_synth import load_dataset

    directory = cfg.path("dataset")
    if not (directory / "manifest.json").is_file():
        raise ConfigError("MISSING_DATASET", f"no dataset at {directory}; run `partmotion synth` first")
    samples, skel, manifest = load_dataset(directory)
    ids = set(manifest.get("splits", {}).get(split, manifest["ids"]))
    return [s for s in samples if s[1].id in ids], skel


def _parse_segment_flag(text: str, with_part: bool):
    """``[PART:]LABEL:START:END``; the label may itself contain colons."""
    head, start, end = (text.rsplit(":", 2) + ["", ""])[:3] if text.count(":") >= 2 else (text, "", "")
    try:
        s, e = int(start), int(end)
    except ValueError:
        raise ConfigError("BAD_FLAG", f"expected {'PART:' if with_part else ''}LABEL:START:END, got {text!r}") from None
    if not with_part:
        return None, TimedLabel(head, s, e)
    part, _, label = head.partition(":")
    if not label:
        raise ConfigError("BAD_FLAG", f"expected PART:LABEL:START:END, got {text!r}")
    try:
        pid = PartId.from_key(part)
    except AnnotationError:
        raise ConfigError("BAD_FLAG", f"unknown body part {part!r}") from None
    return pid, TimedLabel(label, s, e)


def annotation_from_flags(seq: str | None, actions: Sequence[str], parts: Sequence[str],
                          frames: int | None, fps: float):
    """Partial conditioning: anything not given on the command line is UNKNOWN."""
    acts = [_parse_segment_flag(a, False)[1] for a in actions]
    part_segs: dict = {}
    for p in parts:
        pid, seg = _parse_segment_flag(p, True)
        part_segs.setdefault(pid, []).append(seg)
    ends = [s.end for s in acts] + [s.end for segs in part_segs.values() for s in segs]
    T = frames or (max(ends) if ends else 120)
    for segs in part_segs.values():
        segs.sort(key=lambda s: s.start)
    return fill_unknown_gaps(T, fps, [TimedLabel(seq, 0, T)] if seq else (), sorted(acts, key=lambda s: s.start),
                             part_segs, id="cli")


# --------------------------------------------------------------------------- subcommands


def cmd_synth(args, cfg: RunConfig) -> int:
    from .dataset_synth import build_dataset_splits, save_dataset, sparsify_labels, synthesize_dataset
    from .motion_repr import default_skeleton

    seed = cfg.run.seed if args.seed is None else args.seed
    n = args.n or cfg.data.num_sequences
    samples = synthesize_dataset(n, seed, frame_range=(cfg.data.min_frames, cfg.data.max_frames), fps=cfg.data.fps)
    q = cfg.data.sparsify if args.sparsify is None else args.sparsify
    if q > 0:
        rng = np.random.default_rng([seed, 1])
        samples = [(m, sparsify_labels(a, q, rng)) for m, a in samples]
        for m, a in samples:
            m.annotation = a
    splits = build_dataset_splits([a.id for _, a in samples], np.random.default_rng([seed, 2]))
    out = Path(args.out) if args.out else cfg.path("dataset")
    save_dataset(out, samples, default_skeleton(), seed, splits)
    _out(f"wrote {len(samples)} sequences to {out} "
         f"(train {len(splits['train'])}, val {len(splits['val'])}, test {len(splits['test'])})")
    return 0


def cmd_validate(args, cfg: RunConfig) -> int:
    bad = 0
    with open(args.file, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                ann = loads(line)
            except AnnotationError as e:
                bad += 1
                _out(json.dumps({"line": lineno, "violations": [{"rule": e.code, "message": e.message}]}))
                continue
            res = validate_annotation(ann)
            if not res.ok:
                bad += 1
                _out(json.dumps({"line": lineno, "id": ann.id, "violations": [v.to_dict() for v in res.violations]}))
    if bad:
        raise AnnotationError("VALIDATION_FAILED", f"{bad} invalid annotation(s) in {args.file}")
    _out(f"{args.file}: all annotations valid")
    return 0


def cmd_stats(args, cfg: RunConfig) -> int:
    st = dataset_stats(read_annotations(args.file))
    _out(json.dumps(st.to_dict(), indent=2, sort_keys=True) if args.json else st.table())
    return 0


def cmd_annotate(args, cfg: RunConfig) -> int:
    from .franken_agent import TranscriptLogger, annotate_many, make_backend, request_from_annotation

    a = cfg.agent
    backend = make_backend(args.backend or a.backend, rules_path=a.rules or None, endpoint=a.endpoint,
                           model=a.model, timeout=a.timeout, max_retries=a.max_retries, rate_limit=a.rate_limit)
    template = Path(a.template).read_text() if a.template else None
    anns = read_annotations(args.input)
    logger = TranscriptLogger(args.transcript) if args.transcript else None
    results = annotate_many([request_from_annotation(x) for x in anns], backend,
                            args.max_attempts or a.max_attempts, a.parallelism, logger, template)
    ok = [r for r in results if not isinstance(r, PartMotionError)]
    write_annotations(args.out, ok)
    for src, r in zip(anns, results):
        if isinstance(r, PartMotionError):
            print(json.dumps({"id": src.id, **r.to_dict()}), file=sys.stderr)
    _out(f"annotated {len(ok)}/{len(anns)} sequences -> {args.out}")
    return 0 if len(ok) == len(anns) else 3


def cmd_train_gen(args, cfg: RunConfig) -> int:
    from .conditioning import MaskingConfig
    from .diffusion_model import DenoiserConfig, TrainConfig, prepare_generator, train_denoiser

    _setup(cfg)
    train, skel = _load_split(cfg, "train")
    m, t = cfg.model, cfg.train
    dcfg = DenoiserConfig(width=m.width, depth=m.depth, heads=m.heads, ff_mult=m.ff_mult, dropout=m.dropout,
                          max_frames=m.max_frames, pca_dim=cfg.encoder.pca_dim)
    gen, feats = prepare_generator(train, skel, dcfg, cfg.encoder.name, cfg.run.seed)
    out = Path(args.out) if args.out else cfg.path("checkpoint")
    out.parent.mkdir(parents=True, exist_ok=True)
    log = out.with_suffix(".log.ndjson")
    log.write_text("")
    tcfg = TrainConfig(steps=args.steps or t.steps, batch_size=t.batch_size, lr=t.lr, weight_decay=t.weight_decay,
                       seed=cfg.run.seed, log_every=t.log_every,
                       masking=MaskingConfig(t.mask_rate, t.action_drop, t.sequence_drop))
    if tcfg.steps > 0:
        losses = train_denoiser(gen, feats, [a for _, a in train], tcfg, log)
        _out(f"trained {tcfg.steps} steps on {len(train)} sequences; final loss {np.mean(losses[-50:]):.4f}")
    gen.meta = {"steps": tcfg.steps, "seed": cfg.run.seed, "train_sequences": len(train)}
    gen.save(out)
    _out(f"saved generator to {out}")
    return 0


def cmd_train_eval(args, cfg: RunConfig) -> int:
    from .evaluation import RetrievalConfig, train_retrieval_suite

    _setup(cfg)
    train, skel = _load_split(cfg, "train")
    r = cfg.retrieval
    rcfg = RetrievalConfig(embed_dim=r.embed_dim, hidden=r.hidden, temperature=r.temperature,
                           steps=args.steps or r.steps, batch_size=r.batch_size, min_pairs=r.min_pairs)
    suite = train_retrieval_suite([m for m, _ in train], skel, cfg.encoder.name, rcfg, cfg.run.seed, tau=r.tau, log=_out)
    out = Path(args.out) if args.out else cfg.path("retrieval")
    out.parent.mkdir(parents=True, exist_ok=True)
    suite.save(out)
    _out(f"saved {len(suite.models)} retrieval models to {out}")
    return 0


def cmd_sample(args, cfg: RunConfig) -> int:
    from .diffusion_model import MotionGenerator, generate_motion
    from .motion_repr import save_motion

    _setup(cfg)
    ckpt = Path(args.checkpoint) if args.checkpoint else cfg.path("checkpoint")
    if not ckpt.is_file():
        raise ConfigError("MISSING_CHECKPOINT", f"no checkpoint at {ckpt}")
    gen = MotionGenerator.load(ckpt)
    if args.annotation:
        anns = read_annotations(args.annotation)
        if not anns:
            raise AnnotationError("EMPTY", f"{args.annotation} holds no annotations")
        ann = anns[0]
    else:
        ann = annotation_from_flags(args.seq, args.action or [], args.part or [], args.frames, args.fps)
    seed = cfg.run.seed if args.seed is None else args.seed
    motion = generate_motion(gen, ann, seed)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_motion(args.out, motion, gen.skeleton.name)
    _out(f"wrote {motion.num_frames}-frame motion to {args.out}")
    return 0


def cmd_evaluate(args, cfg: RunConfig) -> int:
    from .diffusion_model import MotionGenerator
    from .evaluation import RetrievalSuite, evaluate_suite

    _setup(cfg)
    test, _ = _load_split(cfg, args.split)
    suite_path = cfg.path("retrieval")
    if not suite_path.is_file():
        raise ConfigError("MISSING_RETRIEVAL", f"no retrieval suite at {suite_path}; run `partmotion train-eval`")
    suite = RetrievalSuite.load(suite_path)
    gen = None
    if args.generator == "checkpoint":
        ckpt = Path(args.checkpoint) if args.checkpoint else cfg.path("checkpoint")
        if not ckpt.is_file():
            raise ConfigError("MISSING_CHECKPOINT", f"no checkpoint at {ckpt}")
        gen = MotionGenerator.load(ckpt)
    e = cfg.eval
    res = evaluate_suite(gen, test, suite, args.repeats or e.repeats, cfg.run.seed,
                         diversity_pairs=e.diversity_pairs, batch_size=e.batch_size)
    out = Path(args.out) if args.out else cfg.path("reports") / f"{args.generator}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(res.to_json() + "\n")
    out.with_suffix(".txt").write_text(res.table() + "\n")
    _out(res.table())
    _out(f"report written to {out}")
    return 0


def cmd_render(args, cfg: RunConfig) -> int:
    from .motion_repr import default_skeleton, load_motion, load_skeleton
    from .render import render_frames

    skel = load_skeleton(args.skeleton) if args.skeleton else default_skeleton()
    motions = [load_motion(args.motion)] + ([load_motion(args.compare)] if args.compare else [])
    paths = render_frames(motions, skel, args.out, every=args.every, gif=args.gif)
    _out(f"rendered {len(paths)} frame(s) to {args.out}")
    return 0


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="partmotion", description="Part-aware text-to-motion toolkit.")
    p.add_argument("--config", help="INI config file (sections: run, paths, data, model, train, encoder, "
                                    "retrieval, eval, agent)")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--config", default=argparse.SUPPRESS, help="INI config file (overrides the global flag)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "Generate a synthetic annotated motion dataset.")
    sp.add_argument("--out", help="output directory (default: [paths] dataset)")
    sp.add_argument("--n", type=int, help="number of sequences (default: [data] num_sequences)")
    sp.add_argument("--seed", type=int, help="seed (default: [run] seed)")
    sp.add_argument("--sparsify", type=float, help="part-label drop rate (default: [data] sparsify)")

    sp = add("annotate", cmd_annotate, "Decompose sequence/action labels into part tracks with an agent backend.")
    sp.add_argument("--input", required=True, help="annotation file (newline-delimited JSON)")
    sp.add_argument("--out", required=True, help="output annotation file")
    sp.add_argument("--transcript", help="append agent transcripts to this NDJSON file")
    sp.add_argument("--backend", choices=("mock", "http"), help="backend (default: [agent] backend)")
    sp.add_argument("--max-attempts", type=int, help="attempts per sequence (default: [agent] max_attempts)")

    sp = add("validate", cmd_validate, "Check an annotation file; exit 1 on any violation.")
    sp.add_argument("file", help="annotation file (newline-delimited JSON)")

    sp = add("stats", cmd_stats, "Print dataset statistics for an annotation file.")
    sp.add_argument("file", help="annotation file (newline-delimited JSON)")
    sp.add_argument("--json", action="store_true", help="emit JSON instead of a table")

    sp = add("train-gen", cmd_train_gen, "Train the diffusion generator on the dataset's train split.")
    sp.add_argument("--out", help="checkpoint path (default: [paths] checkpoint)")
    sp.add_argument("--steps", type=int, help="optimizer steps (default: [train] steps)")

    sp = add("train-eval", cmd_train_eval, "Train the nine retrieval models used for evaluation.")
    sp.add_argument("--out", help="output path (default: [paths] retrieval)")
    sp.add_argument("--steps", type=int, help="steps per model (default: [retrieval] steps)")

    sp = add("sample", cmd_sample, "Generate a motion from an annotation file or from partial labels.")
    sp.add_argument("--checkpoint", help="generator checkpoint (default: [paths] checkpoint)")
    sp.add_argument("--annotation", help="annotation file; the first entry is used")
    sp.add_argument("--seq", help="sequence-level description")
    sp.add_argument("--action", action="append", metavar="LABEL:START:END", help="action window (repeatable)")
    sp.add_argument("--part", action="append", metavar="PART:LABEL:START:END",
                    help="body-part segment, e.g. LEFT_ARM:'raise left arm':0:40 (repeatable)")
    sp.add_argument("--frames", type=int, help="number of frames (default: last segment end, else 120)")
    sp.add_argument("--fps", type=float, default=20.0, help="frame rate (default 20)")
    sp.add_argument("--seed", type=int, help="sampling seed (default: [run] seed)")
    sp.add_argument("--out", required=True, help="output motion file (JSON)")

    sp = add("evaluate", cmd_evaluate, "Score a generator (or the ground truth) with the retrieval models.")
    sp.add_argument("--generator", choices=("ground-truth", "checkpoint"), default="checkpoint",
                    help="what to evaluate (default: checkpoint)")
    sp.add_argument("--checkpoint", help="generator checkpoint (default: [paths] checkpoint)")
    sp.add_argument("--split", default="test", help="dataset split (default: test)")
    sp.add_argument("--repeats", type=int, help="evaluation repeats (default: [eval] repeats)")
    sp.add_argument("--out", help="report path (default: [paths] reports/<generator>.json)")

    sp = add("render", cmd_render, "Render stick-figure frames of a motion file.")
    sp.add_argument("motion", help="motion file (JSON)")
    sp.add_argument("--compare", help="second motion drawn side by side")
    sp.add_argument("--skeleton", help="skeleton file (default: built-in toy skeleton)")
    sp.add_argument("--out", required=True, help="output directory for PNG frames")
    sp.add_argument("--every", type=int, default=1, help="render every n-th frame (default 1)")
    sp.add_argument("--gif", action="store_true", help="also write an animated GIF")
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except PartMotionError as e:
        print(json.dumps(e.to_dict(), default=str), file=sys.stderr)
        return e.exit_code
    except (OSError, ValueError, KeyError) as e:
        code = 2 if isinstance(e, FileNotFoundError) else 3
        print(json.dumps({"error": "CONFIG" if code == 2 else "RUNTIME", "message": str(e)}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
