#!/usr/bin/env python3
"""
mtsm command line: synthetic data, vocabulary, training, captioning,
BLEU evaluation, gradient checks and the geometry ablation.

Failures print one line `error[<category>]: <message>` on stderr and exit
with the category's code (see mtsm.errors).
"""
import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple, Type, Union, get_args, get_origin

from pydantic import BaseModel

from mtsm.config import VERSION, build_model_config, build_train_config, configure_logging, preset, settings
from mtsm.data_pipeline import (
    DetectionSet,
    LoadStats,
    Vocabulary,
    build_vocab,
    group_captions,
    load_captions,
    load_detections,
    make_examples,
    preprocess_caption,
    synth_corpus,
    write_captions,
    write_detections,
)
from mtsm.decoding import decode_corpus
from mtsm.errors import (
    ConfigError,
    ContractError,
    EmptyCaptionError,
    GradcheckFailed,
    MtsmError,
    UsageError,
)
from mtsm.gradcheck import GRADCHECK_VOCAB, check_model_gradients, gradcheck_sample
from mtsm.metrics import corpus_bleu
from mtsm.models import BleuReport, CaptionLine, ModelConfig, RunManifest, TrainConfig, bleu_table
from mtsm.training import TrainOutputs, train
from mtsm.transformer import CaptionModel, load_checkpoint

logger = logging.getLogger("mtsm.cli")

# derived from the vocabulary, never set by hand
_DERIVED_FIELDS = {"vocab_size"}


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):
        raise UsageError(f"{self.prog}: {message}")


# -------------------------------------------------------------------
# Flag helpers
# -------------------------------------------------------------------
def _parse_bool(text: str) -> bool:
    value = text.strip().lower()
    if value in ("1", "true", "yes", "on"):
        return True
    if value in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def _optional(kind):
    def parse(text: str):
        return None if text.strip().lower() == "none" else kind(text)
    parse.__name__ = kind.__name__
    return parse


def _flag_kwargs(annotation) -> Dict[str, Any]:
    origin = get_origin(annotation)
    if origin is Literal:
        return {"choices": list(get_args(annotation))}
    if origin is Union:
        inner = next(a for a in get_args(annotation) if a is not type(None))
        return {"type": _optional(inner), "metavar": f"{inner.__name__.upper()}|none"}
    if annotation is bool:
        return {"type": _parse_bool, "metavar": "true|false"}
    return {"type": annotation}


def _add_config_flags(parser: argparse.ArgumentParser, schema: Type[BaseModel]):
    """One --<field> flag per config field; unset flags leave the attribute absent."""
    group = parser.add_argument_group(f"{schema.__name__} overrides")
    for name, info in schema.model_fields.items():
        if name in _DERIVED_FIELDS:
            continue
        group.add_argument(f"--{name}", default=argparse.SUPPRESS, help=info.description,
                           **_flag_kwargs(info.annotation))


def _explicit(args: argparse.Namespace, schema: Type[BaseModel]) -> Dict[str, Any]:
    return {name: getattr(args, name) for name in schema.model_fields if hasattr(args, name)}


def _resolve_configs(args: argparse.Namespace, vocab_size: int) -> Tuple[ModelConfig, TrainConfig]:
    model_fields, train_fields = preset(args.config)
    model_fields.update(_explicit(args, ModelConfig))
    model_fields["vocab_size"] = vocab_size
    train_fields.setdefault("seed", settings.DEFAULT_SEED)
    train_fields.update(_explicit(args, TrainConfig))
    return build_model_config(**model_fields), build_train_config(**train_fields)


def _write_manifest(output: Path, subcommand: str, config: Dict[str, Any],
                    inputs: Dict[str, Optional[Path]], outputs: Dict[str, Optional[Path]],
                    seed: Optional[int]) -> Path:
    manifest = RunManifest(
        subcommand=subcommand,
        config=config,
        inputs={k: str(v) for k, v in inputs.items() if v is not None},
        outputs={k: str(v) for k, v in outputs.items() if v is not None},
        seed=seed,
        version=VERSION,
    )
    path = Path(f"{output}.manifest.json")
    path.write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    return path


def _load_sets(path: Path, config: ModelConfig) -> List[DetectionSet]:
    stats = LoadStats()
    sets = list(load_detections(path, config.min_score, config.max_objects, stats))
    if not sets:
        raise ContractError(f"{path}: no image has a detection scored >= {config.min_score}")
    width = sets[0].features.shape[1]
    if width != config.d_feat:
        raise ConfigError(f"{path}: features are {width}-dimensional but d_feat={config.d_feat}")
    logger.info(f"Loaded {len(sets)} images from {path} "
                f"({stats.boxes_dropped_by_score} boxes below threshold, {stats.boxes_dropped_by_cap} over cap)")
    return sets


def _tokens(text: str) -> List[str]:
    try:
        return preprocess_caption(text)
    except EmptyCaptionError:
        return []


def _score(candidates: Dict[str, str], references: Dict[str, List[str]],
           smooth_floor: Optional[float]) -> BleuReport:
    """BLEU over the images present in both maps, in sorted image-id order."""
    shared = sorted(set(candidates) & set(references))
    if not shared:
        raise ContractError("no image id appears in both candidates and references")
    missing = len(references) - len(shared)
    if missing:
        logger.warning(f"{missing} reference images have no candidate and are not scored")
    cands = [_tokens(candidates[i]) for i in shared]
    refs = [[preprocess_caption(r) for r in references[i]] for i in shared]
    return corpus_bleu(cands, refs, smooth_floor=smooth_floor)


def _report_json(rows: Dict[str, BleuReport]) -> str:
    return json.dumps({k: v.model_dump() for k, v in rows.items()}, indent=2, sort_keys=True) + "\n"


# -------------------------------------------------------------------
# Parser
# -------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="mtsm",
        description="Geometry-gated transformer captioning toolkit",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  mtsm synth --scenes 64 --seed 7 --out det.jsonl caps.jsonl
  mtsm build-vocab --captions caps.jsonl --out vocab.txt --min_count 1
  mtsm train --config tiny --detections det.jsonl --captions caps.jsonl --vocab vocab.txt --checkpoint model.npz
  mtsm caption --checkpoint model.npz --detections det.jsonl --out cand.jsonl
  mtsm eval --cand cand.jsonl --refs caps.jsonl
  mtsm gradcheck --config tiny
  mtsm ablate --config tiny --scenes 64 --heldout 32 --seed 0

Verbosity comes from MTSM_LOG_LEVEL (default INFO) or --log-level.
        """)
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING, ...")
    subparsers = parser.add_subparsers(dest="command", help="Available commands")

    synth_parser = subparsers.add_parser("synth", help="Write synthetic detections and captions")
    synth_parser.add_argument("--scenes", type=int, required=True)
    synth_parser.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    synth_parser.add_argument("--out", nargs=2, type=Path, metavar=("DETECTIONS", "CAPTIONS"),
                              help="Default: detections.jsonl and captions.jsonl under MTSM_DATA_DIR")
    synth_parser.add_argument("--captions-per-scene", type=int, default=1,
                              help="Relation captions kept per scene (0 = all)")
    synth_parser.add_argument("--d_feat", type=int, default=32)

    vocab_parser = subparsers.add_parser("build-vocab", help="Build a vocabulary from a captions file")
    vocab_parser.add_argument("--captions", type=Path, required=True)
    vocab_parser.add_argument("--out", type=Path, required=True)
    vocab_parser.add_argument("--min_count", type=int, default=5)

    train_parser = subparsers.add_parser("train", help="Train a captioning model")
    train_parser.add_argument("--config", default="desk", help="Preset: tiny, desk or paper")
    train_parser.add_argument("--detections", type=Path, required=True)
    train_parser.add_argument("--captions", type=Path, required=True)
    train_parser.add_argument("--vocab", type=Path, help="Vocabulary file (built from --captions if absent)")
    train_parser.add_argument("--min_count", type=int, default=5, help="Used when --vocab is absent")
    train_parser.add_argument("--checkpoint", type=Path, help="Default: model.npz under MTSM_CHECKPOINT_DIR")
    train_parser.add_argument("--log", type=Path, help="Per-epoch JSONL log")
    train_parser.add_argument("--resume", type=Path, help="Continue from this checkpoint")
    _add_config_flags(train_parser, ModelConfig)
    _add_config_flags(train_parser, TrainConfig)

    caption_parser = subparsers.add_parser("caption", help="Caption every image of a detections file")
    caption_parser.add_argument("--checkpoint", type=Path, required=True)
    caption_parser.add_argument("--detections", type=Path, required=True)
    caption_parser.add_argument("--out", type=Path, required=True)
    caption_parser.add_argument("--beam", type=int, default=1, help="Beam width (1 = greedy)")
    caption_parser.add_argument("--max_len", type=int)
    caption_parser.add_argument("--length_penalty", type=float, default=0.0)

    eval_parser = subparsers.add_parser("eval", help="Corpus BLEU-1..4")
    eval_parser.add_argument("--refs", type=Path, required=True)
    eval_parser.add_argument("--cand", type=Path, help="Candidate captions file")
    eval_parser.add_argument("--checkpoint", type=Path, help="Decode --detections with this model instead")
    eval_parser.add_argument("--detections", type=Path)
    eval_parser.add_argument("--beam", type=int, default=3)
    eval_parser.add_argument("--smooth_floor", type=float)
    eval_parser.add_argument("--out", type=Path, help="Write the reports as JSON")

    grad_parser = subparsers.add_parser("gradcheck", help="Finite-difference check of every parameter")
    grad_parser.add_argument("--config", default="tiny")
    grad_parser.add_argument("--seed", type=int, default=settings.DEFAULT_SEED)
    grad_parser.add_argument("--entries", type=int, default=settings.GRADCHECK_ENTRIES,
                             help="Entries checked per parameter (0 = all)")
    grad_parser.add_argument("--step", type=float, default=settings.GRADCHECK_STEP)
    grad_parser.add_argument("--tolerance", type=float, default=settings.GRADCHECK_TOLERANCE)

    ablate_parser = subparsers.add_parser("ablate", help="Geometry-gated model vs. ablation on held-out scenes")
    ablate_parser.add_argument("--config", default="tiny")
    ablate_parser.add_argument("--scenes", type=int, default=64)
    ablate_parser.add_argument("--heldout", type=int, default=32)
    ablate_parser.add_argument("--min_count", type=int, default=1)
    ablate_parser.add_argument("--out", type=Path, help="Write the reports as JSON")
    _add_config_flags(ablate_parser, ModelConfig)
    _add_config_flags(ablate_parser, TrainConfig)
    return parser


# -------------------------------------------------------------------
# Commands
# -------------------------------------------------------------------
def synth(args: argparse.Namespace):
    if args.scenes < 1:
        raise UsageError("--scenes must be >= 1")
    per_scene = None if args.captions_per_scene == 0 else args.captions_per_scene
    scenes, captions = synth_corpus(args.scenes, args.seed, d_feat=args.d_feat, captions_per_scene=per_scene)
    if args.out is None:
        settings.ensure_data_dir()
        det_path, cap_path = settings.DATA_DIR / "detections.jsonl", settings.DATA_DIR / "captions.jsonl"
    else:
        det_path, cap_path = args.out
    write_detections(det_path, scenes)
    write_captions(cap_path, captions)
    config = {"scenes": args.scenes, "captions_per_scene": args.captions_per_scene, "d_feat": args.d_feat}
    for out in (det_path, cap_path):
        _write_manifest(out, "synth", config, {}, {"detections": det_path, "captions": cap_path}, args.seed)
    print(f"Wrote {len(scenes)} scenes to {det_path} and {len(captions)} captions to {cap_path}")


def build_vocab_command(args: argparse.Namespace):
    lines = load_captions(args.captions)
    vocab = build_vocab((preprocess_caption(c.caption) for c in lines), args.min_count)
    vocab.save(args.out)
    _write_manifest(args.out, "build-vocab", {"min_count": args.min_count},
                    {"captions": args.captions}, {"vocab": args.out}, None)
    print(f"Vocabulary: {len(vocab)} ids ({len(vocab.tokens)} words) -> {args.out}")


def train_command(args: argparse.Namespace):
    if args.checkpoint is None:
        settings.ensure_checkpoint_dir()
        args.checkpoint = settings.CHECKPOINT_DIR / "model.npz"
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        vocab = resume.vocabulary()
        model_config = resume.model_config
        train_fields = dict(resume.train_config.model_dump() if resume.train_config else {})
        train_fields.update(_explicit(args, TrainConfig))
        train_config = build_train_config(**train_fields)
    else:
        if args.vocab:
            vocab = Vocabulary.load(args.vocab)
        else:
            vocab = build_vocab((preprocess_caption(c.caption) for c in load_captions(args.captions)),
                                args.min_count)
        model_config, train_config = _resolve_configs(args, len(vocab))

    sets = _load_sets(args.detections, model_config)
    examples = make_examples(sets, load_captions(args.captions), vocab)
    too_long = [ex for ex in examples if len(ex.words) > model_config.max_len]
    if too_long:
        raise ConfigError(f"{len(too_long)} captions exceed max_len={model_config.max_len} words")

    model = resume.to_model() if resume is not None else CaptionModel(model_config, seed=train_config.seed)
    logger.info(f"Training on {len(examples)} pairs, {model.params.count()} weights, preset {args.config}")
    outputs = TrainOutputs()
    ckpt = train(model, examples, train_config, vocab, checkpoint_path=args.checkpoint,
                 log_path=args.log, resume=resume, outputs=outputs)
    _write_manifest(
        args.checkpoint, "train",
        {"model": model_config.model_dump(), "train": train_config.model_dump(), "preset": args.config},
        {"detections": args.detections, "captions": args.captions, "vocab": args.vocab, "resume": args.resume},
        {"checkpoint": args.checkpoint, "log": args.log},
        train_config.seed,
    )
    final = ckpt.loss_history[-1] if ckpt.loss_history else float("nan")
    print(f"Trained to epoch {ckpt.epoch}, final mean loss {final:.4f} -> {args.checkpoint}")


def caption_command(args: argparse.Namespace):
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab = ckpt.to_model(), ckpt.vocabulary()
    sets = _load_sets(args.detections, model.config)
    decoded = decode_corpus(model, sets, args.beam, args.max_len, args.length_penalty)
    lines = [CaptionLine(image_id=det.image_id, caption=vocab.to_text(ids)) for det, ids in zip(sets, decoded)]
    write_captions(args.out, lines)
    _write_manifest(args.out, "caption",
                    {"beam": args.beam, "max_len": args.max_len, "length_penalty": args.length_penalty},
                    {"checkpoint": args.checkpoint, "detections": args.detections}, {"captions": args.out},
                    ckpt.seed)
    print(f"Captioned {len(lines)} images -> {args.out}")


def eval_command(args: argparse.Namespace):
    references = group_captions(load_captions(args.refs))
    rows: Dict[str, BleuReport] = {}
    if args.cand is not None:
        if args.checkpoint is not None:
            raise UsageError("eval takes either --cand or --checkpoint, not both")
        candidates = {k: v[0] for k, v in group_captions(load_captions(args.cand)).items()}
        rows["MTSM"] = _score(candidates, references, args.smooth_floor)
        seed = None
    elif args.checkpoint is not None and args.detections is not None:
        ckpt = load_checkpoint(args.checkpoint)
        model, vocab = ckpt.to_model(), ckpt.vocabulary()
        sets = _load_sets(args.detections, model.config)
        for label, width in (("MTSM greedy", 1), (f"MTSM beam-{args.beam}", args.beam)):
            decoded = decode_corpus(model, sets, width)
            candidates = {det.image_id: vocab.to_text(ids) for det, ids in zip(sets, decoded)}
            rows[label] = _score(candidates, references, args.smooth_floor)
        seed = ckpt.seed
    else:
        raise UsageError("eval needs --cand, or --checkpoint together with --detections")

    print(bleu_table(rows))
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(_report_json(rows), encoding="utf-8")
        _write_manifest(args.out, "eval", {"beam": args.beam, "smooth_floor": args.smooth_floor},
                        {"refs": args.refs, "cand": args.cand, "checkpoint": args.checkpoint,
                         "detections": args.detections},
                        {"report": args.out}, seed)


def gradcheck_command(args: argparse.Namespace):
    model_fields, _ = preset(args.config)
    model_fields.update(vocab_size=GRADCHECK_VOCAB, dropout_rate=0.0)
    config = build_model_config(**model_fields)
    model = CaptionModel(config, seed=args.seed)
    det, inputs, targets = gradcheck_sample(config, args.seed)
    report = check_model_gradients(model, det, inputs, targets, h=args.step,
                                   max_entries=args.entries, seed=args.seed, tolerance=args.tolerance)
    for p in report.params:
        print(f"{p.name:<40} {p.entries_checked:>6}  {p.max_relative_error:.3e}")
    print(f"max relative error {report.max_relative_error:.3e}")
    if not report.passed:
        worst = max(report.params, key=lambda p: p.max_relative_error)
        raise GradcheckFailed(f"max relative error {report.max_relative_error:.3e} >= {report.tolerance:g} "
                              f"(worst: {worst.name})")


def ablate_command(args: argparse.Namespace):
    """Train geometry-gated and ablated models with the same epochs and seed, report held-out BLEU."""
    train_scenes, train_caps = synth_corpus(args.scenes, _seed(args), d_feat=_d_feat(args))
    test_scenes, test_caps = synth_corpus(args.heldout, _seed(args) + 1, d_feat=_d_feat(args),
                                          captions_per_scene=None)
    vocab = build_vocab((preprocess_caption(c.caption) for c in train_caps + test_caps), args.min_count)
    model_config, train_config = _resolve_configs(args, len(vocab))
    examples = make_examples(train_scenes, train_caps, vocab)
    references = group_captions(test_caps)

    rows: Dict[str, BleuReport] = {}
    for label, geometry in (("MTSM (geometry)", True), ("Ablation (no geometry)", False)):
        config = model_config.model_copy(update={"geometry": geometry})
        model = CaptionModel(config, seed=train_config.seed)
        logger.info(f"Training {label}")
        train(model, examples, train_config, vocab)
        decoded = decode_corpus(model, test_scenes)
        candidates = {det.image_id: vocab.to_text(ids) for det, ids in zip(test_scenes, decoded)}
        rows[label] = _score(candidates, references, None)

    print(bleu_table(rows))
    if args.out is not None:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        args.out.write_text(_report_json(rows), encoding="utf-8")
        _write_manifest(args.out, "ablate",
                        {"model": model_config.model_dump(), "train": train_config.model_dump(),
                         "scenes": args.scenes, "heldout": args.heldout, "preset": args.config},
                        {}, {"report": args.out}, train_config.seed)


def _seed(args: argparse.Namespace) -> int:
    return getattr(args, "seed", settings.DEFAULT_SEED)


def _d_feat(args: argparse.Namespace) -> int:
    return getattr(args, "d_feat", preset(args.config)[0].get("d_feat", ModelConfig().d_feat))


# -------------------------------------------------------------------
# Entry point
# -------------------------------------------------------------------
def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        configure_logging(args.log_level)

        if args.command == "synth":
            synth(args)
        elif args.command == "build-vocab":
            build_vocab_command(args)
        elif args.command == "train":
            train_command(args)
        elif args.command == "caption":
            caption_command(args)
        elif args.command == "eval":
            eval_command(args)
        elif args.command == "gradcheck":
            gradcheck_command(args)
        elif args.command == "ablate":
            ablate_command(args)
        else:
            parser.print_help()
            return UsageError.exit_code
    except MtsmError as e:
        print(e.one_line(), file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print("error[interrupted]: cancelled by user", file=sys.stderr)
        return 130
    return 0


run = main


if __name__ == "__main__":
    sys.exit(main())
