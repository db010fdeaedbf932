"""Pipeline orchestration: subcommands, checkpoints, manifests, reports.

Subcommands map one-to-one onto pipeline stages::

    uncap prompt-train --config toy.cfg           # stage I
    uncap uic-train    --config toy.cfg           # stage II
    uncap refine       --config toy.cfg           # stage III
    uncap caption      --config toy.cfg --input images.jsonl
    uncap evaluate     --config toy.cfg

Each stage owns one directory under the run's output directory and writes
its artifacts exactly once (reruns into the same directory are refused).
Every stage directory carries a manifest with the resolved config, its
hash, the seed, and the code version — enough to reproduce the artifacts
bit for bit.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from . import __version__
from .backbone import BackboneSpec, DegenerateFeatureError, ToyDualEncoder
from .captioner import CaptionerBundle, GeneratorCheckpoint, Stage2Config, train_stage2
from .config import ConfigError, RunConfig, load_run_config
from .corpus import load_corpus
from .metrics import evaluate
from .prompt import PromptCheckpoint, Stage1Config, train_stage1
from .refine import RefineConfig, refine_loop, write_pseudo_pairs
from .serialize import dump_json, load_json, mix_seed, read_jsonl, write_jsonl

STAGE_SUBCOMMANDS = {
    "prompt-train": "prompt",
    "uic-train": "uic",
    "refine": "refine",
    "caption": "caption",
    "evaluate": "evaluate",
}


class PipelineError(RuntimeError):
    pass


class MissingPrerequisiteError(PipelineError):
    pass


def _backbone(config: RunConfig) -> ToyDualEncoder:
    return ToyDualEncoder(
        BackboneSpec(
            feature_dim=config.feature_dim,
            token_embed_dim=config.token_embed_dim,
            similarity_scale=config.similarity_scale,
            seed=config.backbone_seed,
        )
    )


def _stage_dir(config: RunConfig, stage: str) -> Path:
    return Path(config.output_dir) / stage


def _reserve(path: Path) -> Path:
    if path.exists():
        raise PipelineError(f"artifact already exists (outputs are write-once): {path}")
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_manifest(stage_dir: Path, config: RunConfig, stage: str) -> str:
    manifest = {
        "stage": stage,
        "seed": config.seed,
        "code_version": __version__,
        "config": config.manifest_dict(),
        "config_hash": config.config_hash(),
    }
    path = _reserve(stage_dir / "manifest.json")
    dump_json(path, manifest)
    return str(path)


def _prompt_checkpoint_path(config: RunConfig) -> Path:
    if config.prompt_checkpoint:
        return Path(config.prompt_checkpoint)
    return _stage_dir(config, "prompt") / "checkpoint.json"


def _uic_checkpoint_path(config: RunConfig) -> Path:
    if config.uic_checkpoint:
        return Path(config.uic_checkpoint)
    return _stage_dir(config, "uic") / "checkpoint.json"


def _refine_checkpoint_path(config: RunConfig) -> Path:
    if config.refine_checkpoint:
        return Path(config.refine_checkpoint)
    return _stage_dir(config, "refine") / "checkpoint.json"


def _load_prompt_checkpoint(config: RunConfig) -> PromptCheckpoint:
    path = _prompt_checkpoint_path(config)
    if not path.exists():
        raise MissingPrerequisiteError(f"stage prompt required: no checkpoint at {path}")
    return PromptCheckpoint.from_payload(load_json(path))


def _load_uic_checkpoint(config: RunConfig) -> GeneratorCheckpoint:
    path = _uic_checkpoint_path(config)
    if not path.exists():
        raise MissingPrerequisiteError(f"stage uic required: no checkpoint at {path}")
    return GeneratorCheckpoint.from_payload(load_json(path))


def _load_caption_checkpoint(config: RunConfig) -> GeneratorCheckpoint:
    """Prefer the refined generator; fall back to the stage-II one."""
    refined = _refine_checkpoint_path(config)
    if refined.exists():
        return GeneratorCheckpoint.from_payload(load_json(refined))
    return _load_uic_checkpoint(config)


def _check_spec(config: RunConfig, spec_hash: str, what: str) -> None:
    if spec_hash != _backbone(config).spec_hash():
        raise PipelineError(
            f"{what} was trained against a different backbone spec; refusing to mix"
        )


def run_prompt_stage(config: RunConfig) -> dict[str, str]:
    corpus = load_corpus(config.images, config.sentences, config.concepts)
    backbone = _backbone(config)
    stage_dir = _stage_dir(config, "prompt")
    ckpt_path = _reserve(stage_dir / "checkpoint.json")
    checkpoint = train_stage1(
        corpus,
        backbone,
        Stage1Config(
            steps=config.stage1_steps,
            batch_size=config.stage1_batch,
            learning_rate=config.lr_stage1,
            prompt_length=config.prompt_length,
            seed=mix_seed(config.seed, "stage1"),
        ),
    )
    dump_json(ckpt_path, checkpoint.to_payload())
    manifest = _write_manifest(stage_dir, config, "prompt")
    return {"checkpoint": str(ckpt_path), "manifest": manifest}


def run_uic_stage(config: RunConfig) -> dict[str, str]:
    corpus = load_corpus(config.images, config.sentences, config.concepts)
    backbone = _backbone(config)
    prompt_ckpt = None
    if config.use_prompt:
        prompt_ckpt = _load_prompt_checkpoint(config)
        _check_spec(config, prompt_ckpt.spec_hash, "prompt checkpoint")
    stage_dir = _stage_dir(config, "uic")
    ckpt_path = _reserve(stage_dir / "checkpoint.json")
    checkpoint = train_stage2(
        corpus,
        backbone,
        prompt_ckpt,
        Stage2Config(
            steps=config.stage2_steps,
            batch_size=config.stage2_batch,
            learning_rate=config.lr_stage2,
            lambda_concept=config.lambda_concept,
            baseline_decay=config.baseline_decay,
            hidden_size=config.hidden_size,
            embed_dim=config.embed_dim,
            max_len=config.max_len,
            min_count=config.min_count,
            use_prompt=config.use_prompt,
            lm_warmup_steps=config.lm_warmup_steps,
            lm_warmup_lr=config.lm_warmup_lr,
            seed=mix_seed(config.seed, "stage2"),
        ),
    )
    dump_json(ckpt_path, checkpoint.to_payload())
    manifest = _write_manifest(stage_dir, config, "uic")
    return {"checkpoint": str(ckpt_path), "manifest": manifest}


def run_refine_stage(config: RunConfig) -> dict[str, str]:
    corpus = load_corpus(config.images, config.sentences, config.concepts)
    backbone = _backbone(config)
    checkpoint = _load_uic_checkpoint(config)
    _check_spec(config, checkpoint.spec_hash, "stage-II checkpoint")
    holdout = read_jsonl(config.holdout_images) if config.holdout_images else None
    eval_items = read_jsonl(config.eval_set) if config.eval_set else None
    stage_dir = _stage_dir(config, "refine")
    ckpt_path = _reserve(stage_dir / "checkpoint.json")
    report_path = _reserve(stage_dir / "report.json")

    def pair_writer(iteration: int, pairs) -> None:
        write_pseudo_pairs(_reserve(stage_dir / f"pseudo_pairs_iter{iteration}.jsonl"), pairs)

    refined, report = refine_loop(
        corpus,
        backbone,
        checkpoint,
        RefineConfig(
            threshold=config.threshold,
            threshold_mode=config.threshold_mode,
            iterations=config.iterations,
            learning_rate=config.lr_stage3,
            epochs_per_iteration=config.stage3_epochs,
            batch_size=config.stage3_batch,
            seed=mix_seed(config.seed, "stage3"),
        ),
        holdout_images=holdout,
        eval_items=eval_items,
        pair_writer=pair_writer,
    )
    dump_json(ckpt_path, refined.to_payload())
    dump_json(report_path, report.to_json_dict())
    manifest = _write_manifest(stage_dir, config, "refine")
    return {"checkpoint": str(ckpt_path), "report": str(report_path), "manifest": manifest}


def run_caption_stage(config: RunConfig, input_path: str | None = None) -> dict[str, str]:
    backbone = _backbone(config)
    checkpoint = _load_caption_checkpoint(config)
    _check_spec(config, checkpoint.spec_hash, "caption checkpoint")
    bundle = CaptionerBundle(checkpoint)
    records = read_jsonl(input_path or config.images)
    stage_dir = _stage_dir(config, "caption")
    out_path = _reserve(stage_dir / "captions.jsonl")
    lines = []
    for record in records:
        image_id = record.get("id", "<missing id>")
        try:
            feat = backbone.encode_image(record)
            if float(torch.linalg.vector_norm(feat.vector)) == 0.0:
                raise DegenerateFeatureError(f"image {image_id!r}: zero-norm feature")
            lines.append({"image_id": image_id, "caption": bundle.decode_record(backbone, record)})
        except (ValueError, DegenerateFeatureError) as exc:
            lines.append({"image_id": image_id, "error": str(exc)})
    write_jsonl(out_path, lines)
    manifest = _write_manifest(stage_dir, config, "caption")
    return {"captions": str(out_path), "manifest": manifest}


def run_evaluate_stage(config: RunConfig) -> dict[str, str]:
    if not config.eval_set:
        raise ConfigError("invalid value for 'eval_set': evaluate stage needs a references file")
    backbone = _backbone(config)
    checkpoint = _load_caption_checkpoint(config)
    _check_spec(config, checkpoint.spec_hash, "evaluation checkpoint")
    bundle = CaptionerBundle(checkpoint)
    eval_items = read_jsonl(config.eval_set)
    image_source = config.holdout_images or config.images
    record_by_id = {r["id"]: r for r in read_jsonl(image_source)}
    missing = sorted(it.get("image_id", "?") for it in eval_items if it.get("image_id") not in record_by_id)
    if missing:
        raise PipelineError(f"eval items reference images absent from {image_source}: {missing}")
    report = evaluate(lambda item: bundle.decode_record(backbone, record_by_id[item["image_id"]]), eval_items)
    stage_dir = _stage_dir(config, "evaluate")
    report_path = _reserve(stage_dir / "report.json")
    dump_json(report_path, report.to_json_dict())
    manifest = _write_manifest(stage_dir, config, "evaluate")
    return {"report": str(report_path), "manifest": manifest}


def run(config: RunConfig, input_path: str | None = None) -> dict[str, str]:
    """Dispatch one pipeline stage; returns the artifact path map."""
    config.validate()
    if config.stage == "prompt":
        return run_prompt_stage(config)
    if config.stage == "uic":
        return run_uic_stage(config)
    if config.stage == "refine":
        return run_refine_stage(config)
    if config.stage == "caption":
        return run_caption_stage(config, input_path)
    if config.stage == "evaluate":
        return run_evaluate_stage(config)
    raise ConfigError(f"invalid value for 'stage': {config.stage!r}")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uncap", description=__doc__)
    parser.add_argument("--version", action="version", version=f"uncap {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, stage in STAGE_SUBCOMMANDS.items():
        p = sub.add_parser(command, help=f"run the {stage} stage")
        p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--output", default=None, help="override output_dir")
        p.add_argument("--threshold", type=float, default=None)
        p.add_argument("--iterations", type=int, default=None)
        p.add_argument("--lr", type=float, default=None, help="override this stage's learning rate")
        if command == "caption":
            p.add_argument("--input", default=None, help="images JSONL to caption (defaults to config images)")
    return parser


_LR_KEYS = {"prompt": "lr_stage1", "uic": "lr_stage2", "refine": "lr_stage3"}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    stage = STAGE_SUBCOMMANDS[args.command]
    overrides: dict[str, str] = {"stage": stage}
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.output is not None:
        overrides["output_dir"] = args.output
    if args.threshold is not None:
        overrides["threshold"] = repr(args.threshold)
    if args.iterations is not None:
        overrides["iterations"] = str(args.iterations)
    if args.lr is not None:
        if stage not in _LR_KEYS:
            print(f"error: --lr does not apply to the {stage} stage", file=sys.stderr)
            return 2
        overrides[_LR_KEYS[stage]] = repr(args.lr)
    try:
        config = load_run_config(args.config, overrides)
        artifacts = run(config, input_path=getattr(args, "input", None))
    except (ConfigError, PipelineError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for name in sorted(artifacts):
        print(f"{name}: {artifacts[name]}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
