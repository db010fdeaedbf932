"""Stage III: metric-gated pseudo-label filtering and generator refining.

Every generated image-caption pair is scored with the scaled image-text
cosine similarity of the frozen backbone; pairs at or above the threshold
survive the gate and become supervised training data for the generator.
Generation, scoring, gating, and re-training repeat for a configured
number of iterations, warm-starting the generator each time.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .backbone import ImageFeature, ToyDualEncoder, cosine_similarity
from .captioner import CaptionerBundle, GeneratorCheckpoint, teacher_forced_loss
from .corpus import TokenSequence, UnpairedCorpus, detokenize
from .serialize import mix_seed, write_jsonl
from . import metrics as metrics_mod


class EmptyGateError(RuntimeError):
    """No pair survived the gate; carries the iteration and a score histogram."""

    def __init__(self, iteration: int, scores: Sequence[float]):
        counts, edges = np.histogram(np.asarray(scores, dtype=float), bins=10)
        self.iteration = iteration
        self.histogram = (counts.tolist(), edges.tolist())
        super().__init__(
            f"no pseudo pairs survived the gate at iteration {iteration}; "
            f"score histogram counts={self.histogram[0]} edges={self.histogram[1]}"
        )


@dataclass
class PseudoPair:
    """One gated candidate: (image, generated caption, metric score)."""

    image_id: str
    caption: TokenSequence
    caption_text: str
    metric: float
    kept: bool
    iteration: int

    def to_record(self) -> dict:
        return {
            "image_id": self.image_id,
            "caption": self.caption_text,
            "metric": self.metric,
            "kept": self.kept,
            "iteration": self.iteration,
        }


def metric_prompt(image_feature: ImageFeature, caption, backbone: ToyDualEncoder) -> float:
    """Scaled cosine similarity between the image and the encoded caption."""
    text = backbone.encode_text(caption)
    return backbone.similarity_scale * cosine_similarity(image_feature.vector, text.vector)


def filter_pairs(pairs: Sequence[PseudoPair], threshold: float) -> list[PseudoPair]:
    """Keep exactly the pairs with metric >= threshold, preserving order."""
    return [p for p in pairs if p.metric >= threshold]


def supervised_step(
    generator,
    optimizer: torch.optim.Optimizer,
    conditioning: torch.Tensor,
    target_seqs: Sequence[Sequence[int]],
) -> float:
    """Teacher-forced cross-entropy update on kept pseudo pairs."""
    if len(target_seqs) == 0:
        raise ValueError("empty batch: the gate left nothing to train on")
    first = generator.initial_input(conditioning)
    loss = teacher_forced_loss(generator, first, target_seqs)
    if not torch.isfinite(loss):
        raise RuntimeError("non-finite supervised loss")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss)


@dataclass
class RefineConfig:
    threshold: float = 30.0
    threshold_mode: str = "absolute"  # "absolute" | "percentile"
    iterations: int = 3
    learning_rate: float = 0.00001
    epochs_per_iteration: int = 3
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.threshold_mode not in ("absolute", "percentile"):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.threshold_mode == "percentile" and not 0.0 <= self.threshold <= 100.0:
            raise ValueError("percentile threshold must lie in [0, 100]")


@dataclass
class RefineReport:
    """Per-iteration audit trail of the gate and the re-trained generator."""

    resolved_threshold: float | None = None
    rows: list[dict] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {"resolved_threshold": self.resolved_threshold, "iterations": self.rows}


def write_pseudo_pairs(path, pairs: Sequence[PseudoPair]) -> None:
    write_jsonl(path, (p.to_record() for p in pairs))


def _score_generation(
    bundle: CaptionerBundle,
    backbone: ToyDualEncoder,
    features: list[ImageFeature],
    feature_matrix: torch.Tensor,
    iteration: int,
) -> tuple[list[PseudoPair], int]:
    """Greedy-decode every image and score the non-empty captions."""
    results = bundle.decode_features(backbone, feature_matrix)
    pairs: list[PseudoPair] = []
    empty = 0
    for feat, result in zip(features, results):
        if result.empty:
            empty += 1
            continue
        seq = result.to_sequence(bundle.max_len)
        score = metric_prompt(feat, seq, backbone)
        pairs.append(
            PseudoPair(
                image_id=feat.image_id,
                caption=seq,
                caption_text=detokenize(seq, bundle.vocabulary),
                metric=score,
                kept=False,
                iteration=iteration,
            )
        )
    return pairs, empty


def _holdout_mean_metric(
    bundle: CaptionerBundle,
    backbone: ToyDualEncoder,
    features: list[ImageFeature],
    feature_matrix: torch.Tensor,
) -> tuple[float | None, int]:
    results = bundle.decode_features(backbone, feature_matrix)
    scores = []
    empty = 0
    for feat, result in zip(features, results):
        if result.empty:
            empty += 1
            continue
        scores.append(metric_prompt(feat, result.to_sequence(bundle.max_len), backbone))
    return (float(np.mean(scores)) if scores else None), empty


def refine_loop(
    corpus: UnpairedCorpus,
    backbone: ToyDualEncoder,
    checkpoint: GeneratorCheckpoint,
    config: RefineConfig,
    *,
    holdout_images: Sequence[dict] | None = None,
    eval_items: Sequence[dict] | None = None,
    pair_writer: Callable[[int, list[PseudoPair]], None] | None = None,
) -> tuple[GeneratorCheckpoint, RefineReport]:
    """Iterative generate -> score -> gate -> re-train.

    In percentile mode the threshold is resolved once, on the first
    iteration's score distribution, and then held fixed, so growth in the
    kept count across iterations reflects genuinely improving captions.
    The generator is warm-started from the previous iteration throughout.
    """
    report = RefineReport()
    if config.iterations == 0:
        return checkpoint, report

    bundle = CaptionerBundle(checkpoint)
    features = backbone.encode_images(corpus.images)
    feature_matrix = torch.stack([f.vector for f in features])
    conditioning = bundle.conditioning_for(backbone, feature_matrix)
    holdout_feats: list[ImageFeature] = []
    holdout_matrix = None
    if holdout_images:
        holdout_feats = backbone.encode_images(holdout_images)
        holdout_matrix = torch.stack([f.vector for f in holdout_feats])
    decode = None
    if eval_items:
        record_by_id = {r["id"]: r for r in list(corpus.images) + list(holdout_images or [])}
        missing = sorted(it["image_id"] for it in eval_items if it["image_id"] not in record_by_id)
        if missing:
            raise ValueError(f"eval items reference unknown images: {missing}")
        decode = lambda item: bundle.decode_record(backbone, record_by_id[item["image_id"]])

    optimizer = torch.optim.Adam(bundle.generator.parameters(), lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(mix_seed("refine-shuffle", config.seed))
    resolved = config.threshold if config.threshold_mode == "absolute" else None

    for iteration in range(1, config.iterations + 1):
        pairs, empty_count = _score_generation(bundle, backbone, features, feature_matrix, iteration)
        scores = [p.metric for p in pairs]
        if resolved is None:
            resolved = float(np.percentile(scores, config.threshold)) if scores else 0.0
            report.resolved_threshold = resolved
        for p in pairs:
            p.kept = p.metric >= resolved
        kept = filter_pairs(pairs, resolved)
        if not kept:
            raise EmptyGateError(iteration, scores)
        if pair_writer is not None:
            pair_writer(iteration, pairs)

        id_to_row = {f.image_id: i for i, f in enumerate(features)}
        kept_rows = torch.tensor([id_to_row[p.image_id] for p in kept], dtype=torch.long)
        kept_targets = [list(p.caption.indices) for p in kept]
        losses: list[float] = []
        for _ in range(config.epochs_per_iteration):
            order = shuffle_rng.permutation(len(kept))
            for lo in range(0, len(kept), config.batch_size):
                take = order[lo : lo + config.batch_size]
                cond = conditioning[kept_rows[torch.from_numpy(take)]]
                targets = [kept_targets[i] for i in take]
                losses.append(supervised_step(bundle.generator, optimizer, cond, targets))

        row = {
            "iteration": iteration,
            "total": len(pairs),
            "empty_generations": empty_count,
            "kept": len(kept),
            "mean_metric_kept": float(np.mean([p.metric for p in kept])),
            "mean_supervised_loss": float(np.mean(losses)) if losses else None,
        }
        if holdout_matrix is not None:
            mean_metric, holdout_empty = _holdout_mean_metric(bundle, backbone, holdout_feats, holdout_matrix)
            row["holdout_mean_metric"] = mean_metric
            row["holdout_empty_generations"] = holdout_empty
        if decode is not None:
            eval_report = metrics_mod.evaluate(decode, eval_items)
            row["eval"] = {
                "bleu4": eval_report.bleu4,
                "rouge_l": eval_report.rouge_l,
                "cider": eval_report.cider,
            }
        report.rows.append(row)

    if report.resolved_threshold is None:
        report.resolved_threshold = resolved
    refined = GeneratorCheckpoint(
        stage="refine",
        vocab_words=checkpoint.vocab_words,
        min_count=checkpoint.min_count,
        use_prompt=checkpoint.use_prompt,
        conditioning_dim=checkpoint.conditioning_dim,
        embed_dim=checkpoint.embed_dim,
        hidden_size=checkpoint.hidden_size,
        max_len=checkpoint.max_len,
        spec_hash=checkpoint.spec_hash,
        generator_state={k: v.detach().clone() for k, v in bundle.generator.state_dict().items()},
        discriminator_state=checkpoint.discriminator_state,
        prompt_weight=checkpoint.prompt_weight,
        prompt_bias=checkpoint.prompt_bias,
        prompt_length=checkpoint.prompt_length,
        token_embed_dim=checkpoint.token_embed_dim,
        steps=checkpoint.steps,
        gen_loss_trace=checkpoint.gen_loss_trace,
        disc_loss_trace=checkpoint.disc_loss_trace,
        warmup_loss_trace=checkpoint.warmup_loss_trace,
    )
    return refined, report
