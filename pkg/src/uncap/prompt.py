"""Stage I: learn per-image semantic prompts over the frozen backbone.

A single trainable affine layer maps an image feature to a flat prompt
vector, which is reshaped into context rows and framed by the backbone's
fixed start/class/end embeddings plus positional rows.  Training maximizes
agreement between each image feature and the text encoding of its own
assembled prompt while pushing away all other prompts in the batch
(symmetric cross-entropy over the scaled cosine-similarity matrix).
Only the affine layer's parameters ever change; the backbone stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import DTYPE, ImageFeature, ToyDualEncoder, cosine_matrix
from .corpus import UnpairedCorpus
from .serialize import lists_to_tensor, mix_seed, tensor_to_lists

DEFAULT_PROMPT_LENGTH = 8


class TrainingDivergedError(RuntimeError):
    """Non-finite loss or parameters; carries the step index when known."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class SemanticPrompt:
    """Assembled per-image prompt: context rows framed by fixed embeddings.

    ``rows`` has shape (context_length + 3, token_embed_dim): row 0 is the
    start embedding, the last two rows are the class and end embeddings,
    and positional rows are already added throughout.
    """

    rows: torch.Tensor
    context_length: int

    def __post_init__(self):
        if self.rows.dim() != 2 or self.rows.shape[0] != self.context_length + 3:
            raise ValueError(
                f"prompt rows shape {tuple(self.rows.shape)} does not match "
                f"context length {self.context_length}"
            )

    @property
    def context_rows(self) -> torch.Tensor:
        return self.rows[1 : 1 + self.context_length]


class PromptExtractor:
    """Trainable affine map: image feature -> flat prompt vector.

    The output length is ``prompt_length * token_embed_dim``; the weight is
    stored as (feature_dim, output_len) and applied as ``f @ W + b``.
    """

    def __init__(self, feature_dim: int, prompt_length: int, token_embed_dim: int, seed: int = 0):
        if prompt_length <= 0 or token_embed_dim <= 0 or feature_dim <= 0:
            raise ValueError("dimensions must be positive")
        self.feature_dim = feature_dim
        self.prompt_length = prompt_length
        self.token_embed_dim = token_embed_dim
        out = prompt_length * token_embed_dim
        g = torch.Generator().manual_seed(mix_seed("prompt-extractor", seed))
        self.weight = torch.empty(feature_dim, out, dtype=DTYPE)
        self.weight.normal_(0.0, feature_dim**-0.5, generator=g)
        self.weight.requires_grad_(True)
        self.bias = torch.zeros(out, dtype=DTYPE, requires_grad=True)

    @property
    def output_dim(self) -> int:
        return self.prompt_length * self.token_embed_dim

    def parameters(self) -> list[torch.Tensor]:
        return [self.weight, self.bias]


def extract_prompt(feature, extractor: PromptExtractor) -> torch.Tensor:
    """Apply the affine map; accepts a single ImageFeature/vector or a batch."""
    vec = feature.vector if isinstance(feature, ImageFeature) else torch.as_tensor(feature, dtype=DTYPE)
    if vec.shape[-1] != extractor.feature_dim:
        raise ValueError(
            f"feature length {vec.shape[-1]} != extractor feature_dim {extractor.feature_dim}"
        )
    p = vec @ extractor.weight + extractor.bias
    if not torch.isfinite(p).all():
        raise TrainingDivergedError("prompt extraction produced non-finite values")
    return p


def assemble_prompt_rows(p: torch.Tensor, backbone: ToyDualEncoder) -> torch.Tensor:
    """Batched assembly: (B, L*d_p) prompt vectors -> (B, L+3, d_p) row matrices."""
    if p.dim() == 1:
        p = p.unsqueeze(0)
    d_p = backbone.token_embed_dim
    if p.shape[-1] % d_p != 0:
        raise ValueError(f"prompt length {p.shape[-1]} is not divisible by token_embed_dim {d_p}")
    length = p.shape[-1] // d_p
    batch = p.shape[0]
    start, cls_row, end = backbone.frame_embeddings()
    context = p.view(batch, length, d_p)
    rows = torch.cat(
        [
            start.expand(batch, 1, d_p),
            context,
            cls_row.expand(batch, 1, d_p),
            end.expand(batch, 1, d_p),
        ],
        dim=1,
    )
    return rows + backbone.positional_rows(length + 3)


def assemble_prompt(p: torch.Tensor, backbone: ToyDualEncoder) -> SemanticPrompt:
    """Wrap a single flat prompt vector into its assembled row matrix."""
    p = torch.as_tensor(p, dtype=DTYPE)
    if p.dim() != 1:
        raise ValueError("assemble_prompt expects a single flat prompt vector")
    rows = assemble_prompt_rows(p, backbone)[0]
    return SemanticPrompt(rows=rows, context_length=p.shape[0] // backbone.token_embed_dim)


def alignment_loss(image_feats: torch.Tensor, prompt_feats: torch.Tensor, scale: float) -> torch.Tensor:
    """Symmetric cross-entropy over the scaled cosine-similarity matrix.

    Matched pairs sit on the diagonal.  Equals log(batch) when every
    similarity is identical, and tends to zero as the matched similarities
    dominate.
    """
    if image_feats.shape[0] < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 (no negatives otherwise)")
    logits = scale * cosine_matrix(image_feats, prompt_feats)
    targets = torch.arange(logits.shape[0])
    return 0.5 * (F.cross_entropy(logits, targets) + F.cross_entropy(logits.T, targets))


def prompt_contrastive_loss(
    batch: Sequence[tuple[ImageFeature, SemanticPrompt]], backbone: ToyDualEncoder
) -> torch.Tensor:
    if len(batch) < 2:
        raise ValueError("contrastive loss needs a batch of at least 2 (no negatives otherwise)")
    image_feats = torch.stack([feat.vector for feat, _ in batch])
    rows = torch.stack([prompt.rows for _, prompt in batch])
    prompt_feats = backbone.encode_prompt_rows(rows)
    return alignment_loss(image_feats, prompt_feats, backbone.similarity_scale)


@dataclass
class Stage1Config:
    steps: int = 200
    batch_size: int = 16
    learning_rate: float = 0.001
    prompt_length: int = DEFAULT_PROMPT_LENGTH
    seed: int = 0


@dataclass
class PromptCheckpoint:
    """Frozen result of stage-I training (extractor parameters + trace)."""

    weight: torch.Tensor
    bias: torch.Tensor
    prompt_length: int
    token_embed_dim: int
    spec_hash: str
    steps: int
    final_loss: float
    loss_trace: list[float] = field(default_factory=list)

    def make_extractor(self) -> PromptExtractor:
        ex = PromptExtractor(
            feature_dim=self.weight.shape[0],
            prompt_length=self.prompt_length,
            token_embed_dim=self.token_embed_dim,
        )
        with torch.no_grad():
            ex.weight.copy_(self.weight)
            ex.bias.copy_(self.bias)
        return ex

    def to_payload(self) -> dict:
        return {
            "kind": "prompt",
            "weight": tensor_to_lists(self.weight),
            "bias": tensor_to_lists(self.bias),
            "prompt_length": self.prompt_length,
            "token_embed_dim": self.token_embed_dim,
            "spec_hash": self.spec_hash,
            "steps": self.steps,
            "final_loss": self.final_loss,
            "loss_trace": self.loss_trace,
        }

    @classmethod
    def from_payload(cls, payload: dict) -> "PromptCheckpoint":
        if payload.get("kind") != "prompt":
            raise ValueError(f"not a prompt checkpoint: kind={payload.get('kind')!r}")
        return cls(
            weight=lists_to_tensor(payload["weight"]),
            bias=lists_to_tensor(payload["bias"]),
            prompt_length=int(payload["prompt_length"]),
            token_embed_dim=int(payload["token_embed_dim"]),
            spec_hash=str(payload["spec_hash"]),
            steps=int(payload["steps"]),
            final_loss=float(payload["final_loss"]),
            loss_trace=[float(x) for x in payload["loss_trace"]],
        )


def _batch_indices(n: int, batch_size: int, steps: int, seed: int) -> list[np.ndarray]:
    """Seeded shuffle-per-epoch batching; batches smaller than 2 are skipped."""
    rng = np.random.default_rng(mix_seed("stage1-shuffle", seed))
    batches: list[np.ndarray] = []
    while len(batches) < steps:
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            chunk = order[lo : lo + batch_size]
            if len(chunk) >= 2:
                batches.append(chunk)
            if len(batches) == steps:
                break
    return batches


def train_stage1(corpus: UnpairedCorpus, backbone: ToyDualEncoder, config: Stage1Config) -> PromptCheckpoint:
    """Gradient descent on the contrastive alignment loss; backbone frozen.

    Deterministic for a fixed seed: initialization, batch order, and every
    update are derived from ``config.seed`` alone.
    """
    features = torch.stack([backbone.encode_image(r).vector for r in corpus.images])
    if features.shape[0] < 2:
        raise ValueError("stage I needs at least two images")
    extractor = PromptExtractor(
        feature_dim=backbone.feature_dim,
        prompt_length=config.prompt_length,
        token_embed_dim=backbone.token_embed_dim,
        seed=config.seed,
    )
    trace: list[float] = []
    batches = _batch_indices(features.shape[0], config.batch_size, config.steps, config.seed)
    for step, idx in enumerate(batches):
        batch_feats = features[torch.from_numpy(idx)]
        p = batch_feats @ extractor.weight + extractor.bias
        rows = assemble_prompt_rows(p, backbone)
        prompt_feats = backbone.encode_prompt_rows(rows)
        loss = alignment_loss(batch_feats, prompt_feats, backbone.similarity_scale)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(f"non-finite stage-I loss at step {step}", step=step)
        trace.append(float(loss.detach()))
        grad_w, grad_b = torch.autograd.grad(loss, [extractor.weight, extractor.bias])
        if config.learning_rate != 0.0:
            with torch.no_grad():
                extractor.weight -= config.learning_rate * grad_w
                extractor.bias -= config.learning_rate * grad_b
    return PromptCheckpoint(
        weight=extractor.weight.detach().clone(),
        bias=extractor.bias.detach().clone(),
        prompt_length=config.prompt_length,
        token_embed_dim=backbone.token_embed_dim,
        spec_hash=backbone.spec_hash(),
        steps=len(trace),
        final_loss=trace[-1] if trace else float("nan"),
        loss_trace=trace,
    )
