"""Stage II: prompt-conditioned caption generator and sequence discriminator.

The generator is a word-by-word recurrent decoder.  Its first step consumes
a projection of the conditioning vector — the image feature, concatenated
with the pooled semantic prompt when prompts are enabled — and every later
step consumes the embedding of the previously emitted word; the hidden
state starts at zero.  The discriminator is a separate recurrent net that
scores every prefix of a sequence with the probability that it comes from
the real sentence corpus.

Adversarial training couples them with per-step REINFORCE: sampled
captions are rewarded by the discriminator's prefix scores plus a visual
concept coverage bonus, against an exponential-moving-average baseline.
PAD/SOS/UNK are never emitted during decoding (the output distribution is
still over the full vocabulary; only the decision is restricted).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import DTYPE, ImageFeature, ToyDualEncoder
from .corpus import (
    EOS_INDEX,
    PAD_INDEX,
    SOS_INDEX,
    UNK_INDEX,
    TokenSequence,
    UnpairedCorpus,
    Vocabulary,
    build_vocabulary,
    detokenize,
    normalize,
    tokenize,
)
from .prompt import PromptCheckpoint, PromptExtractor, SemanticPrompt, assemble_prompt_rows
from .serialize import mix_seed, payload_to_state_dict, state_dict_to_payload

_UNEMITTABLE = (PAD_INDEX, SOS_INDEX, UNK_INDEX)


def _seeded_init(module: nn.Module, seed: int) -> None:
    """Reinitialize all parameters from a private generator (order = definition order)."""
    g = torch.Generator().manual_seed(mix_seed("net-init", seed))
    for name, param in module.named_parameters():
        if "bias" in name:
            with torch.no_grad():
                param.zero_()
        else:
            with torch.no_grad():
                param.normal_(0.0, 0.1, generator=g)
    # Forget-gate bias at 1 helps short-sequence recurrent training.
    for name, param in module.named_parameters():
        if name.endswith("cell.bias_ih"):
            hidden = param.shape[0] // 4
            with torch.no_grad():
                param[hidden : 2 * hidden].fill_(1.0)


class Generator(nn.Module):
    """Recurrent caption decoder with a conditioning projection."""

    def __init__(
        self,
        vocab_size: int,
        conditioning_dim: int,
        embed_dim: int = 512,
        hidden_size: int = 512,
        seed: int = 0,
    ):
        super().__init__()
        self.vocab_size = vocab_size
        self.conditioning_dim = conditioning_dim
        self.embed_dim = embed_dim
        self.hidden_size = hidden_size
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.input_proj = nn.Linear(conditioning_dim, embed_dim)
        self.cell = nn.LSTMCell(embed_dim, hidden_size)
        self.head = nn.Linear(hidden_size, vocab_size)
        self.double()
        _seeded_init(self, seed)

    def initial_input(self, conditioning: torch.Tensor) -> torch.Tensor:
        if conditioning.shape[-1] != self.conditioning_dim:
            raise ValueError(
                f"conditioning length {conditioning.shape[-1]} != {self.conditioning_dim}"
            )
        return self.input_proj(conditioning)

    def initial_state(self, batch_size: int) -> tuple[torch.Tensor, torch.Tensor]:
        zeros = torch.zeros(batch_size, self.hidden_size, dtype=DTYPE)
        return zeros, zeros.clone()

    def step_logits(self, x: torch.Tensor, state) -> tuple[torch.Tensor, tuple]:
        h, c = self.cell(x, state)
        return self.head(h), (h, c)

    def step(self, x: torch.Tensor, state) -> tuple[torch.Tensor, tuple]:
        """One decode step returning the word distribution (sums to 1)."""
        logits, state = self.step_logits(x, state)
        return torch.softmax(logits, dim=-1), state


class Discriminator(nn.Module):
    """Recurrent prefix scorer; parameters fully disjoint from the generator."""

    def __init__(self, vocab_size: int, embed_dim: int = 512, hidden_size: int = 512, seed: int = 0):
        super().__init__()
        self.vocab_size = vocab_size
        self.embed_dim = embed_dim
        self.hidden_size = hidden_size
        self.embedding = nn.Embedding(vocab_size, embed_dim)
        self.cell = nn.LSTMCell(embed_dim, hidden_size)
        self.head = nn.Linear(hidden_size, 1)
        self.double()
        _seeded_init(self, seed)

    def sequence_logits(self, padded: torch.Tensor, lengths: torch.Tensor) -> torch.Tensor:
        """Per-prefix logits for a padded batch (positions past length are junk)."""
        batch, max_t = padded.shape
        h, c = torch.zeros(batch, self.hidden_size, dtype=DTYPE), torch.zeros(
            batch, self.hidden_size, dtype=DTYPE
        )
        out = []
        for t in range(max_t):
            x = self.embedding(padded[:, t])
            h, c = self.cell(x, (h, c))
            out.append(self.head(h).squeeze(-1))
        return torch.stack(out, dim=1)


def emission_log_probs(logits: torch.Tensor) -> torch.Tensor:
    """Log-probabilities of the decoding policy: PAD/SOS/UNK masked out."""
    masked = logits.clone()
    masked[..., list(_UNEMITTABLE)] = float("-inf")
    return torch.log_softmax(masked, dim=-1)


def pool_prompt(prompt: SemanticPrompt) -> torch.Tensor:
    """Mean over the context rows; the three framing rows are excluded."""
    return prompt.context_rows.mean(dim=0)


def pool_prompt_rows(rows: torch.Tensor, context_length: int) -> torch.Tensor:
    """Batched pooling over (B, context_length + 3, d_p) assembled rows."""
    return rows[:, 1 : 1 + context_length].mean(dim=1)


def init_decoder_input(
    generator: Generator, image_feature, pooled_prompt: torch.Tensor | None = None
) -> torch.Tensor:
    """First decoder input: projected [image feature ; pooled prompt]."""
    vec = image_feature.vector if isinstance(image_feature, ImageFeature) else torch.as_tensor(
        image_feature, dtype=DTYPE
    )
    if pooled_prompt is not None:
        vec = torch.cat([vec, torch.as_tensor(pooled_prompt, dtype=DTYPE)], dim=-1)
    return generator.initial_input(vec)


@dataclass
class GenerationResult:
    """One decoded caption: content tokens only, EOS excluded.

    ``log_probs`` holds one entry per sampled decision (including the stop
    decision when EOS was emitted) and stays connected to the graph in
    sample mode; ``distributions`` are the per-step decoding distributions.
    """

    indices: tuple[int, ...]
    empty: bool
    terminated: bool
    log_probs: torch.Tensor | None = None
    distributions: tuple[torch.Tensor, ...] | None = None

    def to_sequence(self, max_len: int = 20) -> TokenSequence:
        if self.empty:
            raise ValueError("empty generation has no token sequence")
        return TokenSequence(indices=self.indices, max_len=max_len)


def rollout(
    generator: Generator,
    first_inputs: torch.Tensor,
    *,
    mode: str = "greedy",
    max_len: int = 20,
    rng: torch.Generator | None = None,
) -> list[GenerationResult]:
    """Batched decode from projected first inputs (B, embed_dim).

    Greedy mode is deterministic with lowest-index tie-breaking; sample
    mode draws from the masked distribution and records log-probabilities
    for policy gradients.
    """
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown mode {mode!r}")
    sample = mode == "sample"
    if sample and rng is None:
        raise ValueError("sample mode needs an explicit torch.Generator")
    batch = first_inputs.shape[0]
    state = generator.initial_state(batch)
    x = first_inputs
    alive = [True] * batch
    tokens: list[list[int]] = [[] for _ in range(batch)]
    logps: list[list[torch.Tensor]] = [[] for _ in range(batch)]
    dists: list[list[torch.Tensor]] = [[] for _ in range(batch)]
    terminated = [False] * batch
    for _ in range(max_len):
        logits, state = generator.step_logits(x, state)
        logp = emission_log_probs(logits)
        if sample:
            nxt = torch.multinomial(logp.exp(), 1, generator=rng).squeeze(1)
        else:
            # numpy argmax guarantees the first (lowest-index) maximum.
            nxt = torch.from_numpy(logp.detach().numpy().argmax(axis=1))
        for b in range(batch):
            if not alive[b]:
                continue
            choice = int(nxt[b])
            logps[b].append(logp[b, choice])
            dists[b].append(logp[b].detach().exp())
            if choice == EOS_INDEX:
                alive[b] = False
                terminated[b] = True
            else:
                tokens[b].append(choice)
        if not any(alive):
            break
        x = generator.embedding(nxt)
    results = []
    for b in range(batch):
        results.append(
            GenerationResult(
                indices=tuple(tokens[b]),
                empty=not tokens[b],
                terminated=terminated[b],
                log_probs=torch.stack(logps[b]) if sample else None,
                distributions=tuple(dists[b]),
            )
        )
    return results


def generate(
    generator: Generator,
    image_feature,
    prompt: SemanticPrompt | None = None,
    *,
    mode: str = "greedy",
    max_len: int = 20,
    rng: torch.Generator | None = None,
) -> GenerationResult:
    """Decode one caption for one image (optionally prompt-conditioned)."""
    pooled = pool_prompt(prompt) if prompt is not None else None
    x0 = init_decoder_input(generator, image_feature, pooled)
    if mode == "greedy":
        with torch.no_grad():
            return rollout(generator, x0.unsqueeze(0), mode=mode, max_len=max_len)[0]
    return rollout(generator, x0.unsqueeze(0), mode=mode, max_len=max_len, rng=rng)[0]


def discriminate(discriminator: Discriminator, seq) -> list[float]:
    """Probability that each prefix of the sequence reads as a real sentence."""
    indices = list(seq.indices if isinstance(seq, TokenSequence) else seq)
    if not indices:
        raise ValueError("cannot discriminate an empty sequence")
    padded = torch.tensor([indices], dtype=torch.long)
    with torch.no_grad():
        logits = discriminator.sequence_logits(padded, torch.tensor([len(indices)]))[0]
    # Clamp keeps the scores strictly inside (0, 1) in float64.
    return [float(torch.sigmoid(l.clamp(-30.0, 30.0))) for l in logits]


def concept_reward(seq, concepts) -> float:
    """Fraction of the image's distinct concepts mentioned by the caption."""
    concept_ids = getattr(concepts, "indices", concepts)
    concept_ids = frozenset(concept_ids) if concept_ids is not None else frozenset()
    if not concept_ids:
        return 0.0
    indices = set(seq.indices if isinstance(seq, TokenSequence) else seq)
    return len(concept_ids & indices) / len(concept_ids)


@dataclass(frozen=True)
class ConceptSet:
    image_id: str
    indices: frozenset[int]


class RewardBaseline:
    """Exponential moving average of the batch mean reward (starts at 0)."""

    def __init__(self, decay: float = 0.9):
        if not 0.0 <= decay < 1.0:
            raise ValueError("decay must be in [0, 1)")
        self.decay = decay
        self.value = 0.0

    def update(self, batch_mean: float) -> float:
        self.value = self.decay * self.value + (1.0 - self.decay) * batch_mean
        return self.value


def pad_sequences(seqs: Sequence[Sequence[int]]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([len(s) for s in seqs], dtype=torch.long)
    max_t = int(lengths.max()) if len(seqs) else 0
    padded = torch.full((len(seqs), max_t), PAD_INDEX, dtype=torch.long)
    for i, s in enumerate(seqs):
        padded[i, : len(s)] = torch.tensor(list(s), dtype=torch.long)
    return padded, lengths


def _masked_step_bce(logits: torch.Tensor, lengths: torch.Tensor, target: float) -> torch.Tensor:
    mask = torch.arange(logits.shape[1]).unsqueeze(0) < lengths.unsqueeze(1)
    targets = torch.full_like(logits, target)
    loss = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    return (loss * mask).sum() / mask.sum().clamp(min=1)


def discriminator_loss(
    discriminator: Discriminator,
    real_seqs: Sequence[Sequence[int]],
    fake_seqs: Sequence[Sequence[int]],
) -> torch.Tensor:
    """Per-step binary cross-entropy: real prefixes -> 1, generated -> 0."""
    parts = []
    if real_seqs:
        padded, lengths = pad_sequences(real_seqs)
        parts.append(_masked_step_bce(discriminator.sequence_logits(padded, lengths), lengths, 1.0))
    if fake_seqs:
        padded, lengths = pad_sequences(fake_seqs)
        parts.append(_masked_step_bce(discriminator.sequence_logits(padded, lengths), lengths, 0.0))
    if not parts:
        raise ValueError("discriminator loss needs at least one sequence")
    return sum(parts) / len(parts)


def teacher_forced_loss(generator, first_inputs: torch.Tensor, target_seqs: Sequence[Sequence[int]]) -> torch.Tensor:
    """Mean next-token cross-entropy with EOS appended to every target.

    Only ``step_logits`` and ``embedding`` of the generator are used, so a
    stub decoder with the same surface works for testing.
    """
    if not target_seqs:
        raise ValueError("teacher forcing needs a non-empty batch")
    full = [list(s) + [EOS_INDEX] for s in target_seqs]
    padded, lengths = pad_sequences(full)
    batch, max_t = padded.shape
    state = generator.initial_state(batch)
    x = first_inputs
    mask = torch.arange(max_t).unsqueeze(0) < lengths.unsqueeze(1)
    total = torch.zeros((), dtype=DTYPE)
    for t in range(max_t):
        logits, state = generator.step_logits(x, state)
        logp = torch.log_softmax(logits, dim=-1)
        picked = logp[torch.arange(batch), padded[:, t]]
        total = total + (picked * mask[:, t]).sum()
        if t + 1 < max_t:
            x = generator.embedding(padded[:, t])
    return -total / mask.sum()


def adversarial_step(
    generator: Generator,
    discriminator: Discriminator,
    gen_opt: torch.optim.Optimizer,
    disc_opt: torch.optim.Optimizer,
    conditioning: torch.Tensor,
    real_seqs: Sequence[Sequence[int]],
    concept_sets: Sequence[Iterable[int]],
    *,
    lambda_concept: float = 1.0,
    baseline: RewardBaseline,
    max_len: int = 20,
    rng: torch.Generator,
) -> tuple[float, float]:
    """One alternating update: discriminator on real-vs-sampled, then
    REINFORCE on the generator with per-step reward q_t + lambda * coverage.

    The stop decision is rewarded with the last prefix score (zero for an
    immediate stop), so degenerate empty captions are discouraged whenever
    the baseline is positive.  Parameters of the two nets are disjoint and
    each optimizer only ever touches its own net.
    """
    first_inputs = generator.initial_input(conditioning)
    results = rollout(generator, first_inputs, mode="sample", max_len=max_len, rng=rng)

    fake_seqs = [r.indices for r in results if r.indices]
    disc_loss = discriminator_loss(discriminator, real_seqs, fake_seqs)
    disc_opt.zero_grad()
    disc_loss.backward()
    disc_opt.step()

    flat_logps, flat_rewards = [], []
    for result, concepts in zip(results, concept_sets):
        coverage = lambda_concept * concept_reward(result.indices, concepts)
        if result.indices:
            with torch.no_grad():
                q = discriminate(discriminator, result.indices)
        else:
            q = []
        rewards = [qt + coverage for qt in q]
        if result.terminated:
            rewards.append((q[-1] if q else 0.0) + coverage)
        flat_logps.append(result.log_probs)
        flat_rewards.extend(rewards)
    logps = torch.cat(flat_logps)
    rewards_t = torch.tensor(flat_rewards, dtype=DTYPE)
    advantage = rewards_t - baseline.value
    gen_loss = -(logps * advantage).mean()
    gen_opt.zero_grad()
    gen_loss.backward()
    gen_opt.step()
    baseline.update(float(rewards_t.mean()))
    return float(gen_loss), float(disc_loss)


@dataclass
class Stage2Config:
    steps: int = 300
    batch_size: int = 16
    learning_rate: float = 0.001
    lambda_concept: float = 1.0
    baseline_decay: float = 0.9
    hidden_size: int = 512
    embed_dim: int = 512
    max_len: int = 20
    min_count: int = 4
    use_prompt: bool = True
    lm_warmup_steps: int = 0
    lm_warmup_lr: float = 0.003
    seed: int = 0


@dataclass
class GeneratorCheckpoint:
    """Self-contained captioner state: nets, vocabulary, and prompt extractor."""

    stage: str
    vocab_words: tuple[str, ...]
    min_count: int
    use_prompt: bool
    conditioning_dim: int
    embed_dim: int
    hidden_size: int
    max_len: int
    spec_hash: str
    generator_state: dict[str, torch.Tensor]
    discriminator_state: dict[str, torch.Tensor]
    prompt_weight: torch.Tensor | None = None
    prompt_bias: torch.Tensor | None = None
    prompt_length: int | None = None
    token_embed_dim: int | None = None
    steps: int = 0
    gen_loss_trace: list[float] = field(default_factory=list)
    disc_loss_trace: list[float] = field(default_factory=list)
    warmup_loss_trace: list[float] = field(default_factory=list)

    def make_vocabulary(self) -> Vocabulary:
        return Vocabulary(self.vocab_words, min_count=self.min_count)

    def make_generator(self) -> Generator:
        gen = Generator(
            vocab_size=len(self.vocab_words) + 4,
            conditioning_dim=self.conditioning_dim,
            embed_dim=self.embed_dim,
            hidden_size=self.hidden_size,
        )
        gen.load_state_dict(self.generator_state)
        return gen

    def make_discriminator(self) -> Discriminator:
        disc = Discriminator(
            vocab_size=len(self.vocab_words) + 4,
            embed_dim=self.embed_dim,
            hidden_size=self.hidden_size,
        )
        disc.load_state_dict(self.discriminator_state)
        return disc

    def make_prompt_extractor(self) -> PromptExtractor | None:
        if not self.use_prompt:
            return None
        ex = PromptExtractor(
            feature_dim=self.prompt_weight.shape[0],
            prompt_length=self.prompt_length,
            token_embed_dim=self.token_embed_dim,
        )
        with torch.no_grad():
            ex.weight.copy_(self.prompt_weight)
            ex.bias.copy_(self.prompt_bias)
        return ex

    def to_payload(self) -> dict:
        payload = {
            "kind": "captioner",
            "stage": self.stage,
            "vocab_words": list(self.vocab_words),
            "min_count": self.min_count,
            "use_prompt": self.use_prompt,
            "conditioning_dim": self.conditioning_dim,
            "embed_dim": self.embed_dim,
            "hidden_size": self.hidden_size,
            "max_len": self.max_len,
            "spec_hash": self.spec_hash,
            "generator_state": state_dict_to_payload(self.generator_state),
            "discriminator_state": state_dict_to_payload(self.discriminator_state),
            "steps": self.steps,
            "gen_loss_trace": self.gen_loss_trace,
            "disc_loss_trace": self.disc_loss_trace,
            "warmup_loss_trace": self.warmup_loss_trace,
        }
        if self.use_prompt:
            payload["prompt_weight"] = self.prompt_weight.tolist()
            payload["prompt_bias"] = self.prompt_bias.tolist()
            payload["prompt_length"] = self.prompt_length
            payload["token_embed_dim"] = self.token_embed_dim
        return payload

    @classmethod
    def from_payload(cls, payload: dict) -> "GeneratorCheckpoint":
        if payload.get("kind") != "captioner":
            raise ValueError(f"not a captioner checkpoint: kind={payload.get('kind')!r}")
        use_prompt = bool(payload["use_prompt"])
        return cls(
            stage=str(payload["stage"]),
            vocab_words=tuple(payload["vocab_words"]),
            min_count=int(payload["min_count"]),
            use_prompt=use_prompt,
            conditioning_dim=int(payload["conditioning_dim"]),
            embed_dim=int(payload["embed_dim"]),
            hidden_size=int(payload["hidden_size"]),
            max_len=int(payload["max_len"]),
            spec_hash=str(payload["spec_hash"]),
            generator_state=payload_to_state_dict(payload["generator_state"]),
            discriminator_state=payload_to_state_dict(payload["discriminator_state"]),
            prompt_weight=torch.tensor(payload["prompt_weight"], dtype=DTYPE) if use_prompt else None,
            prompt_bias=torch.tensor(payload["prompt_bias"], dtype=DTYPE) if use_prompt else None,
            prompt_length=int(payload["prompt_length"]) if use_prompt else None,
            token_embed_dim=int(payload["token_embed_dim"]) if use_prompt else None,
            steps=int(payload["steps"]),
            gen_loss_trace=[float(x) for x in payload["gen_loss_trace"]],
            disc_loss_trace=[float(x) for x in payload["disc_loss_trace"]],
            warmup_loss_trace=[float(x) for x in payload["warmup_loss_trace"]],
        )


def build_conditioning(
    backbone: ToyDualEncoder,
    features: torch.Tensor,
    extractor: PromptExtractor | None,
) -> torch.Tensor:
    """Stack conditioning vectors for a feature batch (prompt pooled in when given).

    The prompt path is frozen here: stage II and later never train the
    extractor, so the result is detached from it.
    """
    if extractor is None:
        return features
    with torch.no_grad():
        p = features @ extractor.weight + extractor.bias
        rows = assemble_prompt_rows(p, backbone)
        pooled = pool_prompt_rows(rows, extractor.prompt_length)
        return torch.cat([features, pooled], dim=-1)


class CaptionerBundle:
    """Runtime view of a GeneratorCheckpoint: nets + vocabulary + prompt path."""

    def __init__(self, checkpoint: GeneratorCheckpoint):
        self.checkpoint = checkpoint
        self.vocabulary = checkpoint.make_vocabulary()
        self.generator = checkpoint.make_generator()
        self.extractor = checkpoint.make_prompt_extractor()
        self.max_len = checkpoint.max_len

    def conditioning_for(self, backbone: ToyDualEncoder, features: torch.Tensor) -> torch.Tensor:
        return build_conditioning(backbone, features, self.extractor)

    def decode_features(self, backbone: ToyDualEncoder, features: torch.Tensor) -> list[GenerationResult]:
        conditioning = self.conditioning_for(backbone, features)
        with torch.no_grad():
            first = self.generator.initial_input(conditioning)
            return rollout(self.generator, first, mode="greedy", max_len=self.max_len)

    def decode_record(self, backbone: ToyDualEncoder, record) -> str:
        feat = backbone.encode_image(record)
        result = self.decode_features(backbone, feat.vector.unsqueeze(0))[0]
        if result.empty:
            return ""
        return detokenize(result.to_sequence(self.max_len), self.vocabulary)


def _sentence_indices(corpus: UnpairedCorpus, vocab: Vocabulary, max_len: int) -> list[list[int]]:
    seqs = []
    for text in corpus.sentences:
        if normalize(text):
            seqs.append(list(tokenize(text, vocab, max_len).indices))
    if not seqs:
        raise ValueError("no usable sentences in the corpus")
    return seqs


def _concept_indices(corpus: UnpairedCorpus, vocab: Vocabulary) -> dict[str, frozenset[int]]:
    table: dict[str, frozenset[int]] = {}
    if corpus.concepts:
        for image_id, words in corpus.concepts.items():
            table[image_id] = frozenset(
                vocab.index_of(w) for w in words if w in vocab
            )
    return table


def train_stage2(
    corpus: UnpairedCorpus,
    backbone: ToyDualEncoder,
    prompt_checkpoint: PromptCheckpoint | None,
    config: Stage2Config,
) -> GeneratorCheckpoint:
    """Adversarial caption training on unpaired images and sentences.

    Optionally warm-starts the generator as a plain language model on the
    sentence corpus (teacher forcing from a zero conditioning vector)
    before the alternating adversarial updates. Deterministic per seed.
    """
    if config.use_prompt and prompt_checkpoint is None:
        raise ValueError("stage prompt required: use_prompt is set but no prompt checkpoint given")
    vocab = build_vocabulary(corpus.sentences, config.min_count)
    real_seqs = _sentence_indices(corpus, vocab, config.max_len)
    concepts = _concept_indices(corpus, vocab)

    features = torch.stack([backbone.encode_image(r).vector for r in corpus.images])
    ids = [r["id"] for r in corpus.images]
    extractor = prompt_checkpoint.make_extractor() if config.use_prompt else None
    conditioning = build_conditioning(backbone, features, extractor)
    cond_dim = conditioning.shape[1]

    generator = Generator(
        vocab_size=len(vocab),
        conditioning_dim=cond_dim,
        embed_dim=config.embed_dim,
        hidden_size=config.hidden_size,
        seed=mix_seed("generator", config.seed),
    )
    discriminator = Discriminator(
        vocab_size=len(vocab),
        embed_dim=config.embed_dim,
        hidden_size=config.hidden_size,
        seed=mix_seed("discriminator", config.seed),
    )

    warmup_trace: list[float] = []
    if config.steps > 0 and config.lm_warmup_steps > 0:
        warm_opt = torch.optim.Adam(generator.parameters(), lr=config.lm_warmup_lr)
        warm_rng = np.random.default_rng(mix_seed("stage2-warmup", config.seed))
        zero_cond = torch.zeros(config.batch_size, cond_dim, dtype=DTYPE)
        for _ in range(config.lm_warmup_steps):
            take = warm_rng.choice(len(real_seqs), size=min(config.batch_size, len(real_seqs)), replace=False)
            batch = [real_seqs[i] for i in take]
            first = generator.initial_input(zero_cond[: len(batch)])
            loss = teacher_forced_loss(generator, first, batch)
            if not torch.isfinite(loss):
                raise RuntimeError("non-finite warmup loss")
            warm_opt.zero_grad()
            loss.backward()
            warm_opt.step()
            warmup_trace.append(float(loss))

    gen_trace: list[float] = []
    disc_trace: list[float] = []
    if config.steps > 0:
        gen_opt = torch.optim.Adam(generator.parameters(), lr=config.learning_rate)
        disc_opt = torch.optim.Adam(discriminator.parameters(), lr=config.learning_rate)
        baseline = RewardBaseline(decay=config.baseline_decay)
        batch_rng = np.random.default_rng(mix_seed("stage2-batches", config.seed))
        sample_rng = torch.Generator().manual_seed(mix_seed("stage2-sample", config.seed))
        n_images = features.shape[0]
        for step in range(config.steps):
            img_idx = batch_rng.choice(n_images, size=min(config.batch_size, n_images), replace=False)
            sent_idx = batch_rng.choice(len(real_seqs), size=min(config.batch_size, len(real_seqs)), replace=False)
            cond = conditioning[torch.from_numpy(img_idx)]
            reals = [real_seqs[i] for i in sent_idx]
            concept_batch = [concepts.get(ids[i], frozenset()) for i in img_idx]
            gen_loss, disc_loss = adversarial_step(
                generator,
                discriminator,
                gen_opt,
                disc_opt,
                cond,
                reals,
                concept_batch,
                lambda_concept=config.lambda_concept,
                baseline=baseline,
                max_len=config.max_len,
                rng=sample_rng,
            )
            if not (np.isfinite(gen_loss) and np.isfinite(disc_loss)):
                raise RuntimeError(f"non-finite adversarial loss at step {step}")
            gen_trace.append(gen_loss)
            disc_trace.append(disc_loss)

    return GeneratorCheckpoint(
        stage="uic",
        vocab_words=vocab.content_words,
        min_count=config.min_count,
        use_prompt=config.use_prompt,
        conditioning_dim=cond_dim,
        embed_dim=config.embed_dim,
        hidden_size=config.hidden_size,
        max_len=config.max_len,
        spec_hash=backbone.spec_hash(),
        generator_state={k: v.detach().clone() for k, v in generator.state_dict().items()},
        discriminator_state={k: v.detach().clone() for k, v in discriminator.state_dict().items()},
        prompt_weight=prompt_checkpoint.weight.clone() if config.use_prompt else None,
        prompt_bias=prompt_checkpoint.bias.clone() if config.use_prompt else None,
        prompt_length=prompt_checkpoint.prompt_length if config.use_prompt else None,
        token_embed_dim=prompt_checkpoint.token_embed_dim if config.use_prompt else None,
        steps=len(gen_trace),
        gen_loss_trace=gen_trace,
        disc_loss_trace=disc_trace,
        warmup_loss_trace=warmup_trace,
    )
