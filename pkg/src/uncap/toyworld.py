"""Bundled deterministic toy world: synthetic images, sentences, concepts.

Images and sentences share one latent space.  Every image is a small set of
scene nouns; its latent is the mean of the backbone's token embeddings for
those nouns (plus a little seeded noise), so the frozen dual encoder
genuinely scores captions that mention the right nouns above captions that
do not.  Sentences are short templated noun phrases over the same
vocabulary, with no pairing to any image.

Everything is derived from the world seed and the backbone spec, so the
generator reproduces the shipped data files byte for byte.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import BackboneSpec, ToyDualEncoder
from .corpus import build_vocabulary
from .serialize import mix_seed, write_jsonl

NOUNS = (
    "dog", "cat", "tree", "car", "boat", "bird", "house", "river",
    "horse", "train", "flower", "mountain", "chair", "table", "ball", "fish",
    "sheep", "cloud", "bridge", "garden", "street", "beach", "apple", "lamp",
)

TEMPLATES = (
    "a {0} and a {1} near a {2}",
    "the {0} by the {1} with a {2}",
    "a {0} with a {1} under the {2}",
    "the {0} and the {1} beside a {2}",
)

SCENE_SIZE = 3


@dataclass(frozen=True)
class ToyWorldConfig:
    n_images: int = 64
    n_sentences: int = 200
    holdout: int = 16
    references_per_image: int = 2
    noise: float = 0.02
    min_count: int = 4
    seed: int = 7


@dataclass
class ToyWorld:
    train_images: list[dict]
    holdout_images: list[dict]
    sentences: list[str]
    concepts: dict[str, tuple[str, ...]]
    references: dict[str, list[str]]

    @property
    def eval_items(self) -> list[dict]:
        return [
            {"image_id": r["id"], "references": self.references[r["id"]]}
            for r in self.holdout_images
        ]

    @property
    def concept_records(self) -> list[dict]:
        return [
            {"image_id": image_id, "concepts": list(words)}
            for image_id, words in self.concepts.items()
        ]


def _sentence(rng: np.random.Generator, nouns: tuple[str, ...] | None = None) -> str:
    if nouns is None:
        nouns = tuple(rng.choice(len(NOUNS), size=SCENE_SIZE, replace=False))
        nouns = tuple(NOUNS[i] for i in nouns)
    template = TEMPLATES[int(rng.integers(len(TEMPLATES)))]
    return template.format(*nouns)


def build_toy_world(spec: BackboneSpec, config: ToyWorldConfig = ToyWorldConfig()) -> ToyWorld:
    if config.holdout >= config.n_images:
        raise ValueError("holdout must leave at least one training image")
    encoder = ToyDualEncoder(spec)
    rng = np.random.default_rng(mix_seed("toy-world", config.seed))

    sentences = [_sentence(rng) for _ in range(config.n_sentences)]
    # Top up any noun that fell under the vocabulary threshold.
    def noun_counts() -> dict[str, int]:
        counts = {n: 0 for n in NOUNS}
        for s in sentences:
            for tok in s.split():
                if tok in counts:
                    counts[tok] += 1
        return counts

    for noun in NOUNS:
        while noun_counts()[noun] < config.min_count:
            others = [n for n in NOUNS if n != noun]
            pick = rng.choice(len(others), size=SCENE_SIZE - 1, replace=False)
            sentences.append(_sentence(rng, (noun, others[pick[0]], others[pick[1]])))

    vocab = build_vocabulary(sentences, config.min_count)
    for noun in NOUNS:
        assert noun in vocab

    images: list[dict] = []
    concepts: dict[str, tuple[str, ...]] = {}
    references: dict[str, list[str]] = {}
    for i in range(config.n_images):
        pick = rng.choice(len(NOUNS), size=SCENE_SIZE, replace=False)
        scene = tuple(NOUNS[j] for j in pick)
        embeddings = encoder.token_embeddings([vocab.index_of(w) for w in scene])
        latent = embeddings.mean(dim=0).numpy()
        latent = latent + config.noise * rng.standard_normal(latent.shape)
        image_id = f"img{i:03d}"
        images.append({"id": image_id, "latent": [float(x) for x in latent]})
        concepts[image_id] = scene
        refs = []
        while len(refs) < config.references_per_image:
            ref = _sentence(rng, scene)
            if ref not in refs:
                refs.append(ref)
        references[image_id] = refs

    split = config.n_images - config.holdout
    return ToyWorld(
        train_images=images[:split],
        holdout_images=images[split:],
        sentences=sentences,
        concepts=concepts,
        references=references,
    )


def write_toy_world(world: ToyWorld, out_dir: str | Path) -> dict[str, str]:
    """Write the JSONL files the CLI consumes; returns the path map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "images": str(out / "images.jsonl"),
        "holdout_images": str(out / "holdout_images.jsonl"),
        "sentences": str(out / "sentences.jsonl"),
        "concepts": str(out / "concepts.jsonl"),
        "eval": str(out / "eval.jsonl"),
    }
    write_jsonl(paths["images"], world.train_images)
    write_jsonl(paths["holdout_images"], world.holdout_images)
    write_jsonl(paths["sentences"], ({"text": s} for s in world.sentences))
    write_jsonl(paths["concepts"], world.concept_records)
    write_jsonl(paths["eval"], world.eval_items)
    return paths
