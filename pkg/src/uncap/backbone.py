"""Frozen dual-encoder backbone with a deterministic toy realization.

The production system would plug a pretrained image/text dual encoder in
here; the toy encoder stands in for it so the whole pipeline runs offline.
Both sides are fixed maps derived from the spec seed:

* image side: a record either carries a precomputed feature vector or a
  latent which is mapped by a fixed projection.  A latent whose length
  equals ``token_embed_dim`` is interpreted as a point in the token
  embedding space and mapped with the *same* output projection the text
  side uses — that shared latent space is what makes the bundled toy
  world's images and sentences comparable.
* text side: every vocabulary index gets a seeded random embedding; a
  sequence is encoded as the mean of its token embeddings followed by the
  fixed output projection.  Prompt inputs already carry embedding rows and
  skip the token lookup, but go through the same projection.

All state is fixed at construction; every operation is a pure function, so
the encoder can be shared freely across workers.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
import torch

DTYPE = torch.float64


class DimensionMismatchError(ValueError):
    """An input vector has the wrong length for this backbone."""

    def __init__(self, message: str, image_id: str | None = None):
        super().__init__(message)
        self.image_id = image_id


class DegenerateFeatureError(ValueError):
    """Zero-norm vector, non-finite entries, or an empty token sequence."""

    def __init__(self, message: str, image_id: str | None = None):
        super().__init__(message)
        self.image_id = image_id


@dataclass(frozen=True)
class BackboneSpec:
    """Dimensions and similarity scale of the frozen dual encoder.

    Fixed for the lifetime of a run; two encoders built from equal specs
    produce identical encodings for identical inputs.
    """

    feature_dim: int = 512
    token_embed_dim: int = 512
    similarity_scale: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.token_embed_dim <= 0:
            raise ValueError("token_embed_dim must be positive")
        if not self.similarity_scale > 0:
            raise ValueError("similarity_scale must be positive")

    def canonical_json(self) -> str:
        return json.dumps(
            {
                "feature_dim": self.feature_dim,
                "token_embed_dim": self.token_embed_dim,
                "similarity_scale": self.similarity_scale,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ImageFeature:
    image_id: str
    vector: torch.Tensor  # (feature_dim,)


@dataclass(frozen=True)
class TextFeature:
    vector: torch.Tensor  # (feature_dim,)


def _entropy_words(*parts) -> np.ndarray:
    digest = hashlib.sha256("/".join(str(p) for p in parts).encode("utf-8")).digest()
    return np.array(
        [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)],
        dtype=np.uint32,
    )


def _draw(shape: tuple[int, ...], *key) -> torch.Tensor:
    rng = np.random.default_rng(np.random.SeedSequence(_entropy_words(*key)))
    return torch.from_numpy(rng.standard_normal(shape)).to(DTYPE)


def _as_vector(value, name: str = "vector") -> torch.Tensor:
    if isinstance(value, (ImageFeature, TextFeature)):
        value = value.vector
    t = torch.as_tensor(value, dtype=DTYPE)
    if t.dim() != 1:
        raise ValueError(f"{name} must be one-dimensional")
    return t


def cosine_similarity(a, b) -> float:
    """Plain cosine similarity between two nonzero vectors of equal length."""
    va, vb = _as_vector(a, "a"), _as_vector(b, "b")
    if va.shape != vb.shape:
        raise DimensionMismatchError(
            f"cosine similarity needs equal lengths, got {va.shape[0]} and {vb.shape[0]}"
        )
    na, nb = torch.linalg.vector_norm(va), torch.linalg.vector_norm(vb)
    if na == 0 or nb == 0:
        raise DegenerateFeatureError("cosine similarity of a zero-norm vector")
    value = torch.dot(va, vb) / (na * nb)
    return float(value.clamp(-1.0, 1.0))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between row sets; differentiable."""
    na = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=-1, keepdim=True)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateFeatureError("cosine matrix over a zero-norm row")
    return (a / na) @ (b / nb).T


class ToyDualEncoder:
    """Deterministic frozen stand-in for a pretrained dual encoder."""

    def __init__(self, spec: BackboneSpec):
        self.spec = spec
        d_f, d_p = spec.feature_dim, spec.token_embed_dim
        # Shared output projection for text features and same-space latents.
        self._output_projection = _draw((d_f, d_p), spec.seed, "output") / np.sqrt(d_p)

    @property
    def feature_dim(self) -> int:
        return self.spec.feature_dim

    @property
    def token_embed_dim(self) -> int:
        return self.spec.token_embed_dim

    @property
    def similarity_scale(self) -> float:
        return self.spec.similarity_scale

    def spec_hash(self) -> str:
        return self.spec.digest()

    # -- fixed tables ------------------------------------------------------

    @property
    def output_projection(self) -> torch.Tensor:
        return self._output_projection

    def latent_projection(self, latent_dim: int) -> torch.Tensor:
        """Fixed projection applied to toy latents of the given length."""
        if latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        if latent_dim == self.spec.token_embed_dim:
            return self._output_projection
        return _draw((self.spec.feature_dim, latent_dim), self.spec.seed, "latent", latent_dim) / np.sqrt(latent_dim)

    def token_embedding(self, index: int) -> torch.Tensor:
        if index < 0:
            raise ValueError("token index must be non-negative")
        return _draw((self.spec.token_embed_dim,), self.spec.seed, "token", int(index))

    def token_embeddings(self, indices: Iterable[int]) -> torch.Tensor:
        rows = [self.token_embedding(i) for i in indices]
        if not rows:
            raise DegenerateFeatureError("empty token sequence")
        return torch.stack(rows)

    def frame_embeddings(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Fixed (start, class, end) rows that frame an assembled prompt."""
        return (
            _draw((self.spec.token_embed_dim,), self.spec.seed, "frame", 0),
            _draw((self.spec.token_embed_dim,), self.spec.seed, "frame", 1),
            _draw((self.spec.token_embed_dim,), self.spec.seed, "frame", 2),
        )

    def positional_rows(self, n: int) -> torch.Tensor:
        # Kept small so position noise stays secondary to the learned context.
        rows = [_draw((self.spec.token_embed_dim,), self.spec.seed, "pos", i) * 0.1 for i in range(n)]
        return torch.stack(rows)

    # -- encoding ----------------------------------------------------------

    def encode_image(self, record) -> ImageFeature:
        """Encode one image record ({"id", "feature"| "latent"}) or pass through."""
        if isinstance(record, ImageFeature):
            self._check_feature(record.vector, record.image_id)
            return record
        if not isinstance(record, Mapping):
            raise TypeError("image record must be a mapping or ImageFeature")
        image_id = record.get("id")
        if not isinstance(image_id, str) or not image_id:
            raise ValueError("image record needs a non-empty string 'id'")
        has_feature = "feature" in record
        has_latent = "latent" in record
        if has_feature == has_latent:
            raise ValueError(f"image record {image_id!r} must carry exactly one of 'feature' or 'latent'")
        if has_feature:
            vec = torch.as_tensor(record["feature"], dtype=DTYPE)
            if vec.dim() != 1 or vec.shape[0] != self.spec.feature_dim:
                raise DimensionMismatchError(
                    f"image {image_id!r}: feature length {tuple(vec.shape)} != ({self.spec.feature_dim},)",
                    image_id=image_id,
                )
            self._check_feature(vec, image_id)
            return ImageFeature(image_id=image_id, vector=vec)
        latent = torch.as_tensor(record["latent"], dtype=DTYPE)
        if latent.dim() != 1 or latent.shape[0] == 0:
            raise DimensionMismatchError(
                f"image {image_id!r}: latent must be a non-empty vector", image_id=image_id
            )
        if not torch.isfinite(latent).all():
            raise DegenerateFeatureError(f"image {image_id!r}: non-finite latent", image_id=image_id)
        vec = self.latent_projection(latent.shape[0]) @ latent
        return ImageFeature(image_id=image_id, vector=vec)

    def encode_images(self, records: Sequence) -> list[ImageFeature]:
        return [self.encode_image(r) for r in records]

    def _check_feature(self, vec: torch.Tensor, image_id: str) -> None:
        if vec.shape[0] != self.spec.feature_dim:
            raise DimensionMismatchError(
                f"image {image_id!r}: feature length {vec.shape[0]} != {self.spec.feature_dim}",
                image_id=image_id,
            )
        if not torch.isfinite(vec).all():
            raise DegenerateFeatureError(f"image {image_id!r}: non-finite feature", image_id=image_id)

    def encode_prompt_rows(self, rows: torch.Tensor) -> torch.Tensor:
        """Differentiable text encoding of prompt row matrices (..., rows, d_p)."""
        if rows.shape[-1] != self.spec.token_embed_dim:
            raise DimensionMismatchError(
                f"prompt rows have width {rows.shape[-1]} != {self.spec.token_embed_dim}"
            )
        return rows.mean(dim=-2) @ self._output_projection.T

    def encode_text(self, tokens) -> TextFeature:
        """Encode a token sequence or an assembled semantic prompt.

        Token sequences go through the bag-of-embeddings path; prompts
        already carry embedding rows and only get the output projection.
        """
        rows = getattr(tokens, "rows", None)
        if isinstance(rows, torch.Tensor):
            return TextFeature(vector=self.encode_prompt_rows(rows))
        indices = getattr(tokens, "indices", tokens)
        indices = list(indices)
        if not indices:
            raise DegenerateFeatureError("cannot encode an empty token sequence")
        bag = self.token_embeddings(indices).mean(dim=0)
        return TextFeature(vector=self._output_projection @ bag)

    # -- integrity ---------------------------------------------------------

    def fingerprint(self) -> str:
        """Value hash of the frozen tables; unchanged across any training."""
        h = hashlib.sha256(self.spec.canonical_json().encode("utf-8"))
        h.update(self._output_projection.numpy().tobytes())
        for row in self.frame_embeddings():
            h.update(row.numpy().tobytes())
        h.update(self.positional_rows(16).numpy().tobytes())
        for index in range(64):
            h.update(self.token_embedding(index).numpy().tobytes())
        return h.hexdigest()
