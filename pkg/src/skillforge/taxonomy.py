"""Skill descriptions, the shared skill taxonomy, and top-K skill selection.

Flow: each training question gets one short skill phrase from the LLM
client (validated mechanically: 6-12 words, no audio or vague filler
terms), the phrases are embedded and k-means-clustered into the taxonomy,
and any question can then be scored against the taxonomy's centroids to
pick its top-K skills.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import prompts
from .clustering import CentroidModel, assign_many, fit_kmeans, fit_kmeans_restarts
from .corpus import VideoQAExample
from .embedding import (
    EmbeddingVector,
    EncoderSpec,
    RemoteEncoderConfig,
    cosine,
    embed,
    tokenize,
)
from .llmclient import LLMClient, LLMClientError
from .serde import MODEL_FLOAT_SPEC, read_json, write_canonical_json

import re

MIN_SKILL_WORDS = 6
MAX_SKILL_WORDS = 12

# Phrases naming audio cues or vague catch-all abilities are rejected and
# regenerated; matching is on lowercased alphanumeric tokens.
DENY_TOKENS = frozenset(
    {"audio", "sound", "sounds", "speech", "music", "reasoning", "analysis"}
)

_SKILL_LINE_RE = re.compile(r"SKILL:\s*(\d+)")


class TaxonomyError(Exception):
    """Raised for invalid taxonomy construction inputs."""


class SkillExtractionError(TaxonomyError):
    """Raised when a phrase fails validation twice; callers flag and skip."""


@dataclass(frozen=True)
class SkillDescription:
    text: str
    source_example_id: str
    embedding: EmbeddingVector

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "source_example_id": self.source_example_id,
            "embedding": self.embedding.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SkillDescription":
        return cls(
            text=str(obj["text"]),
            source_example_id=str(obj["source_example_id"]),
            embedding=EmbeddingVector.from_dict(obj["embedding"]),
        )


@dataclass(frozen=True)
class SkillTaxonomy:
    n_skills: int
    centroid_model: CentroidModel
    representative_phrases: tuple[str, ...]
    member_counts: tuple[int, ...]
    encoder: EncoderSpec

    def phrase_map(self) -> dict[int, str]:
        return dict(enumerate(self.representative_phrases))

    def to_dict(self) -> dict:
        return {
            "n_skills": self.n_skills,
            "centroid_model": self.centroid_model.to_dict(),
            "phrases": [
                {"skill_id": i, "phrase": p, "member_count": c}
                for i, (p, c) in enumerate(zip(self.representative_phrases, self.member_counts))
            ],
            "encoder": self.encoder.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SkillTaxonomy":
        rows = sorted(obj["phrases"], key=lambda r: int(r["skill_id"]))
        return cls(
            n_skills=int(obj["n_skills"]),
            centroid_model=CentroidModel.from_dict(obj["centroid_model"]),
            representative_phrases=tuple(str(r["phrase"]) for r in rows),
            member_counts=tuple(int(r["member_count"]) for r in rows),
            encoder=EncoderSpec.from_dict(obj["encoder"]),
        )


@dataclass(frozen=True)
class SkillSelection:
    example_id: str
    skill_ids: tuple[int, ...]
    scores: tuple[float, ...]
    method: str  # "embedding" | "llm"


def validate_skill_phrase(text: str) -> str | None:
    """Return a rejection reason, or None when the phrase is acceptable."""
    words = text.split()
    if not (MIN_SKILL_WORDS <= len(words) <= MAX_SKILL_WORDS):
        return f"phrase has {len(words)} words, needs {MIN_SKILL_WORDS}-{MAX_SKILL_WORDS}"
    hits = sorted(DENY_TOKENS.intersection(tokenize(text)))
    if hits:
        return f"phrase uses disallowed terms: {', '.join(hits)}"
    return None


def extract_skill(
    example: VideoQAExample,
    client: LLMClient,
    encoder: EncoderSpec,
    encoder_config: RemoteEncoderConfig | None = None,
) -> SkillDescription:
    """One validated skill phrase for one example.

    A phrase failing validation triggers exactly one retry with a
    corrective suffix; a second failure raises SkillExtractionError so the
    caller can flag the example and drop it from taxonomy input.
    """
    variables = {"question": example.question, "answer": example.answer}
    text = client.complete(prompts.SKILL_DESCRIBE, variables).strip()
    reason = validate_skill_phrase(text)
    if reason is not None:
        suffix = (
            f"\n\nYour previous phrase was rejected: {reason}. "
            "Reply again with one compliant skill phrase only."
        )
        text = client.complete(prompts.SKILL_DESCRIBE, variables, suffix=suffix).strip()
        reason = validate_skill_phrase(text)
        if reason is not None:
            raise SkillExtractionError(f"example {example.id!r}: {reason}")
    return SkillDescription(
        text=text,
        source_example_id=example.id,
        embedding=embed(text, encoder, encoder_config),
    )


def extract_skills(
    examples: Sequence[VideoQAExample],
    client: LLMClient,
    encoder: EncoderSpec,
    encoder_config: RemoteEncoderConfig | None = None,
) -> tuple[list[SkillDescription], list[str]]:
    """Batch extraction; returns (descriptions, ids flagged skill_extraction_failed)."""
    descriptions: list[SkillDescription] = []
    failed: list[str] = []
    for example in examples:
        try:
            descriptions.append(extract_skill(example, client, encoder, encoder_config))
        except (SkillExtractionError, LLMClientError):
            failed.append(example.id)
    return descriptions, failed


def build_taxonomy(
    descriptions: Sequence[SkillDescription],
    n_skills: int = 10,
    seed: int = 0,
    encoder: EncoderSpec | None = None,
    n_restarts: int = 1,
) -> SkillTaxonomy:
    """Cluster description embeddings; one representative phrase per cluster.

    The representative is the member phrase nearest its centroid, ties by
    lexicographically smallest text.  A cluster left without members (only
    possible when duplicates outnumber distinct embeddings) falls back to
    the globally nearest phrase with member_count 0.
    """
    if len(descriptions) < n_skills:
        raise TaxonomyError(
            f"need at least n_skills={n_skills} descriptions, got {len(descriptions)}; "
            "lower n_skills or add data"
        )
    if encoder is None:
        dims = descriptions[0].embedding.dims
        encoder = EncoderSpec.test_hash(dims)
    vectors = [d.embedding for d in descriptions]
    if n_restarts > 1:
        model = fit_kmeans_restarts(vectors, n_skills, seed, n_restarts)
    else:
        model = fit_kmeans(vectors, n_skills, seed)
    assignments = assign_many(model, vectors)

    members: dict[int, list[tuple[float, str]]] = {j: [] for j in range(n_skills)}
    counts = [0] * n_skills
    for desc, a in zip(descriptions, assignments):
        members[a.cluster].append((a.distance_sq, desc.text))
        counts[a.cluster] += 1

    reps: list[str] = []
    for j in range(n_skills):
        if members[j]:
            reps.append(min(members[j])[1])
        else:
            cj = model.centroids[j]
            fallback = min(
                (sum((a - b) ** 2 for a, b in zip(d.embedding.values, cj)), d.text)
                for d in descriptions
            )
            reps.append(fallback[1])
    return SkillTaxonomy(
        n_skills=n_skills,
        centroid_model=model,
        representative_phrases=tuple(reps),
        member_counts=tuple(counts),
        encoder=encoder,
    )


def score_skills(
    question: str,
    taxonomy: SkillTaxonomy,
    encoder_config: RemoteEncoderConfig | None = None,
) -> list[float]:
    """Cosine of the question embedding against every skill centroid."""
    q = embed(question, taxonomy.encoder, encoder_config)
    model = taxonomy.centroid_model
    return [
        cosine(q, EmbeddingVector(model.dims, model.centroids[j]))
        for j in range(taxonomy.n_skills)
    ]


def _top_k(scores: Sequence[float], k: int) -> list[int]:
    order = sorted(range(len(scores)), key=lambda j: (-scores[j], j))
    return order[:k]


def select_skills(
    question: str,
    taxonomy: SkillTaxonomy,
    K: int = 3,
    method: str = "embedding",
    client: LLMClient | None = None,
    example_id: str = "",
    encoder_config: RemoteEncoderConfig | None = None,
) -> SkillSelection:
    """Top-K skills for a question.

    ``embedding``: rank centroids by cosine, ties to the lowest skill
    index.  ``llm``: ask the client to pick indices from the phrase list;
    short picks are padded by embedding rank, an unparseable response is
    retried once and then falls back entirely (method recorded as
    ``embedding``).  Either way the result holds exactly
    min(K, n_skills) distinct ids with non-increasing scores.
    """
    if K < 1:
        raise TaxonomyError(f"K must be >= 1, got {K}")
    k = min(K, taxonomy.n_skills)
    scores = score_skills(question, taxonomy, encoder_config)

    if method == "embedding":
        ids = _top_k(scores, k)
        return SkillSelection(
            example_id=example_id,
            skill_ids=tuple(ids),
            scores=tuple(scores[j] for j in ids),
            method="embedding",
        )
    if method != "llm":
        raise TaxonomyError(f"unknown selection method: {method!r}")
    if client is None:
        raise TaxonomyError("method='llm' requires a client")

    skills_block = "\n".join(
        f"[{j}] {phrase}" for j, phrase in enumerate(taxonomy.representative_phrases)
    )
    variables = {"question": question, "skills_block": skills_block, "max_skills": k}
    chosen: list[int] = []
    for attempt in range(2):
        suffix = (
            ""
            if attempt == 0
            else "\n\nYour previous reply was unparseable. List the chosen skills as "
            "'SKILL: <index>' lines using only the bracketed indices above."
        )
        try:
            response = client.complete(prompts.SKILL_SELECT_SUBQA, variables, suffix=suffix)
        except LLMClientError:
            break
        chosen = []
        for m in _SKILL_LINE_RE.finditer(response):
            idx = int(m.group(1))
            if 0 <= idx < taxonomy.n_skills and idx not in chosen:
                chosen.append(idx)
            if len(chosen) == k:
                break
        if chosen:
            break
    if not chosen:
        ids = _top_k(scores, k)
        return SkillSelection(
            example_id=example_id,
            skill_ids=tuple(ids),
            scores=tuple(scores[j] for j in ids),
            method="embedding",
        )
    for j in _top_k(scores, taxonomy.n_skills):
        if len(chosen) == k:
            break
        if j not in chosen:
            chosen.append(j)
    chosen.sort(key=lambda j: (-scores[j], j))
    return SkillSelection(
        example_id=example_id,
        skill_ids=tuple(chosen),
        scores=tuple(scores[j] for j in chosen),
        method="llm",
    )


def save_taxonomy(taxonomy: SkillTaxonomy, path: Path | str) -> None:
    write_canonical_json(path, taxonomy.to_dict(), float_spec=MODEL_FLOAT_SPEC)


def load_taxonomy(path: Path | str) -> SkillTaxonomy:
    return SkillTaxonomy.from_dict(read_json(path))


def save_descriptions(descriptions: Sequence[SkillDescription], path: Path | str) -> None:
    from .serde import write_jsonl

    write_jsonl(path, [d.to_dict() for d in descriptions], float_spec=MODEL_FLOAT_SPEC)


def load_descriptions(path: Path | str) -> list[SkillDescription]:
    from .serde import iter_jsonl

    return [SkillDescription.from_dict(obj) for _, obj in iter_jsonl(path)]
