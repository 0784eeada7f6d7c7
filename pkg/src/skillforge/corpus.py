"""Video-QA dataset ingestion, validation, splitting, and persistence.

Datasets are line-delimited records (one JSON object per line, UTF-8,
snake_case keys).  Annotation files use the same convention.  Writes are
canonical -- sorted keys, floats at fixed 6-decimal precision -- so that
identical inputs always produce identical bytes and content hashes.

Video URIs are opaque strings; nothing in this package ever dereferences
or decodes them.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .serde import SerdeError, canonical_json, iter_jsonl, sha256_bytes, write_canonical_json

SPLIT_VALUES = ("train", "test", "unsplit")
VERIFICATION_VALUES = ("verified", "filtered_out", "unverified")
UNROUTED_EXPERT = -1  # sentinel until expert partitioning back-fills expert_id


class CorpusError(Exception):
    """Raised for malformed dataset files or invalid records."""


@dataclass(frozen=True)
class VideoQAExample:
    id: str
    video_uri: str
    question: str
    answer: str
    choices: tuple[str, ...] | None = None
    domain_tag: str | None = None
    split: str = "unsplit"

    def validate(self) -> None:
        if not self.id:
            raise CorpusError("example has empty id")
        if not self.question.strip():
            raise CorpusError(f"example {self.id!r}: question is empty")
        if not self.answer.strip():
            raise CorpusError(f"example {self.id!r}: answer is empty")
        if self.choices is not None and self.answer not in self.choices:
            raise CorpusError(f"example {self.id!r}: answer not among choices")
        if self.split not in SPLIT_VALUES:
            raise CorpusError(f"example {self.id!r}: bad split {self.split!r}")

    def to_dict(self) -> dict:
        out: dict = {
            "id": self.id,
            "video_uri": self.video_uri,
            "question": self.question,
            "answer": self.answer,
            "split": self.split,
        }
        if self.choices is not None:
            out["choices"] = list(self.choices)
        if self.domain_tag is not None:
            out["domain_tag"] = self.domain_tag
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "VideoQAExample":
        try:
            example = cls(
                id=str(obj["id"]),
                video_uri=str(obj["video_uri"]),
                question=str(obj["question"]),
                answer=str(obj["answer"]),
                choices=tuple(obj["choices"]) if obj.get("choices") is not None else None,
                domain_tag=obj.get("domain_tag"),
                split=obj.get("split", "unsplit"),
            )
        except KeyError as exc:
            raise CorpusError(f"record missing field {exc.args[0]!r}") from exc
        example.validate()
        return example


@dataclass
class SubQA:
    step_index: int
    skill_id: int
    sub_question: str
    sub_answer: str

    def to_dict(self) -> dict:
        return {
            "step_index": self.step_index,
            "skill_id": self.skill_id,
            "sub_question": self.sub_question,
            "sub_answer": self.sub_answer,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "SubQA":
        return cls(
            step_index=int(obj["step_index"]),
            skill_id=int(obj["skill_id"]),
            sub_question=str(obj["sub_question"]),
            sub_answer=str(obj["sub_answer"]),
        )


@dataclass
class CoTTrace:
    steps: list[SubQA]
    merged_paragraph: str
    kept_step_indices: list[int]
    status: str = "raw"  # raw | verified | filtered_out | unverified

    def validate(self) -> None:
        indices = [s.step_index for s in self.steps]
        if sorted(set(self.kept_step_indices)) != list(self.kept_step_indices):
            raise CorpusError("kept_step_indices must be strictly increasing")
        if any(i not in indices for i in self.kept_step_indices):
            raise CorpusError("kept_step_indices refers to a missing step")
        if self.status == "verified" and not self.kept_step_indices:
            raise CorpusError("verified trace must keep at least one step")
        if self.status == "filtered_out" and self.kept_step_indices:
            raise CorpusError("filtered_out trace must keep zero steps")

    def to_dict(self) -> dict:
        return {
            "steps": [s.to_dict() for s in self.steps],
            "merged_paragraph": self.merged_paragraph,
            "kept_step_indices": list(self.kept_step_indices),
            "status": self.status,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CoTTrace":
        return cls(
            steps=[SubQA.from_dict(s) for s in obj["steps"]],
            merged_paragraph=str(obj["merged_paragraph"]),
            kept_step_indices=[int(i) for i in obj["kept_step_indices"]],
            status=str(obj["status"]),
        )


@dataclass
class AnnotatedExample:
    base: VideoQAExample
    skill_ids: list[int]
    skill_scores: list[float]
    cot: CoTTrace
    expert_id: int = UNROUTED_EXPERT
    verification: str = "unverified"

    def validate(self) -> None:
        self.base.validate()
        if len(set(self.skill_ids)) != len(self.skill_ids):
            raise CorpusError(f"example {self.base.id!r}: skill_ids not distinct")
        if len(self.skill_scores) != len(self.skill_ids):
            raise CorpusError(f"example {self.base.id!r}: skill_scores length mismatch")
        if any(b > a + 1e-12 for a, b in zip(self.skill_scores, self.skill_scores[1:])):
            raise CorpusError(f"example {self.base.id!r}: skill_scores must be non-increasing")
        if any(not (-1.0 - 1e-9 <= s <= 1.0 + 1e-9) for s in self.skill_scores):
            raise CorpusError(f"example {self.base.id!r}: skill_scores outside [-1, 1]")
        if self.verification not in VERIFICATION_VALUES:
            raise CorpusError(f"example {self.base.id!r}: bad verification {self.verification!r}")
        self.cot.validate()

    def to_dict(self) -> dict:
        return {
            "base": self.base.to_dict(),
            "skill_ids": list(self.skill_ids),
            "skill_scores": list(self.skill_scores),
            "cot": self.cot.to_dict(),
            "expert_id": self.expert_id,
            "verification": self.verification,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "AnnotatedExample":
        ann = cls(
            base=VideoQAExample.from_dict(obj["base"]),
            skill_ids=[int(i) for i in obj["skill_ids"]],
            skill_scores=[float(s) for s in obj["skill_scores"]],
            cot=CoTTrace.from_dict(obj["cot"]),
            expert_id=int(obj["expert_id"]),
            verification=str(obj["verification"]),
        )
        ann.validate()
        return ann


@dataclass(frozen=True)
class DatasetManifest:
    source_path: str
    example_count: int
    content_hash: str
    split_seed: int | None = None
    split_ratio: str | None = None

    def to_dict(self) -> dict:
        return {
            "source_path": self.source_path,
            "example_count": self.example_count,
            "content_hash": self.content_hash,
            "split_seed": self.split_seed,
            "split_ratio": self.split_ratio,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "DatasetManifest":
        return cls(
            source_path=str(obj["source_path"]),
            example_count=int(obj["example_count"]),
            content_hash=str(obj["content_hash"]),
            split_seed=obj.get("split_seed"),
            split_ratio=obj.get("split_ratio"),
        )


def manifest_path(dataset_path: Path | str) -> Path:
    return Path(str(dataset_path) + ".manifest.json")


def load_dataset(path: Path | str) -> list[VideoQAExample]:
    """Load a line-delimited dataset, validating every record.

    Errors name the offending line; duplicate ids name both lines.
    """
    examples: list[VideoQAExample] = []
    seen: dict[str, int] = {}
    try:
        for lineno, obj in iter_jsonl(path):
            try:
                example = VideoQAExample.from_dict(obj)
            except CorpusError as exc:
                raise CorpusError(f"{path}: line {lineno}: {exc}") from exc
            if example.id in seen:
                raise CorpusError(
                    f"{path}: duplicate id {example.id!r} on lines {seen[example.id]} and {lineno}"
                )
            seen[example.id] = lineno
            examples.append(example)
    except SerdeError as exc:
        raise CorpusError(str(exc)) from exc
    return examples


def parse_ratio(ratio) -> Fraction:
    """Accept '7:3', (7, 3), or a Fraction; return the train-side fraction."""
    if isinstance(ratio, Fraction):
        frac = ratio
    elif isinstance(ratio, str):
        parts = ratio.split(":")
        if len(parts) != 2:
            raise CorpusError(f"ratio must look like '7:3', got {ratio!r}")
        try:
            a, b = int(parts[0]), int(parts[1])
        except ValueError as exc:
            raise CorpusError(f"ratio must be integer:integer, got {ratio!r}") from exc
        if a + b <= 0:
            raise CorpusError("ratio numerator+denominator must be positive")
        frac = Fraction(a, a + b)
    else:
        a, b = ratio
        if a + b <= 0:
            raise CorpusError("ratio numerator+denominator must be positive")
        frac = Fraction(int(a), int(a) + int(b))
    if not (0 < frac < 1):
        raise CorpusError(f"train fraction must be inside (0, 1), got {frac}")
    return frac


def split_dataset(
    examples: Sequence[VideoQAExample], ratio, seed: int
) -> tuple[list[VideoQAExample], list[VideoQAExample]]:
    """Deterministic seeded split; train gets floor(n * train_fraction).

    The shuffle is an explicit Fisher-Yates pass driven by PCG64
    (``np.random.default_rng(seed)``): for i from n-1 down to 1, draw
    ``integers(i + 1)`` and swap positions i and j.
    """
    if not examples:
        raise CorpusError("cannot split an empty dataset")
    frac = parse_ratio(ratio)
    n = len(examples)
    order = list(range(n))
    rng = np.random.default_rng(seed)
    for i in range(n - 1, 0, -1):
        j = int(rng.integers(i + 1))
        order[i], order[j] = order[j], order[i]
    n_train = (n * frac.numerator) // frac.denominator
    train = [replace(examples[idx], split="train") for idx in order[:n_train]]
    test = [replace(examples[idx], split="test") for idx in order[n_train:]]
    return train, test


def write_dataset(examples: Sequence[VideoQAExample], path: Path | str,
                  split_seed: int | None = None, split_ratio: str | None = None) -> DatasetManifest:
    """Write examples canonically and a manifest alongside."""
    data = "".join(canonical_json(e.to_dict()) + "\n" for e in examples).encode("utf-8")
    Path(path).write_bytes(data)
    manifest = DatasetManifest(
        source_path=str(path),
        example_count=len(examples),
        content_hash=sha256_bytes(data),
        split_seed=split_seed,
        split_ratio=split_ratio,
    )
    write_canonical_json(manifest_path(path), manifest.to_dict())
    return manifest


def write_annotations(examples: Sequence[AnnotatedExample], path: Path | str) -> DatasetManifest:
    """Write validated annotations canonically; manifest hash covers the bytes."""
    for example in examples:
        example.validate()
    data = "".join(canonical_json(e.to_dict()) + "\n" for e in examples).encode("utf-8")
    Path(path).write_bytes(data)
    manifest = DatasetManifest(
        source_path=str(path),
        example_count=len(examples),
        content_hash=sha256_bytes(data),
    )
    write_canonical_json(manifest_path(path), manifest.to_dict())
    return manifest


def load_annotations(path: Path | str) -> list[AnnotatedExample]:
    out: list[AnnotatedExample] = []
    seen: dict[str, int] = {}
    try:
        for lineno, obj in iter_jsonl(path):
            try:
                ann = AnnotatedExample.from_dict(obj)
            except CorpusError as exc:
                raise CorpusError(f"{path}: line {lineno}: {exc}") from exc
            if ann.base.id in seen:
                raise CorpusError(
                    f"{path}: duplicate id {ann.base.id!r} on lines {seen[ann.base.id]} and {lineno}"
                )
            seen[ann.base.id] = lineno
            out.append(ann)
    except SerdeError as exc:
        raise CorpusError(str(exc)) from exc
    return out


def training_export(annotations: Iterable[AnnotatedExample]) -> list[AnnotatedExample]:
    """Records eligible for training: verified, with a routed expert_id.

    Filtered-out and unverified records are dropped; a verified record
    still carrying the unrouted sentinel is an error (exports refuse
    sentinels rather than silently leaking them).
    """
    out = []
    for ann in annotations:
        if ann.verification != "verified":
            continue
        if ann.expert_id == UNROUTED_EXPERT:
            raise CorpusError(f"example {ann.base.id!r}: expert_id not assigned before export")
        out.append(ann)
    return out
