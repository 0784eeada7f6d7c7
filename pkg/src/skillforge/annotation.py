"""Skill-conditioned sub-QA generation, CoT merging, and verification.

Per example the pipeline runs: select skills -> generate sub-QA steps ->
merge them into one paragraph -> verify each step against the ground
truth and drop the irrelevant ones.  Every LLM interaction uses a strict
block format with exactly one corrective retry; a second failure degrades
gracefully (unverified example, or deterministic merge fallback) instead
of aborting the batch.
"""
from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

from . import prompts
from .corpus import AnnotatedExample, CoTTrace, SubQA, VideoQAExample
from .embedding import RemoteEncoderConfig
from .llmclient import LLMClient, LLMClientError
from .taxonomy import SkillSelection, SkillTaxonomy, select_skills

_BLOCK_RE = re.compile(
    r"^\s*\d+\.\s*SKILL:\s*(\d+)\s*\nSUBQ:\s*(.+?)\s*\nSUBA:\s*(.+?)\s*$",
    re.MULTILINE,
)
_VERDICT_RE = re.compile(r"STEP\s+(\d+)\s*:\s*(KEEP|DROP)", re.IGNORECASE)

DEFAULT_MAX_STEPS = 6


class AnnotationError(Exception):
    """Raised for invalid annotation inputs (not for degraded LLM output)."""


@dataclass
class Verdict:
    step_verdicts: list[str]  # "keep" | "drop", aligned to trace.steps
    rationale: str
    parser_ok: bool


@dataclass(frozen=True)
class AnnotationConfig:
    k_skills: int = 3
    selection_method: str = "embedding"  # "embedding" | "llm"
    merge_mode: str = "deterministic"  # "deterministic" | "llm"
    max_steps: int = DEFAULT_MAX_STEPS
    encoder_config: RemoteEncoderConfig | None = None
    attach_video: bool = False  # pass video_uri to multimodal backends


def normalize_text(text: str) -> str:
    return re.sub(r"\s+", " ", text.strip().lower())


def paragraph_covers_steps(paragraph: str, steps: list[SubQA]) -> bool:
    """Every step's sub-answer appears (normalized) in order in the paragraph."""
    hay = normalize_text(paragraph)
    pos = 0
    for step in steps:
        needle = normalize_text(step.sub_answer)
        found = hay.find(needle, pos)
        if found < 0:
            return False
        pos = found + len(needle)
    return True


def parse_subqa_blocks(text: str, allowed_skill_ids: set[int], max_steps: int) -> list[SubQA]:
    """Parse numbered SKILL/SUBQ/SUBA blocks; blocks with foreign skill ids drop."""
    steps: list[SubQA] = []
    for match in _BLOCK_RE.finditer(text):
        skill_id = int(match.group(1))
        if skill_id not in allowed_skill_ids:
            continue
        steps.append(
            SubQA(
                step_index=len(steps),
                skill_id=skill_id,
                sub_question=match.group(2).strip(),
                sub_answer=match.group(3).strip(),
            )
        )
        if len(steps) == max_steps:
            break
    return steps


def generate_subqa(
    example: VideoQAExample,
    selection: SkillSelection,
    taxonomy: SkillTaxonomy,
    client: LLMClient,
    max_steps: int = DEFAULT_MAX_STEPS,
    attach_video: bool = False,
) -> list[SubQA]:
    """Skill-grounded sub-QA steps; empty list after the retry also fails.

    Returns 1..max_steps parsed steps, or [] when both attempts produced
    nothing usable (caller marks the example unverified).
    """
    allowed = set(selection.skill_ids)
    phrase_map = taxonomy.phrase_map()
    skills_block = "\n".join(f"[{j}] {phrase_map[j]}" for j in selection.skill_ids)
    variables = {
        "question": example.question,
        "skills_block": skills_block,
        "max_skills": len(selection.skill_ids),
    }
    attachments = (example.video_uri,) if attach_video else ()
    for attempt in range(2):
        suffix = (
            ""
            if attempt == 0
            else "\n\nYour previous reply was unparseable. Use only the bracketed skill "
            "indices above and the exact block format '1. SKILL:' / 'SUBQ:' / 'SUBA:'."
        )
        try:
            response = client.complete(
                prompts.SKILL_SELECT_SUBQA, variables, attachments=attachments, suffix=suffix
            )
        except LLMClientError:
            return []
        steps = parse_subqa_blocks(response, allowed, max_steps)
        if steps:
            return steps
    return []


def _render_step(step: SubQA, phrase_map: dict[int, str] | None) -> str:
    phrase = (phrase_map or {}).get(step.skill_id, f"skill {step.skill_id}")
    return f"Step {step.step_index} ({phrase}): {step.sub_question} — {step.sub_answer}."


def merge_deterministic(steps: list[SubQA], phrase_map: dict[int, str] | None = None) -> str:
    return " ".join(_render_step(s, phrase_map) for s in steps)


def merge_cot(
    steps: list[SubQA],
    mode: str = "deterministic",
    client: LLMClient | None = None,
    phrase_map: dict[int, str] | None = None,
    question: str = "",
) -> tuple[str, bool]:
    """Merge steps into one paragraph.

    Returns (paragraph, degraded): ``degraded`` is True when llm mode fell
    back to the deterministic template because the model call failed or
    its output lost a sub-answer.
    """
    if not steps:
        raise AnnotationError("merge_cot needs at least one step")
    if mode == "deterministic":
        return merge_deterministic(steps, phrase_map), False
    if mode != "llm":
        raise AnnotationError(f"unknown merge mode: {mode!r}")
    if client is None:
        raise AnnotationError("merge mode 'llm' requires a client")
    steps_block = "\n".join(_render_step(s, phrase_map) for s in steps)
    try:
        paragraph = client.complete(
            prompts.MERGE_COT, {"question": question, "steps_block": steps_block}
        ).strip()
    except LLMClientError:
        return merge_deterministic(steps, phrase_map), True
    if paragraph and paragraph_covers_steps(paragraph, steps):
        return paragraph, False
    return merge_deterministic(steps, phrase_map), True


def _parse_verdicts(response: str, n_steps: int) -> list[str] | None:
    found: dict[int, str] = {}
    for match in _VERDICT_RE.finditer(response):
        idx = int(match.group(1))
        if idx in found or idx >= n_steps:
            return None
        found[idx] = match.group(2).lower()
    if len(found) != n_steps:
        return None
    return [found[i] for i in range(n_steps)]


def verify_cot(
    example: VideoQAExample,
    trace: CoTTrace,
    client: LLMClient,
    phrase_map: dict[int, str] | None = None,
    merge_mode: str = "deterministic",
) -> Verdict:
    """Per-step keep/drop filtering against the ground-truth answer.

    Mutates the trace: kept_step_indices, status (verified / filtered_out /
    unverified on double parse failure), and the merged paragraph, which is
    regenerated from the kept steps only.
    """
    if trace.status != "raw":
        raise AnnotationError(f"verify_cot expects a raw trace, got {trace.status!r}")
    steps_block = "\n".join(_render_step(s, phrase_map) for s in trace.steps)
    variables = {
        "question": example.question,
        "answer": example.answer,
        "steps_block": steps_block,
    }
    verdicts: list[str] | None = None
    response = ""
    for attempt in range(2):
        suffix = (
            ""
            if attempt == 0
            else f"\n\nYour previous reply was unparseable. Reply with exactly "
            f"{len(trace.steps)} lines, 'STEP <index>: KEEP' or 'STEP <index>: DROP', "
            f"for indices 0..{len(trace.steps) - 1}."
        )
        try:
            response = client.complete(prompts.FILTER_COT, variables, suffix=suffix)
        except LLMClientError:
            break
        verdicts = _parse_verdicts(response, len(trace.steps))
        if verdicts is not None:
            break

    if verdicts is None:
        trace.status = "unverified"
        return Verdict(
            step_verdicts=["keep"] * len(trace.steps), rationale=response, parser_ok=False
        )

    kept = [i for i, v in enumerate(verdicts) if v == "keep"]
    trace.kept_step_indices = kept
    if kept:
        kept_steps = [trace.steps[i] for i in kept]
        trace.merged_paragraph, _ = merge_cot(
            kept_steps, merge_mode, client, phrase_map, question=example.question
        )
        trace.status = "verified"
    else:
        trace.merged_paragraph = ""
        trace.status = "filtered_out"
    return Verdict(step_verdicts=verdicts, rationale=response, parser_ok=True)


def annotate_example(
    example: VideoQAExample,
    taxonomy: SkillTaxonomy,
    config: AnnotationConfig,
    client: LLMClient,
) -> AnnotatedExample:
    """Full per-example pass: skills -> sub-QA -> merge -> verify."""
    selection = select_skills(
        example.question,
        taxonomy,
        K=config.k_skills,
        method=config.selection_method,
        client=client if config.selection_method == "llm" else None,
        example_id=example.id,
        encoder_config=config.encoder_config,
    )
    phrase_map = taxonomy.phrase_map()
    steps = generate_subqa(
        example, selection, taxonomy, client, config.max_steps, config.attach_video
    )
    # Scores persist at 6-decimal precision so annotation files round-trip
    # exactly under the canonical float format.
    scores = [round(s, 6) for s in selection.scores]
    if not steps:
        trace = CoTTrace(steps=[], merged_paragraph="", kept_step_indices=[], status="unverified")
        return AnnotatedExample(
            base=example,
            skill_ids=list(selection.skill_ids),
            skill_scores=scores,
            cot=trace,
            verification="unverified",
        )
    paragraph, _ = merge_cot(steps, config.merge_mode, client, phrase_map, question=example.question)
    trace = CoTTrace(steps=steps, merged_paragraph=paragraph, kept_step_indices=[], status="raw")
    verify_cot(example, trace, client, phrase_map, config.merge_mode)
    return AnnotatedExample(
        base=example,
        skill_ids=list(selection.skill_ids),
        skill_scores=scores,
        cot=trace,
        verification=trace.status,
    )


def annotate_dataset(
    examples: list[VideoQAExample],
    taxonomy: SkillTaxonomy,
    config: AnnotationConfig,
    client: LLMClient,
    max_workers: int = 1,
) -> tuple[list[AnnotatedExample], dict[str, int]]:
    """Annotate a dataset with bounded parallelism; output order = input order."""
    if max_workers <= 1:
        annotated = [annotate_example(e, taxonomy, config, client) for e in examples]
    else:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [
                pool.submit(annotate_example, e, taxonomy, config, client) for e in examples
            ]
            annotated = [f.result() for f in futures]
    report = {"verified": 0, "filtered_out": 0, "unverified": 0}
    for ann in annotated:
        report[ann.verification] += 1
    return annotated, report
