"""Canonical JSON serialization and hashing shared by all file formats.

Every artifact this package writes (datasets, annotations, taxonomies,
partitions, models, manifests) goes through `canonical_json` so that
identical in-memory values always produce identical bytes: keys sorted,
floats rendered with one fixed format, no whitespace variation.
"""
from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any, Iterator

# Dataset records use fixed 6-decimal floats; model files use 9 significant
# digits (enough to round-trip the quantities we store there).
DATASET_FLOAT_SPEC = ".6f"
MODEL_FLOAT_SPEC = ".9g"


class SerdeError(Exception):
    """Raised for values that cannot be canonically serialized."""


def canonical_json(obj: Any, float_spec: str = DATASET_FLOAT_SPEC) -> str:
    """Serialize `obj` to a canonical JSON string.

    Dict keys are sorted, floats use `float_spec`, -0.0 normalizes to 0.0.
    NaN/inf are rejected: files must stay loadable by strict parsers.
    """
    if isinstance(obj, bool) or obj is None or isinstance(obj, (int, str)):
        return json.dumps(obj, ensure_ascii=False)
    if isinstance(obj, float):
        if math.isnan(obj) or math.isinf(obj):
            raise SerdeError(f"non-finite float not serializable: {obj!r}")
        if obj == 0.0:
            obj = 0.0
        return format(obj, float_spec)
    if isinstance(obj, dict):
        for key in obj:
            if not isinstance(key, str):
                raise SerdeError(f"non-string dict key: {key!r}")
        inner = ",".join(
            json.dumps(k, ensure_ascii=False) + ":" + canonical_json(v, float_spec)
            for k, v in sorted(obj.items())
        )
        return "{" + inner + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(canonical_json(v, float_spec) for v in obj) + "]"
    raise SerdeError(f"unsupported type for canonical JSON: {type(obj).__name__}")


def write_canonical_json(path: Path | str, obj: Any, float_spec: str = DATASET_FLOAT_SPEC) -> bytes:
    """Write one canonical JSON document (trailing newline) and return its bytes."""
    data = (canonical_json(obj, float_spec) + "\n").encode("utf-8")
    Path(path).write_bytes(data)
    return data


def read_json(path: Path | str) -> Any:
    with open(path, "r", encoding="utf-8") as fh:
        return json.load(fh)


def iter_jsonl(path: Path | str) -> Iterator[tuple[int, Any]]:
    """Yield (1-based line number, parsed object) for each non-empty line.

    Malformed lines raise SerdeError naming the line number.
    """
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                yield lineno, json.loads(stripped)
            except json.JSONDecodeError as exc:
                raise SerdeError(f"{path}: malformed record on line {lineno}: {exc.msg}") from exc


def write_jsonl(path: Path | str, records: list[Any], float_spec: str = DATASET_FLOAT_SPEC) -> bytes:
    """Write records as canonical JSONL and return the file bytes."""
    data = "".join(canonical_json(rec, float_spec) + "\n" for rec in records).encode("utf-8")
    Path(path).write_bytes(data)
    return data


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def sha256_file(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()
