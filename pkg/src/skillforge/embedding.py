"""Unit-normalized text embeddings behind a pluggable encoder interface.

Two encoder kinds:

* ``test_hash`` -- fully deterministic hashing encoder used by the test
  suite and the offline pipeline.  Rules (bit-exact): lowercase the text,
  take maximal ASCII-alphanumeric runs as tokens, hash each token with
  64-bit FNV-1a, bucket = hash mod dims, sign = +1 when the top hash bit
  is 0 else -1, accumulate the sign into the bucket, normalize to unit
  length (an all-zero accumulator stays the zero vector).
* ``remote`` -- HTTP encoder speaking the common embeddings-API shape:
  request ``{"model": ..., "input": [texts]}``, response
  ``{"data": [{"embedding": [...]}]}`` in input order.  The default
  model id records the sentence encoder the pipeline was designed
  around; this module never loads model weights itself.

All non-zero vectors returned by `embed`/`batch_embed` are unit-normalized,
so downstream nearest-centroid and top-K logic may rank by dot product or
cosine interchangeably.
"""
from __future__ import annotations

import math
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import requests

DEFAULT_REMOTE_MODEL = "all-mpnet-base-v2"
DEFAULT_TEST_DIMS = 16

_FNV64_OFFSET = 0xCBF29CE484222325
_FNV64_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1
_TOKEN_RE = re.compile(r"[0-9a-z]+")


class EmbeddingError(Exception):
    """Base class for embedding failures."""


class EncoderConfigError(EmbeddingError):
    """Invalid encoder spec or missing remote configuration."""


class EmbeddingTransportError(EmbeddingError):
    """Remote transport failure; safe to retry."""


@dataclass(frozen=True)
class EmbeddingVector:
    dims: int
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        if self.dims <= 0:
            raise EmbeddingError(f"dims must be positive, got {self.dims}")
        if len(self.values) != self.dims:
            raise EmbeddingError(f"expected {self.dims} values, got {len(self.values)}")

    def norm(self) -> float:
        return math.sqrt(sum(v * v for v in self.values))

    def is_zero(self) -> bool:
        return all(v == 0.0 for v in self.values)

    def to_dict(self) -> dict:
        return {"dims": self.dims, "values": list(self.values)}

    @classmethod
    def from_dict(cls, obj: dict, renormalize: bool = True) -> "EmbeddingVector":
        """Rebuild a vector from serialized floats.

        Stored floats are rounded, so `renormalize` (default) restores the
        unit-norm invariant for non-zero vectors.
        """
        values = [float(v) for v in obj["values"]]
        vec = cls(int(obj["dims"]), tuple(values))
        if renormalize and not vec.is_zero():
            return _normalized(values)
        return vec


@dataclass(frozen=True)
class EncoderSpec:
    kind: str
    dims: int
    model_id: str = ""

    def __post_init__(self) -> None:
        if self.kind not in ("remote", "test_hash"):
            raise EncoderConfigError(f"unknown encoder kind: {self.kind!r}")
        if self.dims < 2:
            raise EncoderConfigError(f"dims must be >= 2, got {self.dims}")

    @classmethod
    def test_hash(cls, dims: int = DEFAULT_TEST_DIMS) -> "EncoderSpec":
        return cls(kind="test_hash", dims=dims)

    @classmethod
    def remote(cls, model_id: str = DEFAULT_REMOTE_MODEL, dims: int = 768) -> "EncoderSpec":
        return cls(kind="remote", dims=dims, model_id=model_id)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "dims": self.dims, "model_id": self.model_id}

    @classmethod
    def from_dict(cls, obj: dict) -> "EncoderSpec":
        return cls(kind=obj["kind"], dims=int(obj["dims"]), model_id=obj.get("model_id", ""))


@dataclass(frozen=True)
class RemoteEncoderConfig:
    """Transport settings for the remote encoder.

    The auth token is read from the environment variable named by
    `auth_env` at request time; it is never stored in files.
    """

    base_url: str
    auth_env: str = "SKILLFORGE_API_TOKEN"
    timeout_s: float = 30.0
    batch_size: int = 64
    max_inflight: int = 1


def fnv1a64(token: str) -> int:
    """64-bit FNV-1a over the token's UTF-8 bytes."""
    h = _FNV64_OFFSET
    for byte in token.encode("utf-8"):
        h ^= byte
        h = (h * _FNV64_PRIME) & _MASK64
    return h


def tokenize(text: str) -> list[str]:
    """Lowercase and split on non-alphanumeric characters (ASCII runs)."""
    return _TOKEN_RE.findall(text.lower())


def _normalized(values: Sequence[float]) -> EmbeddingVector:
    norm = math.sqrt(sum(v * v for v in values))
    if norm == 0.0:
        return EmbeddingVector(len(values), tuple(0.0 for _ in values))
    return EmbeddingVector(len(values), tuple(v / norm for v in values))


def _test_hash_embed(text: str, dims: int) -> EmbeddingVector:
    acc = [0.0] * dims
    for token in tokenize(text):
        h = fnv1a64(token)
        sign = 1.0 if (h >> 63) == 0 else -1.0
        acc[h % dims] += sign
    return _normalized(acc)


def _remote_headers(config: RemoteEncoderConfig) -> dict:
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(config.auth_env, "")
    if token:
        headers["Authorization"] = f"Bearer {token}"
    return headers


def _remote_embed_batch(
    texts: Sequence[str], spec: EncoderSpec, config: RemoteEncoderConfig
) -> list[EmbeddingVector]:
    try:
        resp = requests.post(
            config.base_url,
            json={"model": spec.model_id, "input": list(texts)},
            headers=_remote_headers(config),
            timeout=config.timeout_s,
        )
    except requests.RequestException as exc:
        raise EmbeddingTransportError(f"remote encoder request failed: {exc}") from exc
    if resp.status_code != 200:
        raise EmbeddingTransportError(
            f"remote encoder returned HTTP {resp.status_code}: {resp.text[:200]}"
        )
    try:
        data = resp.json()["data"]
        raw = [item["embedding"] for item in data]
    except (KeyError, TypeError, ValueError) as exc:
        raise EmbeddingError(f"malformed remote encoder response: {exc}") from exc
    if len(raw) != len(texts):
        raise EmbeddingError(f"remote encoder returned {len(raw)} vectors for {len(texts)} inputs")
    out = []
    for vec in raw:
        if len(vec) != spec.dims:
            raise EmbeddingError(f"remote vector has {len(vec)} dims, spec says {spec.dims}")
        out.append(_normalized([float(v) for v in vec]))
    return out


def embed(text: str, spec: EncoderSpec, config: RemoteEncoderConfig | None = None) -> EmbeddingVector:
    """Embed one text; unit-normalized unless the raw vector is exactly zero."""
    if spec.kind == "test_hash":
        return _test_hash_embed(text, spec.dims)
    if not spec.model_id:
        raise EncoderConfigError("remote encoder requires a model_id")
    if config is None:
        raise EncoderConfigError("remote encoder requires a RemoteEncoderConfig")
    return _remote_embed_batch([text], spec, config)[0]


def batch_embed(
    texts: Sequence[str], spec: EncoderSpec, config: RemoteEncoderConfig | None = None
) -> list[EmbeddingVector]:
    """Embed texts in order; element i equals embed(texts[i], spec)."""
    if not texts:
        return []
    if spec.kind == "test_hash":
        return [_test_hash_embed(t, spec.dims) for t in texts]
    if not spec.model_id:
        raise EncoderConfigError("remote encoder requires a model_id")
    if config is None:
        raise EncoderConfigError("remote encoder requires a RemoteEncoderConfig")

    chunks = [
        (start, list(texts[start : start + config.batch_size]))
        for start in range(0, len(texts), config.batch_size)
    ]

    def run(chunk: tuple[int, list[str]]) -> list[EmbeddingVector]:
        start, batch = chunk
        try:
            return _remote_embed_batch(batch, spec, config)
        except EmbeddingError as exc:
            raise type(exc)(f"texts[{start}:{start + len(batch)}]: {exc}") from exc

    if config.max_inflight <= 1 or len(chunks) == 1:
        results = [run(c) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=config.max_inflight) as pool:
            futures = [pool.submit(run, c) for c in chunks]
            results = [f.result() for f in futures]
    return [vec for batch in results for vec in batch]


def cosine(a: EmbeddingVector, b: EmbeddingVector) -> float:
    """Cosine similarity clamped to [-1, 1]; 0 when either vector is zero."""
    if a.dims != b.dims:
        raise EmbeddingError(f"dimension mismatch: {a.dims} vs {b.dims}")
    na, nb = a.norm(), b.norm()
    if na == 0.0 or nb == 0.0:
        return 0.0
    dot = sum(x * y for x, y in zip(a.values, b.values))
    return max(-1.0, min(1.0, dot / (na * nb)))
