"""Expert partitioning, query routing, and the toy adapter trainer.

Training questions are embedded and k-means-clustered into expert groups;
a query routes to the expert whose question centroid is nearest.  The toy
learner validates the combined training objective at desk scale: a frozen
linear base for each head (answer classes, and T CoT token positions over
a small vocabulary) plus per-expert trainable low-rank adapters, trained
with full-batch gradient descent on

    loss = answer_cross_entropy + lambda * mean_over_positions(cot_cross_entropy)

Analytic adapter gradients are checkable against central finite
differences (`gradient_check`).  Base matrices never move.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import CentroidModel, assign, assign_many, fit_kmeans, fit_kmeans_restarts
from .corpus import AnnotatedExample, VideoQAExample
from .embedding import EncoderSpec, RemoteEncoderConfig, batch_embed, embed, fnv1a64, tokenize
from .serde import MODEL_FLOAT_SPEC, read_json, write_canonical_json

PROB_FLOOR = 1e-12

# Full-scale fine-tuning defaults recorded for provenance; the toy regime
# scales the learning rate by 100 because its loss surface is far flatter.
FULL_SCALE_DEFAULTS = {"learning_rate": 1e-5, "adapter_rank": 32, "batch_size": 1}


class ExpertsError(Exception):
    """Raised for invalid partition/training inputs."""


class TrainingDivergedError(ExpertsError):
    """Loss exceeded 1e6 or went non-finite."""


@dataclass(frozen=True)
class ExpertPartition:
    n_experts: int
    centroid_model: CentroidModel
    assignments: dict[str, int]
    encoder: EncoderSpec

    def to_dict(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "centroid_model": self.centroid_model.to_dict(),
            "assignments": dict(sorted(self.assignments.items())),
            "encoder": self.encoder.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "ExpertPartition":
        return cls(
            n_experts=int(obj["n_experts"]),
            centroid_model=CentroidModel.from_dict(obj["centroid_model"]),
            assignments={str(k): int(v) for k, v in obj["assignments"].items()},
            encoder=EncoderSpec.from_dict(obj["encoder"]),
        )


def partition_experts(
    train_examples: Sequence[VideoQAExample],
    n_experts: int = 5,
    seed: int = 0,
    encoder: EncoderSpec | None = None,
    encoder_config: RemoteEncoderConfig | None = None,
    n_restarts: int = 1,
) -> ExpertPartition:
    """Cluster training-question embeddings into expert groups."""
    if len(train_examples) < n_experts:
        raise ExpertsError(
            f"need at least n_experts={n_experts} examples, got {len(train_examples)}"
        )
    ids = [e.id for e in train_examples]
    if len(set(ids)) != len(ids):
        raise ExpertsError("duplicate example ids in training set")
    if encoder is None:
        encoder = EncoderSpec.test_hash()
    vectors = batch_embed([e.question for e in train_examples], encoder, encoder_config)
    if n_restarts > 1:
        model = fit_kmeans_restarts(vectors, n_experts, seed, n_restarts)
    else:
        model = fit_kmeans(vectors, n_experts, seed)
    assignments = {
        ids[a.point_index]: a.cluster for a in assign_many(model, vectors)
    }
    return ExpertPartition(
        n_experts=n_experts, centroid_model=model, assignments=assignments, encoder=encoder
    )


def route(
    question: str,
    partition: ExpertPartition,
    encoder_config: RemoteEncoderConfig | None = None,
) -> int:
    """Expert id of the nearest question centroid."""
    q = embed(question, partition.encoder, encoder_config)
    return assign(partition.centroid_model, q).cluster


def save_partition(partition: ExpertPartition, path: Path | str) -> None:
    write_canonical_json(path, partition.to_dict(), float_spec=MODEL_FLOAT_SPEC)


def load_partition(path: Path | str) -> ExpertPartition:
    return ExpertPartition.from_dict(read_json(path))


def combined_loss(
    answer_probs: np.ndarray,
    answer_target: int,
    cot_probs: np.ndarray,
    cot_targets: Sequence[int],
    lam: float,
) -> float:
    """-ln p_answer(target) + lam * mean_t(-ln p_cot[t](target_t)).

    Probabilities are clamped at 1e-12 before the log.
    """
    answer_probs = np.asarray(answer_probs, dtype=np.float64)
    cot_probs = np.asarray(cot_probs, dtype=np.float64)
    if answer_probs.ndim != 1:
        raise ExpertsError(f"answer_probs must be 1-D, got shape {answer_probs.shape}")
    if not 0 <= answer_target < answer_probs.shape[0]:
        raise ExpertsError(f"answer_target {answer_target} out of range")
    if cot_probs.ndim != 2:
        raise ExpertsError(f"cot_probs must be 2-D (T, V), got shape {cot_probs.shape}")
    targets = list(cot_targets)
    if len(targets) != cot_probs.shape[0]:
        raise ExpertsError(
            f"{len(targets)} cot_targets for {cot_probs.shape[0]} positions"
        )
    if any(not 0 <= t < cot_probs.shape[1] for t in targets):
        raise ExpertsError("cot target out of range")
    answer_term = -np.log(max(float(answer_probs[answer_target]), PROB_FLOOR))
    cot_term = 0.0
    for t, target in enumerate(targets):
        cot_term += -np.log(max(float(cot_probs[t, target]), PROB_FLOOR))
    cot_term /= len(targets)
    return float(answer_term + lam * cot_term)


@dataclass(frozen=True)
class ToyModelConfig:
    input_dim: int
    answer_classes: int
    cot_vocab: int
    cot_len: int
    adapter_rank: int = 32
    lam: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 100
    seed: int = 0
    gradient_check: bool = False

    def validate(self) -> None:
        if self.adapter_rank < 1:
            raise ExpertsError("adapter_rank must be >= 1")
        if self.lam < 0:
            raise ExpertsError("lambda must be >= 0")
        if min(self.input_dim, self.answer_classes, self.cot_vocab, self.cot_len) < 1:
            raise ExpertsError("input_dim, answer_classes, cot_vocab, cot_len must be >= 1")

    def to_dict(self) -> dict:
        return {
            "input_dim": self.input_dim,
            "answer_classes": self.answer_classes,
            "cot_vocab": self.cot_vocab,
            "cot_len": self.cot_len,
            "adapter_rank": self.adapter_rank,
            "lam": self.lam,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "seed": self.seed,
        }


@dataclass
class ExpertAdapters:
    a_answer: np.ndarray  # (V_a, r)
    b_answer: np.ndarray  # (r, d)
    a_cot: np.ndarray  # (T*V_c, r)
    b_cot: np.ndarray  # (r, d)

    def blocks(self) -> dict[str, np.ndarray]:
        return {
            "a_answer": self.a_answer,
            "b_answer": self.b_answer,
            "a_cot": self.a_cot,
            "b_cot": self.b_cot,
        }


@dataclass
class ToyExpertModel:
    config: ToyModelConfig
    expert_count: int
    base_answer: np.ndarray  # frozen (V_a, d)
    base_cot: np.ndarray  # frozen (T*V_c, d)
    adapters: list[ExpertAdapters]

    def effective_weights(self, expert_id: int) -> tuple[np.ndarray, np.ndarray]:
        ad = self.adapters[expert_id]
        return (
            self.base_answer + ad.a_answer @ ad.b_answer,
            self.base_cot + ad.a_cot @ ad.b_cot,
        )

    def forward(self, expert_id: int, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(answer_probs (n, V_a), cot_probs (n, T, V_c)) for a batch x (n, d)."""
        w_answer, w_cot = self.effective_weights(expert_id)
        cfg = self.config
        answer_probs = _softmax(x @ w_answer.T)
        cot_logits = (x @ w_cot.T).reshape(x.shape[0], cfg.cot_len, cfg.cot_vocab)
        return answer_probs, _softmax(cot_logits)


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


def init_toy_model(config: ToyModelConfig, expert_count: int) -> ToyExpertModel:
    """Frozen random base, LoRA-style adapters (A small random, B zero)."""
    config.validate()
    if expert_count < 1:
        raise ExpertsError("expert_count must be >= 1")
    rng = np.random.default_rng(config.seed)
    d, va = config.input_dim, config.answer_classes
    rows_cot = config.cot_len * config.cot_vocab
    base_answer = rng.normal(0.0, 0.1, size=(va, d))
    base_cot = rng.normal(0.0, 0.1, size=(rows_cot, d))
    adapters = []
    for _ in range(expert_count):
        adapters.append(
            ExpertAdapters(
                a_answer=rng.normal(0.0, 0.02, size=(va, config.adapter_rank)),
                b_answer=np.zeros((config.adapter_rank, d)),
                a_cot=rng.normal(0.0, 0.02, size=(rows_cot, config.adapter_rank)),
                b_cot=np.zeros((config.adapter_rank, d)),
            )
        )
    return ToyExpertModel(
        config=config,
        expert_count=expert_count,
        base_answer=base_answer,
        base_cot=base_cot,
        adapters=adapters,
    )


def batch_loss_and_grads(
    model: ToyExpertModel,
    expert_id: int,
    x: np.ndarray,
    y: np.ndarray,
    cot: np.ndarray,
    compute_grads: bool = True,
) -> tuple[float, float, float, dict[str, np.ndarray] | None]:
    """Mean combined loss over a batch and adapter gradients.

    Returns (combined, answer_term, cot_term, grads); combined is exactly
    answer_term + lam * cot_term.
    """
    cfg = model.config
    n = x.shape[0]
    ad = model.adapters[expert_id]
    w_answer, w_cot = model.effective_weights(expert_id)

    answer_probs = _softmax(x @ w_answer.T)  # (n, V_a)
    cot_probs = _softmax((x @ w_cot.T).reshape(n, cfg.cot_len, cfg.cot_vocab))

    idx = np.arange(n)
    answer_term = float(
        -np.log(np.maximum(answer_probs[idx, y], PROB_FLOOR)).mean()
    )
    cot_term = 0.0
    for t in range(cfg.cot_len):
        cot_term += float(-np.log(np.maximum(cot_probs[idx, t, cot[:, t]], PROB_FLOOR)).mean())
    cot_term /= cfg.cot_len
    combined = answer_term + cfg.lam * cot_term

    if not compute_grads:
        return combined, answer_term, cot_term, None

    # dL/dlogits for softmax cross-entropy: (p - onehot) / n
    d_answer = answer_probs.copy()
    d_answer[idx, y] -= 1.0
    d_answer /= n
    dw_answer = d_answer.T @ x  # (V_a, d)

    d_cot = cot_probs.copy()
    for t in range(cfg.cot_len):
        d_cot[idx, t, cot[:, t]] -= 1.0
    d_cot *= cfg.lam / (n * cfg.cot_len)
    dw_cot = d_cot.reshape(n, cfg.cot_len * cfg.cot_vocab).T @ x  # (T*V_c, d)

    grads = {
        "a_answer": dw_answer @ ad.b_answer.T,
        "b_answer": ad.a_answer.T @ dw_answer,
        "a_cot": dw_cot @ ad.b_cot.T,
        "b_cot": ad.a_cot.T @ dw_cot,
    }
    return combined, answer_term, cot_term, grads


@dataclass(frozen=True)
class FeaturizedDataset:
    """Dense training tensors: features, answer ids, CoT token ids, expert ids."""

    x: np.ndarray  # (n, d)
    y: np.ndarray  # (n,)
    cot: np.ndarray  # (n, T)
    expert_ids: np.ndarray  # (n,)
    answer_vocab: tuple[str, ...] = ()

    def shard(self, expert_id: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        mask = self.expert_ids == expert_id
        return self.x[mask], self.y[mask], self.cot[mask]


def cot_token_ids(text: str, cot_len: int, cot_vocab: int) -> list[int]:
    """First `cot_len` tokens hashed into the CoT vocabulary (0 pads)."""
    tokens = tokenize(text)[:cot_len]
    ids = [fnv1a64(tok) % cot_vocab for tok in tokens]
    ids.extend(0 for _ in range(cot_len - len(ids)))
    return ids


def featurize_annotations(
    annotations: Sequence[AnnotatedExample],
    input_dim: int,
    cot_vocab: int,
    cot_len: int,
    answer_vocab: Sequence[str] | None = None,
) -> FeaturizedDataset:
    """Deterministic features for annotated examples.

    x = test-hash embedding of question plus merged CoT paragraph; answer
    ids come from the sorted answer vocabulary; CoT token ids hash the
    paragraph's leading tokens.
    """
    if not annotations:
        raise ExpertsError("no annotations to featurize")
    spec = EncoderSpec.test_hash(input_dim)
    if answer_vocab is None:
        answer_vocab = sorted({a.base.answer for a in annotations})
    vocab_index = {ans: i for i, ans in enumerate(answer_vocab)}
    xs, ys, cots, experts = [], [], [], []
    for ann in annotations:
        if ann.base.answer not in vocab_index:
            raise ExpertsError(f"answer {ann.base.answer!r} missing from answer vocabulary")
        text = ann.base.question + " " + ann.cot.merged_paragraph
        xs.append(embed(text, spec).values)
        ys.append(vocab_index[ann.base.answer])
        cots.append(cot_token_ids(ann.cot.merged_paragraph, cot_len, cot_vocab))
        experts.append(ann.expert_id)
    return FeaturizedDataset(
        x=np.asarray(xs, dtype=np.float64),
        y=np.asarray(ys, dtype=np.int64),
        cot=np.asarray(cots, dtype=np.int64),
        expert_ids=np.asarray(experts, dtype=np.int64),
        answer_vocab=tuple(answer_vocab),
    )


@dataclass
class TrainReport:
    epoch_losses: list[dict]  # per epoch: pooled answer/cot/combined (shard-weighted)
    expert_final: dict[int, dict]  # per expert: final losses, train accuracy, shard size
    pooled_accuracy: float
    gradient_check_max_rel_err: float | None = None

    def to_rows(self) -> list[dict]:
        return self.epoch_losses


def train_toy(
    data: FeaturizedDataset,
    config: ToyModelConfig,
    n_experts: int,
) -> tuple[ToyExpertModel, TrainReport]:
    """Full-batch gradient descent per expert on its own shard.

    Only adapters update; the shared base stays frozen.  Deterministic per
    config.seed.  Aborts with TrainingDivergedError when any shard's loss
    exceeds 1e6 or goes non-finite.
    """
    config.validate()
    if data.x.shape[1] != config.input_dim:
        raise ExpertsError(
            f"features have dim {data.x.shape[1]}, config expects {config.input_dim}"
        )
    if data.y.max(initial=0) >= config.answer_classes:
        raise ExpertsError("answer id exceeds answer_classes")
    if data.expert_ids.min(initial=0) < 0 or data.expert_ids.max(initial=0) >= n_experts:
        raise ExpertsError("expert id out of range")

    model = init_toy_model(config, n_experts)
    shards = {e: data.shard(e) for e in range(n_experts)}
    shard_sizes = {e: shards[e][0].shape[0] for e in range(n_experts)}
    total = sum(shard_sizes.values())

    epoch_losses: list[dict] = []
    per_expert_last: dict[int, dict] = {}
    for epoch in range(config.epochs):
        pooled = {"answer": 0.0, "cot": 0.0, "combined": 0.0}
        for e in range(n_experts):
            x, y, cot = shards[e]
            if x.shape[0] == 0:
                continue
            combined, answer_term, cot_term, grads = batch_loss_and_grads(model, e, x, y, cot)
            if not np.isfinite(combined) or combined > 1e6:
                raise TrainingDivergedError(
                    f"expert {e} diverged at epoch {epoch}: loss={combined!r}, "
                    f"lr={config.learning_rate}, shard={x.shape[0]}"
                )
            ad = model.adapters[e]
            assert grads is not None
            ad.a_answer -= config.learning_rate * grads["a_answer"]
            ad.b_answer -= config.learning_rate * grads["b_answer"]
            ad.a_cot -= config.learning_rate * grads["a_cot"]
            ad.b_cot -= config.learning_rate * grads["b_cot"]
            weight = shard_sizes[e] / total
            pooled["answer"] += answer_term * weight
            pooled["cot"] += cot_term * weight
            pooled["combined"] += combined * weight
            per_expert_last[e] = {
                "answer": answer_term,
                "cot": cot_term,
                "combined": combined,
                "shard_size": shard_sizes[e],
            }
        epoch_losses.append({"epoch": epoch, **pooled})

    correct = 0
    for e in range(n_experts):
        x, y, _ = shards[e]
        if x.shape[0] == 0:
            per_expert_last.setdefault(e, {"shard_size": 0})
            per_expert_last[e]["train_accuracy"] = float("nan")
            continue
        answer_probs, _ = model.forward(e, x)
        hits = int((answer_probs.argmax(axis=1) == y).sum())
        correct += hits
        per_expert_last[e]["train_accuracy"] = hits / x.shape[0]

    report = TrainReport(
        epoch_losses=epoch_losses,
        expert_final=per_expert_last,
        pooled_accuracy=correct / total if total else float("nan"),
    )
    if config.gradient_check:
        report.gradient_check_max_rel_err = gradient_check_model(model, data, n_experts)
    return model, report


def predict_answers(model: ToyExpertModel, x: np.ndarray, expert_ids: np.ndarray) -> np.ndarray:
    """Answer class ids, each row scored by its routed expert."""
    out = np.empty(x.shape[0], dtype=np.int64)
    for e in np.unique(expert_ids):
        mask = expert_ids == e
        probs, _ = model.forward(int(e), x[mask])
        out[mask] = probs.argmax(axis=1)
    return out


def gradient_check(
    model: ToyExpertModel,
    expert_id: int,
    x: np.ndarray,
    y: np.ndarray,
    cot: np.ndarray,
    h: float = 1e-5,
) -> float:
    """Max block-wise relative error between analytic and central-difference grads.

    Relative error per adapter block is ``max|analytic - fd| /
    max(max|analytic|, max|fd|, 1e-8)``.
    """
    _, _, _, grads = batch_loss_and_grads(model, expert_id, x, y, cot)
    assert grads is not None
    ad = model.adapters[expert_id]
    worst = 0.0
    for name, param in ad.blocks().items():
        fd = np.zeros_like(param)
        it = np.nditer(param, flags=["multi_index"])
        while not it.finished:
            ij = it.multi_index
            orig = param[ij]
            param[ij] = orig + h
            up, _, _, _ = batch_loss_and_grads(model, expert_id, x, y, cot, compute_grads=False)
            param[ij] = orig - h
            down, _, _, _ = batch_loss_and_grads(model, expert_id, x, y, cot, compute_grads=False)
            param[ij] = orig
            fd[ij] = (up - down) / (2 * h)
            it.iternext()
        num = float(np.abs(grads[name] - fd).max())
        den = max(float(np.abs(grads[name]).max()), float(np.abs(fd).max()), 1e-8)
        worst = max(worst, num / den)
    return worst


def gradient_check_model(
    model: ToyExpertModel, data: FeaturizedDataset, n_experts: int, max_batch: int = 5
) -> float:
    """Gradient check on a small probe batch per non-empty expert shard."""
    worst = 0.0
    for e in range(n_experts):
        x, y, cot = data.shard(e)
        if x.shape[0] == 0:
            continue
        worst = max(worst, gradient_check(model, e, x[:max_batch], y[:max_batch], cot[:max_batch]))
    return worst


def save_toy_model(model: ToyExpertModel, path: Path | str) -> None:
    obj = {
        "config": model.config.to_dict(),
        "expert_count": model.expert_count,
        "base_answer": model.base_answer.tolist(),
        "base_cot": model.base_cot.tolist(),
        "adapters": [
            {name: block.tolist() for name, block in ad.blocks().items()}
            for ad in model.adapters
        ],
    }
    write_canonical_json(path, obj, float_spec=MODEL_FLOAT_SPEC)


def load_toy_model(path: Path | str) -> ToyExpertModel:
    obj = read_json(path)
    cfg = obj["config"]
    config = ToyModelConfig(
        input_dim=int(cfg["input_dim"]),
        answer_classes=int(cfg["answer_classes"]),
        cot_vocab=int(cfg["cot_vocab"]),
        cot_len=int(cfg["cot_len"]),
        adapter_rank=int(cfg["adapter_rank"]),
        lam=float(cfg["lam"]),
        learning_rate=float(cfg["learning_rate"]),
        epochs=int(cfg["epochs"]),
        seed=int(cfg["seed"]),
    )
    adapters = [
        ExpertAdapters(
            a_answer=np.asarray(ad["a_answer"], dtype=np.float64),
            b_answer=np.asarray(ad["b_answer"], dtype=np.float64),
            a_cot=np.asarray(ad["a_cot"], dtype=np.float64),
            b_cot=np.asarray(ad["b_cot"], dtype=np.float64),
        )
        for ad in obj["adapters"]
    ]
    return ToyExpertModel(
        config=config,
        expert_count=int(obj["expert_count"]),
        base_answer=np.asarray(obj["base_answer"], dtype=np.float64),
        base_cot=np.asarray(obj["base_cot"], dtype=np.float64),
        adapters=adapters,
    )
