"""Synthetic multi-skill datasets and the specialization experiments.

Interference dataset (used by `eval_specialization`): five clusters of
Gaussian features (sigma defaults to 0.1) around five orthogonal unit
anchors.  Each example carries an answer class encoded on a second set of
orthogonal directions; cluster e encodes class y on direction
perm_e(y) where perm_e is a cyclic shift by e, so any two clusters
disagree on every class.  A single linear head provably cannot satisfy
all five shifted mappings at once (summing its required strict
inequalities around a cycle contradicts itself), while one expert per
cluster fits its own shard exactly.  CoT targets are deterministic in
(cluster, answer): token t is (y + t + e) mod cot_vocab.  The
no-interference control replaces every perm_e with the identity and
drops the cluster term from the CoT targets.

Ablation dataset (used by `run_ablation`): features split into a base
block and a CoT-derived block.  The base block holds the cluster anchor
plus a weak shared answer signal under heavy noise; the CoT block, when
enabled, adds a moderate shared signal plus a strong cluster-permuted
signal.  Disabling a pipeline component zeroes the CoT block (no
skill-conditioned CoT features) or trains one shared adapter of equal
total rank (no experts).  Routing always clusters the base block only,
mirroring routing by question embedding.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .clustering import assign_many, fit_kmeans
from .experts import (
    ExpertsError,
    FeaturizedDataset,
    ToyModelConfig,
    predict_answers,
    train_toy,
)


@dataclass(frozen=True)
class SyntheticSpec:
    n_clusters: int = 5
    answer_classes: int = 5
    cot_vocab: int = 5
    cot_len: int = 2
    input_dim: int = 16
    sigma: float = 0.1
    answer_scale: float = 0.5
    train_per_cluster: int = 60
    test_per_cluster: int = 40

    def validate(self) -> None:
        if self.input_dim < self.n_clusters + self.answer_classes:
            raise ExpertsError(
                "input_dim must fit cluster anchors plus answer directions "
                f"({self.n_clusters}+{self.answer_classes}), got {self.input_dim}"
            )


def make_interference_data(
    spec: SyntheticSpec, seed: int, conflicting: bool = True
) -> tuple[FeaturizedDataset, FeaturizedDataset]:
    """(train, test) with true cluster ids in expert_ids.

    Anchors are standard basis directions 0..n_clusters-1; answer signals
    live on directions n_clusters..n_clusters+answer_classes-1.
    """
    spec.validate()
    rng = np.random.default_rng(seed)

    def sample(per_cluster: int) -> FeaturizedDataset:
        xs, ys, cots, cluster_ids = [], [], [], []
        for e in range(spec.n_clusters):
            for _ in range(per_cluster):
                y = int(rng.integers(spec.answer_classes))
                signal = (y + e) % spec.answer_classes if conflicting else y
                x = rng.normal(0.0, spec.sigma, size=spec.input_dim)
                x[e] += 1.0
                x[spec.n_clusters + signal] += spec.answer_scale
                shift = e if conflicting else 0
                cot = [(y + t + shift) % spec.cot_vocab for t in range(spec.cot_len)]
                xs.append(x)
                ys.append(y)
                cots.append(cot)
                cluster_ids.append(e)
        return FeaturizedDataset(
            x=np.asarray(xs),
            y=np.asarray(ys, dtype=np.int64),
            cot=np.asarray(cots, dtype=np.int64),
            expert_ids=np.asarray(cluster_ids, dtype=np.int64),
        )

    return sample(spec.train_per_cluster), sample(spec.test_per_cluster)


def _route_by_kmeans(
    train: FeaturizedDataset,
    test: FeaturizedDataset,
    n_experts: int,
    seed: int,
    route_dims: int | None = None,
) -> tuple[FeaturizedDataset, FeaturizedDataset]:
    """Re-label expert_ids with a k-means routing fit on training features."""
    cols = slice(0, route_dims) if route_dims else slice(None)
    model = fit_kmeans(train.x[:, cols], n_experts, seed)
    train_ids = np.asarray([a.cluster for a in assign_many(model, train.x[:, cols])])
    test_ids = np.asarray([a.cluster for a in assign_many(model, test.x[:, cols])])
    retrain = FeaturizedDataset(train.x, train.y, train.cot, train_ids, train.answer_vocab)
    retest = FeaturizedDataset(test.x, test.y, test.cot, test_ids, test.answer_vocab)
    return retrain, retest


def _single_expert(data: FeaturizedDataset) -> FeaturizedDataset:
    return FeaturizedDataset(
        data.x, data.y, data.cot, np.zeros_like(data.expert_ids), data.answer_vocab
    )


def _accuracy(model, data: FeaturizedDataset) -> float:
    preds = predict_answers(model, data.x, data.expert_ids)
    return float((preds == data.y).mean())


@dataclass(frozen=True)
class SpecializationConfig:
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    n_experts: int = 5
    adapter_rank: int = 4
    lam: float = 0.5
    learning_rate: float = 0.5
    epochs: int = 300

    def toy_config(self, rank: int, seed: int) -> ToyModelConfig:
        s = self.synthetic
        return ToyModelConfig(
            input_dim=s.input_dim,
            answer_classes=s.answer_classes,
            cot_vocab=s.cot_vocab,
            cot_len=s.cot_len,
            adapter_rank=rank,
            lam=self.lam,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            seed=seed,
        )


@dataclass
class SpecializationResult:
    dataset: str  # "interference" | "control"
    seed: int
    routed_accuracy: float
    single_accuracy: float


@dataclass
class SpecializationReport:
    results: list[SpecializationResult]

    def mean(self, dataset: str, column: str) -> float:
        vals = [getattr(r, column) for r in self.results if r.dataset == dataset]
        return float(np.mean(vals)) if vals else float("nan")

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["dataset", "seed", "routed_accuracy", "single_accuracy"])
            for r in self.results:
                writer.writerow(
                    [r.dataset, r.seed, f"{r.routed_accuracy:.6f}", f"{r.single_accuracy:.6f}"]
                )
            for dataset in ("interference", "control"):
                if any(r.dataset == dataset for r in self.results):
                    writer.writerow(
                        [
                            dataset,
                            "mean",
                            f"{self.mean(dataset, 'routed_accuracy'):.6f}",
                            f"{self.mean(dataset, 'single_accuracy'):.6f}",
                        ]
                    )


def eval_specialization(
    config: SpecializationConfig,
    seeds: Sequence[int],
    include_control: bool = True,
) -> SpecializationReport:
    """Routed experts vs one equal-budget shared adapter, per seed.

    The shared adapter gets rank n_experts * adapter_rank so both sides
    spend the same trainable-parameter budget.
    """
    results: list[SpecializationResult] = []
    datasets = [("interference", True)] + ([("control", False)] if include_control else [])
    for dataset_name, conflicting in datasets:
        for seed in seeds:
            train, test = make_interference_data(config.synthetic, seed, conflicting)
            train_r, test_r = _route_by_kmeans(train, test, config.n_experts, seed)
            routed_model, _ = train_toy(
                train_r, config.toy_config(config.adapter_rank, seed), config.n_experts
            )
            routed_acc = _accuracy(routed_model, test_r)

            single_model, _ = train_toy(
                _single_expert(train),
                config.toy_config(config.adapter_rank * config.n_experts, seed),
                1,
            )
            single_acc = _accuracy(single_model, _single_expert(test))
            results.append(
                SpecializationResult(dataset_name, seed, routed_acc, single_acc)
            )
    return SpecializationReport(results)


@dataclass(frozen=True)
class AblationSpec:
    """Generator for the 2x2 pipeline ablation (CoT features x experts)."""

    n_clusters: int = 5
    answer_classes: int = 5
    cot_vocab: int = 5
    cot_len: int = 2
    base_dim: int = 16
    cot_dim: int = 10
    anchor_scale: float = 2.0  # cluster anchors must dominate routing geometry
    base_sigma: float = 0.3
    weak_scale: float = 0.25  # shared answer signal in the base block
    cot_shared_scale: float = 0.25  # shared answer signal in the CoT block
    cot_permuted_scale: float = 1.0  # cluster-permuted answer signal in the CoT block
    cot_sigma: float = 0.05
    train_per_cluster: int = 40
    test_per_cluster: int = 100


def make_ablation_data(
    spec: AblationSpec, seed: int, with_cot: bool
) -> tuple[FeaturizedDataset, FeaturizedDataset]:
    """(train, test); expert_ids hold true cluster ids, features = [base | cot]."""
    if spec.base_dim < spec.n_clusters + spec.answer_classes:
        raise ExpertsError("base_dim must fit anchors plus weak-signal directions")
    if spec.cot_dim < 2 * spec.answer_classes:
        raise ExpertsError("cot_dim must fit shared plus permuted directions")
    rng = np.random.default_rng(seed)

    def sample(per_cluster: int) -> FeaturizedDataset:
        xs, ys, cots, cluster_ids = [], [], [], []
        for e in range(spec.n_clusters):
            for _ in range(per_cluster):
                y = int(rng.integers(spec.answer_classes))
                base = rng.normal(0.0, spec.base_sigma, size=spec.base_dim)
                base[e] += spec.anchor_scale
                base[spec.n_clusters + y] += spec.weak_scale
                cot_block = np.zeros(spec.cot_dim)
                if with_cot:
                    cot_block = rng.normal(0.0, spec.cot_sigma, size=spec.cot_dim)
                    cot_block[y] += spec.cot_shared_scale
                    permuted = (y + e) % spec.answer_classes
                    cot_block[spec.answer_classes + permuted] += spec.cot_permuted_scale
                else:
                    # keep the generator's draw count identical across arms
                    rng.normal(0.0, spec.cot_sigma, size=spec.cot_dim)
                cot_targets = [(y + t) % spec.cot_vocab for t in range(spec.cot_len)]
                xs.append(np.concatenate([base, cot_block]))
                ys.append(y)
                cots.append(cot_targets)
                cluster_ids.append(e)
        return FeaturizedDataset(
            x=np.asarray(xs),
            y=np.asarray(ys, dtype=np.int64),
            cot=np.asarray(cots, dtype=np.int64),
            expert_ids=np.asarray(cluster_ids, dtype=np.int64),
        )

    return sample(spec.train_per_cluster), sample(spec.test_per_cluster)


@dataclass(frozen=True)
class AblationConfig:
    spec: AblationSpec = field(default_factory=AblationSpec)
    n_experts: int = 5
    adapter_rank: int = 6
    lam: float = 0.5
    learning_rate: float = 0.5
    epochs: int = 150


@dataclass
class AblationReport:
    """Mean pooled test accuracy (percent) for the four pipeline cells."""

    full: float
    cot_only: float
    experts_only: float
    baseline: float
    per_seed: list[dict]

    def cells(self) -> dict[str, float]:
        return {
            "full": self.full,
            "cot_only": self.cot_only,
            "experts_only": self.experts_only,
            "baseline": self.baseline,
        }

    def write_csv(self, path: Path | str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "full", "cot_only", "experts_only", "baseline"])
            for row in self.per_seed:
                writer.writerow(
                    [row["seed"]]
                    + [f"{row[c]:.4f}" for c in ("full", "cot_only", "experts_only", "baseline")]
                )
            writer.writerow(
                ["mean"]
                + [
                    f"{v:.4f}"
                    for v in (self.full, self.cot_only, self.experts_only, self.baseline)
                ]
            )


def run_ablation(config: AblationConfig, seeds: Sequence[int]) -> AblationReport:
    """2x2 ablation: (CoT features on/off) x (routed experts vs shared adapter)."""
    spec = config.spec

    def toy_config(rank: int, seed: int) -> ToyModelConfig:
        return ToyModelConfig(
            input_dim=spec.base_dim + spec.cot_dim,
            answer_classes=spec.answer_classes,
            cot_vocab=spec.cot_vocab,
            cot_len=spec.cot_len,
            adapter_rank=rank,
            lam=config.lam,
            learning_rate=config.learning_rate,
            epochs=config.epochs,
            seed=seed,
        )

    per_seed: list[dict] = []
    for seed in seeds:
        row = {"seed": seed}
        for with_cot in (True, False):
            train, test = make_ablation_data(spec, seed, with_cot)
            # experts arm: route on the base block only (question embedding analogue)
            train_r, test_r = _route_by_kmeans(
                train, test, config.n_experts, seed, route_dims=spec.base_dim
            )
            routed_model, _ = train_toy(
                train_r, toy_config(config.adapter_rank, seed), config.n_experts
            )
            routed_acc = 100.0 * _accuracy(routed_model, test_r)

            single_model, _ = train_toy(
                _single_expert(train),
                toy_config(config.adapter_rank * config.n_experts, seed),
                1,
            )
            single_acc = 100.0 * _accuracy(single_model, _single_expert(test))

            if with_cot:
                row["full"] = routed_acc
                row["cot_only"] = single_acc
            else:
                row["experts_only"] = routed_acc
                row["baseline"] = single_acc
        per_seed.append(row)

    def mean(col: str) -> float:
        return float(np.mean([row[col] for row in per_seed]))

    return AblationReport(
        full=mean("full"),
        cot_only=mean("cot_only"),
        experts_only=mean("experts_only"),
        baseline=mean("baseline"),
        per_seed=per_seed,
    )
