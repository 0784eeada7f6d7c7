"""Command-line pipeline: composable subcommands with run manifests.

Each subcommand reads files produced by earlier stages, writes its
outputs plus one run manifest (``<primary output>.run.json``) recording
config/input/output digests, seeds, timestamps, and the tool version.
Timestamps honor ``SOURCE_DATE_EPOCH`` so that reruns with identical
inputs are byte-identical end to end.

Exit codes: 0 success, 1 validation, 2 transport, 3 internal.  Failures
print one line to stderr: ``<category>: <message>``.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from pathlib import Path

from . import __version__, annotation, corpus, prompts, taxonomy
from .clustering import ClusteringError, load_centroid_model
from .embedding import (
    EmbeddingTransportError,
    EncoderSpec,
    RemoteEncoderConfig,
)
from .embedding import EmbeddingError
from .experts import (
    ExpertsError,
    featurize_annotations,
    load_partition,
    partition_experts,
    route,
    save_partition,
    save_toy_model,
    train_toy,
    ToyModelConfig,
)
from .llmclient import (
    LLMClient,
    LLMClientError,
    MockScriptMiss,
    MockTransport,
    RemoteLLMConfig,
    RemoteTransport,
    ResponseCache,
    TransportError,
)
from .projection import export_projection_csv
from .serde import SerdeError, read_json, sha256_file, sha256_text, write_canonical_json
from .specialization import SpecializationConfig, SyntheticSpec, eval_specialization
from .taxonomy import TaxonomyError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_TRANSPORT = 2
EXIT_INTERNAL = 3

_VALIDATION_ERRORS = (
    corpus.CorpusError,
    TaxonomyError,
    annotation.AnnotationError,
    ExpertsError,
    ClusteringError,
    SerdeError,
    LLMClientError,
    EmbeddingError,
    FileNotFoundError,
    ValueError,
)
_TRANSPORT_ERRORS = (TransportError, EmbeddingTransportError, MockScriptMiss)


def _now() -> int:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    return int(epoch) if epoch else int(time.time())


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    obj = read_json(path)
    if not isinstance(obj, dict):
        raise SerdeError(f"{path}: config must be a JSON object")
    return obj


def _encoder_from(args, config: dict) -> EncoderSpec:
    section = config.get("encoder", {})
    kind = args.encoder_kind or section.get("kind", "test_hash")
    dims = args.encoder_dims or int(section.get("dims", 16))
    model_id = args.encoder_model or section.get("model_id", "")
    if kind == "remote" and not model_id:
        model_id = "all-mpnet-base-v2"
    return EncoderSpec(kind=kind, dims=dims, model_id=model_id)


def _encoder_config_from(config: dict) -> RemoteEncoderConfig | None:
    section = config.get("encoder", {})
    if "base_url" not in section:
        return None
    return RemoteEncoderConfig(
        base_url=section["base_url"],
        auth_env=section.get("auth_env", "SKILLFORGE_API_TOKEN"),
        timeout_s=float(section.get("timeout_s", 30.0)),
        batch_size=int(section.get("batch_size", 64)),
        max_inflight=int(section.get("max_inflight", 1)),
    )


def _client_from(args, config: dict) -> LLMClient:
    registry = (
        prompts.registry_from_dir(args.templates) if args.templates else prompts.default_registry()
    )
    cache = ResponseCache(args.cache) if args.cache else None
    llm_cfg = config.get("llm", {})
    model_id = llm_cfg.get("model_id", "mock-model")
    multimodal = frozenset(llm_cfg.get("multimodal_model_ids", ["gemini-2.0-flash", "mock-model"]))
    if args.mock_script:
        transport = MockTransport.from_script(args.mock_script)
    else:
        if "base_url" not in llm_cfg:
            raise LLMClientError("no transport: pass --mock-script or configure llm.base_url")
        transport = RemoteTransport(
            RemoteLLMConfig(
                base_url=llm_cfg["base_url"],
                auth_env=llm_cfg.get("auth_env", "SKILLFORGE_API_TOKEN"),
                timeout_s=float(llm_cfg.get("timeout_s", 60.0)),
                max_retries=int(llm_cfg.get("max_retries", 3)),
                backoff_s=float(llm_cfg.get("backoff_s", 0.5)),
            )
        )
    return LLMClient(transport, registry, cache=cache, model_id=model_id, multimodal_model_ids=multimodal)


def _write_run_manifest(
    subcommand: str,
    primary_output: Path | str,
    inputs: list[str],
    outputs: list[str],
    seeds: dict,
    effective_config: dict,
    started: int,
) -> None:
    manifest = {
        "subcommand": subcommand,
        "tool_version": __version__,
        "config_digest": sha256_text(json.dumps(effective_config, sort_keys=True)),
        "inputs": {str(p): sha256_file(p) for p in inputs},
        "outputs": {str(p): sha256_file(p) for p in outputs},
        "seeds": seeds,
        "started": started,
        "finished": _now(),
    }
    write_canonical_json(str(primary_output) + ".run.json", manifest)


def _cmd_split(args) -> int:
    started = _now()
    config = _load_config(args.config)
    examples = corpus.load_dataset(args.dataset)
    train, test = corpus.split_dataset(examples, args.ratio, args.seed)
    corpus.write_dataset(train, args.out_train, split_seed=args.seed, split_ratio=args.ratio)
    corpus.write_dataset(test, args.out_test, split_seed=args.seed, split_ratio=args.ratio)
    _write_run_manifest(
        "split",
        args.out_train,
        [args.dataset],
        [args.out_train, args.out_test,
         str(corpus.manifest_path(args.out_train)), str(corpus.manifest_path(args.out_test))],
        {"split_seed": args.seed},
        {"ratio": args.ratio, **config},
        started,
    )
    print(f"split: {len(train)} train, {len(test)} test")
    return EXIT_OK


def _cmd_extract_skills(args) -> int:
    started = _now()
    config = _load_config(args.config)
    examples = corpus.load_dataset(args.dataset)
    encoder = _encoder_from(args, config)
    client = _client_from(args, config)
    descriptions, failed = taxonomy.extract_skills(
        examples, client, encoder, _encoder_config_from(config)
    )
    taxonomy.save_descriptions(descriptions, args.out)
    report_path = str(args.out) + ".report.json"
    write_canonical_json(
        report_path,
        {"extracted": len(descriptions), "skill_extraction_failed": sorted(failed)},
    )
    _write_run_manifest(
        "extract-skills",
        args.out,
        [args.dataset],
        [args.out, report_path],
        {},
        {"encoder": encoder.to_dict(), **config},
        started,
    )
    print(f"extract-skills: {len(descriptions)} descriptions, {len(failed)} failed")
    return EXIT_OK


def _cmd_build_taxonomy(args) -> int:
    started = _now()
    config = _load_config(args.config)
    descriptions = taxonomy.load_descriptions(args.descriptions)
    encoder = _encoder_from(args, config)
    tax = taxonomy.build_taxonomy(
        descriptions, n_skills=args.k, seed=args.seed, encoder=encoder, n_restarts=args.restarts
    )
    taxonomy.save_taxonomy(tax, args.out)
    _write_run_manifest(
        "build-taxonomy",
        args.out,
        [args.descriptions],
        [args.out],
        {"kmeans_seed": args.seed},
        {"k": args.k, "restarts": args.restarts, **config},
        started,
    )
    print(f"build-taxonomy: {tax.n_skills} skills over {len(descriptions)} descriptions")
    return EXIT_OK


def _cmd_annotate(args) -> int:
    started = _now()
    config = _load_config(args.config)
    examples = corpus.load_dataset(args.dataset)
    tax = taxonomy.load_taxonomy(args.taxonomy)
    client = _client_from(args, config)
    ann_config = annotation.AnnotationConfig(
        k_skills=args.skills,
        selection_method=args.method,
        merge_mode=args.merge_mode,
        max_steps=args.max_steps,
        encoder_config=_encoder_config_from(config),
        attach_video=bool(config.get("attach_video", False)),
    )
    annotated, report = annotation.annotate_dataset(
        examples, tax, ann_config, client, max_workers=args.max_inflight
    )
    corpus.write_annotations(annotated, args.out)
    report_path = str(args.out) + ".report.json"
    write_canonical_json(report_path, report)
    _write_run_manifest(
        "annotate",
        args.out,
        [args.dataset, args.taxonomy],
        [args.out, str(corpus.manifest_path(args.out)), report_path],
        {},
        {"skills": args.skills, "method": args.method, "merge_mode": args.merge_mode, **config},
        started,
    )
    print(
        f"annotate: {report['verified']} verified, {report['filtered_out']} filtered_out, "
        f"{report['unverified']} unverified"
    )
    return EXIT_OK


def _cmd_partition_experts(args) -> int:
    started = _now()
    config = _load_config(args.config)
    annotated = corpus.load_annotations(args.annotations)
    usable = [a for a in annotated if a.verification == "verified"]
    if not usable:
        raise corpus.CorpusError("no verified annotations to partition")
    encoder = _encoder_from(args, config)
    partition = partition_experts(
        [a.base for a in usable],
        n_experts=args.k,
        seed=args.seed,
        encoder=encoder,
        encoder_config=_encoder_config_from(config),
        n_restarts=args.restarts,
    )
    save_partition(partition, args.out_partition)
    for ann in usable:
        ann.expert_id = partition.assignments[ann.base.id]
    export = corpus.training_export(usable)
    corpus.write_annotations(export, args.out_annotations)
    _write_run_manifest(
        "partition-experts",
        args.out_partition,
        [args.annotations],
        [args.out_partition, args.out_annotations,
         str(corpus.manifest_path(args.out_annotations))],
        {"kmeans_seed": args.seed},
        {"k": args.k, "restarts": args.restarts, "encoder": encoder.to_dict(), **config},
        started,
    )
    print(f"partition-experts: {len(export)} examples over {args.k} experts")
    return EXIT_OK


def _cmd_route(args) -> int:
    started = _now()
    config = _load_config(args.config)
    partition = load_partition(args.partition)
    expert = route(args.question, partition, _encoder_config_from(config))
    print(f"expert {expert}")
    result: dict = {"expert": expert, "question": args.question}
    if args.taxonomy:
        tax = taxonomy.load_taxonomy(args.taxonomy)
        selection = taxonomy.select_skills(
            args.question, tax, K=args.skills, encoder_config=_encoder_config_from(config)
        )
        result["skills"] = []
        for skill_id, score in zip(selection.skill_ids, selection.scores):
            print(f"skill {skill_id} {score:.6f} {tax.representative_phrases[skill_id]}")
            result["skills"].append(
                {"skill_id": skill_id, "score": round(score, 6),
                 "phrase": tax.representative_phrases[skill_id]}
            )
    if args.out:
        write_canonical_json(args.out, result)
        inputs = [args.partition] + ([args.taxonomy] if args.taxonomy else [])
        _write_run_manifest("route", args.out, inputs, [args.out], {}, {}, started)
    return EXIT_OK


def _cmd_train_toy(args) -> int:
    started = _now()
    config = _load_config(args.train_config)
    annotations_path = config.get("annotations")
    if not annotations_path:
        raise SerdeError("train config must name an 'annotations' file")
    annotated = corpus.load_annotations(annotations_path)
    export = corpus.training_export(annotated)
    if not export:
        raise corpus.CorpusError("no routed, verified annotations to train on")

    if config.get("partition"):
        n_experts = load_partition(config["partition"]).n_experts
    else:
        n_experts = max(a.expert_id for a in export) + 1
    input_dim = int(config.get("input_dim", 16))
    cot_vocab = int(config.get("cot_vocab", 16))
    cot_len = int(config.get("cot_len", 4))
    data = featurize_annotations(export, input_dim, cot_vocab, cot_len)
    toy_config = ToyModelConfig(
        input_dim=input_dim,
        answer_classes=len(data.answer_vocab),
        cot_vocab=cot_vocab,
        cot_len=cot_len,
        adapter_rank=args.rank if args.rank is not None else int(config.get("rank", 8)),
        lam=args.lam if args.lam is not None else float(config.get("lambda", 0.5)),
        learning_rate=float(config.get("learning_rate", 1e-3)),
        epochs=int(config.get("epochs", 100)),
        seed=args.seed if args.seed is not None else int(config.get("seed", 0)),
        gradient_check=bool(config.get("gradient_check", False)),
    )
    model, report = train_toy(data, toy_config, n_experts)

    out_model = config.get("out_model", "toy_model.json")
    out_report = config.get("out_report", "toy_report.csv")
    save_toy_model(model, out_model)
    with open(out_report, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "answer", "cot", "combined"])
        for row in report.epoch_losses:
            writer.writerow(
                [row["epoch"], f"{row['answer']:.9g}", f"{row['cot']:.9g}", f"{row['combined']:.9g}"]
            )
        writer.writerow(["final", "pooled_accuracy", f"{report.pooled_accuracy:.6f}", ""])
        if report.gradient_check_max_rel_err is not None:
            writer.writerow(
                ["final", "gradient_check_max_rel_err",
                 f"{report.gradient_check_max_rel_err:.3e}", ""]
            )
    inputs = [annotations_path] + ([config["partition"]] if config.get("partition") else [])
    _write_run_manifest(
        "train-toy",
        out_model,
        inputs,
        [out_model, out_report],
        {"train_seed": toy_config.seed},
        config,
        started,
    )
    print(
        f"train-toy: {n_experts} experts, final combined loss "
        f"{report.epoch_losses[-1]['combined']:.6f}, pooled accuracy {report.pooled_accuracy:.3f}"
    )
    return EXIT_OK


def _cmd_eval_specialization(args) -> int:
    started = _now()
    config = _load_config(args.eval_config)
    synth = SyntheticSpec(
        n_clusters=int(config.get("n_clusters", 5)),
        answer_classes=int(config.get("answer_classes", 5)),
        cot_vocab=int(config.get("cot_vocab", 5)),
        cot_len=int(config.get("cot_len", 2)),
        input_dim=int(config.get("input_dim", 16)),
        sigma=float(config.get("sigma", 0.1)),
        answer_scale=float(config.get("answer_scale", 0.5)),
        train_per_cluster=int(config.get("train_per_cluster", 60)),
        test_per_cluster=int(config.get("test_per_cluster", 40)),
    )
    spec_config = SpecializationConfig(
        synthetic=synth,
        n_experts=int(config.get("n_experts", 5)),
        adapter_rank=args.rank if args.rank is not None else int(config.get("rank", 4)),
        lam=args.lam if args.lam is not None else float(config.get("lambda", 0.5)),
        learning_rate=float(config.get("learning_rate", 0.5)),
        epochs=int(config.get("epochs", 300)),
    )
    report = eval_specialization(spec_config, args.seeds, include_control=not args.no_control)
    report.write_csv(args.out)
    _write_run_manifest(
        "eval-specialization",
        args.out,
        [args.eval_config] if args.eval_config else [],
        [args.out],
        {"seeds": list(args.seeds)},
        config,
        started,
    )
    print(
        "eval-specialization: interference routed "
        f"{report.mean('interference', 'routed_accuracy'):.3f} vs single "
        f"{report.mean('interference', 'single_accuracy'):.3f}"
    )
    return EXIT_OK


def _cmd_export_projection(args) -> int:
    started = _now()
    if args.method != "pca":
        raise ValueError(f"unknown projection method: {args.method!r}")
    obj = read_json(args.embeddings)
    if "phrases" in obj:
        tax = taxonomy.load_taxonomy(args.embeddings)
        labels = list(tax.representative_phrases)
        vectors = [list(row) for row in tax.centroid_model.centroids]
    elif "assignments" in obj:
        partition = load_partition(args.embeddings)
        labels = [f"expert-{j}" for j in range(partition.n_experts)]
        vectors = [list(row) for row in partition.centroid_model.centroids]
    else:
        model = load_centroid_model(args.embeddings)
        labels = [f"centroid-{j}" for j in range(model.k)]
        vectors = [list(row) for row in model.centroids]
    export_projection_csv(labels, vectors, args.out)
    _write_run_manifest(
        "export-projection", args.out, [args.embeddings], [args.out], {}, {"method": args.method}, started
    )
    print(f"export-projection: {len(labels)} rows")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skillforge", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def add_common(p: argparse.ArgumentParser, llm: bool = False) -> None:
        p.add_argument("--config", help="JSON config file; flags take precedence")
        p.add_argument("--encoder-kind", choices=["test_hash", "remote"], default=None)
        p.add_argument("--encoder-dims", type=int, default=None)
        p.add_argument("--encoder-model", default=None)
        if llm:
            p.add_argument("--mock-script", help="mock transport script (JSONL)")
            p.add_argument("--cache", help="response cache file (JSONL, append-only)")
            p.add_argument("--templates", help="directory of template overrides")
            p.add_argument("--max-inflight", type=int, default=1)

    p = sub.add_parser("split", help="seeded train/test split")
    p.add_argument("dataset")
    p.add_argument("--ratio", default="7:3")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    add_common(p)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("extract-skills", help="one skill phrase per example")
    p.add_argument("dataset")
    p.add_argument("--out", required=True)
    add_common(p, llm=True)
    p.set_defaults(func=_cmd_extract_skills)

    p = sub.add_parser("build-taxonomy", help="cluster skill descriptions")
    p.add_argument("descriptions")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--out", required=True)
    add_common(p)
    p.set_defaults(func=_cmd_build_taxonomy)

    p = sub.add_parser("annotate", help="skill-conditioned CoT annotation")
    p.add_argument("dataset")
    p.add_argument("taxonomy")
    p.add_argument("--skills", type=int, default=3)
    p.add_argument("--method", choices=["embedding", "llm"], default="embedding")
    p.add_argument("--merge-mode", choices=["deterministic", "llm"], default="deterministic")
    p.add_argument("--max-steps", type=int, default=6)
    p.add_argument("--out", required=True)
    add_common(p, llm=True)
    p.set_defaults(func=_cmd_annotate)

    p = sub.add_parser("partition-experts", help="cluster questions into expert groups")
    p.add_argument("annotations")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--out-partition", required=True)
    p.add_argument("--out-annotations", required=True)
    add_common(p)
    p.set_defaults(func=_cmd_partition_experts)

    p = sub.add_parser("route", help="route a question to its expert")
    p.add_argument("partition")
    p.add_argument("--question", required=True)
    p.add_argument("--taxonomy", help="also print the top-K skills")
    p.add_argument("--skills", type=int, default=3)
    p.add_argument("--out", help="also write the result and a run manifest here")
    add_common(p)
    p.set_defaults(func=_cmd_route)

    p = sub.add_parser("train-toy", help="train the toy expert adapters")
    p.add_argument("train_config")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_train_toy)

    p = sub.add_parser("eval-specialization", help="routed experts vs shared adapter")
    p.add_argument("eval_config", nargs="?", default=None)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--no-control", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_eval_specialization)

    p = sub.add_parser("export-projection", help="2-D PCA of centroids to CSV")
    p.add_argument("embeddings", help="taxonomy, partition, or centroid model file")
    p.add_argument("--method", default="pca")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_export_projection)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except _TRANSPORT_ERRORS as exc:
        print(f"transport: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except _VALIDATION_ERRORS as exc:
        print(f"validation: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # pragma: no cover - safety net
        print(f"internal: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
