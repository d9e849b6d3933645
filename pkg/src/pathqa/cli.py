"""Command-line pipeline driver.

One subcommand per stage plus ``pipeline`` to chain them. Every stage reads
its predecessors' artifacts (validating header, version, and config hash),
writes its own artifacts atomically, and is idempotent: identical inputs and
seed reproduce identical bytes. Timing is kept out of artifacts (a separate
timings sidecar) so reruns stay byte-identical.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import artifacts
from .config import PipelineConfig
from .embeddings import EmbeddingError, provider_from_spec
from .errors import PathQAError, ValidationError
from .estimator import EstimatorConfig, load_model as load_estimator, save_model as save_estimator
from .estimator import PathScore, score_paths, train_estimator
from .evaluation import (
    QuestionResult,
    efficiency_report,
    evaluate_results,
    supervision_hits_at_t,
)
from .generator import (
    GeneratorConfig,
    beam_search,
    distill,
    emit_finetune_dataset,
    generate_paths_via_client,
    load_model as load_generator,
    save_model as save_generator,
)
from .kg import StoreError, TripleStore, load_triples
from .paths import (
    RelationPath,
    enumerate_candidate_paths_with_stats,
    ground_paths,
    weakly_supervised_paths,
)
from .reasoner import (
    ChatCompletionClient,
    ReasonerRequest,
    run_reasoner,
    verbalize_evidence,
)
from .samples import PseudoSupervision, QuestionSample, load_questions
from .supervision import NegativeSamplingConfig, assemble_question_bags
from .supervision import select_pseudo_supervision

logger = logging.getLogger(__name__)

PIPELINE_STAGES = (
    "ingest", "enumerate", "build-bags", "train-estimator", "score",
    "select-supervision", "train-generator", "emit-finetune", "generate",
    "ground", "reason", "evaluate",
)
ALL_STAGES = PIPELINE_STAGES + ("supervision-eval", "pipeline")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


# -- shared loading helpers -----------------------------------------------------


def _load_store(config: PipelineConfig) -> TripleStore:
    path = config.artifact_path("ingest")
    store, header = TripleStore.load(path)
    if header.get("config_hash") != config.hash and not config.force:
        raise artifacts.ArtifactError(
            f"{path}: stale artifact (config hash {header.get('config_hash')!r}, "
            f"current {config.hash!r}); rerun ingest or pass --force"
        )
    return store

def _read_stage_rows(config: PipelineConfig, stage: str) -> tuple[dict, list[dict]]:
    return artifacts.read_jsonl(
        config.artifact_path(stage), stage, config.hash, force=config.force
    )


def _questions_by_id(path: str, store: TripleStore, *, inference_only=False) -> dict[str, QuestionSample]:
    samples = load_questions(path, store, inference_only=inference_only)
    return {s.id: s for s in samples}


def _paths_from_labels(store: TripleStore, rows) -> list[RelationPath]:
    return [RelationPath.from_labels(store, labels) for labels in rows]


# -- stages -----------------------------------------------------------------------


def stage_ingest(config: PipelineConfig) -> None:
    if not config.kg:
        raise ValidationError("config key 'kg' (triple TSV path) is required")
    store = load_triples(config.kg)
    store.save(config.artifact_path("ingest"), stage="ingest", config_hash=config.hash)
    print(f"ingested {store.num_triples} triples "
          f"({store.num_entities} entities, {store.num_relations} relations)")


def stage_enumerate(config: PipelineConfig) -> None:
    store = _load_store(config)
    samples = load_questions(config.questions, store)
    cap = config.max_candidates or None
    rows = []
    n_truncated = 0
    for sample in samples:
        candidates, truncated = enumerate_candidate_paths_with_stats(
            store, sample.question_entities, config.max_hop, max_candidates=cap
        )
        n_truncated += truncated
        weak = weakly_supervised_paths(store, sample, candidates)
        rows.append({
            "id": sample.id,
            "candidates": [list(p.labels) for p in candidates],
            "weak_positive": [list(p.labels) for p in weak],
            "truncated": truncated,
        })
    artifacts.write_jsonl(config.artifact_path("enumerate"), "enumerate", config.hash, rows)
    if n_truncated:
        logger.warning("%d questions hit the candidate cap of %s", n_truncated, cap)
    print(f"enumerated candidates for {len(rows)} questions")


def stage_build_bags(config: PipelineConfig) -> None:
    store = _load_store(config)
    by_id = _questions_by_id(config.questions, store)
    provider = provider_from_spec(config.provider)
    _, candidate_rows = _read_stage_rows(config, "enumerate")
    sampling = NegativeSamplingConfig(
        n_max=config.negative_budget,
        rho_truncated=config.rho_truncated,
        rho_extended=config.rho_extended,
        rho_deviated=config.rho_deviated,
        rho_other=config.rho_other,
        seed=config.stage_seed("build-bags"),
    )
    rows = []
    uncovered_total = 0
    for row in candidate_rows:
        sample = by_id[row["id"]]
        candidates = _paths_from_labels(store, row["candidates"])
        weak = _paths_from_labels(store, row["weak_positive"])
        assembly = assemble_question_bags(store, sample, candidates, weak, sampling, provider)
        uncovered_total += len(assembly.uncovered_answers)
        rows.append({
            "id": sample.id,
            "positive_bags": [
                {"answer": bag.anchor_answer.label, "paths": [list(p.labels) for p in bag.members]}
                for bag in assembly.positive_bags
            ],
            "negatives": [list(bag.members[0].labels) for bag in assembly.negative_bags],
            "uncovered_answers": assembly.uncovered_answers,
        })
    artifacts.write_jsonl(config.artifact_path("build-bags"), "build-bags", config.hash, rows)
    print(f"built bags for {len(rows)} questions "
          f"({uncovered_total} answers unreachable within {config.max_hop} hops)")


def _bag_training_rows(config: PipelineConfig, store: TripleStore):
    from .samples import NEGATIVE, POSITIVE, PathBag

    by_id = _questions_by_id(config.questions, store)
    _, bag_rows = _read_stage_rows(config, "build-bags")
    dataset = []
    skipped = 0
    for row in bag_rows:
        sample = by_id[row["id"]]
        positive = [
            PathBag(
                label=POSITIVE,
                members=tuple(_paths_from_labels(store, bag["paths"])),
                anchor_answer=store.entity(bag["answer"]),
            )
            for bag in row["positive_bags"]
        ]
        negative = [
            PathBag(label=NEGATIVE, members=(RelationPath.from_labels(store, labels),))
            for labels in row["negatives"]
        ]
        if not positive and not negative:
            skipped += 1
            continue
        dataset.append((sample, positive, negative))
    if skipped:
        logger.warning("%d questions contributed no bags and were skipped", skipped)
    return dataset


def stage_train_estimator(config: PipelineConfig) -> None:
    store = _load_store(config)
    provider = provider_from_spec(config.provider)
    dataset = _bag_training_rows(config, store)
    est_config = EstimatorConfig(
        model_dim=config.estimator_dim,
        layers=config.estimator_layers,
        heads=config.estimator_heads,
        ffn_factor=config.estimator_ffn_factor,
        max_positions=config.max_hop + 1,
        learning_rate=config.estimator_lr,
        weight_decay=config.estimator_weight_decay,
        epochs=config.estimator_epochs,
        max_grad_norm=config.estimator_clip,
        seed=config.stage_seed("train-estimator"),
    )
    model = train_estimator(est_config, dataset, provider)
    save_estimator(model, config.artifact_path("train-estimator"), config_hash=config.hash)
    print(f"trained estimator on {len(dataset)} questions for {est_config.epochs} epochs")


def stage_score(config: PipelineConfig) -> None:
    store = _load_store(config)
    provider = provider_from_spec(config.provider)
    by_id = _questions_by_id(config.questions, store)
    model = load_estimator(
        config.artifact_path("train-estimator"), expected_hash=config.hash, force=config.force
    )
    _, candidate_rows = _read_stage_rows(config, "enumerate")
    rows = []
    unsupervisable = 0
    for row in candidate_rows:
        weak = _paths_from_labels(store, row["weak_positive"])
        if not weak:
            unsupervisable += 1
            continue
        scores = score_paths(model, by_id[row["id"]], weak, provider)
        rows.append({
            "id": row["id"],
            "paths": [list(ps.path.labels) for ps in scores],
            "scores": [ps.score for ps in scores],
        })
    artifacts.write_jsonl(config.artifact_path("score"), "score", config.hash, rows)
    if unsupervisable:
        logger.warning("%d questions have no weakly supervised paths", unsupervisable)
    print(f"scored weak paths for {len(rows)} questions")


def stage_select_supervision(config: PipelineConfig) -> None:
    store = _load_store(config)
    _, score_rows = _read_stage_rows(config, "score")
    rows = []
    for row in score_rows:
        scores = [
            PathScore(RelationPath.from_labels(store, labels), float(s))
            for labels, s in zip(row["paths"], row["scores"])
        ]
        supervision = select_pseudo_supervision(row["id"], scores, config.top_t)
        rows.append({
            "id": supervision.question_id,
            "paths": [list(p.labels) for p in supervision.paths],
            "scores": list(supervision.scores),
        })
    artifacts.write_jsonl(
        config.artifact_path("select-supervision"), "select-supervision", config.hash, rows
    )
    print(f"selected top-{config.top_t} supervision for {len(rows)} questions")


def _supervision_dataset(config: PipelineConfig, store: TripleStore):
    by_id = _questions_by_id(config.questions, store)
    _, rows = _read_stage_rows(config, "select-supervision")
    dataset = []
    for row in rows:
        supervision = PseudoSupervision(
            question_id=row["id"],
            paths=tuple(_paths_from_labels(store, row["paths"])),
            scores=tuple(float(s) for s in row["scores"]),
        )
        dataset.append((by_id[row["id"]], supervision))
    return dataset


def _generator_config(config: PipelineConfig, store: TripleStore) -> GeneratorConfig:
    return GeneratorConfig(
        relation_vocab=tuple(store.relations()),
        max_length=config.max_hop,
        beam_size=config.beam_size,
        hidden=config.generator_hidden,
        learning_rate=config.generator_lr,
        epochs=config.generator_epochs,
        max_grad_norm=config.generator_clip,
        seed=config.stage_seed("train-generator"),
    )


def stage_train_generator(config: PipelineConfig) -> None:
    store = _load_store(config)
    provider = provider_from_spec(config.provider)
    dataset = _supervision_dataset(config, store)
    model = distill(_generator_config(config, store), dataset, provider)
    save_generator(model, config.artifact_path("train-generator"), config_hash=config.hash)
    print(f"distilled generator from {len(dataset)} supervised questions")


def stage_emit_finetune(config: PipelineConfig) -> None:
    store = _load_store(config)
    dataset = _supervision_dataset(config, store)
    records = emit_finetune_dataset(dataset)
    rows = [
        {"instruction": r.instruction, "input": r.input, "output": r.output} for r in records
    ]
    artifacts.write_jsonl(config.artifact_path("emit-finetune"), "emit-finetune", config.hash, rows)
    print(f"emitted {len(rows)} fine-tuning records")


def stage_generate(config: PipelineConfig) -> None:
    store = _load_store(config)
    provider = provider_from_spec(config.provider)
    by_id = _questions_by_id(config.test_questions_path, store, inference_only=True)
    rows = []
    if config.generator_mode == "builtin":
        model = load_generator(
            config.artifact_path("train-generator"), expected_hash=config.hash, force=config.force
        )
        for qid, sample in by_id.items():
            decoded = beam_search(model, provider.embed(sample.question), k=config.beam_size)
            rows.append({
                "id": qid,
                "paths": [list(p.labels) for p, _ in decoded],
                "logprobs": [lp for _, lp in decoded],
            })
    else:
        client = ChatCompletionClient(
            config.reasoner_endpoint, config.reasoner_model,
            timeout=config.reasoner_timeout, max_retries=config.reasoner_retries,
        )
        for qid, sample in by_id.items():
            paths, reports = generate_paths_via_client(client, sample, store)
            failures = [r.error or f"unresolved: {list(r.unresolved)}" for r in reports if not r.ok]
            rows.append({
                "id": qid,
                "paths": [list(p.labels) for p in paths],
                "logprobs": [None] * len(paths),
                "parse_failures": failures,
            })
    artifacts.write_jsonl(config.artifact_path("generate"), "generate", config.hash, rows)
    print(f"generated paths for {len(rows)} questions")


def stage_ground(config: PipelineConfig) -> None:
    store = _load_store(config)
    by_id = _questions_by_id(config.test_questions_path, store, inference_only=True)
    _, generated_rows = _read_stage_rows(config, "generate")
    rows = []
    for row in generated_rows:
        sample = by_id[row["id"]]
        paths = _paths_from_labels(store, row["paths"])
        evidence = ground_paths(store, sample.question_entities, paths)
        rows.append({
            "id": row["id"],
            "evidence": [
                {
                    "start": ev.start.label,
                    "path": list(ev.path.labels),
                    "ends": [e.label for e in ev.ends],
                }
                for ev in evidence
            ],
        })
    artifacts.write_jsonl(config.artifact_path("ground"), "ground", config.hash, rows)
    print(f"grounded evidence for {len(rows)} questions")


def stage_reason(config: PipelineConfig) -> None:
    store = _load_store(config)
    by_id = _questions_by_id(config.test_questions_path, store, inference_only=True)
    _, evidence_rows = _read_stage_rows(config, "ground")
    from .paths import GroundedEvidence

    requests = []
    for row in evidence_rows:
        sample = by_id[row["id"]]
        evidence = tuple(
            GroundedEvidence(
                start=store.entity(item["start"]),
                path=RelationPath.from_labels(store, item["path"]),
                ends=tuple(store.entity(lbl) for lbl in item["ends"]),
            )
            for item in row["evidence"]
        )
        requests.append((row["id"], ReasonerRequest(
            question=sample.question,
            evidence=evidence,
            model=config.reasoner_model,
            endpoint=config.reasoner_endpoint,
            timeout=config.reasoner_timeout,
            max_retries=config.reasoner_retries,
        )))

    client = None
    if config.reasoner == "http":
        client = ChatCompletionClient(
            config.reasoner_endpoint, config.reasoner_model,
            timeout=config.reasoner_timeout, max_retries=config.reasoner_retries,
        )
    started = time.perf_counter()
    latencies: dict[str, float] = {}
    responses = run_reasoner(
        requests, client, max_in_flight=config.reasoner_concurrency, latencies=latencies
    )
    elapsed = time.perf_counter() - started

    rows = []
    transcript = []
    for qid, request in requests:
        response = responses[qid]
        grounded_ends = []
        seen = set()
        for item in request.evidence:
            for end in item.ends:
                if end.label not in seen:
                    seen.add(end.label)
                    grounded_ends.append(end.label)
        rows.append({
            "id": qid,
            "answers": list(response.answers),
            "grounded_ends": grounded_ends,
            "usage": {"reason": response.usage.to_dict()},
        })
        transcript.append({
            "id": qid,
            "request": verbalize_evidence(request.question, request.evidence),
            "response": response.raw_text,
            "usage": response.usage.to_dict(),
            "latency_s": round(latencies.get(qid, 0.0), 6),
        })
    artifacts.write_jsonl(config.artifact_path("reason"), "reason", config.hash, rows)
    # transcript is a log, not a validated artifact: it may carry timing
    with artifacts.atomic_write(Path(config.out_dir) / "transcript.jsonl") as fh:
        for entry in transcript:
            fh.write(json.dumps(entry, ensure_ascii=False) + "\n")
    print(f"reasoned over {len(rows)} questions in {elapsed:.2f}s")


def _load_gold(path) -> dict[str, list[str]]:
    gold = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            gold[str(row["id"])] = [str(a) for a in row.get("answers", [])]
    return gold


def stage_evaluate(config: PipelineConfig) -> int:
    _, prediction_rows = _read_stage_rows(config, "reason")
    gold = _load_gold(config.test_questions_path)
    results = []
    for row in prediction_rows:
        qid = row["id"]
        if qid not in gold:
            raise ValidationError(f"prediction for unknown question id {qid!r}")
        results.append(QuestionResult(
            id=qid,
            predicted=tuple(row["answers"]),
            gold=tuple(gold[qid]),
            grounded_ends=tuple(row.get("grounded_ends", ())),
            usage=row.get("usage", {}),
        ))
    report = evaluate_results(results)
    payload = {
        "artifact": "evaluate",
        "format_version": 1,
        "config_hash": config.hash,
        **report.to_dict(),
        "usage_means": efficiency_report(results),
    }
    with artifacts.atomic_write(config.artifact_path("evaluate")) as fh:
        fh.write(artifacts.canonical_json(payload) + "\n")
    print(report.render_table())
    if report.n == 0:
        logger.error("evaluation saw no scorable questions")
        return EXIT_VALIDATION
    return EXIT_OK


def stage_supervision_eval(config: PipelineConfig) -> None:
    if not config.reference_paths:
        raise ValidationError("supervision-eval requires config key 'reference_paths'")
    _, supervision_rows = _read_stage_rows(config, "select-supervision")
    selected = {row["id"]: [tuple(p) for p in row["paths"]] for row in supervision_rows}
    reference = {}
    with open(config.reference_paths, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            reference[str(row["id"])] = [tuple(p) for p in row["paths"]]
    fraction, evaluated, missing = supervision_hits_at_t(selected, reference, config.top_t)
    payload = {
        "artifact": "supervision-eval",
        "format_version": 1,
        "config_hash": config.hash,
        "top_t": config.top_t,
        "hits_at_t": fraction,
        "evaluated": evaluated,
        "missing_reference": sorted(missing),
    }
    with artifacts.atomic_write(config.artifact_path("supervision-eval")) as fh:
        fh.write(artifacts.canonical_json(payload) + "\n")
    print(f"supervision Hits@{config.top_t}: {fraction:.4f} over {evaluated} questions")


def stage_pipeline(config: PipelineConfig) -> int:
    timings = {}
    exit_code = EXIT_OK
    for stage in PIPELINE_STAGES:
        started = time.perf_counter()
        code = run_stage(stage, config)
        timings[stage] = round(time.perf_counter() - started, 3)
        if code != EXIT_OK:
            exit_code = code
            break
    if config.reference_paths and exit_code == EXIT_OK:
        started = time.perf_counter()
        exit_code = run_stage("supervision-eval", config)
        timings["supervision-eval"] = round(time.perf_counter() - started, 3)
    # timing is run-specific and lives outside the deterministic artifacts
    with artifacts.atomic_write(Path(config.out_dir) / "timings.json") as fh:
        fh.write(json.dumps(timings, indent=2) + "\n")
    print("stage timings (s): " + json.dumps(timings))
    return exit_code


_STAGE_FUNCTIONS = {
    "ingest": stage_ingest,
    "enumerate": stage_enumerate,
    "build-bags": stage_build_bags,
    "train-estimator": stage_train_estimator,
    "score": stage_score,
    "select-supervision": stage_select_supervision,
    "train-generator": stage_train_generator,
    "emit-finetune": stage_emit_finetune,
    "generate": stage_generate,
    "ground": stage_ground,
    "reason": stage_reason,
    "evaluate": stage_evaluate,
    "supervision-eval": stage_supervision_eval,
    "pipeline": stage_pipeline,
}


def run_stage(name: str, config: PipelineConfig) -> int:
    """Run one stage; returns a process exit code."""
    if name not in _STAGE_FUNCTIONS:
        raise ValidationError(f"unknown stage {name!r}; choose from {sorted(_STAGE_FUNCTIONS)}")
    result = _STAGE_FUNCTIONS[name](config)
    return int(result) if isinstance(result, int) else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathqa",
        description="KGQA pipeline: estimate path supervision, distill a generator, "
                    "ground paths, and reason over the evidence.",
    )
    parser.add_argument("stage", choices=sorted(ALL_STAGES), help="pipeline stage to run")
    parser.add_argument("--config", help="key=value configuration file")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override one configuration key (repeatable)",
    )
    parser.add_argument("--mock-reasoner", choices=["union"], dest="mock_reasoner",
                        help="answer offline with the grounded-evidence union mock")
    parser.add_argument("--reference-paths", dest="reference_paths",
                        help="gold relation-path JSONL for supervision-eval")
    parser.add_argument("--force", action="store_true",
                        help="accept artifacts with mismatched config hashes")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def config_from_args(args) -> PipelineConfig:
    overrides = list(args.overrides)
    if args.mock_reasoner == "union":
        overrides.append("reasoner=mock:union")
    if args.reference_paths:
        overrides.append(f"reference_paths={args.reference_paths}")
    config = PipelineConfig.from_sources(args.config, overrides)
    if args.force:
        config.force = True
    return config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return run_stage(args.stage, config_from_args(args))
    except (ValidationError, artifacts.ArtifactError, StoreError, EmbeddingError) as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION
    except PathQAError as exc:
        logger.error("%s", exc)
        return EXIT_RUNTIME
    except FileNotFoundError as exc:
        logger.error("%s", exc)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
