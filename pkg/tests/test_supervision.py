"""Bag construction, negative classification/sampling, top-T selection."""

import numpy as np
import pytest

from pathqa.errors import ValidationError
from pathqa.estimator import PathScore
from pathqa.kg import store_from_lines
from pathqa.paths import RelationPath, enumerate_candidate_paths, reachable_entities
from pathqa.samples import POSITIVE, QuestionSample
from pathqa.supervision import (
    DEVIATED,
    EXTENDED,
    OTHER,
    TRUNCATED,
    NegativeSamplingConfig,
    SupervisionError,
    build_bags,
    classify_negatives,
    sample_negatives,
    select_pseudo_supervision,
    target_distribution,
)

from conftest import random_store
from test_paths import make_sample, oracle_reachable


def path_of(store, *labels):
    return RelationPath.from_labels(store, labels)


@pytest.fixture()
def abc_store():
    return store_from_lines([
        "a\tr1\tc",
        "a\tr2\tc",
        "a\tr3\td",
    ])


class TestBuildBags:
    def test_two_of_three_reach_answer(self, abc_store):
        sample = make_sample(abc_store, "q", ["a"], ["c"])
        candidates = enumerate_candidate_paths(abc_store, sample.question_entities, 1)
        positive, negatives = build_bags(abc_store, sample, candidates)
        assert len(positive) == 1
        assert {p.labels for p in positive[0].members} == {("r1",), ("r2",)}
        assert [p.labels for p in negatives] == [("r3",)]

    def test_bags_may_overlap_across_answers(self):
        store = store_from_lines(["a\tr\tx", "a\tr\ty"])
        sample = make_sample(store, "q", ["a"], ["x", "y"])
        candidates = enumerate_candidate_paths(store, sample.question_entities, 1)
        positive, negatives = build_bags(store, sample, candidates)
        assert len(positive) == 2
        assert all([p.labels for p in bag.members] == [("r",)] for bag in positive)
        assert negatives == []

    def test_unreached_answer_has_no_bag(self, abc_store):
        sample = make_sample(abc_store, "q", ["a"], ["c", "a"])
        candidates = enumerate_candidate_paths(abc_store, sample.question_entities, 1)
        positive, _ = build_bags(abc_store, sample, candidates)
        assert [bag.anchor_answer.label for bag in positive] == ["c"]

    def test_membership_matches_reachability_oracle(self):
        rng = np.random.default_rng(31)
        store = random_store(rng, n_entities=20, n_relations=4, n_triples=80)
        start = store.entity_by_id(0)
        answers = {1, 2, 3}
        sample = QuestionSample(
            id="r", question="q", question_entities=(start,),
            answers=frozenset(store.entity_by_id(a) for a in answers),
            answer_labels=tuple(store.entity_by_id(a).label for a in answers),
        )
        candidates = enumerate_candidate_paths(store, (start,), 2)
        positive, negatives = build_bags(store, sample, candidates)
        for bag in positive:
            assert bag.label == POSITIVE
            for member in bag.members:
                assert bag.anchor_answer.id in oracle_reachable(
                    store, start.id, member.relation_ids
                )
        for neg in negatives:
            assert not oracle_reachable(store, start.id, neg.relation_ids) & answers

    def test_bag_soundness_recheck(self, abc_store):
        # every positive member reaches the anchor; every negative reaches no answer
        sample = make_sample(abc_store, "q", ["a"], ["c"])
        candidates = enumerate_candidate_paths(abc_store, sample.question_entities, 1)
        positive, negatives = build_bags(abc_store, sample, candidates)
        for bag in positive:
            for member in bag.members:
                reached = reachable_entities(abc_store, sample.question_entities[0], member)
                assert bag.anchor_answer in reached
        for neg in negatives:
            reached = reachable_entities(abc_store, sample.question_entities[0], neg)
            assert not reached & sample.answers


class TestClassifyNegatives:
    @pytest.fixture()
    def rel_store(self):
        lines = [f"x{i}\tr{i}\ty{i}" for i in range(1, 10)]
        return store_from_lines(lines)

    def test_truncated(self, rel_store):
        weak = [path_of(rel_store, "r1", "r2", "r3")]
        partition = classify_negatives(weak, [path_of(rel_store, "r1", "r2")])
        assert [p.labels for p in partition[TRUNCATED]] == [("r1", "r2")]

    def test_extended(self, rel_store):
        weak = [path_of(rel_store, "r1", "r2")]
        partition = classify_negatives(weak, [path_of(rel_store, "r1", "r2", "r9")])
        assert [p.labels for p in partition[EXTENDED]] == [("r1", "r2", "r9")]

    def test_deviated_and_other(self, rel_store):
        weak = [path_of(rel_store, "r1", "r2")]
        partition = classify_negatives(
            weak, [path_of(rel_store, "r1", "r7"), path_of(rel_store, "r8")]
        )
        assert [p.labels for p in partition[DEVIATED]] == [("r1", "r7")]
        assert [p.labels for p in partition[OTHER]] == [("r8",)]

    def test_priority_truncated_before_deviated(self, rel_store):
        # a prefix of one weak path that also deviates from another takes 'truncated'
        weak = [path_of(rel_store, "r1", "r2", "r3"), path_of(rel_store, "r1", "r5")]
        partition = classify_negatives(weak, [path_of(rel_store, "r1", "r2")])
        assert [p.labels for p in partition[TRUNCATED]] == [("r1", "r2")]
        assert partition[DEVIATED] == []

    def test_partition_total_and_disjoint(self, rel_store):
        rng = np.random.default_rng(32)
        rels = [f"r{i}" for i in range(1, 10)]
        weak = [path_of(rel_store, *rng.choice(rels, size=2)) for _ in range(3)]
        weak_ids = {w.relation_ids for w in weak}
        negatives = []
        while len(negatives) < 30:
            p = path_of(rel_store, *rng.choice(rels, size=int(rng.integers(1, 4))))
            if p.relation_ids not in weak_ids:
                negatives.append(p)
        partition = classify_negatives(weak, negatives)
        counted = [p for cls in partition.values() for p in cls]
        assert len(counted) == len(negatives)
        assert {p.relation_ids for p in counted} == {p.relation_ids for p in negatives}

    def test_overlap_with_weak_rejected(self, rel_store):
        weak = [path_of(rel_store, "r1")]
        with pytest.raises(ValidationError):
            classify_negatives(weak, [path_of(rel_store, "r1")])


class TestSampleNegatives:
    def test_quota_arithmetic_for_100_weak(self):
        config = NegativeSamplingConfig()
        n_neg, quotas = config.quotas(100)
        assert n_neg == 900
        assert quotas == {TRUNCATED: 90, EXTENDED: 360, DEVIATED: 270, OTHER: 180}

    def test_quotas_sum_exactly_to_budget(self):
        rng = np.random.default_rng(33)
        config = NegativeSamplingConfig()
        for _ in range(200):
            n_weak = int(rng.integers(0, 1500))
            n_neg, quotas = config.quotas(n_weak)
            assert sum(quotas.values()) == n_neg
            assert n_neg == max(0, 1000 - n_weak)

    def test_weak_at_budget_keeps_no_negatives(self, provider):
        config = NegativeSamplingConfig()
        store = store_from_lines([f"x\tr{i}\ty" for i in range(5)])
        weak = [path_of(store, f"r{i}") for i in range(2)]
        partition = {OTHER: [path_of(store, "r3")]}
        h_q = provider.embed("q")
        kept = sample_negatives(
            NegativeSamplingConfig(n_max=2), weak, partition, h_q, provider, question_id="q"
        )
        assert kept == []

    def test_shortfall_not_redistributed(self, provider):
        store = store_from_lines([f"x\tr{i}\ty" for i in range(8)])
        config = NegativeSamplingConfig(n_max=20)
        weak = [path_of(store, "r0")]
        # 19 negative slots: quotas (1, 7, 5, 6); only OTHER has candidates
        partition = {
            TRUNCATED: [], EXTENDED: [], DEVIATED: [],
            OTHER: [path_of(store, f"r{i}") for i in range(1, 8)],
        }
        kept = sample_negatives(config, weak, partition, provider.embed("q"), provider,
                                question_id="q")
        assert len(kept) == 6  # the OTHER quota, not 19

    def test_over_quota_keeps_most_similar(self):
        from pathqa.embeddings import FileEmbeddingProvider
        import json

        rows = [
            {"text": "the question", "vector": [1.0, 0.0]},
            {"text": "aligned", "vector": [1.0, 0.0]},
            {"text": "sideways", "vector": [0.0, 1.0]},
            {"text": "opposed", "vector": [-1.0, 0.0]},
        ]
        import tempfile, pathlib
        with tempfile.TemporaryDirectory() as d:
            cache = pathlib.Path(d) / "cache.jsonl"
            cache.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
            file_provider = FileEmbeddingProvider(cache)
            store = store_from_lines([
                "x\taligned\ty", "x\tsideways\ty", "x\topposed\ty", "x\tweakrel\ty",
            ])
            config = NegativeSamplingConfig(
                n_max=3, rho_truncated=1.0, rho_extended=0.0, rho_deviated=0.0, rho_other=0.0,
            )
            weak = [path_of(store, "weakrel")]
            pool = [path_of(store, "opposed"), path_of(store, "aligned"), path_of(store, "sideways")]
            partition = {TRUNCATED: pool, EXTENDED: [], DEVIATED: [], OTHER: []}
            kept = sample_negatives(
                config, weak, partition, file_provider.embed("the question"), file_provider,
                question_id="q",
            )
            # budget 2, all in truncated class => top-2 by similarity
            assert [p.labels for p in kept] == [("aligned",), ("sideways",)]

    def test_other_class_prefers_relation_overlap(self, provider):
        store = store_from_lines([f"x\tr{i}\ty" for i in range(10)])
        config = NegativeSamplingConfig(
            n_max=3, rho_truncated=0.0, rho_extended=0.0, rho_deviated=0.0, rho_other=1.0,
        )
        weak = [path_of(store, "r1", "r2")]
        overlapping = path_of(store, "r3", "r1")
        others = [path_of(store, f"r{i}") for i in range(4, 9)]
        partition = {TRUNCATED: [], EXTENDED: [], DEVIATED: [], OTHER: others + [overlapping]}
        kept = sample_negatives(config, weak, partition, provider.embed("q"), provider,
                                question_id="q")
        assert len(kept) == 2
        assert overlapping in kept

    def test_budget_invariant_fuzzed(self, provider):
        rng = np.random.default_rng(34)
        store = store_from_lines([f"x\tr{i}\ty" for i in range(12)])
        for trial in range(30):
            n_max = int(rng.integers(1, 40))
            config = NegativeSamplingConfig(n_max=n_max, seed=trial)
            n_weak = int(rng.integers(0, n_max + 5))
            weak = [path_of(store, f"r{i % 12}") for i in range(n_weak)]
            pool = []
            seen = set()
            for _ in range(int(rng.integers(0, 60))):
                labels = tuple(f"r{int(i)}" for i in rng.integers(0, 12, size=int(rng.integers(1, 4))))
                if labels not in seen:
                    seen.add(labels)
                    pool.append(path_of(store, *labels))
            weak_ids = {w.relation_ids for w in weak}
            pool = [p for p in pool if p.relation_ids not in weak_ids]
            partition = classify_negatives(weak, pool)
            kept = sample_negatives(config, weak, partition, provider.embed("q"), provider,
                                    question_id=f"t{trial}")
            n_neg, _ = config.quotas(len(weak))
            assert len(kept) <= n_neg
            if len(weak) <= n_max:
                assert len(weak) + len(kept) <= n_max

    def test_seeded_determinism(self, provider):
        store = store_from_lines([f"x\tr{i}\ty" for i in range(10)])
        config = NegativeSamplingConfig(
            n_max=4, rho_truncated=0, rho_extended=0, rho_deviated=0, rho_other=1.0, seed=9,
        )
        weak = [path_of(store, "r0")]
        pool = [path_of(store, f"r{i}") for i in range(1, 10)]
        partition = {TRUNCATED: [], EXTENDED: [], DEVIATED: [], OTHER: pool}
        h_q = provider.embed("q")
        first = sample_negatives(config, weak, partition, h_q, provider, question_id="qq")
        second = sample_negatives(config, weak, partition, h_q, provider, question_id="qq")
        assert first == second

    def test_bad_rho_sum_rejected(self):
        with pytest.raises(ValidationError, match="sum to 1"):
            NegativeSamplingConfig(rho_other=0.5).validate()


class TestSelectSupervision:
    def make_scores(self, store, spec):
        return [PathScore(path_of(store, *labels), s) for labels, s in spec]

    def test_top1_argmax(self):
        store = store_from_lines([f"x\tr{i}\ty" for i in range(3)])
        scores = self.make_scores(store, [(("r0",), 0.2), (("r1",), 0.9), (("r2",), 0.1)])
        supervision = select_pseudo_supervision("q", scores, 1)
        assert [p.labels for p in supervision.paths] == [("r1",)]
        assert supervision.scores == (0.9,)

    def test_saturation_returns_all_sorted(self):
        store = store_from_lines([f"x\tr{i}\ty" for i in range(3)])
        scores = self.make_scores(store, [(("r0",), 0.2), (("r1",), 0.9), (("r2",), 0.5)])
        supervision = select_pseudo_supervision("q", scores, 10)
        assert [p.labels for p in supervision.paths] == [("r1",), ("r2",), ("r0",)]

    def test_tie_breaks_shorter_then_lexicographic(self):
        store = store_from_lines([f"x\tr{i}\ty" for i in range(3)])
        scores = self.make_scores(
            store, [(("r1", "r0"), 1.0), (("r2",), 1.0), (("r0",), 1.0)]
        )
        supervision = select_pseudo_supervision("q", scores, 2)
        assert [p.labels for p in supervision.paths] == [("r0",), ("r2",)]

    def test_empty_scores_flagged_unsupervisable(self):
        with pytest.raises(SupervisionError, match="cannot be supervised"):
            select_pseudo_supervision("q", [], 1)


class TestTargetDistribution:
    def test_singleton(self):
        store = store_from_lines(["x\tr0\ty"])
        supervision = select_pseudo_supervision(
            "q", [PathScore(path_of(store, "r0"), 1.0)], 1
        )
        assert target_distribution(supervision) == {path_of(store, "r0"): 1.0}

    def test_uniform_over_four(self):
        store = store_from_lines([f"x\tr{i}\ty" for i in range(4)])
        scores = [PathScore(path_of(store, f"r{i}"), float(i)) for i in range(4)]
        supervision = select_pseudo_supervision("q", scores, 4)
        dist = target_distribution(supervision)
        assert all(v == pytest.approx(0.25) for v in dist.values())
        assert abs(sum(dist.values()) - 1.0) <= 1e-12

    def test_sum_is_one_for_various_sizes(self):
        store = store_from_lines([f"x\tr{i}\ty" for i in range(7)])
        for n in range(1, 8):
            scores = [PathScore(path_of(store, f"r{i}"), float(i)) for i in range(n)]
            supervision = select_pseudo_supervision("q", scores, n)
            assert abs(sum(target_distribution(supervision).values()) - 1.0) <= 1e-12
