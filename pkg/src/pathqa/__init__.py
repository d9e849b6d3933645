"""KGQA via MIL-estimated relation-path supervision.

Pipeline: load a triple store, enumerate candidate relation paths per
question, build MIL bags from answer-level labels, train the attention-MIL
path estimator, select top-T pseudo supervision, distill it into a path
generator, decode and ground paths in the KG, and hand the grounded evidence
to a pluggable reasoner for final answers.
"""

from .embeddings import (
    FileEmbeddingProvider,
    HashingEmbeddingProvider,
    provider_from_spec,
    question_path_similarity,
)
from .errors import PathQAError, ValidationError
from .estimator import EstimatorConfig, MILPathEstimator, PathScore
from .generator import GeneratorConfig, PathGenerator, parse_generated_path
from .kg import EntityRef, RelationRef, TripleStore, load_triples
from .paths import (
    GroundedEvidence,
    RelationPath,
    enumerate_candidate_paths,
    ground_paths,
    reachable_entities,
    weakly_supervised_paths,
)
from .reasoner import ReasonerRequest, ReasonerResponse, mock_union_reasoner, reason
from .samples import PathBag, PseudoSupervision, QuestionSample, load_questions
from .supervision import (
    NegativeSamplingConfig,
    build_bags,
    classify_negatives,
    sample_negatives,
    select_pseudo_supervision,
    target_distribution,
)

__version__ = "0.1.0"

__all__ = [
    "EntityRef",
    "EstimatorConfig",
    "FileEmbeddingProvider",
    "GeneratorConfig",
    "GroundedEvidence",
    "HashingEmbeddingProvider",
    "MILPathEstimator",
    "NegativeSamplingConfig",
    "PathBag",
    "PathGenerator",
    "PathQAError",
    "PathScore",
    "PseudoSupervision",
    "QuestionSample",
    "ReasonerRequest",
    "ReasonerResponse",
    "RelationPath",
    "RelationRef",
    "TripleStore",
    "ValidationError",
    "build_bags",
    "classify_negatives",
    "enumerate_candidate_paths",
    "ground_paths",
    "load_questions",
    "load_triples",
    "mock_union_reasoner",
    "parse_generated_path",
    "provider_from_spec",
    "question_path_similarity",
    "reachable_entities",
    "reason",
    "sample_negatives",
    "select_pseudo_supervision",
    "target_distribution",
    "weakly_supervised_paths",
]
