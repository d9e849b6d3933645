"""Trainable autoregressive relation-path generator and its prompt adapters.

The built-in generator factorizes a path's probability over steps: each step
conditions on the question vector and the mean embedding of the prefix
relations, and emits a distribution over the relation vocabulary plus an END
token. Reaching the decode horizon forces END, whose log-probability is still
charged, so a path's score is identical whether it ended naturally or at the
horizon. Decoding returns the exact top-K terminated sequences (best-first
over the prefix tree; expansion never increases a prefix's log-probability,
so the K first completions popped are globally optimal).

For driving a hosted LLM instead, the same supervision can be emitted as an
instruction-tuning dataset, and generated text is parsed back into paths.
"""

from __future__ import annotations

import dataclasses
import heapq
import logging
import re
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence, Union

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from . import artifacts
from .embeddings import EmbeddingProvider
from .errors import PathQAError
from .kg import RelationRef, TripleStore
from .paths import RelationPath
from .samples import PseudoSupervision, QuestionSample
from .torchtools import single_threaded, to_tensor

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_STAGE = "train-generator"

ARROW = "→"  # →
PATH_OPEN = "<PATH>"
PATH_CLOSE = "</PATH>"
GENERATION_INSTRUCTION = (
    "Reasoning path is a sequence of relations in the Knowledge Graph that "
    "connects the topic entity in the question to answer entities. Given a "
    "question, please generate a reasoning path in the Knowledge Graph "
    "starting from the topic entity to answer the question."
)

_PATH_SPAN = re.compile(re.escape(PATH_OPEN) + r"(.*?)" + re.escape(PATH_CLOSE), re.DOTALL)
_ARROW_SPLIT = re.compile(r"\s*(?:→|->)\s*")


class GeneratorError(PathQAError):
    """Vocabulary, configuration, or training failures in the path generator."""


@dataclass
class GeneratorConfig:
    """Vocabulary and hyperparameters of the built-in path generator."""

    relation_vocab: tuple[RelationRef, ...]
    max_length: int
    beam_size: int = 5
    hidden: int = 64
    learning_rate: float = 5e-5
    epochs: int = 5
    max_grad_norm: float = 1.0  # 0 disables clipping
    seed: int = 0

    def validate(self) -> None:
        if not self.relation_vocab:
            raise GeneratorError("relation vocabulary is empty")
        if len({r.id for r in self.relation_vocab}) != len(self.relation_vocab):
            raise GeneratorError("relation vocabulary has duplicate ids")
        if self.max_length < 1:
            raise GeneratorError("max_length must be >= 1")
        if self.beam_size < 1:
            raise GeneratorError("beam_size must be >= 1")
        if self.hidden < 1:
            raise GeneratorError("hidden must be >= 1")
        if self.learning_rate <= 0:
            raise GeneratorError("learning_rate must be positive")
        if self.epochs < 0:
            raise GeneratorError("epochs must be >= 0")
        if self.max_grad_norm < 0:
            raise GeneratorError("max_grad_norm must be >= 0")


class PathGeneratorModel(nn.Module):
    """Step network mapping [question || prefix-mean] to vocab+END logits."""

    def __init__(self, config: GeneratorConfig, input_dim: int,
                 relation_embeddings: np.ndarray):
        super().__init__()
        config.validate()
        vocab_size = len(config.relation_vocab)
        if relation_embeddings.shape != (vocab_size, input_dim):
            raise GeneratorError(
                f"relation embedding table must be ({vocab_size}, {input_dim}), "
                f"got {tuple(relation_embeddings.shape)}"
            )
        self.config = config
        self.input_dim = input_dim
        self.vocab_size = vocab_size
        self.end_index = vocab_size
        self._vocab_index = {ref: i for i, ref in enumerate(config.relation_vocab)}
        self.hidden = nn.Linear(2 * input_dim, config.hidden, dtype=DTYPE)
        self.out = nn.Linear(config.hidden, vocab_size + 1, dtype=DTYPE)
        self.register_buffer(
            "relation_embeddings", torch.as_tensor(relation_embeddings, dtype=DTYPE)
        )
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator()
        gen.manual_seed(seed)
        for module in (self.hidden, self.out):
            bound = 1.0 / np.sqrt(module.in_features)
            with torch.no_grad():
                module.weight.uniform_(-bound, bound, generator=gen)
            nn.init.zeros_(module.bias)

    # -- vocabulary ------------------------------------------------------------

    def vocab_indices(self, path: RelationPath) -> tuple[int, ...]:
        try:
            return tuple(self._vocab_index[ref] for ref in path.relations)
        except KeyError:
            missing = [ref.label for ref in path.relations if ref not in self._vocab_index]
            raise GeneratorError(f"path uses out-of-vocabulary relations: {missing}") from None

    def path_from_indices(self, indices: Sequence[int]) -> RelationPath:
        return RelationPath(tuple(self.config.relation_vocab[i] for i in indices))

    # -- probabilities -----------------------------------------------------------

    def _conditioning(self, h_q: torch.Tensor, prefix_means: torch.Tensor) -> torch.Tensor:
        return torch.cat([h_q.unsqueeze(0).expand(prefix_means.shape[0], -1), prefix_means], dim=1)

    def step_log_probs_for_sequence(
        self, h_q: torch.Tensor, indices: Sequence[int]
    ) -> torch.Tensor:
        """Log-probability rows for steps 0..l of a sequence: row t conditions
        on the first t relations (zero summary for the empty prefix)."""
        l = len(indices)
        means = torch.zeros((l + 1, self.input_dim), dtype=DTYPE)
        if l:
            embs = self.relation_embeddings[list(indices)]
            counts = torch.arange(1, l + 1, dtype=DTYPE).unsqueeze(1)
            means[1:] = torch.cumsum(embs, dim=0) / counts
        logits = self.out(torch.tanh(self.hidden(self._conditioning(h_q, means))))
        return torch.log_softmax(logits, dim=-1)

    def step_log_probs(self, h_q: torch.Tensor, prefix: Sequence[int]) -> torch.Tensor:
        """Next-token log distribution (vocab + END) after ``prefix``."""
        means = torch.zeros((1, self.input_dim), dtype=DTYPE)
        if prefix:
            means[0] = self.relation_embeddings[list(prefix)].mean(dim=0)
        logits = self.out(torch.tanh(self.hidden(self._conditioning(h_q, means))))
        return torch.log_softmax(logits, dim=-1)[0]

    def sequence_log_likelihood(self, h_q: torch.Tensor, indices: Sequence[int]) -> torch.Tensor:
        """log P(r_1..r_l, END | question): sum of per-step log-probabilities."""
        rows = self.step_log_probs_for_sequence(h_q, indices)
        targets = torch.tensor(list(indices) + [self.end_index], dtype=torch.long)
        return rows[torch.arange(len(targets)), targets].sum()


def _to_tensor(arr) -> torch.Tensor:
    return to_tensor(arr)


def build_generator_model(config: GeneratorConfig, provider: EmbeddingProvider) -> PathGeneratorModel:
    """Instantiate the model with the vocabulary embedded by ``provider``."""
    table = np.stack([provider.embed(ref.label) for ref in config.relation_vocab])
    return PathGeneratorModel(config, provider.dimension, table)


def path_log_likelihood(model: PathGeneratorModel, h_q, path: RelationPath) -> float:
    """log P(path then END | question); always <= 0.

    A length-l path is charged l relation steps plus the END step, including
    at the horizon, so likelihoods are comparable across lengths.
    """
    with torch.no_grad():
        return float(model.sequence_log_likelihood(_to_tensor(h_q), model.vocab_indices(path)))


# -- distillation ------------------------------------------------------------------


def distill(
    config: GeneratorConfig,
    dataset: Sequence[tuple[QuestionSample, PseudoSupervision]],
    provider: EmbeddingProvider,
    *,
    epoch_callback: Callable[[int, PathGeneratorModel, float], None] | None = None,
) -> PathGeneratorModel:
    """Train the generator on pseudo supervision by minimizing mean NLL.

    Minimizing the KL divergence from the hard uniform target to the model
    reduces to the mean negative log-likelihood of the selected paths (the
    target's entropy term is constant), which is what this optimizes: one
    AdamW step per question per epoch, deterministic for a fixed seed.
    """
    config.validate()
    if not dataset:
        raise GeneratorError("distillation dataset is empty")
    model = build_generator_model(config, provider)
    prepared = []
    for sample, supervision in dataset:
        if not supervision.paths:
            raise GeneratorError(f"question {sample.id!r} has empty supervision")
        h_q = _to_tensor(provider.embed(sample.question))
        index_seqs = [model.vocab_indices(path) for path in supervision.paths]
        for path, seq in zip(supervision.paths, index_seqs):
            if len(seq) > config.max_length:
                raise GeneratorError(
                    f"question {sample.id!r}: supervision path of length {len(seq)} "
                    f"exceeds max_length {config.max_length}"
                )
        prepared.append((sample.id, h_q, index_seqs))

    if config.epochs == 0:
        return model
    optimizer = torch.optim.AdamW(
        model.parameters(), lr=config.learning_rate, betas=(0.9, 0.999), weight_decay=0.01
    )
    report_every = max(1, config.epochs // 10)
    with single_threaded():
        for epoch in range(1, config.epochs + 1):
            losses = []
            for qid, h_q, index_seqs in prepared:
                nll = -torch.stack(
                    [model.sequence_log_likelihood(h_q, seq) for seq in index_seqs]
                ).mean()
                if not torch.isfinite(nll):
                    raise GeneratorError(f"non-finite loss at epoch {epoch}, question {qid!r}")
                optimizer.zero_grad()
                nll.backward()
                if config.max_grad_norm:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
                optimizer.step()
                losses.append(float(nll.detach()))
            mean_nll = float(np.mean(losses))
            logger.log(
                logging.INFO if epoch % report_every == 0 or epoch == 1 else logging.DEBUG,
                "generator epoch %d/%d: mean NLL %.6f", epoch, config.epochs, mean_nll,
            )
            if epoch_callback is not None:
                epoch_callback(epoch, model, mean_nll)
    return model


# -- decoding ----------------------------------------------------------------------


def beam_search(
    model: PathGeneratorModel,
    h_q,
    config: GeneratorConfig | None = None,
    *,
    k: int | None = None,
) -> list[tuple[RelationPath, float]]:
    """Top-K terminated sequences by total log-probability, best first.

    Implemented as best-first search over the prefix tree: every expansion
    adds a log-probability <= 0, so when a terminated sequence is popped no
    unexplored continuation can beat it; the first K pops are therefore the
    exact top-K (no length normalization). Ties break lexicographically on
    relation ids. Sequences terminate when END is emitted, or at
    ``max_length`` where END is forced (and still charged).
    """
    cfg = config or model.config
    width = k if k is not None else cfg.beam_size
    if width < 1:
        raise GeneratorError("k must be >= 1")
    h_q_t = _to_tensor(h_q)
    completed: list[tuple[RelationPath, float]] = []
    # heap entries: (-logprob, sequence, done) — min-heap pops the best
    heap: list[tuple[float, tuple[int, ...], bool]] = [(0.0, (), False)]
    with torch.no_grad(), single_threaded():
        while heap and len(completed) < width:
            neg_lp, seq, done = heapq.heappop(heap)
            lp = -neg_lp
            if done:
                completed.append((model.path_from_indices(seq), lp))
                continue
            dist = model.step_log_probs(h_q_t, seq).numpy()
            if len(seq) >= 1:
                heapq.heappush(heap, (-(lp + float(dist[model.end_index])), seq, True))
            if len(seq) < cfg.max_length:
                for idx in range(model.vocab_size):
                    heapq.heappush(heap, (-(lp + float(dist[idx])), seq + (idx,), False))
    return completed


# -- fine-tuning dataset emission and path parsing ------------------------------------


@dataclass(frozen=True)
class FinetuneRecord:
    """One instruction-tuning row for an external LLM path generator."""

    instruction: str
    input: str
    output: str


def serialize_path(labels: Sequence[str]) -> str:
    return f"{PATH_OPEN} {f' {ARROW} '.join(labels)} {PATH_CLOSE}"


def generation_input_block(question: str, topic_entity: str) -> str:
    return f"Question: {question}\nTopic entity: {topic_entity}"


def emit_finetune_dataset(
    dataset: Sequence[tuple[QuestionSample, PseudoSupervision]],
) -> list[FinetuneRecord]:
    """One record per (question, topic entity, supervision path).

    Questions keep dataset order, topic entities stable id order, and paths
    their selection order; the output block round-trips through
    :func:`parse_generated_path`.
    """
    records = []
    for sample, supervision in dataset:
        if not supervision.paths:
            raise GeneratorError(f"question {sample.id!r} has empty supervision")
        for entity in sorted(sample.question_entities, key=lambda e: e.id):
            for path in supervision.paths:
                records.append(
                    FinetuneRecord(
                        instruction=GENERATION_INSTRUCTION,
                        input=generation_input_block(sample.question, entity.label),
                        output=serialize_path(path.labels),
                    )
                )
    return records


@dataclass(frozen=True)
class PathParseResult:
    """Outcome of parsing generated text into a relation path.

    ``path`` is set only when every token resolved; otherwise the raw tokens
    plus the unresolved ones are kept for diagnostics, and the result must be
    excluded from grounding.
    """

    tokens: tuple[str, ...] = ()
    path: RelationPath | None = None
    unresolved: tuple[str, ...] = ()
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.error is None and not self.unresolved


def parse_generated_path(
    text: str,
    vocab: Union[TripleStore, Mapping[str, RelationRef]],
) -> PathParseResult:
    """Extract the first ``<PATH> ... </PATH>`` span and resolve its relations.

    Tokens are split on the arrow separator (``→`` or ``->``) and trimmed.
    Missing tags or an empty span yield a failure report, never an exception.
    """
    match = _PATH_SPAN.search(text)
    if match is None:
        return PathParseResult(error=f"no {PATH_OPEN} ... {PATH_CLOSE} span found")
    tokens = tuple(t.strip() for t in _ARROW_SPLIT.split(match.group(1)) if t.strip())
    if not tokens:
        return PathParseResult(error="empty path span")

    if isinstance(vocab, TripleStore):
        def resolve(label: str) -> RelationRef | None:
            return vocab.relation(label) if vocab.has_relation(label) else None
    else:
        def resolve(label: str) -> RelationRef | None:
            return vocab.get(label)

    refs = [resolve(token) for token in tokens]
    unresolved = tuple(tok for tok, ref in zip(tokens, refs) if ref is None)
    path = RelationPath(tuple(refs)) if not unresolved else None
    return PathParseResult(tokens=tokens, path=path, unresolved=unresolved)


def generate_paths_via_client(
    client,
    sample: QuestionSample,
    vocab: Union[TripleStore, Mapping[str, RelationRef]],
) -> tuple[list[RelationPath], list[PathParseResult]]:
    """External-LLM generation mode: prompt per topic entity, parse, union.

    ``client`` is any chat client exposing ``complete(system, user)`` (the
    reasoner module's client or a test double). Unresolvable generations are
    reported but excluded from the returned paths.
    """
    paths: list[RelationPath] = []
    reports: list[PathParseResult] = []
    seen: set[tuple[int, ...]] = set()
    for entity in sorted(sample.question_entities, key=lambda e: e.id):
        text, _usage = client.complete(
            GENERATION_INSTRUCTION, generation_input_block(sample.question, entity.label)
        )
        result = parse_generated_path(text, vocab)
        reports.append(result)
        if result.ok and result.path is not None and result.path.relation_ids not in seen:
            seen.add(result.path.relation_ids)
            paths.append(result.path)
    return paths, reports


# -- persistence --------------------------------------------------------------------


def save_model(model: PathGeneratorModel, path, *, config_hash: str = "") -> None:
    config = dataclasses.asdict(model.config)
    config["relation_vocab"] = [[r.id, r.label] for r in model.config.relation_vocab]
    config["input_dim"] = model.input_dim
    tensors = {name: tensor.detach().numpy() for name, tensor in model.state_dict().items()}
    artifacts.save_tensors(path, CHECKPOINT_STAGE, config_hash, config, tensors)


def load_model(path, *, expected_hash: str | None = None, force: bool = False) -> PathGeneratorModel:
    header, tensors = artifacts.load_tensors(path, CHECKPOINT_STAGE, expected_hash, force=force)
    config_dict = dict(header["config"])
    vocab = tuple(RelationRef(int(i), str(lbl)) for i, lbl in config_dict.pop("relation_vocab"))
    input_dim = config_dict.pop("input_dim")
    config = GeneratorConfig(relation_vocab=vocab, **config_dict)
    model = PathGeneratorModel(
        config, input_dim, tensors["relation_embeddings"]
    )
    model.load_state_dict({name: torch.from_numpy(arr) for name, arr in tensors.items()})
    return model


# -- sklearn-style wrapper -------------------------------------------------------------


class PathGenerator(BaseEstimator):
    """fit/predict wrapper around the built-in generator."""

    def __init__(self, provider=None, relation_vocab=None, max_length=3, beam_size=5,
                 hidden=64, learning_rate=5e-5, epochs=5, max_grad_norm=1.0, seed=0):
        self.provider = provider
        self.relation_vocab = relation_vocab
        self.max_length = max_length
        self.beam_size = beam_size
        self.hidden = hidden
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.max_grad_norm = max_grad_norm
        self.seed = seed

    def _build_config(self) -> GeneratorConfig:
        if self.relation_vocab is None:
            raise GeneratorError("a relation vocabulary is required")
        return GeneratorConfig(
            relation_vocab=tuple(self.relation_vocab),
            max_length=self.max_length,
            beam_size=self.beam_size,
            hidden=self.hidden,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            max_grad_norm=self.max_grad_norm,
            seed=self.seed,
        )

    def fit(self, dataset: Sequence[tuple[QuestionSample, PseudoSupervision]],
            *, epoch_callback=None) -> "PathGenerator":
        if self.provider is None:
            raise GeneratorError("an embedding provider is required to fit")
        self.config_ = self._build_config()
        self.model_ = distill(self.config_, dataset, self.provider, epoch_callback=epoch_callback)
        return self

    def _require_fitted(self) -> PathGeneratorModel:
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError("PathGenerator is not fitted; call fit() first")
        return model

    def predict(self, question: str, *, k: int | None = None) -> list[tuple[RelationPath, float]]:
        model = self._require_fitted()
        return beam_search(model, self.provider.embed(question), k=k)

    def path_log_likelihood(self, question: str, path: RelationPath) -> float:
        model = self._require_fitted()
        return path_log_likelihood(model, self.provider.embed(question), path)

    def save(self, path, *, config_hash: str = "") -> None:
        save_model(self._require_fitted(), path, config_hash=config_hash)

    @classmethod
    def load(cls, path, provider, *, expected_hash=None, force=False) -> "PathGenerator":
        model = load_model(path, expected_hash=expected_hash, force=force)
        gen = cls(
            provider=provider,
            relation_vocab=model.config.relation_vocab,
            max_length=model.config.max_length,
            beam_size=model.config.beam_size,
            hidden=model.config.hidden,
            learning_rate=model.config.learning_rate,
            epochs=model.config.epochs,
            max_grad_norm=model.config.max_grad_norm,
            seed=model.config.seed,
        )
        gen.config_ = model.config
        gen.model_ = model
        return gen
