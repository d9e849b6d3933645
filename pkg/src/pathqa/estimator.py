"""Transformer MIL model for question-conditioned path informativeness.

A path is encoded by a small transformer over ``[question, r_1, ..., r_l]``
token embeddings plus learned positional embeddings; the first-position
output is the path representation. Positive bags are pooled with attention
weights derived from the unnormalized score ``s = w^T tanh(V h)``, which
doubles as the informativeness score used to rank paths across bags.
Training is plain bag-level binary cross-entropy.

Everything runs in float64 on CPU, single question per optimizer step, so
runs are bitwise reproducible for a fixed seed.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError
from torch import nn

from . import artifacts
from .embeddings import EmbeddingProvider
from .errors import PathQAError
from .paths import RelationPath
from .samples import NEGATIVE, POSITIVE, PathBag, QuestionSample
from .torchtools import single_threaded, to_tensor

logger = logging.getLogger(__name__)

DTYPE = torch.float64
PROB_EPS = 1e-12
CHECKPOINT_STAGE = "train-estimator"


class EstimatorError(PathQAError):
    """Configuration, shape, or training failures in the MIL estimator."""


@dataclass
class EstimatorConfig:
    """Hyperparameters of the MIL path estimator."""

    model_dim: int = 128
    layers: int = 2
    heads: int = 4
    ffn_factor: int = 4
    max_positions: int = 4  # must cover the longest path length + 1
    learning_rate: float = 1e-4
    weight_decay: float = 0.01
    epochs: int = 600
    max_grad_norm: float = 1.0  # 0 disables clipping
    seed: int = 0

    def validate(self) -> None:
        if self.model_dim < 1 or self.model_dim % self.heads != 0:
            raise EstimatorError(
                f"model_dim {self.model_dim} must be a positive multiple of heads {self.heads}"
            )
        if self.layers < 0 or self.ffn_factor < 1:
            raise EstimatorError("layers must be >= 0 and ffn_factor >= 1")
        if self.max_positions < 2:
            raise EstimatorError("max_positions must be >= 2 (question token + one relation)")
        if self.learning_rate <= 0:
            raise EstimatorError("learning_rate must be positive")
        if self.epochs < 0:
            raise EstimatorError("epochs must be >= 0")
        if self.max_grad_norm < 0:
            raise EstimatorError("max_grad_norm must be >= 0")


@dataclass(frozen=True)
class PathScore:
    """A path with its unnormalized informativeness score."""

    path: RelationPath
    score: float


def _init_uniform(tensor: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    with torch.no_grad():
        tensor.uniform_(-bound, bound, generator=gen)


class EncoderLayer(nn.Module):
    """Pre-LayerNorm transformer block: multi-head attention + GELU feed-forward.

    With zero-initialized output projections the block is exactly the
    identity, which keeps residual behaviour testable.
    """

    def __init__(self, dim: int, heads: int, ffn_factor: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.ln_attn = nn.LayerNorm(dim, dtype=DTYPE)
        self.qkv = nn.Linear(dim, 3 * dim, dtype=DTYPE)
        self.attn_out = nn.Linear(dim, dim, dtype=DTYPE)
        self.ln_ffn = nn.LayerNorm(dim, dtype=DTYPE)
        self.ffn_in = nn.Linear(dim, ffn_factor * dim, dtype=DTYPE)
        self.ffn_out = nn.Linear(ffn_factor * dim, dim, dtype=DTYPE)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        # x: (B, T, D); mask: (B, T), True at real tokens
        B, T, D = x.shape
        h = self.ln_attn(x)
        qkv = self.qkv(h).reshape(B, T, 3, self.heads, self.head_dim)
        q, k, v = (t.transpose(1, 2) for t in qkv.unbind(dim=2))  # (B, H, T, dh)
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(self.head_dim)
        scores = scores.masked_fill(~mask[:, None, None, :], -1e30)
        attn = torch.softmax(scores, dim=-1)
        ctx = (attn @ v).transpose(1, 2).reshape(B, T, D)
        x = x + self.attn_out(ctx)
        h2 = self.ln_ffn(x)
        x = x + self.ffn_out(torch.nn.functional.gelu(self.ffn_in(h2)))
        return x


class MILPathModel(nn.Module):
    """All trainable tensors of the estimator, with the forward pieces."""

    def __init__(self, config: EstimatorConfig, input_dim: int):
        super().__init__()
        config.validate()
        if input_dim < 1:
            raise EstimatorError(f"input_dim must be positive, got {input_dim}")
        self.config = config
        self.input_dim = input_dim
        d = config.model_dim
        self.input_projection = nn.Linear(input_dim, d, dtype=DTYPE)
        self.position_embeddings = nn.Parameter(torch.empty(config.max_positions, d, dtype=DTYPE))
        self.encoder = nn.ModuleList(
            EncoderLayer(d, config.heads, config.ffn_factor) for _ in range(config.layers)
        )
        self.attention_V = nn.Parameter(torch.empty(d, d, dtype=DTYPE))
        self.attention_w = nn.Parameter(torch.empty(d, dtype=DTYPE))
        self.classifier_hidden = nn.Linear(2 * d, d, dtype=DTYPE)
        self.classifier_out = nn.Linear(d, 1, dtype=DTYPE)
        self.reset_parameters(config.seed)

    def reset_parameters(self, seed: int) -> None:
        """Uniform(+-1/sqrt(fan_in)) weights, zero biases, seed-controlled."""
        gen = torch.Generator()
        gen.manual_seed(seed)
        d = self.config.model_dim
        for module in self.modules():
            if isinstance(module, nn.Linear):
                _init_uniform(module.weight, module.in_features, gen)
                nn.init.zeros_(module.bias)
            elif isinstance(module, nn.LayerNorm):
                nn.init.ones_(module.weight)
                nn.init.zeros_(module.bias)
        _init_uniform(self.position_embeddings, d, gen)
        _init_uniform(self.attention_V, d, gen)
        _init_uniform(self.attention_w, d, gen)

    # -- encoding -----------------------------------------------------------

    def build_tokens(
        self, h_q: torch.Tensor, relation_embeddings: Sequence[torch.Tensor]
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Pack [question, r_1..r_l] rows for a batch of paths, with padding mask."""
        if not relation_embeddings:
            raise EstimatorError("need at least one path to encode")
        lengths = []
        for embs in relation_embeddings:
            if embs.ndim != 2 or embs.shape[1] != self.input_dim:
                raise EstimatorError(
                    f"relation embeddings must be (l, {self.input_dim}), got {tuple(embs.shape)}"
                )
            if embs.shape[0] < 1:
                raise EstimatorError("paths must contain at least one relation")
            lengths.append(embs.shape[0])
        T = 1 + max(lengths)
        if T > self.config.max_positions:
            raise EstimatorError(
                f"path length {T - 1} exceeds max_positions - 1 = {self.config.max_positions - 1}"
            )
        if h_q.shape != (self.input_dim,):
            raise EstimatorError(f"question embedding must be ({self.input_dim},), got {tuple(h_q.shape)}")
        B = len(relation_embeddings)
        raw = h_q.new_zeros((B, T, self.input_dim))
        mask = torch.zeros((B, T), dtype=torch.bool)
        raw[:, 0] = h_q
        mask[:, 0] = True
        for i, embs in enumerate(relation_embeddings):
            raw[i, 1 : 1 + lengths[i]] = embs
            mask[i, 1 : 1 + lengths[i]] = True
        return raw, mask

    def encode_from_tokens(self, raw: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Run the encoder over packed token rows; returns first-position outputs."""
        T = raw.shape[1]
        x = self.input_projection(raw) + self.position_embeddings[:T]
        for layer in self.encoder:
            x = layer(x, mask)
        return x[:, 0]

    def encode_paths(
        self, h_q: torch.Tensor, relation_embeddings: Sequence[torch.Tensor]
    ) -> torch.Tensor:
        raw, mask = self.build_tokens(h_q, relation_embeddings)
        return self.encode_from_tokens(raw, mask)

    def project_question(self, h_q: torch.Tensor) -> torch.Tensor:
        return self.input_projection(h_q)

    # -- scoring and classification ------------------------------------------

    def path_scores(self, encodings: torch.Tensor) -> torch.Tensor:
        """s = w^T tanh(V h) for each row of ``encodings``."""
        return torch.tanh(encodings @ self.attention_V.T) @ self.attention_w

    def aggregate_bag(
        self, member_encodings: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Attention-pool a positive bag; returns (bag vector, weights, scores)."""
        if member_encodings.ndim != 2 or member_encodings.shape[0] < 1:
            raise EstimatorError("bag must contain at least one member encoding")
        scores = self.path_scores(member_encodings)
        weights = torch.softmax(scores, dim=0)
        return weights @ member_encodings, weights, scores

    def classify(self, bag_vector: torch.Tensor, question_projected: torch.Tensor) -> torch.Tensor:
        """sigmoid(MLP(bag || question)); supports batched leading dims."""
        joint = torch.cat([bag_vector, question_projected], dim=-1)
        hidden = torch.nn.functional.gelu(self.classifier_hidden(joint))
        return torch.sigmoid(self.classifier_out(hidden)).squeeze(-1)


# -- functional views of the model pieces (numpy in, python out) --------------


def _to_tensor(arr) -> torch.Tensor:
    return to_tensor(arr)


def encode_path(model: MILPathModel, h_q, relation_embeddings: Sequence) -> np.ndarray:
    """Encode one path; returns the d-dim path representation."""
    with torch.no_grad():
        embs = [torch.stack([_to_tensor(e) for e in relation_embeddings])]
        return model.encode_paths(_to_tensor(h_q), embs)[0].numpy()


def path_informativeness(model: MILPathModel, h_z) -> float:
    with torch.no_grad():
        return float(model.path_scores(_to_tensor(h_z).unsqueeze(0))[0])


def aggregate_positive_bag(
    model: MILPathModel, members: Sequence
) -> tuple[np.ndarray, list[float], list[float]]:
    with torch.no_grad():
        enc = torch.stack([_to_tensor(m) for m in members])
        bag, weights, scores = model.aggregate_bag(enc)
        return bag.numpy(), [float(x) for x in weights], [float(x) for x in scores]


def classify_bag(model: MILPathModel, bag_vector, question_projected) -> float:
    with torch.no_grad():
        return float(model.classify(_to_tensor(bag_vector), _to_tensor(question_projected)))


def mil_loss(labeled_probabilities: Sequence[tuple[int, torch.Tensor]]) -> torch.Tensor:
    """Bag-level BCE: -sum_{B+} log(p) - sum_{B-} log(1 - p).

    Probabilities are clamped to [1e-12, 1 - 1e-12] so the loss stays finite.
    """
    if not labeled_probabilities:
        raise EstimatorError("mil_loss needs at least one bag")
    total = torch.zeros((), dtype=DTYPE)
    for label, prob in labeled_probabilities:
        if label not in (0, 1):
            raise EstimatorError(f"bag labels must be 0 or 1, got {label!r}")
        p = torch.clamp(torch.as_tensor(prob, dtype=DTYPE), PROB_EPS, 1.0 - PROB_EPS)
        total = total - (torch.log(p) if label == 1 else torch.log(1.0 - p))
    return total


# -- training -----------------------------------------------------------------


@dataclass
class _PreparedQuestion:
    question_id: str
    h_q: torch.Tensor
    raw: torch.Tensor        # (P, T, input_dim) packed token rows, question row included
    mask: torch.Tensor       # (P, T)
    positive_bags: list[list[int]]
    negative_indices: list[int]


def _embed_paths(provider: EmbeddingProvider, paths: Sequence[RelationPath]) -> list[torch.Tensor]:
    return [
        torch.stack([_to_tensor(provider.embed(label)) for label in path.labels])
        for path in paths
    ]


def _prepare_question(
    sample: QuestionSample,
    positive_bags: Sequence[PathBag],
    negative_bags: Sequence[PathBag],
    provider: EmbeddingProvider,
    max_positions: int,
) -> _PreparedQuestion:
    paths: list[RelationPath] = []
    index: dict[RelationPath, int] = {}

    def intern(path: RelationPath) -> int:
        if path not in index:
            index[path] = len(paths)
            paths.append(path)
        return index[path]

    pos_indices = [[intern(p) for p in bag.members] for bag in positive_bags]
    neg_indices = [intern(bag.members[0]) for bag in negative_bags]
    if not paths:
        raise EstimatorError(f"question {sample.id!r} contributes no bags")

    h_q = _to_tensor(provider.embed(sample.question))
    rel_embs = _embed_paths(provider, paths)
    T = 1 + max(e.shape[0] for e in rel_embs)
    if T > max_positions:
        raise EstimatorError(
            f"question {sample.id!r}: path length {T - 1} exceeds max_positions - 1"
        )
    raw = h_q.new_zeros((len(paths), T, h_q.shape[0]))
    mask = torch.zeros((len(paths), T), dtype=torch.bool)
    raw[:, 0] = h_q
    mask[:, 0] = True
    for i, embs in enumerate(rel_embs):
        raw[i, 1 : 1 + embs.shape[0]] = embs
        mask[i, 1 : 1 + embs.shape[0]] = True
    return _PreparedQuestion(sample.id, h_q, raw, mask, pos_indices, neg_indices)


def question_loss(model: MILPathModel, prepared: _PreparedQuestion) -> torch.Tensor:
    """L_MIL for one question: BCE over its positive and negative bags."""
    encodings = model.encode_from_tokens(prepared.raw, prepared.mask)
    q_proj = model.project_question(prepared.h_q)
    labeled: list[tuple[int, torch.Tensor]] = []
    for member_indices in prepared.positive_bags:
        bag_vector, _, _ = model.aggregate_bag(encodings[member_indices])
        labeled.append((1, model.classify(bag_vector, q_proj)))
    if prepared.negative_indices:
        # singleton negatives bypass attention: the bag vector is the encoding
        neg = encodings[prepared.negative_indices]
        probs = model.classify(neg, q_proj.unsqueeze(0).expand(neg.shape[0], -1))
        labeled.extend((0, probs[i]) for i in range(neg.shape[0]))
    return mil_loss(labeled)


TrainingRow = tuple[QuestionSample, Sequence[PathBag], Sequence[PathBag]]


def train_estimator(
    config: EstimatorConfig,
    dataset: Sequence[TrainingRow],
    provider: EmbeddingProvider,
    *,
    epoch_callback: Callable[[int, "MILPathModel", float], None] | None = None,
) -> MILPathModel:
    """Train the bag classifier; deterministic for a fixed config seed.

    One optimizer step per question per epoch (the loss is per-question),
    AdamW with betas (0.9, 0.999). Raises on an empty dataset or the first
    non-finite loss, naming the epoch and question.
    """
    config.validate()
    if not dataset:
        raise EstimatorError("training dataset is empty")
    for sample, pos_bags, neg_bags in dataset:
        if not pos_bags and not neg_bags:
            raise EstimatorError(f"question {sample.id!r} contributes no bags")
        for bag in pos_bags:
            if bag.label != POSITIVE:
                raise EstimatorError(f"question {sample.id!r}: mislabeled positive bag")
        for bag in neg_bags:
            if bag.label != NEGATIVE:
                raise EstimatorError(f"question {sample.id!r}: mislabeled negative bag")

    prepared = [
        _prepare_question(sample, pos, neg, provider, config.max_positions)
        for sample, pos, neg in dataset
    ]
    model = MILPathModel(config, provider.dimension)
    if config.epochs == 0:
        return model

    optimizer = torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        betas=(0.9, 0.999),
        weight_decay=config.weight_decay,
    )
    report_every = max(1, config.epochs // 10)
    with single_threaded():
        for epoch in range(1, config.epochs + 1):
            losses = []
            for q in prepared:
                loss = question_loss(model, q)
                if not torch.isfinite(loss):
                    raise EstimatorError(
                        f"non-finite loss at epoch {epoch}, question {q.question_id!r}"
                    )
                optimizer.zero_grad()
                loss.backward()
                if config.max_grad_norm:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
                optimizer.step()
                losses.append(float(loss.detach()))
            mean_loss = float(np.mean(losses))
            logger.log(
                logging.INFO if epoch % report_every == 0 or epoch == 1 else logging.DEBUG,
                "estimator epoch %d/%d: mean loss %.6f", epoch, config.epochs, mean_loss,
            )
            if epoch_callback is not None:
                epoch_callback(epoch, model, mean_loss)
    return model


def score_paths(
    model: MILPathModel,
    sample: QuestionSample,
    paths: Sequence[RelationPath],
    provider: EmbeddingProvider,
) -> list[PathScore]:
    """Informativeness score per input path, order preserved.

    Each score depends only on (question, path), so it ranks paths across
    bags; other paths in the list never influence it.
    """
    if not paths:
        raise EstimatorError("score_paths needs at least one path")
    with torch.no_grad(), single_threaded():
        h_q = _to_tensor(provider.embed(sample.question))
        encodings = model.encode_paths(h_q, _embed_paths(provider, paths))
        scores = model.path_scores(encodings)
    return [PathScore(path, float(s)) for path, s in zip(paths, scores)]


# -- persistence ----------------------------------------------------------------


def save_model(model: MILPathModel, path, *, config_hash: str = "") -> None:
    config = dataclasses.asdict(model.config)
    config["input_dim"] = model.input_dim
    tensors = {name: tensor.detach().numpy() for name, tensor in model.state_dict().items()}
    artifacts.save_tensors(path, CHECKPOINT_STAGE, config_hash, config, tensors)


def load_model(path, *, expected_hash: str | None = None, force: bool = False) -> MILPathModel:
    header, tensors = artifacts.load_tensors(
        path, CHECKPOINT_STAGE, expected_hash, force=force
    )
    config_dict = dict(header["config"])
    input_dim = config_dict.pop("input_dim")
    model = MILPathModel(EstimatorConfig(**config_dict), input_dim)
    model.load_state_dict({name: torch.from_numpy(arr) for name, arr in tensors.items()})
    return model


# -- sklearn-style wrapper -------------------------------------------------------


class MILPathEstimator(BaseEstimator):
    """fit/score wrapper so the MIL model composes with sklearn tooling.

    ``fit`` consumes rows of (QuestionSample, positive bags, negative bags)
    and trains the underlying model; fitted state lives in ``model_``.
    """

    def __init__(self, provider=None, model_dim=128, layers=2, heads=4, ffn_factor=4,
                 max_positions=None, learning_rate=1e-4, weight_decay=0.01,
                 epochs=600, max_grad_norm=1.0, seed=0):
        self.provider = provider
        self.model_dim = model_dim
        self.layers = layers
        self.heads = heads
        self.ffn_factor = ffn_factor
        self.max_positions = max_positions
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.max_grad_norm = max_grad_norm
        self.seed = seed

    def _build_config(self, dataset: Sequence[TrainingRow]) -> EstimatorConfig:
        max_positions = self.max_positions
        if max_positions is None:
            longest = 1
            for _, pos_bags, neg_bags in dataset:
                for bag in list(pos_bags) + list(neg_bags):
                    longest = max(longest, max(p.length for p in bag.members))
            max_positions = longest + 1
        return EstimatorConfig(
            model_dim=self.model_dim,
            layers=self.layers,
            heads=self.heads,
            ffn_factor=self.ffn_factor,
            max_positions=max_positions,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            max_grad_norm=self.max_grad_norm,
            seed=self.seed,
        )

    def fit(self, dataset: Sequence[TrainingRow], *, epoch_callback=None) -> "MILPathEstimator":
        if self.provider is None:
            raise EstimatorError("an embedding provider is required to fit")
        self.config_ = self._build_config(dataset)
        self.model_ = train_estimator(
            self.config_, dataset, self.provider, epoch_callback=epoch_callback
        )
        return self

    def _require_fitted(self) -> MILPathModel:
        model = getattr(self, "model_", None)
        if model is None:
            raise NotFittedError("MILPathEstimator is not fitted; call fit() first")
        return model

    def score_paths(self, sample: QuestionSample, paths: Sequence[RelationPath]) -> list[PathScore]:
        return score_paths(self._require_fitted(), sample, paths, self.provider)

    def save(self, path, *, config_hash: str = "") -> None:
        save_model(self._require_fitted(), path, config_hash=config_hash)

    @classmethod
    def load(cls, path, provider, *, expected_hash=None, force=False) -> "MILPathEstimator":
        model = load_model(path, expected_hash=expected_hash, force=force)
        est = cls(
            provider=provider,
            model_dim=model.config.model_dim,
            layers=model.config.layers,
            heads=model.config.heads,
            ffn_factor=model.config.ffn_factor,
            max_positions=model.config.max_positions,
            learning_rate=model.config.learning_rate,
            weight_decay=model.config.weight_decay,
            epochs=model.config.epochs,
            max_grad_norm=model.config.max_grad_norm,
            seed=model.config.seed,
        )
        est.config_ = model.config
        est.model_ = model
        return est
