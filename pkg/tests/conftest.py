"""Shared fixtures: tiny graphs used across the suite."""

import numpy as np
import pytest

from pathqa.embeddings import HashingEmbeddingProvider
from pathqa.kg import TripleStore, store_from_lines
from pathqa.toydata import sports_micrograph_lines


@pytest.fixture(scope="session")
def sports_store() -> TripleStore:
    return store_from_lines(sports_micrograph_lines())


@pytest.fixture(scope="session")
def provider() -> HashingEmbeddingProvider:
    return HashingEmbeddingProvider(64)


def random_store(rng: np.random.Generator, n_entities=20, n_relations=5, n_triples=60) -> TripleStore:
    """Random multigraph over generic labels, deduplicated like the loader."""
    lines = []
    for _ in range(n_triples):
        h = int(rng.integers(n_entities))
        r = int(rng.integers(n_relations))
        t = int(rng.integers(n_entities))
        lines.append(f"e{h}\trel{r}\te{t}")
    return store_from_lines(lines)
