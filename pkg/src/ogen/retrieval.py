"""Nearest-class retrieval and support sampling for feature synthesis.

Given a conditioning class embedding, find the K most similar known
classes by text-embedding cosine similarity (exact search; the class
count is small) and sample one image feature per retrieved class as
support. Everything here is a pure function except for the caller-owned
rng used in sampling.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .embedding_store import EmbeddingSet
from .errors import DataError

UNIT_ATOL = 1e-5


class _Counter:
    """Instrumentation: counts NeighborContext constructions (tests use it
    to prove the baseline path never builds one)."""

    __slots__ = ("value",)

    def __init__(self):
        self.value = 0

    def reset(self):
        self.value = 0


CONTEXT_BUILDS = _Counter()


@dataclass
class NeighborContext:
    """Retrieved neighborhood for one conditioning class.

    neighbor_embeddings and support_features are (d, K) column matrices;
    column j of support_features is one sampled image feature of class
    neighbor_indices[j].
    """

    conditioning: "int | np.ndarray | None"
    neighbor_indices: list
    neighbor_embeddings: np.ndarray
    support_features: np.ndarray
    sample_ids: list

    def __post_init__(self):
        k = len(self.neighbor_indices)
        if k == 0:
            raise DataError("neighbor context needs at least one neighbor")
        if self.neighbor_embeddings.shape[1] != k or self.support_features.shape[1] != k:
            raise DataError("neighbor matrices do not match the neighbor count")
        if self.neighbor_embeddings.shape[0] != self.support_features.shape[0]:
            raise DataError("neighbor and support dimensions differ")
        if len(self.sample_ids) != k:
            raise DataError("sample_ids must list one sample per neighbor")
        for name, mat in (("neighbor", self.neighbor_embeddings), ("support", self.support_features)):
            norms = np.linalg.norm(mat.astype(np.float64), axis=0)
            if np.any(np.abs(norms - 1.0) > UNIT_ATOL):
                raise DataError(f"{name} columns must be unit-norm")
        CONTEXT_BUILDS.value += 1

    @property
    def k(self) -> int:
        return len(self.neighbor_indices)


def retrieve_knn(query, base_embeddings, k: int) -> list:
    """Indices of the k classes most cosine-similar to the query.

    base_embeddings is (d, C_b) with classes as columns. Returns indices
    in descending-similarity order; exact ties break toward the smaller
    index. k larger than the class count is clamped with a warning.
    """
    if k <= 0:
        raise DataError(f"k must be positive, got {k}")
    w = np.asarray(query, dtype=np.float64).reshape(-1)
    emb = np.asarray(base_embeddings, dtype=np.float64)
    if emb.ndim != 2 or emb.shape[0] != w.shape[0]:
        raise DataError(f"base embedding matrix {emb.shape} incompatible with query dim {w.shape[0]}")
    cb = emb.shape[1]
    if k > cb:
        warnings.warn(f"k={k} exceeds the {cb} available classes; clamped", stacklevel=2)
        k = cb
    wn = np.linalg.norm(w)
    if wn == 0.0:
        raise DataError("query embedding has zero norm")
    scores = (emb / np.linalg.norm(emb, axis=0)).T @ (w / wn)
    # lexsort: primary key descending score, secondary ascending index
    order = np.lexsort((np.arange(cb), -scores))
    return [int(i) for i in order[:k]]


def build_context(
    neighbor_ids,
    neighbor_embeddings,
    features_by_class,
    rng: np.random.Generator,
    conditioning=None,
) -> NeighborContext:
    """Assemble a NeighborContext from explicit neighbor columns.

    neighbor_embeddings is (d, K) aligned with neighbor_ids (columns are
    normalized here); features_by_class maps a neighbor id to its (n, d)
    image-feature rows, from which one row is drawn uniformly per neighbor.
    """
    ids = [int(i) for i in neighbor_ids]
    emb = np.asarray(neighbor_embeddings, dtype=np.float64)
    norms = np.linalg.norm(emb, axis=0)
    if np.any(norms == 0.0):
        raise DataError("neighbor embedding with zero norm")
    emb = emb / norms
    cols = []
    sample_ids = []
    for j, cls in enumerate(ids):
        feats = features_by_class[cls]
        n = feats.shape[0]
        if n == 0:
            raise DataError(f"neighbor class {cls} has no image features to sample")
        pick = int(rng.integers(n))
        sample_ids.append(pick)
        cols.append(feats[pick].astype(np.float64))
    support = np.stack(cols, axis=1)
    return NeighborContext(
        conditioning=conditioning,
        neighbor_indices=ids,
        neighbor_embeddings=emb,
        support_features=support,
        sample_ids=sample_ids,
    )


def sample_support(
    neighbor_ids, dataset: EmbeddingSet, rng: np.random.Generator, conditioning=None
) -> NeighborContext:
    """Sample one image feature per neighbor class from a dataset."""
    emb = dataset.embedding_columns(neighbor_ids)
    feats = {int(i): dataset.image_features[int(i)] for i in neighbor_ids}
    return build_context(neighbor_ids, emb, feats, rng, conditioning=conditioning)
