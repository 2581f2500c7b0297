"""Exact top-k cosine retrieval over flattened masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from drrg.errors import ContractError


@dataclass
class RetrievalResult:
    query_id: str
    hits: list[tuple[str, float]]

    @property
    def ids(self) -> list[str]:
        return [h[0] for h in self.hits]


class RetrievalIndex:
    """Row-major flattened vectors with precomputed norms, in insertion order."""

    def __init__(self, ids, vectors):
        vectors = np.asarray(vectors, dtype=np.float64)
        ids = list(ids)
        if vectors.ndim != 2:
            vectors = vectors.reshape(len(ids), -1)
        if len(ids) != len(vectors):
            raise ContractError(f"{len(ids)} ids for {len(vectors)} vectors")
        if len(set(ids)) != len(ids):
            raise ContractError("duplicate ids in retrieval index")
        self.ids = ids
        self.vectors = vectors
        self.norms = np.linalg.norm(vectors, axis=1)
        self.zero = self.norms == 0
        self._pos = {sid: i for i, sid in enumerate(ids)}

    @classmethod
    def from_pool(cls, entries) -> "RetrievalIndex":
        return cls([sid for sid, _ in entries], np.stack([np.asarray(a, dtype=np.float64).ravel() for _, a in entries]))

    @property
    def dimension(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def vector(self, sample_id: str) -> np.ndarray:
        return self.vectors[self._pos[sample_id]]

    def scores(self, vec) -> np.ndarray:
        vec = np.asarray(vec, dtype=np.float64).ravel()
        if vec.shape[0] != self.dimension:
            raise ContractError(f"query dimension {vec.shape[0]} != index dimension {self.dimension}")
        qn = np.linalg.norm(vec)
        if qn == 0:
            return np.zeros(len(self))
        denom = np.where(self.zero, 1.0, self.norms * qn)
        out = np.where(self.zero, 0.0, (self.vectors @ vec) / denom)
        return np.clip(out, -1.0, 1.0)

    def query(self, vec, k: int = 3, exclude_id: str | None = None, query_id: str = "") -> RetrievalResult:
        if k < 1:
            raise ContractError(f"k must be >= 1, got {k}")
        s = self.scores(vec)
        keep = np.ones(len(self), dtype=bool)
        if exclude_id is not None and exclude_id in self._pos:
            keep[self._pos[exclude_id]] = False
        cand = np.flatnonzero(keep)
        # stable sort on -score keeps insertion order among ties
        order = cand[np.argsort(-s[cand], kind="stable")][:k]
        return RetrievalResult(query_id, [(self.ids[i], float(s[i])) for i in order])


def query(index: RetrievalIndex, dom, k: int = 3, exclude_id: str | None = None) -> RetrievalResult:
    return index.query(dom, k, exclude_id, query_id=exclude_id or "")


def downsample(image: np.ndarray, size: int = 16) -> np.ndarray:
    """Block-average a (1, H, W) image to (size, size) for the pixel baseline."""
    img = np.asarray(image, dtype=np.float64).reshape(image.shape[-2:])
    h, w = img.shape
    if h % size or w % size:
        raise ContractError(f"image {h}x{w} not divisible into {size}x{size} blocks")
    return img.reshape(size, h // size, size, w // size).mean(axis=(1, 3))


def pixel_index(corpus, size: int = 16) -> RetrievalIndex:
    """General-retrieval baseline: cosine over downsampled raw pixels."""
    return RetrievalIndex([s.id for s in corpus], np.stack([downsample(s.image, size).ravel() for s in corpus]))


def jaccard(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a, dtype=bool), np.asarray(b, dtype=bool)
    union = (a | b).sum()
    return 1.0 if union == 0 else float((a & b).sum() / union)


@dataclass
class MatchStats:
    jaccard: float
    random_baseline: float
    n: int


def disease_match_rate(index: RetrievalIndex, queries, labels: dict, exclude_self: bool = True) -> MatchStats:
    """Mean top-1 label Jaccard, with the uniform-random expectation as baseline.

    ``queries`` is a list of (query_id, vector). The baseline averages the
    Jaccard over every eligible pool entry, which is the exact expectation of
    a uniformly random pick.
    """
    pool = np.stack([np.asarray(labels[sid], dtype=bool) for sid in index.ids])
    top, base = [], []
    for qid, vec in queries:
        res = index.query(vec, 1, qid if exclude_self else None, query_id=qid)
        q = np.asarray(labels[qid], dtype=bool)
        top.append(jaccard(q, labels[res.hits[0][0]]) if res.hits else 0.0)
        inter = (pool & q).sum(axis=1)
        union = (pool | q).sum(axis=1)
        jac = np.where(union == 0, 1.0, inter / np.maximum(union, 1))
        if exclude_self and qid in index._pos:
            jac = np.delete(jac, index._pos[qid])
        base.append(float(jac.mean()) if len(jac) else 0.0)
    if not top:
        raise ContractError("disease_match_rate needs at least one query")
    return MatchStats(float(np.mean(top)), float(np.mean(base)), len(top))
