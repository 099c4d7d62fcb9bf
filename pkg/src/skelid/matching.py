"""Test-time retrieval: distances, k-reciprocal re-ranking, rank voting.

A query video is matched by computing cosine distances from each of its
segments to every gallery segment, optionally refining them with
k-reciprocal re-ranking, turning each segment's distance row into a
ranking over gallery identities, and merging the rankings with a
positional voting rule (Dowdall or Borda).
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .data import Segment, Topology
from .encoder import TwoStreamEncoder, encode_segments
from .train import pairwise_distances as _raw_pairwise


@dataclass(frozen=True)
class EmbeddingEntry:
    segment_id: str
    video_id: str
    person_id: str
    camera_id: str
    clothes_id: str
    vector: np.ndarray

    def __post_init__(self):
        v = np.ascontiguousarray(self.vector, dtype=np.float64)
        if v.ndim != 1 or v.size == 0:
            raise ValueError("vector must be a non-empty 1-D array")
        if not np.isfinite(v).all():
            raise ValueError(f"segment {self.segment_id!r}: non-finite vector")
        v.flags.writeable = False
        object.__setattr__(self, "vector", v)


class EmbeddingSet:
    """Ordered collection of segment embeddings with uniform dimension."""

    def __init__(self, entries: Sequence[EmbeddingEntry]):
        entries = list(entries)
        dims = {e.vector.size for e in entries}
        if len(dims) > 1:
            raise ValueError(f"mixed vector dimensions: {sorted(dims)}")
        ids = [e.segment_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate segment_id in embedding set")
        self.entries = entries
        self._vectors = (
            np.stack([e.vector for e in entries])
            if entries
            else np.zeros((0, 0))
        )

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    @property
    def segment_ids(self) -> list[str]:
        return [e.segment_id for e in self.entries]

    @property
    def person_ids(self) -> list[str]:
        return [e.person_id for e in self.entries]

    def subset(self, indices: Sequence[int]) -> "EmbeddingSet":
        return EmbeddingSet([self.entries[i] for i in indices])

    def by_video(self) -> dict[str, "EmbeddingSet"]:
        groups: dict[str, list[EmbeddingEntry]] = {}
        for e in self.entries:
            groups.setdefault(e.video_id, []).append(e)
        return {vid: EmbeddingSet(es) for vid, es in groups.items()}


def embed_segments(
    segments: Sequence[Segment], enc: TwoStreamEncoder, batch_size: int = 64
) -> EmbeddingSet:
    """Encode segments and bundle the descriptors with their labels."""
    vectors = encode_segments(segments, enc, batch_size=batch_size)
    entries = [
        EmbeddingEntry(
            segment_id=s.segment_id,
            video_id=s.video_id,
            person_id=s.person_id,
            camera_id=s.camera_id,
            clothes_id=s.clothes_id,
            vector=v,
        )
        for s, v in zip(segments, vectors)
    ]
    return EmbeddingSet(entries)


def write_embeddings(es: EmbeddingSet, path: str | Path):
    with open(path, "w", encoding="utf-8") as fh:
        for e in es:
            rec = {
                "segment_id": e.segment_id,
                "video_id": e.video_id,
                "person_id": e.person_id,
                "camera_id": e.camera_id,
                "clothes_id": e.clothes_id,
                "vector": e.vector.tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def read_embeddings(path: str | Path) -> EmbeddingSet:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}: line {line_no}: {exc}")
            try:
                entries.append(
                    EmbeddingEntry(
                        segment_id=str(rec["segment_id"]),
                        video_id=str(rec["video_id"]),
                        person_id=str(rec["person_id"]),
                        camera_id=str(rec["camera_id"]),
                        clothes_id=str(rec["clothes_id"]),
                        vector=np.asarray(rec["vector"], dtype=np.float64),
                    )
                )
            except KeyError as exc:
                raise ValueError(f"{path}: line {line_no}: missing key {exc}")
    return EmbeddingSet(entries)


def _vectors_of(x) -> np.ndarray:
    if isinstance(x, EmbeddingSet):
        return x.vectors
    return np.asarray(x, dtype=np.float64)


def pairwise_distances(queries, gallery) -> np.ndarray:
    """Cosine distance matrix, query rows by gallery columns."""
    q = _vectors_of(queries)
    g = _vectors_of(gallery)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: {q.shape} vs {g.shape}")
    return _raw_pairwise(q, g)


def write_distance_csv(
    dist: np.ndarray, row_ids: Sequence[str], col_ids: Sequence[str], path: str | Path
):
    if dist.shape != (len(row_ids), len(col_ids)):
        raise ValueError("id lists must match the matrix shape")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(["segment_id"] + list(col_ids)) + "\n")
        for rid, row in zip(row_ids, dist):
            fh.write(",".join([rid] + [repr(float(v)) for v in row]) + "\n")


# ---------------------------------------------------------------------------
# k-reciprocal re-ranking

def _k_reciprocal_neighbors(initial_rank: np.ndarray, i: int, k: int) -> np.ndarray:
    forward = initial_rank[i, : k + 1]
    backward = initial_rank[forward, : k + 1]
    rows = np.any(backward == i, axis=1)
    return forward[rows]


def k_reciprocal_rerank(
    queries, gallery, k1: int = 20, k2: int = 6, lam: float = 0.3
) -> np.ndarray:
    """Refine query-gallery distances with k-reciprocal neighborhood evidence.

    The neighbor graph is built over the union of query and gallery
    segments; encoding vectors weight reciprocal neighbors by exp(-d),
    local query expansion averages them over the k2 nearest, and the final
    matrix is lam * original + (1 - lam) * Jaccard distance.  lam=1 returns
    the original distances bit-exactly.
    """
    if not 1 <= k2 <= k1:
        raise ValueError("require k1 >= k2 >= 1")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lam must be in [0, 1]")
    q = _vectors_of(queries)
    g = _vectors_of(gallery)
    if q.shape[0] == 0 or g.shape[0] == 0:
        raise ValueError("re-ranking needs non-empty query and gallery sets")
    orig = pairwise_distances(q, g)

    n_q = q.shape[0]
    allv = np.vstack([q, g])
    n = allv.shape[0]
    if k1 + 1 > n:
        clamped = max(1, n - 1)
        warnings.warn(
            f"k1={k1} exceeds the {n}-segment neighbor pool; clamping to {clamped}",
            stacklevel=2,
        )
        k1 = clamped
        k2 = min(k2, k1)

    joint = _raw_pairwise(allv, allv)
    np.fill_diagonal(joint, 0.0)
    initial_rank = np.argsort(joint, axis=1, kind="stable")

    half = max(1, int(np.around(k1 / 2.0)))
    recip = [_k_reciprocal_neighbors(initial_rank, i, k1) for i in range(n)]
    v = np.zeros((n, n))
    for i in range(n):
        expanded = recip[i]
        for j in recip[i]:
            cand = _k_reciprocal_neighbors(initial_rank, int(j), half)
            if np.intersect1d(cand, recip[i]).size > (2.0 / 3.0) * cand.size:
                expanded = np.union1d(expanded, cand)
        weights = np.exp(-joint[i, expanded])
        v[i, expanded] = weights / weights.sum()
    if k2 > 1:
        v = np.stack([np.mean(v[initial_rank[i, :k2]], axis=0) for i in range(n)])

    nonzero_cols = [np.flatnonzero(v[:, j]) for j in range(n)]
    jaccard = np.zeros((n_q, n))
    for i in range(n_q):
        sum_min = np.zeros(n)
        for col in np.flatnonzero(v[i]):
            rows = nonzero_cols[col]
            sum_min[rows] += np.minimum(v[i, col], v[rows, col])
        # rows of v sum to 1, so sum(max) = 2 - sum(min)
        jaccard[i] = 1.0 - sum_min / (2.0 - sum_min)

    return lam * orig + (1.0 - lam) * jaccard[:, n_q:]


# ---------------------------------------------------------------------------
# rank matrices and voting

@dataclass(frozen=True)
class RankMatrix:
    """1-based ranks of each gallery identity per query segment row."""

    identities: tuple[str, ...]
    ranks: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.ranks, dtype=np.int64)
        if r.ndim != 2 or r.shape[1] != len(self.identities):
            raise ValueError("ranks must be (segments, identities)")
        if len(set(self.identities)) != len(self.identities):
            raise ValueError("duplicate identities")
        expect = np.arange(1, r.shape[1] + 1)
        for row in r:
            if not np.array_equal(np.sort(row), expect):
                raise ValueError("each row must be a permutation of 1..G")
        r.flags.writeable = False
        object.__setattr__(self, "ranks", r)

    @property
    def num_segments(self) -> int:
        return self.ranks.shape[0]


def segment_id_ranks(
    dist_row: np.ndarray, gallery_person_ids: Sequence[str]
) -> tuple[tuple[str, ...], np.ndarray]:
    """Rank all gallery identities for one query segment.

    Identity distance is the minimum over that identity's gallery
    segments; ties order identities by label.
    """
    dist_row = np.asarray(dist_row, dtype=np.float64)
    if dist_row.shape != (len(gallery_person_ids),):
        raise ValueError("one distance per gallery segment required")
    identities = tuple(sorted(set(gallery_person_ids)))
    col = {pid: i for i, pid in enumerate(identities)}
    id_dist = np.full(len(identities), np.inf)
    for d, pid in zip(dist_row, gallery_person_ids):
        j = col[pid]
        if d < id_dist[j]:
            id_dist[j] = d
    order = np.lexsort((np.arange(len(identities)), id_dist))
    ranks = np.empty(len(identities), dtype=np.int64)
    ranks[order] = np.arange(1, len(identities) + 1)
    return identities, ranks


def build_rank_matrix(dist: np.ndarray, gallery_person_ids: Sequence[str]) -> RankMatrix:
    dist = np.asarray(dist, dtype=np.float64)
    if dist.ndim != 2:
        raise ValueError("distance matrix must be 2-D")
    rows = []
    identities: tuple[str, ...] | None = None
    for row in dist:
        ids, ranks = segment_id_ranks(row, gallery_person_ids)
        identities = ids
        rows.append(ranks)
    if identities is None:
        raise ValueError("at least one query segment required")
    return RankMatrix(identities=identities, ranks=np.stack(rows))


@dataclass(frozen=True)
class VoteResult:
    """Identity scores and orderings; sample_order is filled by match_video."""

    identities: tuple[str, ...]
    scores: np.ndarray
    order: tuple[str, ...]
    sample_order: tuple[str, ...] | None = None

    def score_of(self, identity: str) -> float:
        return float(self.scores[self.identities.index(identity)])


def _ordered_result(identities: tuple[str, ...], scores: np.ndarray, ranks: np.ndarray) -> VoteResult:
    best_rank = ranks.min(axis=0)
    order_idx = np.lexsort((np.arange(len(identities)), best_rank, -scores))
    return VoteResult(
        identities=identities,
        scores=scores,
        order=tuple(identities[i] for i in order_idx),
    )


def dowdall_vote(rm: RankMatrix) -> VoteResult:
    """Sum of reciprocal ranks per identity, best first."""
    scores = (1.0 / rm.ranks).sum(axis=0)
    return _ordered_result(rm.identities, scores, rm.ranks)


def borda_vote(rm: RankMatrix, k: int) -> VoteResult:
    """Sum of max(k - rank, 0) per identity, best first."""
    if k < 1:
        raise ValueError("k must be at least 1")
    scores = np.maximum(k - rm.ranks, 0).astype(np.float64).sum(axis=0)
    return _ordered_result(rm.identities, scores, rm.ranks)


# ---------------------------------------------------------------------------
# video-level matching

@dataclass(frozen=True)
class MatchOptions:
    rerank: bool = True
    vote: str = "dowdall"
    k1: int = 20
    k2: int = 6
    lam: float = 0.3
    borda_k: int | None = None

    def __post_init__(self):
        if self.vote not in ("dowdall", "borda", "none"):
            raise ValueError("vote must be dowdall, borda, or none")
        if not 1 <= self.k2 <= self.k1:
            raise ValueError("require k1 >= k2 >= 1")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must be in [0, 1]")


def vote_on_ranks(rm: RankMatrix, opts: MatchOptions) -> VoteResult:
    if opts.vote == "dowdall":
        return dowdall_vote(rm)
    if opts.vote == "borda":
        k = opts.borda_k if opts.borda_k is not None else len(rm.identities)
        return borda_vote(rm, k)
    raise ValueError("vote_on_ranks needs a voting rule; use aggregate_nn for none")


def aggregate_nn(dist: np.ndarray, gallery_person_ids: Sequence[str]) -> VoteResult:
    """No-vote ordering: identities by their minimum distance over all rows."""
    dist = np.asarray(dist, dtype=np.float64)
    identities = tuple(sorted(set(gallery_person_ids)))
    col = {pid: i for i, pid in enumerate(identities)}
    id_dist = np.full(len(identities), np.inf)
    best = dist.min(axis=0)
    for d, pid in zip(best, gallery_person_ids):
        j = col[pid]
        if d < id_dist[j]:
            id_dist[j] = d
    order_idx = np.lexsort((np.arange(len(identities)), id_dist))
    return VoteResult(
        identities=identities,
        scores=-id_dist,
        order=tuple(identities[i] for i in order_idx),
    )


def rank_gallery_segments(
    result: VoteResult, dist: np.ndarray, gallery: EmbeddingSet, voted: bool
) -> tuple[str, ...]:
    """Order gallery segments for sample-level metrics.

    Voted results sort segments by their identity's score (ties by refined
    distance, then input order); without a vote the order is plain
    ascending distance.
    """
    seg_dist = np.asarray(dist).min(axis=0)
    n = len(gallery)
    if voted:
        col = {pid: i for i, pid in enumerate(result.identities)}
        seg_scores = np.array([result.scores[col[e.person_id]] for e in gallery])
        order_idx = np.lexsort((np.arange(n), seg_dist, -seg_scores))
    else:
        order_idx = np.lexsort((np.arange(n), seg_dist))
    ids = gallery.segment_ids
    return tuple(ids[i] for i in order_idx)


def match_video(
    query: EmbeddingSet, gallery: EmbeddingSet, opts: MatchOptions = MatchOptions()
) -> VoteResult:
    """Match one query video (all its segments) against the gallery."""
    if len(query) == 0:
        raise ValueError("query video has no segments")
    if len(gallery) == 0:
        raise ValueError("gallery is empty")
    if opts.rerank:
        dist = k_reciprocal_rerank(query, gallery, k1=opts.k1, k2=opts.k2, lam=opts.lam)
    else:
        dist = pairwise_distances(query, gallery)
    labels = gallery.person_ids
    if opts.vote == "none":
        result = aggregate_nn(dist, labels)
    else:
        result = vote_on_ranks(build_rank_matrix(dist, labels), opts)
    samples = rank_gallery_segments(result, dist, gallery, voted=opts.vote != "none")
    return replace(result, sample_order=samples)
