"""Retrieval metrics (CMC, mAP) under clothes-changing protocols, plus
the re-ranking / re-voting ablation grid.

A query unit is one video; its segments are matched together and produce
one ranked list of gallery segments.  Protocol masks then decide which
gallery samples count for that query, and queries left without any
relevant retained sample are excluded from metric means.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .matching import (
    EmbeddingSet,
    MatchOptions,
    aggregate_nn,
    build_rank_matrix,
    k_reciprocal_rerank,
    pairwise_distances,
    rank_gallery_segments,
    vote_on_ranks,
)

MAX_CMC_K = 10


@dataclass(frozen=True)
class ProtocolConfig:
    """mode is "CC" (cross-clothes only) or "Standard" (no clothes rule)."""

    mode: str = "CC"
    camera_filter: bool = False

    def __post_init__(self):
        if self.mode not in ("CC", "Standard"):
            raise ValueError('mode must be "CC" or "Standard"')


def apply_protocol(
    query_labels: Sequence[tuple[str, str, str]],
    gallery_labels: Sequence[tuple[str, str, str]],
    protocol: ProtocolConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-query gallery masks plus query keep flags.

    Labels are (person_id, clothes_id, camera_id) triples, one per query
    video and per gallery sample.  Under CC a query's gallery samples with
    the same person and the same clothes are masked out, and queries
    without any remaining same-person sample are dropped.  The optional
    camera rule additionally masks same-person same-camera samples.
    """
    q_person = np.array([l[0] for l in query_labels])
    q_clothes = np.array([l[1] for l in query_labels])
    q_camera = np.array([l[2] for l in query_labels])
    g_person = np.array([l[0] for l in gallery_labels])
    g_clothes = np.array([l[1] for l in gallery_labels])
    g_camera = np.array([l[2] for l in gallery_labels])

    same_person = q_person[:, None] == g_person[None, :]
    masks = np.ones((len(query_labels), len(gallery_labels)), dtype=bool)
    if protocol.mode == "CC":
        masks &= ~(same_person & (q_clothes[:, None] == g_clothes[None, :]))
    if protocol.camera_filter:
        masks &= ~(same_person & (q_camera[:, None] == g_camera[None, :]))
    if protocol.mode == "CC":
        keep = (masks & same_person).any(axis=1)
    else:
        keep = np.ones(len(query_labels), dtype=bool)
    return keep, masks


def _included_queries(
    rankings: Sequence[np.ndarray],
    query_persons: Sequence[str],
    gallery_persons: Sequence[str],
    masks: np.ndarray,
    keep: np.ndarray,
) -> list[int]:
    g_person = np.asarray(gallery_persons)
    out = []
    for q in range(len(rankings)):
        if not keep[q]:
            continue
        relevant = masks[q] & (g_person == query_persons[q])
        if relevant.any():
            out.append(q)
    return out


def cmc_rank_k(
    rankings: Sequence[np.ndarray],
    query_persons: Sequence[str],
    gallery_persons: Sequence[str],
    masks: np.ndarray,
    keep: np.ndarray,
    k: int,
) -> float:
    """Fraction of scored queries with a correct sample in the top k retained."""
    if k < 1:
        raise ValueError("k must be at least 1")
    g_person = np.asarray(gallery_persons)
    included = _included_queries(rankings, query_persons, gallery_persons, masks, keep)
    if not included:
        return 0.0
    hits = 0
    for q in included:
        ranked = np.asarray(rankings[q])
        retained = ranked[masks[q][ranked]]
        top = retained[:k]
        if (g_person[top] == query_persons[q]).any():
            hits += 1
    return hits / len(included)


def average_precision(
    ranked: np.ndarray, mask: np.ndarray, relevant: np.ndarray
) -> float | None:
    """AP for one query; None when no relevant sample survives the mask."""
    retained = ranked[mask[ranked]]
    rel = relevant[retained]
    if not rel.any():
        return None
    positions = np.flatnonzero(rel) + 1
    precisions = np.arange(1, len(positions) + 1) / positions
    return float(np.mean(precisions))


def mean_ap(
    rankings: Sequence[np.ndarray],
    query_persons: Sequence[str],
    gallery_persons: Sequence[str],
    masks: np.ndarray,
    keep: np.ndarray,
) -> tuple[float, list[float]]:
    """Mean AP over scored queries plus the per-query values."""
    g_person = np.asarray(gallery_persons)
    aps = []
    for q in range(len(rankings)):
        if not keep[q]:
            continue
        relevant = g_person == query_persons[q]
        ap = average_precision(np.asarray(rankings[q]), masks[q], relevant)
        if ap is not None:
            aps.append(ap)
    if not aps:
        return 0.0, []
    return float(np.mean(aps)), aps


@dataclass(frozen=True)
class EvalReport:
    config: str
    protocol: str
    cmc: tuple[float, ...]
    mean_ap: float
    ap_per_query: tuple[float, ...]
    n_queries: int
    n_gallery: int

    def __post_init__(self):
        for v in (*self.cmc, self.mean_ap, *self.ap_per_query):
            if not 0.0 <= v <= 1.0:
                raise ValueError("metrics must lie in [0, 1]")

    @property
    def rank1(self) -> float:
        return self.cmc[0]

    @property
    def rank5(self) -> float:
        return self.cmc[4]

    @property
    def rank10(self) -> float:
        return self.cmc[9]


def full_distances(
    query_set: EmbeddingSet, gallery_set: EmbeddingSet, opts: MatchOptions
) -> np.ndarray:
    """Query-segment by gallery-segment distances for a whole evaluation.

    With re-ranking on, every query segment participates in one joint
    neighbor graph with the gallery.
    """
    if opts.rerank:
        return k_reciprocal_rerank(
            query_set, gallery_set, k1=opts.k1, k2=opts.k2, lam=opts.lam
        )
    return pairwise_distances(query_set, gallery_set)


def rank_query_videos(
    dist: np.ndarray,
    query_set: EmbeddingSet,
    gallery_set: EmbeddingSet,
    opts: MatchOptions,
) -> tuple[list[str], list[np.ndarray], list[tuple[str, str, str]]]:
    """Per query video: ranked gallery sample indices plus the video labels."""
    seg_index = {sid: i for i, sid in enumerate(gallery_set.segment_ids)}
    row_of = {sid: i for i, sid in enumerate(query_set.segment_ids)}
    labels = gallery_set.person_ids
    video_ids, rankings, video_labels = [], [], []
    for vid, group in query_set.by_video().items():
        rows = dist[[row_of[s] for s in group.segment_ids]]
        if opts.vote == "none":
            result = aggregate_nn(rows, labels)
        else:
            result = vote_on_ranks(build_rank_matrix(rows, labels), opts)
        order = rank_gallery_segments(result, rows, gallery_set, voted=opts.vote != "none")
        first = group.entries[0]
        video_ids.append(vid)
        rankings.append(np.array([seg_index[s] for s in order], dtype=np.int64))
        video_labels.append((first.person_id, first.clothes_id, first.camera_id))
    return video_ids, rankings, video_labels


def evaluate(
    query_set: EmbeddingSet,
    gallery_set: EmbeddingSet,
    opts: MatchOptions,
    protocol: ProtocolConfig,
    config_name: str | None = None,
    dist: np.ndarray | None = None,
) -> EvalReport:
    if len(query_set) == 0 or len(gallery_set) == 0:
        raise ValueError("evaluation needs non-empty query and gallery sets")
    if dist is None:
        dist = full_distances(query_set, gallery_set, opts)
    _, rankings, video_labels = rank_query_videos(dist, query_set, gallery_set, opts)
    gallery_labels = [
        (e.person_id, e.clothes_id, e.camera_id) for e in gallery_set.entries
    ]
    keep, masks = apply_protocol(video_labels, gallery_labels, protocol)
    q_persons = [l[0] for l in video_labels]
    g_persons = [l[0] for l in gallery_labels]
    cmc = tuple(
        cmc_rank_k(rankings, q_persons, g_persons, masks, keep, k)
        for k in range(1, MAX_CMC_K + 1)
    )
    mv, aps = mean_ap(rankings, q_persons, g_persons, masks, keep)
    included = _included_queries(rankings, q_persons, g_persons, masks, keep)
    if config_name is None:
        config_name = ("rr+" if opts.rerank else "") + (
            "nn" if opts.vote == "none" else opts.vote
        )
    return EvalReport(
        config=config_name,
        protocol=protocol.mode,
        cmc=cmc,
        mean_ap=mv,
        ap_per_query=tuple(aps),
        n_queries=len(included),
        n_gallery=len(gallery_set),
    )


ABLATION_GRID = (
    (False, "none"),
    (False, "dowdall"),
    (False, "borda"),
    (True, "none"),
    (True, "dowdall"),
    (True, "borda"),
)


def run_ablation(
    query_set: EmbeddingSet,
    gallery_set: EmbeddingSet,
    protocol: ProtocolConfig,
    base: MatchOptions = MatchOptions(),
) -> list[EvalReport]:
    """Six configurations: re-ranking on/off crossed with the voting rules.

    The plain and re-ranked distance matrices are each computed once and
    shared across voting rules.
    """
    from dataclasses import replace

    dist_cache: dict[bool, np.ndarray] = {}
    reports = []
    for rerank, vote in ABLATION_GRID:
        opts = replace(base, rerank=rerank, vote=vote)
        if rerank not in dist_cache:
            dist_cache[rerank] = full_distances(query_set, gallery_set, opts)
        reports.append(
            evaluate(
                query_set,
                gallery_set,
                opts,
                protocol,
                dist=dist_cache[rerank],
            )
        )
    return reports


def write_report_csv(reports: Sequence[EvalReport], path: str | Path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["config", "protocol", "rank1", "rank5", "rank10", "mAP", "n_queries", "n_gallery"]
        )
        for r in reports:
            writer.writerow(
                [
                    r.config,
                    r.protocol,
                    repr(float(r.rank1)),
                    repr(float(r.rank5)),
                    repr(float(r.rank10)),
                    repr(float(r.mean_ap)),
                    r.n_queries,
                    r.n_gallery,
                ]
            )


def format_report_text(reports: Sequence[EvalReport]) -> str:
    """Aligned table with metrics as percentages at one decimal."""
    header = f"{'config':<14}{'protocol':<10}{'R-1':>7}{'R-5':>7}{'R-10':>7}{'mAP':>7}{'queries':>9}{'gallery':>9}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.config:<14}{r.protocol:<10}"
            f"{100 * r.rank1:>7.1f}{100 * r.rank5:>7.1f}{100 * r.rank10:>7.1f}"
            f"{100 * r.mean_ap:>7.1f}{r.n_queries:>9d}{r.n_gallery:>9d}"
        )
    return "\n".join(lines)
