"""Exact nearest-neighbor matching and Recall@K scoring.

Search is exhaustive (full similarity matrix, stable sort), so reports are
bit-reproducible at desk scale. Ties are broken by database order, which is
the manifest order when descriptors come out of the aggregation pipeline.

Queries whose ground truth yields zero positives are excluded from the
recall denominator and listed in the report instead of silently counting
as failures; radius-based ground truth can legitimately produce them.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import aggregation
from .errors import ConfigError, ValidationError
from .feature_store import (
    DatasetManifest,
    DescriptorSet,
    FeatureMap,
    read_descriptor_set,
    write_descriptor_set,
)

METRICS = ("cosine", "euclidean")
DEFAULT_K_VALUES = (1, 5)


@dataclass(frozen=True)
class QueryRanking:
    """Top-ranked database ids for one query, best first."""

    query_id: str
    ranked_ids: tuple[str, ...]
    scores: tuple[float, ...]  # cosine: similarity (desc); euclidean: distance (asc)

    def __post_init__(self):
        if len(self.ranked_ids) != len(self.scores):
            raise ValidationError("one score per ranked id required")
        if len(set(self.ranked_ids)) != len(self.ranked_ids):
            raise ValidationError(f"{self.query_id}: duplicate ids in ranking")


@dataclass(frozen=True)
class QueryOutcome:
    ranked_ids: tuple[str, ...]
    first_correct_rank: int | None  # 1-based; None when no positive ranked


@dataclass(frozen=True)
class RetrievalReport:
    method_tag: str
    metric: str
    k_values: tuple[int, ...]
    recall: dict[int, float]
    per_query: dict[str, QueryOutcome]
    excluded_queries: tuple[str, ...]
    num_database: int
    gt_mode: str
    radius: float | None = None
    vocab_fingerprint: str | None = None
    descriptor_dim: int | None = None

    def __post_init__(self):
        if any(k < 1 for k in self.k_values):
            raise ValidationError("k_values must be positive")
        if list(self.k_values) != sorted(set(self.k_values)):
            raise ValidationError("k_values must be strictly increasing")
        vals = [self.recall[k] for k in self.k_values]
        if any(not 0.0 <= v <= 1.0 for v in vals):
            raise ValidationError("recall values must lie in [0, 1]")
        if any(b < a - 1e-12 for a, b in zip(vals, vals[1:])):
            raise ValidationError("recall must be non-decreasing in K")

    @property
    def num_queries_scored(self) -> int:
        return len(self.per_query) - len(self.excluded_queries)


def rank(
    db: DescriptorSet,
    queries: DescriptorSet,
    metric: str = "cosine",
    max_k: int = 1,
    jobs: int = 1,
) -> list[QueryRanking]:
    """Exact top-max_k database ids per query, in query-set order.

    Cosine ranks by descending similarity on L2-normalized vectors (an
    all-zero vector scores 0 against everything); euclidean ranks by
    ascending distance. Equal scores keep database order.
    """
    if metric not in METRICS:
        raise ConfigError(f"metric must be one of {METRICS}, got {metric!r}")
    if max_k < 1:
        raise ConfigError(f"max_k must be >= 1, got {max_k}")
    if len(db) == 0:
        raise ConfigError("database descriptor set is empty")
    if db.dim != queries.dim:
        raise ConfigError(f"query dim {queries.dim} != database dim {db.dim}")

    db_ids = db.ids
    db_mat = db.matrix().astype(np.float64)
    q_ids = queries.ids
    q_mat = queries.matrix().astype(np.float64)
    top = min(max_k, len(db_ids))

    if metric == "cosine":
        db_norm = np.linalg.norm(db_mat, axis=1, keepdims=True)
        db_mat = np.divide(db_mat, db_norm, out=db_mat, where=db_norm > 0)

    def rank_block(block: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        if metric == "cosine":
            norms = np.linalg.norm(block, axis=1, keepdims=True)
            unit = np.divide(block, norms, out=block.copy(), where=norms > 0)
            scores = unit @ db_mat.T
            order = np.argsort(-scores, axis=1, kind="stable")[:, :top]
        else:
            d2 = (
                np.sum(block * block, axis=1)[:, None]
                - 2.0 * (block @ db_mat.T)
                + np.sum(db_mat * db_mat, axis=1)[None, :]
            )
            np.maximum(d2, 0.0, out=d2)
            scores = np.sqrt(d2)
            order = np.argsort(scores, axis=1, kind="stable")[:, :top]
        picked = np.take_along_axis(scores, order, axis=1)
        return [(order[i], picked[i]) for i in range(block.shape[0])]

    if jobs > 1 and len(q_ids) > 1:
        blocks = np.array_split(q_mat, min(jobs, len(q_ids)), axis=0)
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(rank_block, blocks))
        rows = [row for part in parts for row in part]
    else:
        rows = rank_block(q_mat) if len(q_ids) else []

    out = []
    for qi, (order, scores) in zip(q_ids, rows):
        out.append(
            QueryRanking(
                query_id=qi,
                ranked_ids=tuple(db_ids[j] for j in order),
                scores=tuple(float(s) for s in scores),
            )
        )
    return out


def ground_truth_positives(manifest: DatasetManifest) -> dict[str, frozenset[str]]:
    """Positive database ids per query under the manifest's ground-truth mode."""
    db_entries = manifest.database_entries()
    out: dict[str, frozenset[str]] = {}
    for q in manifest.query_entries():
        if manifest.gt_mode == "explicit":
            out[q.image_id] = frozenset(manifest.explicit_positives[q.image_id])
        elif manifest.gt_mode == "metric":
            qp = np.asarray(q.position, dtype=np.float64)
            hits = [
                d.image_id
                for d in db_entries
                if math.dist(qp, d.position) <= manifest.radius
            ]
            out[q.image_id] = frozenset(hits)
        else:  # frame
            hits = [
                d.image_id
                for d in db_entries
                if abs(q.frame_index - d.frame_index) <= manifest.radius
            ]
            out[q.image_id] = frozenset(hits)
    return out


def recall_at_k(
    rankings: Sequence[QueryRanking],
    manifest: DatasetManifest,
    k_values: Sequence[int] = DEFAULT_K_VALUES,
    method_tag: str = "",
    metric: str = "cosine",
    vocab_fingerprint: str | None = None,
    descriptor_dim: int | None = None,
) -> RetrievalReport:
    """Score rankings against the manifest: correct at K if any top-K id is
    a positive. Zero-positive queries are excluded from the denominator."""
    if not rankings:
        raise ValidationError("no query rankings supplied")
    ks = tuple(sorted(set(int(k) for k in k_values)))
    if not ks or ks[0] < 1:
        raise ConfigError(f"k_values must be positive integers, got {k_values!r}")
    db_ids = {e.image_id for e in manifest.database_entries()}
    query_ids = {e.image_id for e in manifest.query_entries()}
    for r in rankings:
        if r.query_id not in query_ids:
            raise ValidationError(f"{r.query_id}: not a query in the manifest")
        unknown = [i for i in r.ranked_ids if i not in db_ids]
        if unknown:
            raise ValidationError(
                f"{r.query_id}: ranked ids not in database: {unknown[:5]}"
            )

    positives = ground_truth_positives(manifest)
    per_query: dict[str, QueryOutcome] = {}
    excluded = []
    hits_at = {k: 0 for k in ks}
    scored = 0
    for r in rankings:
        pos = positives[r.query_id]
        first = None
        for i, db_id in enumerate(r.ranked_ids):
            if db_id in pos:
                first = i + 1
                break
        per_query[r.query_id] = QueryOutcome(
            ranked_ids=r.ranked_ids, first_correct_rank=first
        )
        if not pos:
            excluded.append(r.query_id)
            continue
        scored += 1
        if first is not None:
            for k in ks:
                if first <= k:
                    hits_at[k] += 1
    if scored == 0:
        raise ConfigError(
            "every query has zero ground-truth positives; nothing to score "
            "(check radius / explicit_positives)"
        )
    recall = {k: hits_at[k] / scored for k in ks}
    return RetrievalReport(
        method_tag=method_tag,
        metric=metric,
        k_values=ks,
        recall=recall,
        per_query=per_query,
        excluded_queries=tuple(excluded),
        num_database=len(db_ids),
        gt_mode=manifest.gt_mode,
        radius=manifest.radius,
        vocab_fingerprint=vocab_fingerprint,
        descriptor_dim=descriptor_dim,
    )


def _dataset_digest(maps: Sequence[FeatureMap]) -> str:
    h = hashlib.sha256()
    for m in maps:
        h.update(m.image_id.encode("utf-8"))
        h.update(np.asarray(m.data.shape, dtype="<i8").tobytes())
        h.update(m.data.tobytes())
    return h.hexdigest()


def _cached_aggregate(
    maps: Sequence[FeatureMap],
    method,
    jobs: int,
    cache_dir: str | Path | None,
) -> DescriptorSet:
    if cache_dir is None:
        return aggregation.aggregate_dataset(maps, method, jobs=jobs)
    fingerprint = getattr(getattr(method, "vocabulary", None), "fingerprint", "")
    key_src = "\x00".join([method.method_tag, fingerprint or "", _dataset_digest(maps)])
    key = hashlib.sha256(key_src.encode("utf-8")).hexdigest()
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    path = cache_dir / f"{key}.anyd"
    if path.exists():
        cached = read_descriptor_set(path)
        if cached.method_tag == method.method_tag and cached.ids == [
            m.image_id for m in maps
        ]:
            return cached
    dset = aggregation.aggregate_dataset(maps, method, jobs=jobs)
    # Atomic replace: concurrent evaluators may race on the same key.
    fd, tmp = tempfile.mkstemp(dir=cache_dir, suffix=".anyd.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            write_descriptor_set(dset, fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return dset


def evaluate(
    features_db: Mapping[str, FeatureMap],
    features_q: Mapping[str, FeatureMap],
    method,
    manifest: DatasetManifest,
    k_values: Sequence[int] = DEFAULT_K_VALUES,
    metric: str = "cosine",
    pca_dim: int | None = None,
    pca_whiten: bool = False,
    jobs: int = 1,
    cache_dir: str | Path | None = None,
) -> RetrievalReport:
    """Aggregate manifest features, optionally PCA-project (model fit on the
    database split only), rank, and score.

    `method` is a PoolingConfig or VladConfig. Aggregated descriptors are
    cached under cache_dir keyed by method tag, vocabulary fingerprint, and
    feature content hash.
    """
    from .projection import fit_pca, project  # local import to avoid cycle

    def pull(source: Mapping[str, FeatureMap], entries) -> list[FeatureMap]:
        maps = []
        for e in entries:
            if e.image_id not in source:
                raise ValidationError(f"no feature map for {e.image_id!r}")
            maps.append(source[e.image_id])
        return maps

    db_maps = pull(features_db, manifest.database_entries())
    q_maps = pull(features_q, manifest.query_entries())
    db_set = _cached_aggregate(db_maps, method, jobs, cache_dir)
    q_set = _cached_aggregate(q_maps, method, jobs, cache_dir)
    if pca_dim is not None:
        model = fit_pca(db_set, pca_dim, whiten=pca_whiten)
        db_set = project(model, db_set)
        q_set = project(model, q_set)
    return evaluate_descriptors(db_set, q_set, manifest, k_values, metric, jobs=jobs)


def evaluate_descriptors(
    db_set: DescriptorSet,
    q_set: DescriptorSet,
    manifest: DatasetManifest,
    k_values: Sequence[int] = DEFAULT_K_VALUES,
    metric: str = "cosine",
    jobs: int = 1,
) -> RetrievalReport:
    """Rank + score precomputed descriptors against a manifest."""
    db_ids = [e.image_id for e in manifest.database_entries()]
    q_ids = [e.image_id for e in manifest.query_entries()]
    db_set = db_set.subset(db_ids)  # manifest order defines tie-breaking
    q_set = q_set.subset(q_ids)
    ks = tuple(sorted(set(int(k) for k in k_values)))
    if not ks or ks[0] < 1:
        raise ConfigError(f"k_values must be positive integers, got {k_values!r}")
    rankings = rank(db_set, q_set, metric=metric, max_k=ks[-1], jobs=jobs)
    return recall_at_k(
        rankings,
        manifest,
        ks,
        method_tag=db_set.method_tag,
        metric=metric,
        vocab_fingerprint=db_set.vocab_fingerprint,
        descriptor_dim=db_set.dim,
    )


def report_to_dict(report: RetrievalReport) -> dict:
    """Canonical JSON-ready form; no timestamps, keys sort stably."""
    return {
        "method_tag": report.method_tag,
        "metric": report.metric,
        "gt_mode": report.gt_mode,
        "radius": report.radius,
        "descriptor_dim": report.descriptor_dim,
        "vocab_fingerprint": report.vocab_fingerprint,
        "num_database": report.num_database,
        "num_queries_scored": report.num_queries_scored,
        "k_values": list(report.k_values),
        "recall": {str(k): report.recall[k] for k in report.k_values},
        "excluded_queries": list(report.excluded_queries),
        "per_query": {
            qid: {
                "ranked": list(out.ranked_ids),
                "first_correct_rank": out.first_correct_rank,
            }
            for qid, out in report.per_query.items()
        },
    }


def write_report_json(report: RetrievalReport, destination: str | Path) -> None:
    text = json.dumps(report_to_dict(report), sort_keys=True, indent=2) + "\n"
    Path(destination).write_text(text, encoding="utf-8")


def format_report_text(report: RetrievalReport) -> str:
    """Aligned human-readable summary."""
    lines = [
        f"method:            {report.method_tag}",
        f"metric:            {report.metric}",
        f"descriptor dim:    {report.descriptor_dim}",
        f"ground truth:      {report.gt_mode}"
        + (f" (radius {report.radius:g})" if report.radius is not None else ""),
        f"database size:     {report.num_database}",
        f"queries scored:    {report.num_queries_scored}",
        f"queries excluded:  {len(report.excluded_queries)}",
    ]
    if report.vocab_fingerprint:
        lines.append(f"vocab fingerprint: {report.vocab_fingerprint}")
    lines.append("")
    for k in report.k_values:
        lines.append(f"  R@{k:<4d} {report.recall[k]:.4f}")
    if report.excluded_queries:
        lines.append("")
        lines.append("excluded (no ground-truth positives):")
        for qid in report.excluded_queries:
            lines.append(f"  {qid}")
    return "\n".join(lines) + "\n"


__all__ = [
    "DEFAULT_K_VALUES",
    "METRICS",
    "QueryOutcome",
    "QueryRanking",
    "RetrievalReport",
    "evaluate",
    "evaluate_descriptors",
    "format_report_text",
    "ground_truth_positives",
    "rank",
    "recall_at_k",
    "report_to_dict",
    "write_report_json",
]
