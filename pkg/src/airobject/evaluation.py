"""Half-split matching benchmark: confusion counts, P/R/F1, PR curves, AUC.

Each track's first half is the query and the second half the reference.
Every (query, reference) pair within the same video is thresholded on cosine
similarity: predicted-match iff C >= rho. Counts are pooled globally across
videos (cross-video pairs are never compared); a per-video breakdown is
reported alongside.

Degenerate-count conventions are fixed so curves are total functions:
precision is 1 when nothing is predicted, recall is 1 when no positive pairs
exist, and F1 is 0 when precision + recall is 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diff_core as dc
from .feature_store import TrackSet, split_track
from .graph_encoder import EncoderParams, encode_frame, single_frame_descriptor
from .temporal_encoder import (
    DescriptorRecord,
    TemporalParams,
    average_descriptor_baseline,
    encode_sequence,
)
from .topo_graph import frame_graphs_for_track

BASELINE_MODES = ("airobject", "2d", "3d")


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5  # rho for the point metrics
    grid_size: int = 1001  # evenly spaced thresholds over [-1, 1]
    seq_len_cap: int | None = None  # use only the first min(cap, half) frames
    baseline: str = "airobject"
    unique_features: bool = False
    unique_selector: str = "location"
    unique_threshold: float = 0.9
    best_match_only: bool = False
    split_fraction: float = 0.5

    def __post_init__(self):
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must be in [-1, 1]")
        if self.grid_size < 2:
            raise ValueError("grid needs at least 2 thresholds")
        if self.baseline not in BASELINE_MODES:
            raise ValueError(f"baseline must be one of {BASELINE_MODES}")
        if self.seq_len_cap is not None and self.seq_len_cap < 1:
            raise ValueError("seq_len_cap must be >= 1")

    def grid(self) -> np.ndarray:
        return np.linspace(-1.0, 1.0, self.grid_size)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def as_dict(self) -> dict:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


@dataclass
class EvalReport:
    config: EvalConfig
    thresholds: np.ndarray
    counts: list[ConfusionCounts]  # one per threshold
    point_counts: ConfusionCounts  # at config.threshold
    precision: float
    recall: float
    f1: float
    curve: list[tuple[float, float]]  # (recall, precision), increasing rho
    auc_value: float
    per_video: dict[str, dict] = field(default_factory=dict)

    def summary(self) -> str:
        return (
            f"P={self.precision:.4f} R={self.recall:.4f} F1={self.f1:.4f} "
            f"AUC={self.auc_value:.4f} @ rho={self.config.threshold}"
        )


# -- core metric operations -----------------------------------------------------


def cosine_similarity(a, b) -> float:
    """a.b / (|a||b|), clamped into [-1, 1] against rounding."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= dc.EPS_NORM or nb <= dc.EPS_NORM:
        raise dc.ZeroVectorError("cosine similarity of a (near-)zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def _paired_similarities(
    queries: list[DescriptorRecord], references: list[DescriptorRecord]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, list[str]]:
    """All within-video (query, reference) pairs: similarities, same-id flags,
    best-match flags (per query, within its video), and pair video ids."""
    by_video: dict[str, list[DescriptorRecord]] = {}
    for ref in references:
        by_video.setdefault(ref.video_id, []).append(ref)

    sims: list[float] = []
    positive: list[bool] = []
    best: list[bool] = []
    videos: list[str] = []
    for q in queries:
        refs = by_video.get(q.video_id, [])
        if not refs:
            continue
        row = [cosine_similarity(q.vector, r.vector) for r in refs]
        top = int(np.argmax(row))
        for j, (r, s) in enumerate(zip(refs, row)):
            sims.append(s)
            positive.append(r.object_id == q.object_id)
            best.append(j == top)
            videos.append(q.video_id)
    return (
        np.asarray(sims, dtype=np.float64),
        np.asarray(positive, dtype=bool),
        np.asarray(best, dtype=bool),
        videos,
    )


def _counts_at(
    sims: np.ndarray, positive: np.ndarray, best: np.ndarray, rho: float, best_match_only: bool
) -> ConfusionCounts:
    predicted = sims >= rho
    if best_match_only:
        predicted &= best
    tp = int(np.sum(predicted & positive))
    fp = int(np.sum(predicted & ~positive))
    fn = int(np.sum(~predicted & positive))
    tn = int(np.sum(~predicted & ~positive))
    return ConfusionCounts(tp, fp, fn, tn)


def pairwise_match(
    queries: list[DescriptorRecord],
    references: list[DescriptorRecord],
    rho: float,
    best_match_only: bool = False,
) -> ConfusionCounts:
    """Confusion counts over all within-video query-reference pairs at rho."""
    sims, positive, best, _ = _paired_similarities(queries, references)
    return _counts_at(sims, positive, best, rho, best_match_only)


def f1_score(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if precision + recall <= 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def precision_recall_f1(counts: ConfusionCounts) -> tuple[float, float, float]:
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp > 0 else 1.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn > 0 else 1.0
    return p, r, f1_score(p, r)


def pr_curve(
    queries: list[DescriptorRecord],
    references: list[DescriptorRecord],
    grid: np.ndarray,
    best_match_only: bool = False,
) -> list[tuple[float, float]]:
    """(recall, precision) per threshold, in increasing-threshold order.

    Similarities are computed once and reused across the grid.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 1 or grid.size < 1 or np.any(np.diff(grid) <= 0):
        raise ValueError("grid must be strictly increasing")
    sims, positive, best, _ = _paired_similarities(queries, references)
    points = []
    for rho in grid:
        p, r, _ = precision_recall_f1(_counts_at(sims, positive, best, rho, best_match_only))
        points.append((r, p))
    return points


def auc(curve: list[tuple[float, float]]) -> float:
    """Trapezoidal area under a (recall, precision) point set.

    Points are sorted by recall, duplicate recalls collapse to their max
    precision, and the curve is extended to recall 0 with the first point's
    precision. Integration runs to the maximum achieved recall.
    """
    if len(curve) < 2:
        raise ValueError("AUC needs at least 2 curve points")
    by_recall: dict[float, float] = {}
    for r, p in curve:
        by_recall[r] = max(p, by_recall.get(r, 0.0))
    recalls = sorted(by_recall)
    precisions = [by_recall[r] for r in recalls]
    if recalls[0] > 0.0:
        recalls.insert(0, 0.0)
        precisions.insert(0, precisions[0])
    area = float(np.trapezoid(precisions, recalls))
    return float(np.clip(area, 0.0, 1.0))


# -- benchmark harness ------------------------------------------------------------


def _encode_half(track_half, encoder, temporal, cfg, half_name) -> DescriptorRecord:
    graphs = frame_graphs_for_track(track_half, encoder.config)
    if cfg.seq_len_cap is not None:
        graphs = graphs[: cfg.seq_len_cap]
    if cfg.baseline == "airobject":
        vec = encode_sequence(
            graphs,
            encoder,
            temporal,
            unique_threshold=cfg.unique_threshold if cfg.unique_features else None,
            unique_selector=cfg.unique_selector,
        ).data.copy()
    elif cfg.baseline == "2d":
        vec = single_frame_descriptor(encode_frame(graphs[0], encoder), encoder).data.copy()
    else:  # 3d
        per_frame = [
            single_frame_descriptor(encode_frame(g, encoder), encoder).data for g in graphs
        ]
        vec = average_descriptor_baseline(per_frame)
    return DescriptorRecord(track_half.video_id, track_half.object_id, half_name, vec)


def encode_halves(
    tracks: TrackSet,
    encoder: EncoderParams,
    temporal: TemporalParams,
    cfg: EvalConfig,
    threads: int = 1,
) -> tuple[list[DescriptorRecord], list[DescriptorRecord]]:
    """Half-split every track and encode both halves per the configured mode.

    - "airobject": temporal sequence descriptor over the (capped) half.
    - "2d": single-frame descriptor of the half's first frame.
    - "3d": normalized average of per-frame single-frame descriptors.

    Encoding is pure per track; `threads` > 1 fans tracks out to a thread
    pool, preserving track order in the output.
    """
    jobs = []
    for track in tracks.tracks:
        q_track, r_track = split_track(track, cfg.split_fraction)
        jobs.append(("query", q_track))
        jobs.append(("reference", r_track))

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(
                pool.map(
                    lambda job: _encode_half(job[1], encoder, temporal, cfg, job[0]), jobs
                )
            )
    else:
        records = [_encode_half(half, encoder, temporal, cfg, name) for name, half in jobs]

    queries = [rec for rec in records if rec.half == "query"]
    references = [rec for rec in records if rec.half == "reference"]
    return queries, references


def evaluate_descriptors(
    queries: list[DescriptorRecord],
    references: list[DescriptorRecord],
    cfg: EvalConfig,
) -> EvalReport:
    """Assemble the full report from already-encoded descriptor halves."""
    sims, positive, best, videos = _paired_similarities(queries, references)
    grid = cfg.grid()
    counts = [_counts_at(sims, positive, best, rho, cfg.best_match_only) for rho in grid]
    curve = []
    for c in counts:
        p, r, _ = precision_recall_f1(c)
        curve.append((r, p))
    point = _counts_at(sims, positive, best, cfg.threshold, cfg.best_match_only)
    p, r, f1 = precision_recall_f1(point)

    per_video: dict[str, dict] = {}
    for video in sorted(set(videos)):
        mask = np.asarray([v == video for v in videos])
        vc = _counts_at(sims[mask], positive[mask], best[mask], cfg.threshold, cfg.best_match_only)
        vp, vr, vf1 = precision_recall_f1(vc)
        per_video[video] = {
            **vc.as_dict(),
            "precision": vp,
            "recall": vr,
            "f1": vf1,
        }

    return EvalReport(
        config=cfg,
        thresholds=grid,
        counts=counts,
        point_counts=point,
        precision=p,
        recall=r,
        f1=f1,
        curve=curve,
        auc_value=auc(curve),
        per_video=per_video,
    )


def run_benchmark(
    tracks: TrackSet,
    encoder: EncoderParams,
    temporal: TemporalParams,
    cfg: EvalConfig,
    threads: int = 1,
) -> EvalReport:
    """Half-split protocol end to end: encode both halves, sweep, report."""
    queries, references = encode_halves(tracks, encoder, temporal, cfg, threads=threads)
    return evaluate_descriptors(queries, references, cfg)
