"""Topological graph construction for one object-frame.

Keypoint positions are normalized to [-1, 1] with the bbox center as origin,
triangulated with an incremental Bowyer-Watson Delaunay pass, and turned into
a symmetric 0/1 adjacency matrix with self-loops. Degenerate inputs (fewer
than 3 points, collinear points) fall back to a fully connected graph.

The geometric predicates (orientation, in-circle) are evaluated in floating
point with a forward error bound and re-evaluated in exact rational
arithmetic when the float result is ambiguous, so the triangulation is exact
up to the input coordinates. Near-cocircular ties are resolved by insertion
order, which is the input index order (lowest index first).
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from math import cos, sin, pi
from typing import TYPE_CHECKING

import numpy as np

from .feature_store import FrameObservation

if TYPE_CHECKING:  # adjacency construction only reads cfg.fully_connected
    from .graph_encoder import ModelConfig

EPS_GEOM = 1e-9  # circumcircle tolerance on normalized coordinates
EPS_DUP = 1e-7  # perturbation applied to duplicate positions

# float error-bound coefficients (machine epsilon based)
_EPS = np.finfo(np.float64).eps
_ORIENT_BOUND = 4.0 * _EPS
_INCIRCLE_BOUND = 12.0 * _EPS


class DegenerateGeometryError(ValueError):
    """Triangulation input is degenerate (N < 3 or all points collinear)."""


class DegenerateBboxError(ValueError):
    """The bounding box has zero width or height."""


@dataclass(frozen=True)
class Triangulation:
    """Triangles as sorted index triples into the input point list."""

    triangles: list[tuple[int, int, int]]

    def edges(self) -> set[tuple[int, int]]:
        out: set[tuple[int, int]] = set()
        for a, b, c in self.triangles:
            out.update(((a, b), (a, c), (b, c)))
        return out


@dataclass(frozen=True, eq=False)
class FrameGraph:
    """Normalized positions, descriptors, and adjacency for one object-frame."""

    positions_norm: np.ndarray  # (N, 2), entries in [-1, 1]
    descriptors: np.ndarray  # (N, D_p)
    adjacency: np.ndarray  # (N, N) symmetric 0/1, unit diagonal
    source: tuple[str, str, int]  # (video_id, object_id, frame_index)

    def __post_init__(self):
        n = self.positions_norm.shape[0]
        if self.adjacency.shape != (n, n):
            raise ValueError("adjacency shape does not match point count")
        if not np.array_equal(self.adjacency, self.adjacency.T):
            raise ValueError("adjacency must be symmetric")
        if not np.all(np.diag(self.adjacency) == 1):
            raise ValueError("adjacency must have self-loops")
        if np.abs(self.positions_norm).max() > 1.0 + 1e-9:
            raise ValueError("normalized positions out of [-1, 1]")

    @property
    def n_nodes(self) -> int:
        return self.positions_norm.shape[0]


# -- exact-fallback predicates -------------------------------------------------


def _orient2d(ax, ay, bx, by, cx, cy) -> int:
    """Sign of the signed area of (a, b, c): +1 counterclockwise, -1 clockwise."""
    t1 = (bx - ax) * (cy - ay)
    t2 = (by - ay) * (cx - ax)
    det = t1 - t2
    bound = _ORIENT_BOUND * (abs(t1) + abs(t2))
    if abs(det) > bound:
        return 1 if det > 0 else -1
    fa_x, fa_y = Fraction(ax), Fraction(ay)
    det = (Fraction(bx) - fa_x) * (Fraction(cy) - fa_y) - (Fraction(by) - fa_y) * (
        Fraction(cx) - fa_x
    )
    return (det > 0) - (det < 0)


def _incircle(ax, ay, bx, by, cx, cy, dx, dy) -> int:
    """+1 iff d is strictly inside the circumcircle of the CCW triangle (a, b, c)."""
    adx, ady = ax - dx, ay - dy
    bdx, bdy = bx - dx, by - dy
    cdx, cdy = cx - dx, cy - dy
    ad2 = adx * adx + ady * ady
    bd2 = bdx * bdx + bdy * bdy
    cd2 = cdx * cdx + cdy * cdy
    det = (
        adx * (bdy * cd2 - cdy * bd2)
        - ady * (bdx * cd2 - cdx * bd2)
        + ad2 * (bdx * cdy - cdx * bdy)
    )
    permanent = (
        (abs(bdx * cdy) + abs(cdx * bdy)) * ad2
        + (abs(cdx * ady) + abs(adx * cdy)) * bd2
        + (abs(adx * bdy) + abs(bdx * ady)) * cd2
    )
    bound = _INCIRCLE_BOUND * permanent
    if abs(det) > bound:
        return 1 if det > 0 else -1
    return _incircle_exact(ax, ay, bx, by, cx, cy, dx, dy)


def _incircle_exact(ax, ay, bx, by, cx, cy, dx, dy) -> int:
    fdx, fdy = Fraction(dx), Fraction(dy)
    adx, ady = Fraction(ax) - fdx, Fraction(ay) - fdy
    bdx, bdy = Fraction(bx) - fdx, Fraction(by) - fdy
    cdx, cdy = Fraction(cx) - fdx, Fraction(cy) - fdy
    ad2 = adx * adx + ady * ady
    bd2 = bdx * bdx + bdy * bdy
    cd2 = cdx * cdx + cdy * cdy
    det = (
        adx * (bdy * cd2 - cdy * bd2)
        - ady * (bdx * cd2 - cdx * bd2)
        + ad2 * (bdx * cdy - cdx * bdy)
    )
    return (det > 0) - (det < 0)


# -- Delaunay ------------------------------------------------------------------


def delaunay(points) -> Triangulation:
    """Bowyer-Watson triangulation of N >= 3 planar points.

    Points are inserted in index order into a super-triangle; triangles whose
    circumcircle strictly contains the new point are removed and the cavity is
    re-triangulated. Exact duplicates of already-inserted points are skipped
    (they produce an empty cavity) and appear in no triangle.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected an N x 2 array, got {pts.shape}")
    n = pts.shape[0]
    if n < 3:
        raise DegenerateGeometryError(f"need at least 3 points, got {n}")
    if not _has_noncollinear_triple(pts):
        raise DegenerateGeometryError("all points are collinear")

    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = (lo + hi) / 2.0
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1.0))
    big = 1e6 * span
    coords = [(float(x), float(y)) for x, y in pts]
    coords.append((center[0] - big, center[1] - big))
    coords.append((center[0] + big, center[1] - big))
    coords.append((center[0], center[1] + big))
    s0, s1, s2 = n, n + 1, n + 2

    triangles: set[tuple[int, int, int]] = set()

    def add_ccw(i, j, k):
        o = _orient2d(*coords[i], *coords[j], *coords[k])
        if o == 0:
            raise DegenerateGeometryError("degenerate triangle during insertion")
        triangles.add((i, j, k) if o > 0 else (i, k, j))

    add_ccw(s0, s1, s2)

    for p in range(n):
        px, py = coords[p]
        bad = [
            t
            for t in triangles
            if _incircle(*coords[t[0]], *coords[t[1]], *coords[t[2]], px, py) > 0
        ]
        if not bad:
            continue  # exact duplicate of an inserted vertex
        directed: set[tuple[int, int]] = set()
        for a, b, c in bad:
            directed.update(((a, b), (b, c), (c, a)))
        boundary = [(a, b) for a, b in directed if (b, a) not in directed]
        triangles.difference_update(bad)
        for a, b in boundary:
            # boundary edges wind CCW around the cavity, so (a, b, p) is CCW
            triangles.add((a, b, p))

    final = sorted(
        tuple(sorted(t)) for t in triangles if s0 not in t and s1 not in t and s2 not in t
    )
    return Triangulation(final)


def _has_noncollinear_triple(pts: np.ndarray) -> bool:
    base = pts[0]
    second = None
    for q in pts[1:]:
        if q[0] != base[0] or q[1] != base[1]:
            second = q
            break
    if second is None:
        return False
    for r in pts[1:]:
        if _orient2d(base[0], base[1], second[0], second[1], r[0], r[1]) != 0:
            return True
    return False


def circumcircle(a, b, c) -> tuple[np.ndarray, float]:
    """Circumcenter and radius of a non-degenerate triangle."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    d = 2.0 * (a[0] * (b[1] - c[1]) + b[0] * (c[1] - a[1]) + c[0] * (a[1] - b[1]))
    if d == 0.0:
        raise DegenerateGeometryError("collinear triangle has no circumcircle")
    a2, b2, c2 = (a * a).sum(), (b * b).sum(), (c * c).sum()
    ux = (a2 * (b[1] - c[1]) + b2 * (c[1] - a[1]) + c2 * (a[1] - b[1])) / d
    uy = (a2 * (c[0] - b[0]) + b2 * (a[0] - c[0]) + c2 * (b[0] - a[0])) / d
    center = np.array([ux, uy])
    return center, float(np.linalg.norm(a - center))


# -- graph assembly -------------------------------------------------------------


def normalize_positions(points, bbox) -> np.ndarray:
    """Map pixel positions into [-1, 1] per axis, bbox center at the origin."""
    pts = np.asarray(points, dtype=np.float64)
    bbox = np.asarray(bbox, dtype=np.float64)
    x_min, y_min, x_max, y_max = bbox
    half = np.array([(x_max - x_min) / 2.0, (y_max - y_min) / 2.0])
    if half[0] <= 0.0 or half[1] <= 0.0:
        raise DegenerateBboxError(f"bbox {bbox.tolist()} has zero width or height")
    center = np.array([(x_min + x_max) / 2.0, (y_min + y_max) / 2.0])
    return (pts - center) / half


def adjacency_from_triangles(n: int, tri: Triangulation) -> np.ndarray:
    """Adjacency with a 1 for every triangle edge plus self-loops."""
    adj = np.eye(n)
    for a, b, c in tri.triangles:
        for i, j in ((a, b), (a, c), (b, c)):
            if not (0 <= i < n and 0 <= j < n):
                raise IndexError(f"triangle index {max(i, j)} out of range for n={n}")
            adj[i, j] = 1.0
            adj[j, i] = 1.0
    return adj


def _perturb_duplicates(pos: np.ndarray) -> np.ndarray:
    """Nudge repeated positions by EPS_DUP in an index-derived direction."""
    out = pos.copy()
    seen: set[tuple[float, float]] = set()
    for i in range(out.shape[0]):
        k = 1
        while (out[i, 0], out[i, 1]) in seen:
            angle = 2.0 * pi * ((i * 0.6180339887498949) % 1.0)
            out[i, 0] = pos[i, 0] + k * EPS_DUP * cos(angle)
            out[i, 1] = pos[i, 1] + k * EPS_DUP * sin(angle)
            k += 1
        seen.add((out[i, 0], out[i, 1]))
    return out


def build_frame_graph(
    obs: FrameObservation,
    cfg: "ModelConfig",
    video_id: str = "",
    object_id: str = "",
) -> FrameGraph:
    """Normalize, triangulate, and assemble the graph for one observation.

    Duplicate positions are perturbed before triangulation only; the stored
    positions are the unperturbed normalized coordinates (clipped to [-1, 1]
    to absorb the bbox slack). Degenerate geometry falls back to a fully
    connected graph, as does cfg.fully_connected.
    """
    positions = obs.positions()
    descriptors = obs.descriptors()
    norm = np.clip(normalize_positions(positions, obs.bbox), -1.0, 1.0)
    n = norm.shape[0]

    if cfg.fully_connected or n < 3:
        adjacency = np.ones((n, n))
    else:
        try:
            tri = delaunay(_perturb_duplicates(norm))
            adjacency = adjacency_from_triangles(n, tri)
        except DegenerateGeometryError:
            adjacency = np.ones((n, n))

    return FrameGraph(
        positions_norm=norm,
        descriptors=descriptors,
        adjacency=adjacency,
        source=(video_id, object_id, int(obs.frame_index)),
    )


def frame_graphs_for_track(track, cfg: "ModelConfig") -> list[FrameGraph]:
    """Graphs for every observation of a track, tagged with the track identity."""
    return [
        build_frame_graph(obs, cfg, track.video_id, track.object_id)
        for obs in track.observations
    ]
