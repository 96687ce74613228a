"""Open-set decision rule: nearest gallery image, threshold, MF/MO/MR errors.

A query is rejected as a stranger when its distance ``d(q)`` to the closest
gallery embedding exceeds the threshold ``t``; otherwise it is assigned to
the member owning that embedding (``d(q) == t`` counts as family).

Error types, as percentages:

* MF  family query rejected as stranger (``d > t``), over family queries
* MR  family query accepted but assigned to the wrong member, over family queries
* MO  stranger query accepted as family (``d <= t``), over stranger queries
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DimensionError, EmptyGalleryError

STRANGER = "STRANGER"


def distances(queries: np.ndarray, refs: np.ndarray) -> np.ndarray:
    """Euclidean distance matrix; every entry is computed independently."""
    return cdist(np.atleast_2d(queries), np.atleast_2d(refs), "euclidean")


class Gallery:
    """Embeddings of the family members' images, in member then image order."""

    def __init__(self, members: Sequence[tuple[str, Sequence[tuple[str, np.ndarray]]]]):
        if not members:
            raise EmptyGalleryError("gallery needs at least one member")
        owners, images, rows = [], [], []
        self.member_ids: tuple[str, ...] = tuple(m for m, _ in members)
        if len(set(self.member_ids)) != len(self.member_ids):
            raise ValueError("duplicate member id in gallery")
        for member, embs in members:
            if not embs:
                raise EmptyGalleryError(f"member {member!r} has no embeddings")
            for image, vec in embs:
                owners.append(member)
                images.append(image)
                rows.append(np.asarray(vec, dtype=np.float64))
        dims = {r.shape for r in rows}
        if len(dims) != 1 or len(rows[0].shape) != 1:
            raise DimensionError("gallery embeddings must be vectors of one dimension")
        self.owners = tuple(owners)
        self.images = tuple(images)
        self.matrix = np.vstack(rows)
        self.matrix.setflags(write=False)
        self._index = {(o, i): j for j, (o, i) in enumerate(zip(owners, images))}

    @classmethod
    def from_arrays(cls, owners: Sequence[str], images: Sequence[str], matrix: np.ndarray) -> "Gallery":
        """Build from parallel columns; rows of one member must be contiguous."""
        members: list[tuple[str, list]] = []
        for owner, image, vec in zip(owners, images, matrix):
            if members and members[-1][0] == owner:
                members[-1][1].append((image, vec))
            else:
                members.append((owner, [(image, vec)]))
        return cls(members)

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    def position(self, member_id: str, image_id: str) -> int | None:
        return self._index.get((member_id, image_id))


class Score(NamedTuple):
    distance: float
    best_member: str
    best_image: str


@dataclass(frozen=True)
class Decision:
    distance: float
    best_member: str
    best_image: str
    label: str

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def score(query_out, gallery: Gallery, exclude: tuple[str, str] | None = None) -> Score:
    """Nearest gallery embedding to ``query_out``; ties go to the earliest gallery entry."""
    q = np.asarray(query_out, dtype=np.float64)
    if q.ndim != 1 or q.shape[0] != gallery.dim:
        raise DimensionError(f"query dimension {q.shape} does not match gallery dimension {gallery.dim}")
    dist = distances(q[None, :], gallery.matrix)[0]
    if exclude is not None:
        j = gallery.position(*exclude)
        if j is not None:
            dist[j] = np.inf
    best = int(np.argmin(dist))
    if not np.isfinite(dist[best]):
        raise EmptyGalleryError("gallery is empty after excluding the query's own image")
    return Score(float(dist[best]), gallery.owners[best], gallery.images[best])


def score_leave_one_out(gallery: Gallery) -> list[Score]:
    """Score every gallery embedding against the others; same result as calling
    ``score(row, gallery, exclude=(owner, image))`` row by row."""
    dist = distances(gallery.matrix, gallery.matrix)
    np.fill_diagonal(dist, np.inf)
    best = np.argmin(dist, axis=1)
    out = []
    for i, j in enumerate(best):
        d = dist[i, j]
        if not np.isfinite(d):
            raise EmptyGalleryError("gallery is empty after excluding the query's own image")
        out.append(Score(float(d), gallery.owners[j], gallery.images[j]))
    return out


def score_many(queries: np.ndarray, gallery: Gallery, chunk: int = 4096) -> list[Score]:
    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    if queries.shape[1] != gallery.dim:
        raise DimensionError(f"query dimension {queries.shape[1]} does not match gallery dimension {gallery.dim}")
    out = []
    for start in range(0, len(queries), chunk):
        dist = distances(queries[start : start + chunk], gallery.matrix)
        best = np.argmin(dist, axis=1)
        out.extend(
            Score(float(dist[i, j]), gallery.owners[j], gallery.images[j]) for i, j in enumerate(best)
        )
    return out


def decide(scored: Score | tuple, t: float) -> Decision:
    if t < 0:
        raise ValueError(f"threshold must be >= 0, got {t}")
    distance, member = scored[0], scored[1]
    image = scored[2] if len(scored) > 2 else ""
    label = STRANGER if distance > t else member
    return Decision(float(distance), member, image, label)


@dataclass(frozen=True)
class ErrorReport:
    mf_rate: float
    mo_rate: float
    mr_rate: float
    mfmo_rate: float
    n_fm_queries: int
    n_stranger_queries: int
    n_mf: int
    n_mo: int
    n_mr: int
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def table(self, label: str = "") -> str:
        return render_table([(label, self)])


def _as_distance(s) -> float:
    return float(s[0]) if isinstance(s, tuple) else float(s)


def evaluate(fm_queries: Sequence[tuple[str, Score]], stranger_queries: Sequence, t: float) -> ErrorReport:
    """Count MF / MO / MR at threshold ``t``.

    ``fm_queries`` holds ``(true_member, score)`` pairs; ``stranger_queries``
    holds scores (or bare distances).
    """
    if not fm_queries or not stranger_queries:
        raise ValueError("need at least one family query and one stranger query")
    n_mf = n_mr = 0
    for true_member, s in fm_queries:
        if s[0] > t:
            n_mf += 1
        elif s[1] != true_member:
            n_mr += 1
    n_mo = sum(1 for s in stranger_queries if _as_distance(s) <= t)
    n_fm, n_st = len(fm_queries), len(stranger_queries)
    mf, mo, mr = 100.0 * n_mf / n_fm, 100.0 * n_mo / n_st, 100.0 * n_mr / n_fm
    return ErrorReport(mf, mo, mr, mf + mo, n_fm, n_st, n_mf, n_mo, n_mr, float(t))


def threshold_candidates(all_distances: np.ndarray) -> np.ndarray:
    """0, midpoints between consecutive distinct distances, and max + 1."""
    u = np.unique(np.asarray(all_distances, dtype=np.float64))
    mids = (u[:-1] + u[1:]) / 2.0
    top = u[-1] + 1.0 if u.size else 1.0
    return np.unique(np.concatenate([[0.0], mids, [top]]))


def optimize_threshold(fm_queries: Sequence[tuple[str, Score]], stranger_queries: Sequence) -> tuple[float, ErrorReport]:
    """Smallest threshold minimizing MF + MO among :func:`threshold_candidates`."""
    if not fm_queries or not stranger_queries:
        raise ValueError("need at least one family query and one stranger query")
    fm_d = np.sort(np.array([s[0] for _, s in fm_queries], dtype=np.float64))
    st_d = np.sort(np.array([_as_distance(s) for s in stranger_queries], dtype=np.float64))
    cand = threshold_candidates(np.concatenate([fm_d, st_d]))
    n_mf = len(fm_d) - np.searchsorted(fm_d, cand, side="right")
    n_mo = np.searchsorted(st_d, cand, side="right")
    # MF% + MO% scaled by n_fm * n_st, compared exactly in integers
    cost = n_mf.astype(np.int64) * len(st_d) + n_mo.astype(np.int64) * len(fm_d)
    t = float(cand[int(np.argmin(cost))])
    return t, evaluate(fm_queries, stranger_queries, t)


def render_table(rows: Sequence[tuple[str, ErrorReport | dict]], first: str = "Layers") -> str:
    """Aligned text table with columns MR, MF, MO, MF+MO (percent, 2 decimals)."""
    header = [first, "MR", "MF", "MO", "MF+MO"]
    body = []
    for label, rep in rows:
        r = rep.to_dict() if hasattr(rep, "to_dict") else rep
        body.append([str(label)] + [f"{r[k]:.2f}" for k in ("mr_rate", "mf_rate", "mo_rate", "mfmo_rate")])
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    fmt = lambda row: " | ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths)))
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([fmt(header), sep] + [fmt(row) for row in body]) + "\n"
