"""Post-processing head: centralization, spherical projection and the
supervised-PCA linear layer.

The linear layer maximizes, over orthonormal ``V`` with ``n`` rows,

    D_B(V) - alpha / k * sum_i D_W_i(V)

where ``D_B`` is the mean squared distance between projections of images of
different identities (averaged over unordered cross-identity pairs) and
``D_W_i`` the mean squared distance between projections of distinct images
of identity ``i`` (averaged over ordered pairs).  Both are
``trace(V M V^T)`` for a fixed matrix ``M``, so the optimum is spanned by the
top ``n`` eigenvectors of the resulting quadratic form.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import FeatureDataset
from .errors import ConvergenceError, DegenerateVectorError, DimensionError, YarddogError

log = logging.getLogger(__name__)

EPS_NORM = 1e-12


def compute_mean(vectors) -> np.ndarray:
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("need a non-empty collection of equal-length vectors")
    return x.mean(axis=0)


def centralize(v, mean) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    if v.shape[-1] != mean.shape[-1]:
        raise DimensionError(f"dimension mismatch: {v.shape[-1]} vs {mean.shape[-1]}")
    return v - mean


def spherical_project(v) -> np.ndarray:
    """Scale ``v`` (or each row of a matrix) to unit Euclidean length."""
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norms <= EPS_NORM):
        raise DegenerateVectorError(f"cannot normalize a vector of norm <= {EPS_NORM:g}")
    return v / norms


@dataclass(frozen=True, eq=False)
class QuadraticForm:
    matrix: np.ndarray
    k: int

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]


def _pair_scatter(x: np.ndarray) -> np.ndarray:
    """sum over unordered pairs i<j of (x_i - x_j)(x_i - x_j)^T."""
    c = x - x.mean(axis=0)
    return len(x) * (c.T @ c)


def scatter_terms(groups: Sequence[np.ndarray] | Mapping[str, np.ndarray]) -> tuple[np.ndarray, np.ndarray, int]:
    """Return ``(B, sum_i W_i, k)`` for per-identity vector groups.

    ``trace(V B V^T)`` is the between-identity mean squared projected
    distance and ``trace(V W_i V^T)`` the within-identity one.  Identities
    with a single image contribute ``W_i = 0`` but are still counted in ``k``.
    """
    if isinstance(groups, Mapping):
        groups = list(groups.values())
    groups = [np.atleast_2d(np.asarray(g, dtype=np.float64)) for g in groups]
    if len(groups) < 2:
        raise ValueError("need at least two identities")
    dims = {g.shape[1] for g in groups}
    if len(dims) != 1 or any(len(g) == 0 for g in groups):
        raise DimensionError("every identity needs >= 1 vector of a common dimension")
    sizes = np.array([len(g) for g in groups], dtype=np.float64)

    within_pairs = [_pair_scatter(g) for g in groups]
    cross = _pair_scatter(np.vstack(groups)) - sum(within_pairs)
    n_cross = (sizes.sum() ** 2 - (sizes**2).sum()) / 2.0
    between = cross / n_cross

    within = np.zeros_like(between)
    for g, s in zip(groups, within_pairs):
        m = len(g)
        if m > 1:
            # ordered pairs x != y count each unordered pair twice
            within += 2.0 * s / (m * (m - 1))
    return between, within, len(groups)


def build_quadratic_form(groups: Sequence[np.ndarray] | Mapping[str, np.ndarray], alpha: float) -> QuadraticForm:
    """Quadratic form ``B - alpha/k * sum_i W_i`` from per-identity vector groups."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    between, within, k = scatter_terms(groups)
    q = between - (alpha / k) * within
    q = 0.5 * (q + q.T)
    return QuadraticForm(q, k)


def _fix_signs(vectors: np.ndarray) -> np.ndarray:
    """Flip rows so that the largest-magnitude entry (first on ties) is positive."""
    idx = np.argmax(np.abs(vectors), axis=1)
    signs = np.sign(vectors[np.arange(len(vectors)), idx])
    signs[signs == 0] = 1.0
    return vectors * signs[:, None]


def top_aspc(form: QuadraticForm | np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Top ``n`` eigenpairs of a symmetric matrix.

    Returns ``(components, eigenvalues)`` with unit eigenvectors as rows and
    eigenvalues in descending order.
    """
    q = form.matrix if isinstance(form, QuadraticForm) else np.asarray(form, dtype=np.float64)
    d = q.shape[0]
    if not 1 <= n <= d:
        raise ValueError(f"number of components must be in [1, {d}], got {n}")
    w, v = np.linalg.eigh(q)
    order = np.argsort(-w, kind="stable")[:n]
    vals = w[order]
    vecs = _fix_signs(np.ascontiguousarray(v[:, order].T))
    resid = np.linalg.norm(vecs @ q - vals[:, None] * vecs, axis=1)
    bound = 1e-8 * np.maximum(1.0, np.abs(vals))
    if np.any(resid > bound):
        worst = int(np.argmax(resid / bound))
        raise ConvergenceError(
            f"eigenpair {worst} residual {resid[worst]:.3e} exceeds {bound[worst]:.3e}"
        )
    return vecs, vals


def jacobi_eigh(a, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[np.ndarray, np.ndarray]:
    """Cyclic Jacobi eigen-decomposition of a symmetric matrix.

    Dependency-free alternative to ``numpy.linalg.eigh``; returns
    ``(eigenvalues, eigenvectors as columns)`` in ascending order.  Cost is
    O(d^3) per sweep, fine for d up to a few hundred.
    """
    a = np.array(a, dtype=np.float64)
    d = a.shape[0]
    v = np.eye(d)
    scale = max(np.linalg.norm(a), 1e-300)
    for _ in range(max_sweeps):
        off = np.sqrt(np.sum(np.tril(a, -1) ** 2))
        if off <= tol * scale:
            break
        for p in range(d - 1):
            for r in range(p + 1, d):
                apr = a[p, r]
                if abs(apr) <= 1e-300:
                    continue
                theta = (a[r, r] - a[p, p]) / (2.0 * apr)
                t = np.copysign(1.0, theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                ap, ar = a[:, p].copy(), a[:, r].copy()
                a[:, p] = c * ap - s * ar
                a[:, r] = s * ap + c * ar
                ap, ar = a[p, :].copy(), a[r, :].copy()
                a[p, :] = c * ap - s * ar
                a[r, :] = s * ap + c * ar
                vp, vr = v[:, p].copy(), v[:, r].copy()
                v[:, p] = c * vp - s * vr
                v[:, r] = s * vp + c * vr
    else:
        raise ConvergenceError(f"Jacobi iteration did not converge in {max_sweeps} sweeps")
    w = np.diag(a).copy()
    order = np.argsort(w, kind="stable")
    return w[order], v[:, order]


@dataclass(frozen=True, eq=False)
class ProjectionModel:
    mean: np.ndarray
    components: np.ndarray
    alpha: float
    eigenvalues: np.ndarray

    def __post_init__(self):
        for name in ("mean", "components", "eigenvalues"):
            arr = np.array(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.components.ndim != 2 or self.components.shape[1] != self.mean.shape[0]:
            raise DimensionError("components must be an (n, d) matrix matching the mean")
        if self.eigenvalues.shape != (self.components.shape[0],):
            raise DimensionError("need one eigenvalue per component")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_components(self) -> int:
        return self.components.shape[0]

    @property
    def n_nonpositive(self) -> int:
        """Components whose objective value is <= 0 (the form had fewer than n positive axes)."""
        return int(np.sum(self.eigenvalues <= 0))

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "n_components": self.n_components,
            "alpha": float(self.alpha),
            "mean": self.mean.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "components": self.components.ravel().tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProjectionModel":
        try:
            dim, n = int(d["dim"]), int(d["n_components"])
            comps = np.asarray(d["components"], dtype=np.float64)
            if comps.size != n * dim:
                raise DimensionError(f"components has {comps.size} entries, expected {n}x{dim}")
            return cls(
                mean=np.asarray(d["mean"], dtype=np.float64),
                components=comps.reshape(n, dim),
                alpha=float(d["alpha"]),
                eigenvalues=np.asarray(d["eigenvalues"], dtype=np.float64),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, YarddogError):
                raise
            raise DimensionError(f"malformed projection model: {exc}") from None

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ProjectionModel":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def normalize_features(vectors, mean) -> np.ndarray:
    """Centralize then spherically project each row."""
    return spherical_project(centralize(np.atleast_2d(vectors), mean))


def fit(data: FeatureDataset, alpha: float, n: int, identities=None) -> ProjectionModel:
    """Fit the head on ``data`` (optionally restricted to ``identities``)."""
    if identities is not None:
        data = data.subset(identities)
    if len(data) == 0:
        raise ValueError("no training vectors")
    if not 1 <= n <= data.dim:
        raise ValueError(f"number of components must be in [1, {data.dim}], got {n}")
    mean = compute_mean(data.vectors)
    unit = normalize_features(data.vectors, mean)
    order: dict[str, list[int]] = {}
    for i, ident in enumerate(data.identities):
        order.setdefault(ident, []).append(i)
    form = build_quadratic_form([unit[rows] for rows in order.values()], alpha)
    comps, vals = top_aspc(form, n)
    model = ProjectionModel(mean, comps, alpha, vals)
    if model.n_nonpositive:
        log.warning("%d of %d components have non-positive objective value", model.n_nonpositive, n)
    return model


def project(unit: np.ndarray, components: np.ndarray) -> np.ndarray:
    """Rows of ``unit`` times ``components^T``.

    Each output row depends only on its input row (no BLAS blocking), so an
    image embeds to the same bits alone or in a batch.
    """
    return np.einsum("ij,kj->ik", unit, components, optimize=False)


def embed_many(model: ProjectionModel, vectors) -> np.ndarray:
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    if x.shape[1] != model.dim:
        raise DimensionError(f"expected dimension {model.dim}, got {x.shape[1]}")
    return project(normalize_features(x, model.mean), model.components)


def embed(model: ProjectionModel, v) -> np.ndarray:
    """Network output for one feature vector: ``V @ unit(v - mean)``."""
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError("embed takes a single vector; use embed_many for matrices")
    return embed_many(model, v[None, :])[0]
