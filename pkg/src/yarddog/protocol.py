"""Experiment harness: fit the head on the training identities, evaluate every
family set with its own optimal threshold, aggregate, and grid-search
``alpha`` and the number of components."""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Callable, Sequence

import numpy as np

from . import embed as _embed
from .dataset import FeatureDataset, SplitPlan
from .errors import ConfigError, EmptyGalleryError
from .matcher import ErrorReport, Gallery, optimize_threshold, render_table, score_leave_one_out, score_many

MEAN_MFMO = "mean_mfmo"
MAX_MFMO = "max_mfmo"
METRICS = ("mf_rate", "mo_rate", "mr_rate", "mfmo_rate")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    family_size: int = 10
    num_family_sets: int = 100
    min_images: int = 10
    alpha_grid: tuple[float, ...] = (0.1, 0.5, 1.0, 2.0)
    n_grid: tuple[int, ...] = (10, 20, 30, 40, 50, 60, 70, 80)
    truncation_depths: tuple[int, ...] | None = None
    objective: str = MEAN_MFMO
    stranger_holdout: float = 0.0
    baseline: bool = False

    def __post_init__(self):
        object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        object.__setattr__(self, "n_grid", tuple(int(n) for n in self.n_grid))
        if self.truncation_depths is not None:
            object.__setattr__(self, "truncation_depths", tuple(int(k) for k in self.truncation_depths))
        if not self.alpha_grid:
            raise ConfigError("alpha_grid must not be empty")
        if not self.n_grid:
            raise ConfigError("n_grid must not be empty")
        if any(not a > 0 or not math.isfinite(a) for a in self.alpha_grid):
            raise ConfigError("every alpha must be a positive finite number")
        if any(n < 1 for n in self.n_grid):
            raise ConfigError("every component count must be positive")
        if min(self.family_size, self.num_family_sets, self.min_images) < 1:
            raise ConfigError("family_size, num_family_sets and min_images must be positive")
        if self.objective not in (MEAN_MFMO, MAX_MFMO):
            raise ConfigError(f"objective must be {MEAN_MFMO!r} or {MAX_MFMO!r}")
        if not 0.0 <= self.stranger_holdout < 1.0:
            raise ConfigError("stranger_holdout must be in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["alpha_grid"] = list(self.alpha_grid)
        d["n_grid"] = list(self.n_grid)
        if self.truncation_depths is not None:
            d["truncation_depths"] = list(self.truncation_depths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class Metrics:
    mf_rate: float
    mo_rate: float
    mr_rate: float
    mfmo_rate: float

    def to_dict(self) -> dict:
        return asdict(self)


def aggregate(reports: Sequence[ErrorReport]) -> tuple[Metrics, Metrics]:
    """Mean and per-metric maximum over family-set reports.

    The maximum of MF+MO is the largest per-set MF+MO, not max MF + max MO.
    """
    if not reports:
        raise ValueError("nothing to aggregate")
    mean = Metrics(*(math.fsum(getattr(r, m) for r in reports) / len(reports) for m in METRICS))
    top = Metrics(*(max(getattr(r, m) for r in reports) for m in METRICS))
    return mean, top


class _Embedded:
    """Embedded vectors of a dataset with row lookup by identity."""

    def __init__(self, data: FeatureDataset, vectors: np.ndarray):
        self.data = data
        self.vectors = vectors
        self._rows: dict[str, list[int]] = {}
        for i, ident in enumerate(data.identities):
            self._rows.setdefault(ident, []).append(i)

    def rows(self, identities: Sequence[str]) -> list[int]:
        out: list[int] = []
        for ident in identities:
            out.extend(self._rows.get(ident, ()))
        return out


def _check_disjoint(family: Sequence[str], strangers: Sequence[str]) -> None:
    overlap = set(family).intersection(strangers)
    if overlap:
        raise ValueError(f"family and stranger identities overlap: {sorted(overlap)}")


def _trial(emb: _Embedded, family: Sequence[str], strangers: Sequence[str]) -> ErrorReport:
    _check_disjoint(family, strangers)
    fam_rows = emb.rows(family)
    if not fam_rows:
        raise EmptyGalleryError("family has no images")
    owners = [emb.data.identities[i] for i in fam_rows]
    gallery = Gallery.from_arrays(owners, [emb.data.images[i] for i in fam_rows], emb.vectors[fam_rows])
    if len(gallery) < 2:
        raise EmptyGalleryError("leave-one-out scoring needs at least two gallery images")
    fm = list(zip(owners, score_leave_one_out(gallery)))
    st_rows = emb.rows(strangers)
    if not st_rows:
        raise ValueError("no stranger images")
    st = score_many(emb.vectors[st_rows], gallery)
    _, report = optimize_threshold(fm, st)
    return report


def run_family_trial(model: _embed.ProjectionModel | None, data: FeatureDataset,
                     family: Sequence[str], strangers: Sequence[str],
                     mean: np.ndarray | None = None) -> ErrorReport:
    """Evaluate one family set against the stranger identities.

    Family images are scored leave-one-out against the family gallery,
    stranger images against the full gallery; the threshold minimizing
    MF+MO for this set is used.  With ``model=None`` the features are only
    centralized (by ``mean``) and normalized, which is the no-PCA baseline.
    """
    _check_disjoint(family, strangers)
    rows = data.rows_of(list(family) + list(strangers))
    sub = FeatureDataset(
        tuple(data.identities[i] for i in rows), tuple(data.images[i] for i in rows), data.vectors[rows]
    )
    if model is None:
        if mean is None:
            raise ValueError("baseline trial needs the training mean")
        vectors = _embed.normalize_features(sub.vectors, mean)
    else:
        vectors = _embed.embed_many(model, sub.vectors)
    return _trial(_Embedded(sub, vectors), family, strangers)


def _stranger_pool(config: ExperimentConfig, split: SplitPlan) -> tuple[list[str], list[str]]:
    """(fit identities, stranger identities).  Without holdout both are the training set."""
    train = list(split.train)
    if config.stranger_holdout <= 0:
        return train, train
    rng = np.random.default_rng([config.seed, 1])
    n_hold = int(math.floor(config.stranger_holdout * len(train)))
    if n_hold < 1 or n_hold > len(train) - 2:
        raise ConfigError(f"stranger_holdout {config.stranger_holdout} leaves no usable stranger/fit pool")
    held = set(train[i] for i in rng.choice(len(train), size=n_hold, replace=False))
    return [t for t in train if t not in held], [t for t in train if t in held]


def _map(fn: Callable, items: Sequence, threads: int) -> list:
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


@dataclass
class GridPoint:
    alpha: float
    n: int
    mean: Metrics | None = None
    max: Metrics | None = None
    n_nonpositive: int = 0
    skipped: str | None = None
    trials: list[ErrorReport] = field(default_factory=list, repr=False)

    def to_dict(self, with_trials: bool = False) -> dict:
        d: dict[str, Any] = {"alpha": self.alpha, "n": self.n}
        if self.skipped:
            d["skipped"] = self.skipped
            return d
        d["mean"] = self.mean.to_dict()
        d["max"] = self.max.to_dict()
        d["n_nonpositive_components"] = self.n_nonpositive
        if with_trials:
            d["trials"] = [r.to_dict() for r in self.trials]
        return d


@dataclass
class AggregateReport:
    config: ExperimentConfig
    split_digest: str
    points: list[GridPoint]
    best_mean: tuple[float, int] | None
    best_max: tuple[float, int] | None
    label: str = ""
    baseline: tuple[Metrics, Metrics] | None = None
    stranger_pool: str = "train"

    def point(self, alpha: float, n: int) -> GridPoint:
        for p in self.points:
            if p.alpha == alpha and p.n == n:
                return p
        raise KeyError((alpha, n))

    @property
    def selected(self) -> tuple[float, int] | None:
        return self.best_mean if self.config.objective == MEAN_MFMO else self.best_max

    def to_dict(self, with_trials: bool = False) -> dict:
        d = {
            "label": self.label,
            "config": self.config.to_dict(),
            "split_digest": self.split_digest,
            "family_queries": "leave-one-out",
            "stranger_pool": self.stranger_pool,
            "threshold": "optimized per family set",
            "grid": [p.to_dict(with_trials) for p in self.points],
            "best_mean": _best_dict(self, self.best_mean, "mean"),
            "best_max": _best_dict(self, self.best_max, "max"),
        }
        if self.baseline is not None:
            d["baseline"] = {"mean": self.baseline[0].to_dict(), "max": self.baseline[1].to_dict()}
        return d

    def tables(self) -> str:
        """Text tables of mean and max metrics, one row per grid point."""
        out = []
        for which in ("mean", "max"):
            rows = []
            if self.baseline is not None:
                rows.append(("no PCA", self.baseline[0 if which == "mean" else 1].to_dict()))
            for p in self.points:
                if not p.skipped:
                    rows.append((f"alpha={p.alpha:g} n={p.n}", getattr(p, which).to_dict()))
            title = f"{self.label + ': ' if self.label else ''}{which} over {self.config.num_family_sets} family sets"
            out.append(title + "\n" + render_table(rows, first="Head"))
        return "\n".join(out)


def _best_dict(report: AggregateReport, best, which: str):
    if best is None:
        return None
    p = report.point(*best)
    return {"alpha": best[0], "n": best[1], which: getattr(p, which).to_dict()}


def _select(points: Sequence[GridPoint], which: str) -> tuple[float, int] | None:
    live = [p for p in points if not p.skipped]
    if not live:
        return None
    best = min(live, key=lambda p: (getattr(p, which).mfmo_rate, p.n, p.alpha))
    return best.alpha, best.n


def grid_search(config: ExperimentConfig, data: FeatureDataset, split: SplitPlan,
                threads: int = 1, label: str = "") -> AggregateReport:
    """Evaluate every (alpha, n) grid point on every family set.

    Grid points whose ``n`` exceeds the feature dimension are skipped and
    recorded.  Results do not depend on ``threads``.
    """
    fit_ids, stranger_ids = _stranger_pool(config, split)
    fit_data = data.subset(fit_ids)
    mean = _embed.compute_mean(fit_data.vectors)
    normalized = _embed.normalize_features(fit_data.vectors, mean)
    rows: dict[str, list[int]] = {}
    for i, ident in enumerate(fit_data.identities):
        rows.setdefault(ident, []).append(i)
    between, within, k = _embed.scatter_terms([normalized[r] for r in rows.values()])
    all_normalized = _embed.normalize_features(data.vectors, mean)

    grid = [(a, n) for n in config.n_grid for a in config.alpha_grid]

    def run_point(point: tuple[float, int]) -> GridPoint:
        alpha, n = point
        if n > data.dim:
            return GridPoint(alpha, n, skipped=f"n={n} exceeds feature dimension {data.dim}")
        q = between - (alpha / k) * within
        comps, vals = _embed.top_aspc(0.5 * (q + q.T), n)
        model = _embed.ProjectionModel(mean, comps, alpha, vals)
        emb = _Embedded(data, _embed.project(all_normalized, model.components))
        trials = [_trial(emb, fam, stranger_ids) for fam in split.family_sets]
        mean_m, max_m = aggregate(trials)
        return GridPoint(alpha, n, mean_m, max_m, model.n_nonpositive, trials=trials)

    points = _map(run_point, grid, threads)
    report = AggregateReport(
        config=config,
        split_digest=split.digest(),
        points=points,
        best_mean=_select(points, "mean"),
        best_max=_select(points, "max"),
        label=label,
        stranger_pool="train" if config.stranger_holdout <= 0 else "held-out",
    )
    if config.baseline:
        report.baseline = run_baseline(data, split, config=config, threads=threads)
    return report


def run_baseline(data: FeatureDataset, split: SplitPlan, config: ExperimentConfig | None = None,
                 threads: int = 1) -> tuple[Metrics, Metrics]:
    """Same protocol with the linear layer replaced by the identity (no PCA)."""
    config = config or ExperimentConfig()
    fit_ids, stranger_ids = _stranger_pool(config, split)
    mean = _embed.compute_mean(data.subset(fit_ids).vectors)
    emb = _Embedded(data, _embed.normalize_features(data.vectors, mean))
    trials = _map(lambda fam: _trial(emb, fam, stranger_ids), list(split.family_sets), threads)
    return aggregate(trials)


def report_json(reports: Sequence[AggregateReport], manifest: dict | None = None) -> str:
    doc: dict[str, Any] = {}
    if manifest is not None:
        doc["manifest"] = manifest
    doc["experiments"] = [r.to_dict() for r in reports]
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
