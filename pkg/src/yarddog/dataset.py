"""Labeled feature vectors and identity-level train / family splits."""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DimensionError, DuplicateKeyError, NonFiniteError, SplitError


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    """Records ``(identity, image, vector)`` stored as parallel columns.

    ``vectors`` is an ``(N, dim)`` float64 matrix; row order is the
    ingestion order.
    """

    identities: tuple[str, ...]
    images: tuple[str, ...]
    vectors: np.ndarray

    def __post_init__(self):
        vectors = np.asarray(self.vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise DimensionError(f"vectors must be a 2-D matrix, got shape {vectors.shape}")
        if vectors.shape[1] < 1:
            raise DimensionError("feature dimension must be positive")
        if not (len(self.identities) == len(self.images) == vectors.shape[0]):
            raise DimensionError("identities, images and vectors differ in length")
        bad = np.flatnonzero(~np.all(np.isfinite(vectors), axis=1))
        if bad.size:
            raise NonFiniteError(f"record {int(bad[0])} has non-finite values")
        seen = set()
        for i, key in enumerate(zip(self.identities, self.images)):
            if key in seen:
                raise DuplicateKeyError(f"record {i}: duplicate (identity, image) key {key}")
            seen.add(key)
        vectors.setflags(write=False)
        object.__setattr__(self, "identities", tuple(self.identities))
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "vectors", vectors)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def identity_set(self) -> list[str]:
        return sorted(set(self.identities))

    def image_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for ident in self.identities:
            counts[ident] = counts.get(ident, 0) + 1
        return counts

    def rows_of(self, identities: Iterable[str]) -> np.ndarray:
        """Row indices of the given identities, grouped by identity in the order given."""
        by_id: dict[str, list[int]] = {}
        for i, ident in enumerate(self.identities):
            by_id.setdefault(ident, []).append(i)
        rows: list[int] = []
        for ident in identities:
            rows.extend(by_id.get(ident, ()))
        return np.asarray(rows, dtype=np.intp)

    def groups(self, identities: Iterable[str] | None = None) -> dict[str, np.ndarray]:
        """Mapping identity -> ``(n_images, dim)`` matrix, in first-appearance order."""
        wanted = None if identities is None else set(identities)
        order: dict[str, list[int]] = {}
        for i, ident in enumerate(self.identities):
            if wanted is None or ident in wanted:
                order.setdefault(ident, []).append(i)
        return {ident: self.vectors[rows] for ident, rows in order.items()}

    def subset(self, identities: Iterable[str]) -> "FeatureDataset":
        wanted = set(identities)
        rows = [i for i, ident in enumerate(self.identities) if ident in wanted]
        return FeatureDataset(
            tuple(self.identities[i] for i in rows),
            tuple(self.images[i] for i in rows),
            self.vectors[rows],
        )


def load_features(path: str | Path) -> FeatureDataset:
    """Read a feature CSV with header ``identity,image,f0,...,f{d-1}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DimensionError(f"{path}: empty file") from None
        if len(header) < 3 or header[0] != "identity" or header[1] != "image":
            raise DimensionError(f"{path}: header must start with 'identity,image' and list features")
        dim = len(header) - 2
        identities, images, rows = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != dim + 2:
                raise DimensionError(
                    f"{path}: line {lineno} has {len(row) - 2} values, expected {dim}"
                )
            try:
                values = [float(v) for v in row[2:]]
            except ValueError:
                raise DimensionError(f"{path}: line {lineno} has a non-numeric value") from None
            if not all(math.isfinite(v) for v in values):
                raise NonFiniteError(f"{path}: line {lineno} has a non-finite value")
            identities.append(row[0])
            images.append(row[1])
            rows.append(values)
    vectors = np.asarray(rows, dtype=np.float64).reshape(len(rows), dim)
    try:
        return FeatureDataset(tuple(identities), tuple(images), vectors)
    except DuplicateKeyError as exc:
        raise DuplicateKeyError(f"{path}: {exc}") from None


def save_features(data: FeatureDataset, path: str | Path) -> None:
    # repr() round-trips float64 exactly, so rewriting a loaded file is lossless
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["identity", "image"] + [f"f{j}" for j in range(data.dim)])
        for ident, img, vec in zip(data.identities, data.images, data.vectors):
            writer.writerow([ident, img] + [repr(float(v)) for v in vec])


@dataclass(frozen=True)
class SplitPlan:
    """Identity-level split: training / stranger identities ``train`` and family sets."""

    train: tuple[str, ...]
    family_sets: tuple[tuple[str, ...], ...]
    seed: int
    family_size: int
    num_family_sets: int
    min_images: int
    prng: str = field(default="numpy.PCG64")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = list(self.train)
        d["family_sets"] = [list(s) for s in self.family_sets]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def digest(self) -> str:
        canon = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "SplitPlan":
        try:
            plan = cls(
                train=tuple(d["train"]),
                family_sets=tuple(tuple(s) for s in d["family_sets"]),
                seed=int(d["seed"]),
                family_size=int(d["family_size"]),
                num_family_sets=int(d["num_family_sets"]),
                min_images=int(d["min_images"]),
                prng=d.get("prng", "numpy.PCG64"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise SplitError(f"malformed split plan: {exc}") from None
        train = set(plan.train)
        for i, fam in enumerate(plan.family_sets):
            if len(fam) != plan.family_size or len(set(fam)) != len(fam):
                raise SplitError(f"family set {i} does not have {plan.family_size} distinct identities")
            if train.intersection(fam):
                raise SplitError(f"family set {i} overlaps the training identities")
        return plan

    @classmethod
    def load(cls, path: str | Path) -> "SplitPlan":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")


def make_split(
    data: FeatureDataset,
    seed: int,
    family_size: int = 10,
    num_family_sets: int = 100,
    min_images: int = 10,
) -> SplitPlan:
    """Split identities into a training/stranger set and random family sets.

    Identities are sorted, shuffled with ``numpy.random.default_rng(seed)``
    (PCG64); the first ceil(n/2) become training identities and the rest
    family candidates.  Candidates with fewer than ``min_images`` images
    move to training.  Each family set is drawn without replacement from
    the candidates, independently of the other sets.  Candidates that land
    in no family set move to training.
    """
    if family_size < 1 or num_family_sets < 1 or min_images < 1:
        raise SplitError("family_size, num_family_sets and min_images must be positive")
    counts = data.image_counts()
    ids = sorted(counts)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(ids))
    shuffled = [ids[i] for i in order]
    half = (len(ids) + 1) // 2
    train = set(shuffled[:half])
    candidates = [i for i in shuffled[half:] if counts[i] >= min_images]
    train.update(i for i in shuffled[half:] if counts[i] < min_images)
    if len(candidates) < family_size:
        raise SplitError(
            f"only {len(candidates)} family candidates with >= {min_images} images; "
            f"need {family_size} for one family set"
        )
    family_sets = []
    for _ in range(num_family_sets):
        pick = rng.choice(len(candidates), size=family_size, replace=False)
        family_sets.append(tuple(sorted(candidates[j] for j in pick)))
    used = set().union(*family_sets)
    train.update(c for c in candidates if c not in used)
    return SplitPlan(
        train=tuple(sorted(train)),
        family_sets=tuple(family_sets),
        seed=int(seed),
        family_size=family_size,
        num_family_sets=num_family_sets,
        min_images=min_images,
    )
