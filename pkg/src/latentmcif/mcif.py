"""Multi-Class Isolation Forests: one forest per known class, score = min over classes."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import iforest
from .dataset import AuditTrail
from .iforest import DEFAULT_PSI, MCIF_ESTIMATORS, IsolationForest
from .seeding import derive_seed

MCIF_FORMAT = "latentmcif.mcif"
MCIF_VERSION = 1

RANKED_COLUMNS = ("rank", "object_id", "score", "nearest_class", "label")


class McifError(ValueError):
    pass


@dataclass(eq=False)
class McifModel:
    forests: dict[str, IsolationForest]
    class_order: list[str]
    latent_dim: int
    seed: int = 0

    def per_class_scores(self, Z: np.ndarray) -> np.ndarray:
        """Anomaly score of every probe under every class forest, shape (n, n_classes)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        if Z.shape[1] != self.latent_dim:
            raise McifError(f"expected {self.latent_dim}-dim latents, got {Z.shape[1]}")
        return np.column_stack([self.forests[c].score(Z) for c in self.class_order])

    def score(self, Z: np.ndarray) -> tuple[np.ndarray, list[str]]:
        S = self.per_class_scores(Z)
        # argmin returns the first minimum, so ties resolve by class_order
        best = S.argmin(axis=1)
        return S[np.arange(len(best)), best], [self.class_order[i] for i in best]

    def to_dict(self) -> dict:
        return {
            "format": MCIF_FORMAT,
            "version": MCIF_VERSION,
            "latent_dim": self.latent_dim,
            "seed": self.seed,
            "class_order": list(self.class_order),
            "forests": {c: self.forests[c].to_dict() for c in self.class_order},
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "McifModel":
        if doc.get("format") != MCIF_FORMAT or doc.get("version") != MCIF_VERSION:
            raise McifError(f"unsupported MCIF bundle {doc.get('format')!r} v{doc.get('version')}")
        forests = {c: IsolationForest.from_dict(f) for c, f in doc["forests"].items()}
        return cls(forests, list(doc["class_order"]), int(doc["latent_dim"]), int(doc.get("seed", 0)))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "McifModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def class_seed(seed: int, index: int) -> int:
    return derive_seed(seed, "mcif", index)


def fit_mcif(
    latents_by_class: Mapping[str, np.ndarray],
    n_estimators: int = MCIF_ESTIMATORS,
    psi: int = DEFAULT_PSI,
    seed: int = 0,
    *,
    ids_by_class: Mapping[str, Sequence[str]] | None = None,
    audit: AuditTrail | None = None,
) -> McifModel:
    """Fit one isolation forest per class on that class's vectors only.

    Classes are ordered by name; the forest for the class at position i is
    seeded from ``(seed, i)``.  psi is clamped to each class's sample count.
    """
    if not latents_by_class:
        raise McifError("no classes to fit")
    order = sorted(latents_by_class)
    dims = set()
    for c in order:
        X = np.asarray(latents_by_class[c])
        if X.ndim != 2 or X.shape[0] < 2:
            raise McifError(f"class {c!r} needs at least 2 vectors, got {X.shape[0] if X.ndim == 2 else 0}")
        dims.add(X.shape[1])
    if len(dims) != 1:
        raise McifError(f"classes have different dimensions {sorted(dims)}")
    forests = {}
    for i, c in enumerate(order):
        if audit is not None and ids_by_class is not None:
            audit.record("mcif", ids_by_class[c])
        forests[c] = iforest.fit(latents_by_class[c], n_estimators, psi, None, class_seed(seed, i))
    return McifModel(forests, order, dims.pop(), seed)


def group_by_class(Z: np.ndarray, labels: Sequence[str]) -> dict[str, np.ndarray]:
    labels = np.asarray(labels, dtype=object)
    return {c: Z[labels == c] for c in sorted(set(labels.tolist()))}


def score_mcif(model: McifModel, z: np.ndarray) -> tuple[float, str]:
    a, nearest = model.score(np.asarray(z)[None, :])
    return float(a[0]), nearest[0]


@dataclass(frozen=True)
class RankedEntry:
    object_id: str
    score: float
    nearest_class: str
    label: str | None = None


def rank_scores(
    object_ids: Sequence[str], scores: Sequence[float], nearest: Sequence[str] | None = None,
    labels: Sequence[str | None] | None = None,
) -> list[RankedEntry]:
    """Sort by descending score, ties by object_id."""
    n = len(object_ids)
    nearest = nearest if nearest is not None else [""] * n
    labels = labels if labels is not None else [None] * n
    entries = [RankedEntry(str(o), float(s), k, lab) for o, s, k, lab in zip(object_ids, scores, nearest, labels)]
    return sorted(entries, key=lambda e: (-e.score, e.object_id))


def rank(model: McifModel, latents: Iterable) -> list[RankedEntry]:
    """Rank LatentVectors (anything with ``object_id``, ``z`` and optional ``label``)."""
    latents = list(latents)
    if not latents:
        return []
    Z = np.vstack([lv.z for lv in latents])
    a, nearest = model.score(Z)
    return rank_scores([lv.object_id for lv in latents], a, nearest,
                       [getattr(lv, "label", None) for lv in latents])


def write_ranked_csv(path: str | Path, ranked: Sequence[RankedEntry]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RANKED_COLUMNS)
        for i, e in enumerate(ranked, start=1):
            w.writerow([i, e.object_id, repr(e.score), e.nearest_class, e.label or ""])


def read_ranked_csv(path: str | Path) -> list[RankedEntry]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    return [RankedEntry(r["object_id"], float(r["score"]), r["nearest_class"], r["label"] or None) for r in rows]
