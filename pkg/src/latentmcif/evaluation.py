"""Evaluation protocols: AUROC, recall@K, representative resampling, one-class-out,
single-forest baseline and the latent-size sweep."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from . import iforest
from .dataset import AuditTrail, FeatureVector, Standardizer
from .encoder import (
    EncoderClassifier, NetworkConfig, class_weights_from_counts, encode, latent_matrix, train,
)
from .iforest import BASELINE_ESTIMATORS, DEFAULT_PSI, MCIF_ESTIMATORS
from .mcif import fit_mcif, group_by_class
from .seeding import derive_seed

log = logging.getLogger(__name__)

REFERENCE_RATIO = 220.0
REFERENCE_COMMON_COUNT = 12040
REFERENCE_ANOMALY_COUNT = 54
REFERENCE_RESAMPLES = 50
REFERENCE_TOP_K = 2000
TOP_FRACTION = 0.15
PLATEAU_NOTE = "reference shape: AUROC improves up to ~50 latent dims, then plateaus (annotation only)"


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------- metrics


def auroc(scores_pos: Sequence[float], scores_neg: Sequence[float]) -> float:
    """P(random positive outranks random negative), ties counting one half.

    Rank-sum (Mann-Whitney U) with midranks.
    """
    pos = np.asarray(scores_pos, dtype=np.float64).ravel()
    neg = np.asarray(scores_neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("AUROC needs at least one positive and one negative score")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


@dataclass
class RecallCurve:
    k: np.ndarray
    recovered: np.ndarray
    n_anomalies: int

    @property
    def fraction(self) -> np.ndarray:
        return self.recovered / self.n_anomalies if self.n_anomalies else np.zeros_like(self.k, float)


def recall_at_k(ranked_ids: Sequence[str], anomaly_ids: Iterable[str], k_max: int | None = None) -> RecallCurve:
    """Anomalies found within the top K, for K = 1..k_max."""
    anomalies = set(anomaly_ids)
    n = len(ranked_ids)
    k_max = n if k_max is None else min(k_max, n)
    hits = np.fromiter((oid in anomalies for oid in ranked_ids[:k_max]), dtype=np.int64, count=k_max)
    return RecallCurve(np.arange(1, k_max + 1), np.cumsum(hits), len(anomalies))


# ---------------------------------------------------------------- representative population


@dataclass(frozen=True)
class PopulationSpec:
    common_count: int
    anomaly_count: int
    ratio: float = REFERENCE_RATIO
    n_resamples: int = REFERENCE_RESAMPLES
    seed: int = 0

    def __post_init__(self) -> None:
        if not self.ratio > 0:
            raise EvaluationError("ratio must be positive")
        if self.n_resamples < 1:
            raise EvaluationError("n_resamples must be >= 1")

    @classmethod
    def from_ratio(cls, common_count: int, ratio: float = REFERENCE_RATIO, n_resamples: int = REFERENCE_RESAMPLES,
                   seed: int = 0, min_anomalies: int = 1) -> "PopulationSpec":
        count = max(min_anomalies, int(round(common_count / ratio)))
        return cls(common_count, count, ratio, n_resamples, seed)


@dataclass
class Resample:
    common_ids: list[str]
    anomaly_ids: list[str]
    anomaly_labels: list[str]

    @property
    def ids(self) -> list[str]:
        return self.common_ids + self.anomaly_ids


def representative_resample(
    common_test: Sequence[str],
    anomaly_test: Mapping[str, Sequence[str]],
    spec: PopulationSpec,
) -> list[Resample]:
    """Keep every common object; draw ``spec.anomaly_count`` anomalies per resample.

    Per-class anomaly counts are multinomial with equal class probabilities;
    within a class objects are drawn without replacement.
    """
    classes = sorted(anomaly_test)
    if not classes:
        raise EvaluationError("no anomalous classes supplied")
    pool = sum(len(anomaly_test[c]) for c in classes)
    if pool < spec.anomaly_count:
        raise EvaluationError(f"anomaly pool of {pool} is smaller than the requested {spec.anomaly_count}")
    rng = np.random.default_rng(derive_seed(spec.seed, "resample"))
    common = list(common_test)
    out = []
    for _ in range(spec.n_resamples):
        while True:
            counts = rng.multinomial(spec.anomaly_count, np.full(len(classes), 1.0 / len(classes)))
            if all(counts[i] <= len(anomaly_test[c]) for i, c in enumerate(classes)):
                break
        ids, labels = [], []
        for c, k in zip(classes, counts):
            members = list(anomaly_test[c])
            picked = rng.choice(len(members), size=int(k), replace=False)
            ids.extend(members[j] for j in sorted(picked))
            labels.extend([c] * int(k))
        out.append(Resample(common, ids, labels))
    return out


# ---------------------------------------------------------------- report


@dataclass
class EvalReport:
    auroc: float
    auroc_std: float = 0.0
    recall_curve: list[tuple[int, float, float]] = field(default_factory=list)
    config_digest: str = ""
    per_class: dict[str, dict] = field(default_factory=dict)
    runtime_seconds: float = 0.0
    metadata: dict = field(default_factory=dict)
    failed: bool = False
    error: str | None = None

    def to_dict(self, include_runtime: bool = False) -> dict:
        doc = {
            "auroc": self.auroc,
            "auroc_std": self.auroc_std,
            "recall_curve": [[int(k), float(m), float(s)] for k, m, s in self.recall_curve],
            "config_digest": self.config_digest,
            "per_class": self.per_class,
            "metadata": self.metadata,
            "failed": self.failed,
            "error": self.error,
        }
        if include_runtime:
            doc["runtime_seconds"] = self.runtime_seconds
        return doc

    def save(self, path: str | Path) -> None:
        """Write the report; wall-clock runtime goes to a ``.timing.json`` sidecar
        so the report itself is byte-reproducible."""
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_json_default))
        path.with_suffix(".timing.json").write_text(
            json.dumps({"runtime_seconds": self.runtime_seconds, "config_digest": self.config_digest}))

    @classmethod
    def load(cls, path: str | Path) -> "EvalReport":
        doc = json.loads(Path(path).read_text())
        curve = [tuple(r) for r in doc.pop("recall_curve", [])]
        timing = Path(path).with_suffix(".timing.json")
        runtime = json.loads(timing.read_text())["runtime_seconds"] if timing.exists() else 0.0
        return cls(recall_curve=curve, runtime_seconds=runtime, **doc)


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(type(obj).__name__)


def _nanfloat(x: float) -> float | None:
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else float(x)


def evaluate_representative(
    scores: Mapping[str, float],
    common_test: Sequence[str],
    anomaly_test: Mapping[str, Sequence[str]],
    spec: PopulationSpec,
    top_fraction: float = TOP_FRACTION,
    config_digest: str = "",
) -> tuple[EvalReport, list[RecallCurve]]:
    """Rank every resample by score and summarise recall within the top fraction."""
    t0 = time.perf_counter()
    resamples = representative_resample(common_test, anomaly_test, spec)
    n_total = len(common_test) + spec.anomaly_count
    k_top = max(1, int(round(top_fraction * n_total)))
    curves, recovered_top = [], []
    per_class_hits: dict[str, list[int]] = {c: [0, 0] for c in sorted(anomaly_test)}
    aurocs = []
    for rs in resamples:
        ids = rs.ids
        ranked = sorted(ids, key=lambda o: (-scores[o], o))
        curve = recall_at_k(ranked, rs.anomaly_ids, n_total)
        curves.append(curve)
        recovered_top.append(int(curve.recovered[k_top - 1]))
        top = set(ranked[:k_top])
        for oid, lab in zip(rs.anomaly_ids, rs.anomaly_labels):
            per_class_hits[lab][0] += oid in top
            per_class_hits[lab][1] += 1
        aurocs.append(auroc([scores[o] for o in rs.anomaly_ids], [scores[o] for o in rs.common_ids]))
    rec = np.vstack([c.recovered for c in curves]).astype(float)
    mean, std = rec.mean(axis=0), rec.std(axis=0)
    curve_rows = [(int(k), float(m), float(s)) for k, m, s in zip(curves[0].k, mean, std)]
    top_arr = np.array(recovered_top, dtype=float)
    per_class = {}
    for c, (hit, tot) in per_class_hits.items():
        pos = [scores[o] for o in anomaly_test[c]]
        per_class[c] = {
            "recall_top": hit / tot if tot else None,
            "sampled": tot,
            "auroc_vs_common": auroc(pos, [scores[o] for o in common_test]) if pos else None,
        }
    report = EvalReport(
        auroc=float(np.mean(aurocs)),
        auroc_std=float(np.std(aurocs)),
        recall_curve=curve_rows,
        config_digest=config_digest,
        per_class=per_class,
        metadata={
            "protocol": "representative",
            "common_count": len(common_test),
            "anomaly_count": spec.anomaly_count,
            "ratio": spec.ratio,
            "reference_anomaly_count": REFERENCE_ANOMALY_COUNT,
            "reference_common_count": REFERENCE_COMMON_COUNT,
            "ratio_implied_reference_count": int(round(REFERENCE_COMMON_COUNT / REFERENCE_RATIO)),
            "n_resamples": spec.n_resamples,
            "seed": spec.seed,
            "top_fraction": top_fraction,
            "k_top": k_top,
            "recovered_top_mean": float(top_arr.mean()),
            "recovered_top_std": float(top_arr.std()),
            "recall_top_mean": float(top_arr.mean() / spec.anomaly_count),
        },
    )
    report.runtime_seconds = time.perf_counter() - t0
    return report, curves


def write_recall_csv(path: str | Path, report: EvalReport) -> None:
    n = report.metadata.get("anomaly_count") or 1
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "recovered_mean", "recovered_std", "recall_mean"])
        for k, m, s in report.recall_curve:
            w.writerow([k, repr(m), repr(s), repr(m / n)])


# ---------------------------------------------------------------- detectors


DETECTOR_KINDS = ("classifier+iforest", "classifier+mcif", "mcif", "iforest")


@dataclass
class Detector:
    """Anomaly detector trained on labelled common-class vectors."""

    kind: str
    network: NetworkConfig | None = None
    n_estimators: int = MCIF_ESTIMATORS
    psi: int = DEFAULT_PSI
    seed: int = 0
    standardizer: Standardizer | None = None
    encoder: EncoderClassifier | None = None
    model: object = None

    def fit(self, vectors: Sequence[FeatureVector], audit: AuditTrail | None = None) -> "Detector":
        if self.kind not in DETECTOR_KINDS:
            raise EvaluationError(f"unknown detector kind {self.kind!r}")
        ids = [v.object_id for v in vectors]
        labels = [v.label for v in vectors]
        X = np.vstack([v.values for v in vectors])
        self.standardizer = Standardizer.fit(X, ids, audit)
        Xs = self.standardizer.transform(X)
        if self.kind.startswith("classifier"):
            classes = sorted(set(labels))
            if len(classes) < 2:
                raise EvaluationError("a classifier needs at least two common classes")
            base = self.network or NetworkConfig()
            cfg = NetworkConfig(**{**base.to_dict(), "input_kind": "features", "input_dim": X.shape[1],
                                   "n_classes": len(classes), "seed": derive_seed(self.seed, "encoder")})
            self.encoder = EncoderClassifier.initialize(cfg, classes)
            train_vecs = [FeatureVector(i, x, lab) for i, x, lab in zip(ids, Xs, labels)]
            train(self.encoder, train_vecs, audit=audit)
            Z = latent_matrix(encode(self.encoder, train_vecs))
        else:
            Z = Xs
        if self.kind.endswith("mcif"):
            groups = group_by_class(Z, labels)
            lab_arr = np.asarray(labels, dtype=object)
            id_arr = np.asarray(ids, dtype=object)
            id_groups = {c: id_arr[lab_arr == c].tolist() for c in groups}
            self.model = fit_mcif(groups, self.n_estimators, self.psi, derive_seed(self.seed, "mcif"),
                                  ids_by_class=id_groups, audit=audit)
        else:
            weights = sample_weights(labels)
            if audit is not None:
                audit.record("iforest", ids)
            self.model = iforest.fit(Z, self.n_estimators, self.psi, weights, derive_seed(self.seed, "iforest"))
        return self

    def latents(self, vectors: Sequence[FeatureVector]) -> np.ndarray:
        Xs = self.standardizer.transform(np.vstack([v.values for v in vectors]))
        if self.encoder is None:
            return Xs
        return latent_matrix(encode(self.encoder, [FeatureVector(v.object_id, x, None)
                                                    for v, x in zip(vectors, Xs)]))

    def score(self, vectors: Sequence[FeatureVector]) -> np.ndarray:
        Z = self.latents(vectors)
        if self.kind.endswith("mcif"):
            return self.model.score(Z)[0]
        return self.model.score(Z)


def make_detector(kind: str, **kwargs) -> Detector:
    if kind not in DETECTOR_KINDS:
        raise EvaluationError(f"unknown detector kind {kind!r}; choose from {DETECTOR_KINDS}")
    return Detector(kind, **kwargs)


def sample_weights(labels: Sequence[str]) -> np.ndarray:
    """Per-sample inverse class frequency, normalised to mean 1 over classes."""
    labels = np.asarray(labels, dtype=object)
    classes = sorted(set(labels.tolist()))
    counts = [int(np.sum(labels == c)) for c in classes]
    w = dict(zip(classes, class_weights_from_counts(counts)))
    return np.array([w[lab] for lab in labels])


# ---------------------------------------------------------------- one-class-out protocol


def _fold_assignment(labels: Sequence[str], n_folds: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.asarray(labels, dtype=object)
    fold = np.empty(len(labels), dtype=np.int64)
    for c in sorted(set(labels.tolist())):
        idx = rng.permutation(np.flatnonzero(labels == c))
        for k, part in enumerate(np.array_split(idx, n_folds)):
            fold[part] = k
    return fold


def one_class_out_protocol(
    vectors: Sequence[FeatureVector],
    categories: Mapping[str, Sequence[str]],
    detector_factory: Callable[[int], Detector] | str,
    n_folds: int = 5,
    seed: int = 0,
    *,
    audit: AuditTrail | None = None,
    config_digest: str = "",
) -> dict[tuple[str, str], EvalReport]:
    """Hold out each class of each category in turn as the anomaly.

    For fold k the detector is trained on the other folds of the remaining
    classes in the category and scored on fold k of every class in the category.
    ``detector_factory`` is a detector kind or a callable ``seed -> Detector``.
    """
    if isinstance(detector_factory, str):
        kind = detector_factory
        detector_factory = lambda s: make_detector(kind, seed=s)  # noqa: E731
    labels = np.array([v.label for v in vectors], dtype=object)
    out: dict[tuple[str, str], EvalReport] = {}
    for cat in sorted(categories):
        members = list(categories[cat])
        if len(members) < 2:
            raise EvaluationError(f"category {cat!r} needs at least two classes")
        in_cat = np.flatnonzero(np.isin(labels, members))
        rng = np.random.default_rng(derive_seed(seed, "folds", cat))
        fold = np.full(len(vectors), -1)
        fold[in_cat] = _fold_assignment(labels[in_cat], n_folds, rng)
        for anom in members:
            t0 = time.perf_counter()
            fold_aucs = []
            trained_on: set[str] = set()
            try:
                for k in range(n_folds):
                    tr = [i for i in in_cat if labels[i] != anom and fold[i] != k]
                    te_common = [i for i in in_cat if labels[i] != anom and fold[i] == k]
                    te_anom = [i for i in in_cat if labels[i] == anom and fold[i] == k]
                    if not te_common or not te_anom:
                        continue
                    fold_audit = AuditTrail()
                    det = detector_factory(derive_seed(seed, "detector", cat, anom, k))
                    det.fit([vectors[i] for i in tr], audit=fold_audit)
                    anom_ids = {vectors[i].object_id for i in in_cat if labels[i] == anom}
                    fold_audit.assert_clean(anom_ids)
                    for stage, ids in fold_audit.stages.items():
                        trained_on |= ids
                        if audit is not None:
                            audit.record(f"{cat}/{anom}/{stage}", ids)
                    s_anom = det.score([vectors[i] for i in te_anom])
                    s_common = det.score([vectors[i] for i in te_common])
                    fold_aucs.append(auroc(s_anom, s_common))
                if not fold_aucs:
                    raise EvaluationError("no fold had both common and anomalous test objects")
                rep = EvalReport(float(np.mean(fold_aucs)), float(np.std(fold_aucs)),
                                 config_digest=config_digest,
                                 metadata={"category": cat, "anomalous_class": anom,
                                           "common_classes": [c for c in members if c != anom],
                                           "fold_aurocs": fold_aucs, "n_folds": n_folds,
                                           "n_trained_objects": len(trained_on)})
            except Exception as exc:  # a failed detector is reported, the protocol continues
                log.warning("protocol %s/%s failed: %s", cat, anom, exc)
                rep = EvalReport(math.nan, math.nan, config_digest=config_digest, failed=True,
                                 error=f"{type(exc).__name__}: {exc}",
                                 metadata={"category": cat, "anomalous_class": anom})
            rep.runtime_seconds = time.perf_counter() - t0
            out[(cat, anom)] = rep
    return out


def load_reference_table() -> dict:
    """Reference AUROCs for the external feature dataset (comparison targets only)."""
    text = resources.files("latentmcif").joinpath("data/reference_auroc.json").read_text()
    return json.loads(text)


# ---------------------------------------------------------------- single-forest baseline


def single_iforest_baseline(
    latents: np.ndarray,
    class_labels: Sequence[str],
    n_estimators: int = BASELINE_ESTIMATORS,
    psi: int = DEFAULT_PSI,
    seed: int = 0,
    *,
    ids: Sequence[str] | None = None,
    audit: AuditTrail | None = None,
) -> iforest.IsolationForest:
    """One forest over every class with inverse-frequency sample weights."""
    if audit is not None and ids is not None:
        audit.record("baseline", ids)
    return iforest.fit(latents, n_estimators, psi, sample_weights(class_labels), seed)


# ---------------------------------------------------------------- latent sweep


@dataclass
class SweepRow:
    dim: int
    auroc_mean: float
    auroc_std: float
    n_runs: int
    failures: list[str] = field(default_factory=list)


def latent_sweep(
    dims: Sequence[int],
    run_pipeline: Callable[[int, int], float],
    seeds: Sequence[int] = (0,),
) -> list[SweepRow]:
    """AUROC mean/std per latent size; ``run_pipeline(dim, seed)`` returns one AUROC.

    A failed run is recorded and the sweep continues.
    """
    if not dims:
        raise EvaluationError("dims must be non-empty")
    rows = []
    for d in dims:
        vals, failures = [], []
        for s in seeds:
            try:
                vals.append(float(run_pipeline(int(d), int(s))))
            except Exception as exc:
                log.warning("sweep run dim=%s seed=%s failed: %s", d, s, exc)
                failures.append(f"seed {s}: {type(exc).__name__}: {exc}")
        arr = np.array(vals)
        rows.append(SweepRow(int(d), float(arr.mean()) if vals else math.nan,
                             float(arr.std()) if vals else math.nan, len(vals), failures))
    return rows


def write_sweep_csv(path: str | Path, rows: Sequence[SweepRow]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["latent_dim", "auroc_mean", "auroc_std", "n_runs", "n_failed"])
        for r in rows:
            w.writerow([r.dim, repr(r.auroc_mean), repr(r.auroc_std), r.n_runs, len(r.failures)])
