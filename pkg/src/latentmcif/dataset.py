"""Light curves, feature tables, preprocessing and train/val/test splits."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

PASSBANDS = ("g", "r")
# ZTF g/r central wavelengths in micrometres, divided by 1 um
DEFAULT_WAVELENGTHS = {"g": 0.4767, "r": 0.6215}
TIME_SCALE_DAYS = 100.0
REFERENCE_N_T = 656
DESK_N_T = 64
CONTEXT_DIM = 4

LIGHT_CURVE_COLUMNS = ("object_id", "time", "flux", "flux_err", "passband", "redshift", "mwebv", "label")


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class LightCurve:
    """Multi-passband photometry for one object, time in days relative to trigger.

    ``redshift`` / ``mwebv`` are NaN when unknown.
    """

    object_id: str
    time: np.ndarray
    flux: np.ndarray
    flux_err: np.ndarray
    passband: np.ndarray  # int codes into PASSBANDS
    redshift: float = math.nan
    mwebv: float = math.nan
    label: str | None = None

    def __post_init__(self) -> None:
        self.time = np.asarray(self.time, dtype=np.float64)
        self.flux = np.asarray(self.flux, dtype=np.float64)
        self.flux_err = np.asarray(self.flux_err, dtype=np.float64)
        self.passband = np.asarray(self.passband, dtype=np.int64)
        n = self.time.shape[0]
        if not (self.flux.shape[0] == self.flux_err.shape[0] == self.passband.shape[0] == n):
            raise DatasetError(f"{self.object_id}: point arrays differ in length")
        if n and np.any(np.diff(self.time) < 0):
            raise DatasetError(f"{self.object_id}: times are not sorted")
        if n and np.any(self.flux_err <= 0):
            raise DatasetError(f"{self.object_id}: flux_err must be positive")

    def __len__(self) -> int:
        return int(self.time.shape[0])

    def subset(self, keep: np.ndarray) -> "LightCurve":
        return LightCurve(self.object_id, self.time[keep], self.flux[keep], self.flux_err[keep],
                          self.passband[keep], self.redshift, self.mwebv, self.label)


@dataclass(eq=False)
class EncodedSequence:
    """Network input for one object.

    rows[j] = [flux / scale, flux_err / scale, time / 100, wavelength]; rows past
    the real observations are zero and masked out.
    """

    object_id: str
    rows: np.ndarray
    mask: np.ndarray
    context: np.ndarray
    scale: float
    scale_fallback: bool = False
    label: str | None = None

    @property
    def n_points(self) -> int:
        return int(self.mask.sum())


@dataclass(eq=False)
class FeatureVector:
    object_id: str
    values: np.ndarray
    label: str | None = None


@dataclass
class DatasetSplit:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray
    anomalous_classes: frozenset[str] = frozenset()

    def to_dict(self) -> dict:
        return {
            "train": self.train.tolist(),
            "validation": self.validation.tolist(),
            "test": self.test.tolist(),
            "anomalous_classes": sorted(self.anomalous_classes),
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "DatasetSplit":
        return cls(np.asarray(doc["train"], np.int64), np.asarray(doc["validation"], np.int64),
                   np.asarray(doc["test"], np.int64), frozenset(doc["anomalous_classes"]))


# ---------------------------------------------------------------- CSV I/O


def _parse_float(text: str) -> float:
    text = text.strip()
    return math.nan if text == "" else float(text)


def load_light_curves(path: str | Path, *, return_rejected: bool = False):
    """Read the light-curve CSV, one LightCurve per object_id in first-seen order.

    Rows with flux_err <= 0 are dropped and counted; a missing header column or
    unknown passband token is a hard error.
    """
    path = Path(path)
    groups: dict[str, list[tuple[float, float, float, int]]] = {}
    meta: dict[str, tuple[float, float, str | None]] = {}
    rejected = 0
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DatasetError(f"{path}: empty file") from None
        missing = [c for c in LIGHT_CURVE_COLUMNS if c not in header]
        if missing:
            raise DatasetError(f"{path}: missing columns {', '.join(missing)}")
        col = {c: header.index(c) for c in LIGHT_CURVE_COLUMNS}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(header):
                raise DatasetError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            band = row[col["passband"]].strip()
            if band not in PASSBANDS:
                raise DatasetError(f"{path}:{lineno}: unknown passband {band!r}")
            try:
                t = float(row[col["time"]])
                f = float(row[col["flux"]])
                e = float(row[col["flux_err"]])
                z = _parse_float(row[col["redshift"]])
                ebv = _parse_float(row[col["mwebv"]])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
            oid = row[col["object_id"]].strip()
            label = row[col["label"]].strip() or None
            meta.setdefault(oid, (z, ebv, label))
            if not e > 0:
                rejected += 1
                continue
            groups.setdefault(oid, []).append((t, f, e, PASSBANDS.index(band)))
    if rejected:
        log.warning("%s: dropped %d rows with non-positive flux_err", path, rejected)
    curves = []
    for oid, (z, ebv, label) in meta.items():
        pts = groups.get(oid)
        if not pts:
            log.warning("%s: object %s has no valid points, skipped", path, oid)
            continue
        arr = np.array(pts, dtype=np.float64).reshape(-1, 4)
        order = np.argsort(arr[:, 0], kind="stable")
        arr = arr[order]
        curves.append(LightCurve(oid, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3].astype(np.int64),
                                 z, ebv, label))
    return (curves, rejected) if return_rejected else curves


def _fmt(x: float) -> str:
    return "" if math.isnan(x) else repr(float(x))


def write_light_curves(path: str | Path, curves: Iterable[LightCurve]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LIGHT_CURVE_COLUMNS)
        for lc in curves:
            z, ebv, label = _fmt(lc.redshift), _fmt(lc.mwebv), lc.label or ""
            for t, f, e, b in zip(lc.time, lc.flux, lc.flux_err, lc.passband):
                w.writerow([lc.object_id, repr(float(t)), repr(float(f)), repr(float(e)),
                            PASSBANDS[b], z, ebv, label])


def load_feature_table(path: str | Path) -> list[FeatureVector]:
    """Read ``object_id,label,f0..f{d-1}``; NaN or ragged rows are hard errors."""
    path = Path(path)
    out = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        if header[:2] != ["object_id", "label"] or len(header) < 3:
            raise DatasetError(f"{path}: header must start with object_id,label then feature columns")
        d = len(header) - 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise DatasetError(f"{path}:{lineno}: expected {d + 2} fields, got {len(row)}")
            values = np.empty(d)
            for j, cell in enumerate(row[2:]):
                try:
                    values[j] = float(cell)
                except ValueError:
                    raise DatasetError(f"{path}:{lineno}: column {header[j + 2]} is not numeric") from None
                if not math.isfinite(values[j]):
                    raise DatasetError(f"{path}:{lineno}: column {header[j + 2]} is not finite")
            out.append(FeatureVector(row[0].strip(), values, row[1].strip() or None))
    return out


def write_feature_table(path: str | Path, vectors: Sequence[FeatureVector]) -> None:
    d = len(vectors[0].values) if vectors else 0
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object_id", "label"] + [f"f{j}" for j in range(d)])
        for v in vectors:
            w.writerow([v.object_id, v.label or ""] + [repr(float(x)) for x in v.values])


def feature_matrix(vectors: Sequence[FeatureVector]) -> np.ndarray:
    if not vectors:
        return np.empty((0, 0))
    widths = {len(v.values) for v in vectors}
    if len(widths) != 1:
        raise DatasetError(f"inconsistent feature widths {sorted(widths)}")
    return np.vstack([v.values for v in vectors])


# ---------------------------------------------------------------- preprocessing


def context_vector(redshift: float, mwebv: float) -> np.ndarray:
    """[redshift, mwebv, has_redshift, has_mwebv]; missing values enter as 0."""
    has_z = not math.isnan(redshift)
    has_e = not math.isnan(mwebv)
    return np.array([redshift if has_z else 0.0, mwebv if has_e else 0.0, float(has_z), float(has_e)])


def preprocess(
    lc: LightCurve,
    n_t: int = DESK_N_T,
    wavelengths: Mapping[str, float] | None = None,
) -> EncodedSequence:
    """Scale one light curve into an ``n_t x 4`` masked matrix.

    Flux and its error are divided by the object's maximum |flux|; an all-zero
    (or empty) curve keeps scale 1.0 and is flagged.  Curves longer than ``n_t``
    keep their earliest ``n_t`` points.
    """
    if n_t < 1:
        raise DatasetError(f"n_t must be positive, got {n_t}")
    wl = DEFAULT_WAVELENGTHS if wavelengths is None else wavelengths
    lam = np.array([wl[b] for b in PASSBANDS])
    m = min(len(lc), n_t)
    flux = lc.flux[:m]
    peak = float(np.max(np.abs(flux))) if m else 0.0
    fallback = not peak > 0
    scale = 1.0 if fallback else peak
    rows = np.zeros((n_t, 4))
    rows[:m, 0] = flux / scale
    rows[:m, 1] = lc.flux_err[:m] / scale
    rows[:m, 2] = lc.time[:m] / TIME_SCALE_DAYS
    rows[:m, 3] = lam[lc.passband[:m]]
    mask = np.zeros(n_t, dtype=bool)
    mask[:m] = True
    return EncodedSequence(lc.object_id, rows, mask, context_vector(lc.redshift, lc.mwebv),
                           scale, fallback, lc.label)


def descale(seq: EncodedSequence) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Invert the scaling: (time, flux, flux_err) of the real rows."""
    r = seq.rows[seq.mask]
    return r[:, 2] * TIME_SCALE_DAYS, r[:, 0] * seq.scale, r[:, 1] * seq.scale


def stack_sequences(seqs: Sequence[EncodedSequence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch arrays (rows B x T x 4, mask B x T, context B x C)."""
    rows = np.stack([s.rows for s in seqs])
    mask = np.stack([s.mask for s in seqs])
    ctx = np.stack([s.context for s in seqs])
    return rows, mask, ctx


@dataclass
class Standardizer:
    """Per-column z-scoring fitted on training rows; zero-variance columns keep scale 1."""

    mean: np.ndarray
    scale: np.ndarray
    fitted_on: tuple[str, ...] = ()

    @classmethod
    def fit(cls, X: np.ndarray, ids: Sequence[str] = (), audit: "AuditTrail | None" = None) -> "Standardizer":
        X = np.asarray(X, dtype=np.float64)
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        scale = np.where(std > 0, std, 1.0)
        if audit is not None:
            audit.record("standardization", ids)
        return cls(mean, scale, tuple(ids))

    def transform(self, X: np.ndarray) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.scale

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}


# ---------------------------------------------------------------- splits


def make_split(
    labels: Sequence[str],
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
    anomalous_classes: Iterable[str] = (),
    seed: int = 0,
) -> DatasetSplit:
    """Stratified train/validation/test split; anomalous classes go entirely to test."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DatasetError(f"fractions must be three non-negative values summing to 1, got {fractions}")
    anomalous = frozenset(anomalous_classes)
    labels = np.asarray(labels, dtype=object)
    rng = np.random.default_rng(seed)
    train, val, test = [], [], []
    for cls_name in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls_name)
        if cls_name in anomalous:
            test.append(idx)
            continue
        if len(idx) < 3:
            raise DatasetError(f"class {cls_name!r} has {len(idx)} objects; need at least 3 to stratify")
        idx = rng.permutation(idx)
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        n_tr = min(n_tr, len(idx))
        n_va = min(n_va, len(idx) - n_tr)
        train.append(idx[:n_tr])
        val.append(idx[n_tr:n_tr + n_va])
        test.append(idx[n_tr + n_va:])

    def cat(parts):
        return np.sort(np.concatenate(parts)) if parts else np.empty(0, np.int64)

    return DatasetSplit(cat(train), cat(val), cat(test), anomalous)


# ---------------------------------------------------------------- audit trail


@dataclass
class AuditTrail:
    """Object ids that reached each training stage, for leakage checks."""

    stages: dict[str, set[str]] = field(default_factory=dict)

    def record(self, stage: str, ids: Iterable[str]) -> None:
        self.stages.setdefault(stage, set()).update(str(i) for i in ids)

    def leaked(self, forbidden: Iterable[str]) -> dict[str, list[str]]:
        bad = set(forbidden)
        return {s: sorted(ids & bad) for s, ids in self.stages.items() if ids & bad}

    def assert_clean(self, forbidden: Iterable[str]) -> None:
        leaks = self.leaked(forbidden)
        if leaks:
            first = next(iter(leaks.items()))
            raise AssertionError(f"held-out objects reached training stage {first[0]!r}: {first[1][:5]}")

    def to_dict(self) -> dict:
        return {s: sorted(ids) for s, ids in sorted(self.stages.items())}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "AuditTrail":
        return cls({s: set(ids) for s, ids in doc.items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "AuditTrail":
        return cls.from_dict(json.loads(Path(path).read_text()))
