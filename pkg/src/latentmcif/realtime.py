"""Anomaly scores on growing light-curve prefixes, one evaluation per day.

Boundary conventions: truncation at ``l`` keeps points with time < l, and an
object is eligible at ``l`` only when its final observation is later than
``l - eligibility_window``.

Forests fit on full-curve latents treat early partial curves of common
classes as unfamiliar, so ``fit_realtime_mcif`` also feeds them latents of
random training prefixes drawn under the same eligibility rule.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .dataset import DESK_N_T, AuditTrail, LightCurve, preprocess
from .encoder import EncoderClassifier, encode, latent_matrix
from .iforest import DEFAULT_PSI, MCIF_ESTIMATORS
from .mcif import McifModel, fit_mcif
from .seeding import derive_seed

L_MIN = -30
L_MAX = 70
ELIGIBILITY_WINDOW = 5.0


def truncate(lc: LightCurve, l: float) -> LightCurve:
    """Observations strictly before ``l``; context scalars and label preserved."""
    return lc.subset(lc.time < l)


def is_eligible(lc: LightCurve, l: float, window: float = ELIGIBILITY_WINDOW) -> bool:
    return len(lc) > 0 and float(lc.time[-1]) > l - window


@dataclass
class ScoreTimeline:
    object_id: str
    label: str | None
    times: list[int]
    scores: list[float | None]
    n_points: list[int] = field(default_factory=list)

    @property
    def eligible(self) -> list[bool]:
        return [s is not None for s in self.scores]


def timeline(
    encoder: EncoderClassifier,
    mcif: McifModel,
    lc: LightCurve,
    l_range: Sequence[int] | None = None,
    eligibility_window: float = ELIGIBILITY_WINDOW,
    n_t: int = DESK_N_T,
) -> ScoreTimeline:
    """MCIF score of ``lc`` truncated at each day in ``l_range`` (default -30..70)."""
    ls = list(range(L_MIN, L_MAX + 1)) if l_range is None else [int(l) for l in l_range]
    counts = [int(np.sum(lc.time < l)) for l in ls]
    live = [i for i, l in enumerate(ls) if is_eligible(lc, l, eligibility_window)]
    scores: list[float | None] = [None] * len(ls)
    if live:
        seqs = [preprocess(truncate(lc, ls[i]), n_t) for i in live]
        Z = latent_matrix(encode(encoder, seqs))
        a, _ = mcif.score(Z)
        for i, v in zip(live, a):
            scores[i] = float(v)
    return ScoreTimeline(lc.object_id, lc.label, ls, scores, counts)


def prefix_sample(
    curves: Sequence[LightCurve],
    n_draws: int,
    rng: np.random.Generator,
    l_min: int = L_MIN,
    l_max: int = L_MAX,
    eligibility_window: float = ELIGIBILITY_WINDOW,
) -> list[LightCurve]:
    """Each full curve followed by up to ``n_draws`` truncations at random whole days.

    Draws where the curve would be ineligible are skipped, so the sample
    covers the same partial inputs a timeline scores.
    """
    out = []
    for lc in curves:
        out.append(lc)
        for l in rng.integers(l_min, l_max + 1, size=n_draws):
            if is_eligible(lc, int(l), eligibility_window):
                out.append(truncate(lc, int(l)))
    return out


def fit_realtime_mcif(
    encoder: EncoderClassifier,
    curves: Sequence[LightCurve],
    n_draws: int = 3,
    n_estimators: int = MCIF_ESTIMATORS,
    psi: int = DEFAULT_PSI,
    seed: int = 0,
    *,
    n_t: int = DESK_N_T,
    eligibility_window: float = ELIGIBILITY_WINDOW,
    audit: AuditTrail | None = None,
) -> McifModel:
    """MCIF over latents of labelled training curves and their random prefixes."""
    sample = prefix_sample(curves, n_draws, np.random.default_rng(derive_seed(seed, "prefixes")),
                           eligibility_window=eligibility_window)
    Z = latent_matrix(encode(encoder, [preprocess(lc, n_t) for lc in sample]))
    labels = np.array([lc.label for lc in sample], dtype=object)
    ids = sorted({lc.object_id for lc in sample})
    if audit is not None:
        audit.record("realtime-mcif", ids)
    return fit_mcif({c: Z[labels == c] for c in sorted(set(labels))}, n_estimators, psi, seed)


def timelines(encoder, mcif, curves: Sequence[LightCurve], **kwargs) -> list[ScoreTimeline]:
    return [timeline(encoder, mcif, lc, **kwargs) for lc in curves]


@dataclass
class MedianCurve:
    times: list[int]
    median: list[float]
    n: list[int]


def median_curves(grouped: Mapping[str, Sequence[ScoreTimeline]]) -> dict[str, MedianCurve]:
    """Per-group median score over eligible objects at each ``l``, with sample sizes."""
    out = {}
    for group, tls in sorted(grouped.items()):
        if not tls:
            continue
        ls = tls[0].times
        med, ns = [], []
        for j in range(len(ls)):
            vals = [tl.scores[j] for tl in tls if tl.scores[j] is not None]
            ns.append(len(vals))
            med.append(float(np.median(vals)) if vals else math.nan)
        out[group] = MedianCurve(list(ls), med, ns)
    return out


def write_timelines_csv(path: str | Path, tls: Sequence[ScoreTimeline]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object_id", "label", "l", "score", "eligible"])
        for tl in tls:
            for l, s in zip(tl.times, tl.scores):
                w.writerow([tl.object_id, tl.label or "", l, "" if s is None else repr(s), int(s is not None)])


def write_median_csv(path: str | Path, curves: Mapping[str, MedianCurve]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group", "l", "median_score", "n"])
        for g, mc in curves.items():
            for l, m, n in zip(mc.times, mc.median, mc.n):
                w.writerow([g, l, "" if math.isnan(m) else repr(m), n])
