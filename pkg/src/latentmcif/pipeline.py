"""End-to-end stages: simulate -> split -> train -> encode -> fit -> rank -> evaluate.

Each stage takes a RunConfig and derives its own seed from the master seed, so
stages can be run one at a time from the CLI or chained in-process.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import RunConfig
from .dataset import AuditTrail, DatasetSplit, LightCurve, load_light_curves, make_split, preprocess
from .encoder import (
    EncoderClassifier, LatentVector, NetworkConfig, encode, latent_matrix, train, write_latents_csv,
)
from .evaluation import (
    EvalReport, PopulationSpec, auroc, evaluate_representative, single_iforest_baseline,
    write_recall_csv,
)
from .mcif import McifModel, fit_mcif, rank, write_ranked_csv
from .realtime import fit_realtime_mcif
from .synthdata import PopulationConfig, default_population, generate, write_population

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- provenance


def provenance(cfg: RunConfig, **extra) -> dict:
    return {"config_digest": cfg.digest(), "seed": cfg.seed, **extra}


def write_json(path: Path, doc: Mapping, cfg: RunConfig) -> None:
    """JSON artifact with provenance embedded under ``provenance``."""
    body = dict(doc)
    body["provenance"] = provenance(cfg)
    path.write_text(json.dumps(body, sort_keys=True))


def write_meta(csv_path: Path, cfg: RunConfig, **extra) -> None:
    """CSV artifacts keep their exact header; provenance goes in ``<file>.meta.json``."""
    Path(str(csv_path) + ".meta.json").write_text(
        json.dumps(provenance(cfg, file=csv_path.name, **extra), sort_keys=True, indent=1))


# ---------------------------------------------------------------- stages


def simulate(cfg: RunConfig) -> tuple[PopulationConfig, list[LightCurve], list[dict]]:
    pop = default_population(cfg.simulate.scale, seed=cfg.stage_seed("simulate"))
    pop.cadence_days = cfg.simulate.cadence_days
    curves, truths, _ = generate(pop, return_truth=True)
    return pop, curves, truths


@dataclass
class SplitIds:
    train: list[str]
    validation: list[str]
    test: list[str]
    anomalous_classes: list[str]
    labels: dict[str, str]

    @property
    def common_test(self) -> list[str]:
        bad = set(self.anomalous_classes)
        return [o for o in self.test if self.labels[o] not in bad]

    def anomaly_test(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {c: [] for c in sorted(self.anomalous_classes)}
        for o in self.test:
            lab = self.labels[o]
            if lab in out:
                out[lab].append(o)
        return out

    @property
    def held_out(self) -> set[str]:
        """Every id that must never reach a training step."""
        return set(self.test) | {o for o, lab in self.labels.items() if lab in set(self.anomalous_classes)}

    def to_dict(self) -> dict:
        return {"train_ids": self.train, "validation_ids": self.validation, "test_ids": self.test,
                "anomalous_classes": self.anomalous_classes, "labels": self.labels}

    @classmethod
    def from_dict(cls, doc: Mapping) -> "SplitIds":
        return cls(list(doc["train_ids"]), list(doc["validation_ids"]), list(doc["test_ids"]),
                   list(doc["anomalous_classes"]), dict(doc["labels"]))


def split_curves(curves: Sequence[LightCurve], anomalous: Sequence[str], cfg: RunConfig) -> SplitIds:
    labels = [lc.label for lc in curves]
    sp: DatasetSplit = make_split(labels, tuple(cfg.split), anomalous, cfg.stage_seed("split"))
    ids = [lc.object_id for lc in curves]
    return SplitIds([ids[i] for i in sp.train], [ids[i] for i in sp.validation], [ids[i] for i in sp.test],
                    sorted(anomalous), {lc.object_id: lc.label for lc in curves})


def network_config(cfg: RunConfig, n_classes: int, *, latent_dim: int | None = None,
                   seed: int | None = None) -> NetworkConfig:
    nb = cfg.network
    return NetworkConfig(
        input_kind="sequence", input_dim=4, recurrent_units=nb.recurrent_units,
        recurrent_layers=nb.recurrent_layers, hidden_units=nb.hidden_units,
        latent_dim=latent_dim or nb.latent_dim, n_classes=n_classes, context_dim=4,
        epochs=nb.epochs, learning_rate=nb.learning_rate, batch_size=nb.batch_size,
        prefix_fraction=nb.prefix_fraction,
        seed=cfg.stage_seed("encoder") if seed is None else seed,
    )


def train_encoder(
    curves: Sequence[LightCurve], split: SplitIds, cfg: RunConfig, audit: AuditTrail | None = None,
    *, latent_dim: int | None = None, seed: int | None = None,
) -> EncoderClassifier:
    by_id = {lc.object_id: lc for lc in curves}
    classes = sorted({split.labels[o] for o in split.train})
    model = EncoderClassifier.initialize(network_config(cfg, len(classes), latent_dim=latent_dim, seed=seed),
                                         classes)
    tr = [preprocess(by_id[o], cfg.n_t) for o in split.train]
    va = [preprocess(by_id[o], cfg.n_t) for o in split.validation]
    t0 = time.perf_counter()
    train(model, tr, va, forbidden_ids=split.held_out, audit=audit)
    log.info("encoder trained in %.1fs", time.perf_counter() - t0)
    return model


def encode_curves(model: EncoderClassifier, curves: Sequence[LightCurve], n_t: int) -> list[LatentVector]:
    return encode(model, [preprocess(lc, n_t) for lc in curves])


def fit_mcif_stage(latents: Sequence[LatentVector], split: SplitIds, cfg: RunConfig,
                   audit: AuditTrail | None = None, seed: int | None = None) -> McifModel:
    train_ids = set(split.train)
    groups: dict[str, list[LatentVector]] = {}
    for lv in latents:
        if lv.object_id in train_ids:
            groups.setdefault(split.labels[lv.object_id], []).append(lv)
    return fit_mcif(
        {c: latent_matrix(v) for c, v in groups.items()},
        cfg.forest.n_estimators, cfg.forest.psi,
        cfg.stage_seed("mcif") if seed is None else seed,
        ids_by_class={c: [lv.object_id for lv in v] for c, v in groups.items()}, audit=audit,
    )


def realtime_forests(model: EncoderClassifier, mcif: McifModel, curves: Sequence[LightCurve], split: SplitIds,
                     cfg: RunConfig, audit: AuditTrail | None = None) -> McifModel:
    """Forests for timeline scoring: prefix-aware refit, or the full-curve MCIF when draws are 0."""
    if cfg.realtime.prefix_draws == 0:
        return mcif
    by_id = {lc.object_id: lc for lc in curves}
    train_ids = set(split.train)
    if split.held_out & train_ids:
        raise AssertionError("held-out objects in the realtime forest training set")
    return fit_realtime_mcif(model, [by_id[o] for o in split.train], cfg.realtime.prefix_draws,
                             cfg.forest.n_estimators, cfg.forest.psi, cfg.stage_seed("realtime-mcif"),
                             n_t=cfg.n_t, eligibility_window=cfg.realtime.eligibility_window, audit=audit)


def score_latents(model: McifModel, latents: Sequence[LatentVector]) -> tuple[dict[str, float], dict[str, str]]:
    a, nearest = model.score(latent_matrix(latents))
    ids = [lv.object_id for lv in latents]
    return dict(zip(ids, a.tolist())), dict(zip(ids, nearest))


def held_out_auroc(scores: Mapping[str, float], split: SplitIds) -> float:
    anomalies = [o for ids in split.anomaly_test().values() for o in ids]
    return auroc([scores[o] for o in anomalies], [scores[o] for o in split.common_test])


def representative_eval(scores: Mapping[str, float], split: SplitIds, cfg: RunConfig) -> EvalReport:
    common = split.common_test
    spec = PopulationSpec.from_ratio(len(common), cfg.population.ratio, cfg.population.n_resamples,
                                     cfg.stage_seed("resample"))
    report, _ = evaluate_representative(scores, common, split.anomaly_test(), spec,
                                        cfg.population.top_fraction, cfg.digest())
    report.metadata["master_seed"] = cfg.seed
    report.metadata["test_auroc_all"] = held_out_auroc(scores, split)
    return report


def run_baseline(latents: Sequence[LatentVector], split: SplitIds, cfg: RunConfig,
                 audit: AuditTrail | None = None):
    train_ids = set(split.train)
    tr = [lv for lv in latents if lv.object_id in train_ids]
    forest = single_iforest_baseline(latent_matrix(tr), [split.labels[lv.object_id] for lv in tr],
                                     cfg.forest.baseline_estimators, cfg.forest.psi,
                                     cfg.stage_seed("baseline"), ids=[lv.object_id for lv in tr], audit=audit)
    s = forest.score(latent_matrix(latents))
    return forest, dict(zip([lv.object_id for lv in latents], s.tolist()))


def mean_score_by_class(scores: Mapping[str, float], ids: Sequence[str], labels: Mapping[str, str]) -> dict:
    acc: dict[str, list[float]] = {}
    for o in ids:
        acc.setdefault(labels[o], []).append(scores[o])
    return {c: float(np.mean(v)) for c, v in sorted(acc.items())}


# ---------------------------------------------------------------- whole run


def run_pipeline(cfg: RunConfig, out_dir: str | Path | None = None,
                 curves: Sequence[LightCurve] | None = None,
                 anomalous: Sequence[str] | None = None) -> dict:
    """simulate (unless ``curves`` given) -> train -> encode -> fit -> rank -> eval.

    Writes every artifact under ``out_dir`` and returns a summary with the
    in-memory objects for further analysis.
    """
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    if curves is None:
        pop, curves, truths = simulate(cfg)
        write_population(out, pop, curves, truths, extra={"provenance": provenance(cfg)})
        anomalous = pop.anomalous_classes
        write_meta(out / "lightcurves.csv", cfg)
    if anomalous is None:
        raise ValueError("anomalous classes must be given with external curves")
    audit = AuditTrail()
    split = split_curves(curves, anomalous, cfg)
    write_json(out / "split.json", split.to_dict(), cfg)

    model = train_encoder(curves, split, cfg, audit)
    doc = model.to_dict()
    write_json(out / "encoder.json", doc, cfg)

    latents = encode_curves(model, curves, cfg.n_t)
    write_latents_csv(out / "latents.csv", latents)
    write_meta(out / "latents.csv", cfg)

    mcif = fit_mcif_stage(latents, split, cfg, audit)
    write_json(out / "mcif.json", mcif.to_dict(), cfg)

    test_ids = set(split.test)
    test_latents = [lv for lv in latents if lv.object_id in test_ids]
    ranked = rank(mcif, test_latents)
    write_ranked_csv(out / "ranked.csv", ranked)
    write_meta(out / "ranked.csv", cfg)

    scores, _ = score_latents(mcif, test_latents)
    report = representative_eval(scores, split, cfg)
    report.runtime_seconds = time.perf_counter() - t0
    report.save(out / "report.json")
    write_recall_csv(out / "recall.csv", report)
    write_meta(out / "recall.csv", cfg)

    audit.save(out / "audit.json")
    return {"out_dir": out, "split": split, "encoder": model, "latents": latents, "mcif": mcif,
            "ranked": ranked, "report": report, "audit": audit, "curves": curves, "scores": scores}


def load_curves_and_anomalous(data: str | Path, manifest: str | Path | None = None,
                              anomalous: Sequence[str] | None = None) -> tuple[list[LightCurve], list[str]]:
    curves = load_light_curves(data)
    if anomalous is None:
        man = Path(manifest) if manifest else Path(data).with_name("manifest.json")
        if not man.exists():
            raise FileNotFoundError(f"no manifest at {man}; pass --anomalous explicitly")
        anomalous = json.loads(man.read_text())["anomalous_classes"]
    return curves, list(anomalous)
