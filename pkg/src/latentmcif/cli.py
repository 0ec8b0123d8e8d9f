"""Command-line entry point: ``latentmcif <subcommand> [options]``.

Artifacts are read from and written to ``--out`` under fixed names, so the
stages chain without extra flags::

    latentmcif simulate --out run
    latentmcif train --out run
    latentmcif encode --out run
    latentmcif fit --out run
    latentmcif rank --out run
    latentmcif eval --representative --out run
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Callable, Sequence

from . import iforest, pipeline
from .config import RunConfig
from .dataset import AuditTrail, load_feature_table
from .encoder import EncoderClassifier, NetworkConfig, read_latents_csv, write_latents_csv
from .evaluation import (
    DETECTOR_KINDS, PLATEAU_NOTE, latent_sweep, load_reference_table, make_detector,
    one_class_out_protocol, write_recall_csv, write_sweep_csv,
)
from .mcif import McifModel, rank, rank_scores, read_ranked_csv, write_ranked_csv
from .realtime import median_curves, timeline, write_median_csv, write_timelines_csv
from .synthdata import write_population

log = logging.getLogger("latentmcif")

SUBCOMMANDS = ("simulate", "train", "encode", "fit", "score", "rank", "eval", "realtime", "sweep", "baseline")


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------- helpers


def _out(args) -> Path:
    return Path(args.out)


def _path(args, name: str, default: str) -> Path:
    given = getattr(args, name, None)
    return Path(given) if given else _out(args) / default


def _need(path: Path, what: str) -> Path:
    if not path.exists():
        raise StageError(f"missing {what}: {path}")
    return path


def _curves(args):
    data = _need(_path(args, "data", "lightcurves.csv"), "light-curve CSV")
    anomalous = args.anomalous.split(",") if getattr(args, "anomalous", None) else None
    return pipeline.load_curves_and_anomalous(data, getattr(args, "manifest", None), anomalous)


def _split(args) -> pipeline.SplitIds:
    doc = json.loads(_need(_path(args, "split", "split.json"), "split file").read_text())
    return pipeline.SplitIds.from_dict(doc)


def _load_json_model(path: Path, loader):
    doc = json.loads(path.read_text())
    doc.pop("provenance", None)
    return loader(doc)


def _encoder(args) -> EncoderClassifier:
    return _load_json_model(_need(_path(args, "encoder", "encoder.json"), "encoder checkpoint"),
                            EncoderClassifier.from_dict)


def _mcif(args) -> McifModel:
    return _load_json_model(_need(_path(args, "mcif", "mcif.json"), "MCIF model"), McifModel.from_dict)


def _latents(args):
    return read_latents_csv(_need(_path(args, "latents", "latents.csv"), "latent CSV"))


# ---------------------------------------------------------------- stages


def cmd_simulate(cfg: RunConfig, args) -> str:
    pop, curves, truths = pipeline.simulate(cfg)
    out = _out(args)
    write_population(out, pop, curves, truths, extra={"provenance": pipeline.provenance(cfg)})
    pipeline.write_meta(out / "lightcurves.csv", cfg)
    n_anom = sum(lc.label in set(pop.anomalous_classes) for lc in curves)
    return f"{len(curves)} objects ({n_anom} anomalous) -> {out / 'lightcurves.csv'}"


def cmd_train(cfg: RunConfig, args) -> str:
    curves, anomalous = _curves(args)
    split = pipeline.split_curves(curves, anomalous, cfg)
    out = _out(args)
    pipeline.write_json(out / "split.json", split.to_dict(), cfg)
    audit = AuditTrail()
    model = pipeline.train_encoder(curves, split, cfg, audit)
    pipeline.write_json(out / "encoder.json", model.to_dict(), cfg)
    audit.save(out / "audit.json")
    last = model.training_log[-1] if model.training_log else {}
    return (f"{len(split.train)} train / {len(split.validation)} val objects, "
            f"{len(model.class_names)} classes, final loss {last.get('loss', float('nan')):.4f}")


def cmd_encode(cfg: RunConfig, args) -> str:
    curves, _ = _curves(args)
    model = _encoder(args)
    latents = pipeline.encode_curves(model, curves, cfg.n_t)
    path = _out(args) / "latents.csv"
    write_latents_csv(path, latents)
    pipeline.write_meta(path, cfg)
    return f"{len(latents)} latents of dim {model.config.latent_dim} -> {path}"


def cmd_fit(cfg: RunConfig, args) -> str:
    latents = _latents(args)
    split = _split(args)
    audit_path = _out(args) / "audit.json"
    audit = AuditTrail.load(audit_path) if audit_path.exists() else AuditTrail()
    model = pipeline.fit_mcif_stage(latents, split, cfg, audit)
    pipeline.write_json(_out(args) / "mcif.json", model.to_dict(), cfg)
    audit.save(audit_path)
    return f"{len(model.class_order)} forests x {cfg.forest.n_estimators} trees -> {_out(args) / 'mcif.json'}"


def _selected(latents, args):
    if getattr(args, "all", False):
        return latents
    split_path = _path(args, "split", "split.json")
    if not split_path.exists():
        return latents
    test = set(_split(args).test)
    return [lv for lv in latents if lv.object_id in test]


def cmd_score(cfg: RunConfig, args) -> str:
    model = _mcif(args)
    latents = _selected(_latents(args), args)
    scores, nearest = pipeline.score_latents(model, latents)
    path = _out(args) / "scores.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["object_id", "score", "nearest_class", "label"])
        for lv in latents:
            w.writerow([lv.object_id, repr(scores[lv.object_id]), nearest[lv.object_id], lv.label or ""])
    pipeline.write_meta(path, cfg)
    return f"scored {len(latents)} objects -> {path}"


def cmd_rank(cfg: RunConfig, args) -> str:
    model = _mcif(args)
    latents = _selected(_latents(args), args)
    ranked = rank(model, latents)
    path = _out(args) / "ranked.csv"
    write_ranked_csv(path, ranked)
    pipeline.write_meta(path, cfg)
    top = f", top {ranked[0].object_id} ({ranked[0].label})" if ranked else ""
    return f"ranked {len(ranked)} objects{top} -> {path}"


def _eval_representative(cfg: RunConfig, args) -> str:
    ranked = read_ranked_csv(_need(_path(args, "ranked", "ranked.csv"), "ranked CSV"))
    scores = {e.object_id: e.score for e in ranked}
    split = _split(args)
    t0 = time.perf_counter()
    report = pipeline.representative_eval(scores, split, cfg)
    report.runtime_seconds = time.perf_counter() - t0
    out = _out(args)
    report.save(out / "report.json")
    write_recall_csv(out / "recall.csv", report)
    pipeline.write_meta(out / "recall.csv", cfg)
    md = report.metadata
    return (f"AUROC {report.auroc:.3f}+-{report.auroc_std:.3f}; recovered {md['recovered_top_mean']:.2f}"
            f"/{md['anomaly_count']} in top {md['k_top']} ({md['recall_top_mean']:.1%})")


def _eval_protocol(cfg: RunConfig, args) -> str:
    vectors = load_feature_table(_need(Path(args.protocol), "feature table"))
    if not args.categories:
        raise StageError("--protocol needs --categories <json mapping category -> classes>")
    categories = json.loads(_need(Path(args.categories), "categories file").read_text())
    net = NetworkConfig(input_kind="features", epochs=cfg.network.epochs,
                        latent_dim=cfg.network.latent_dim, hidden_units=cfg.network.hidden_units,
                        batch_size=cfg.network.batch_size, learning_rate=cfg.network.learning_rate,
                        context_dim=0)
    kinds = DETECTOR_KINDS if args.detector == "all" else (args.detector,)
    audit = AuditTrail()
    rows = []
    out = _out(args)
    ref = load_reference_table()
    for kind in kinds:
        factory: Callable = lambda s, k=kind: make_detector(  # noqa: E731
            k, network=net, n_estimators=cfg.forest.n_estimators, psi=cfg.forest.psi, seed=s)
        reports = one_class_out_protocol(vectors, categories, factory, args.folds,
                                         cfg.stage_seed("protocol", kind), audit=audit,
                                         config_digest=cfg.digest())
        for (cat, anom), rep in reports.items():
            target = ref["detectors"].get(kind, {}).get(anom)
            rows.append([kind, cat, anom, rep.auroc, rep.auroc_std, int(rep.failed),
                         "" if target is None else target["auroc"]])
    path = out / "protocol.csv"
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["detector", "category", "anomalous_class", "auroc_mean", "auroc_std", "failed",
                    "reference_auroc"])
        for r in rows:
            w.writerow(r[:3] + [repr(float(r[3])), repr(float(r[4]))] + r[5:])
    pipeline.write_meta(path, cfg)
    audit.save(out / "protocol_audit.json")
    n_failed = sum(r[5] for r in rows)
    return f"{len(rows)} (detector, class) cells, {n_failed} failed -> {path}"


def cmd_eval(cfg: RunConfig, args) -> str:
    if args.protocol:
        return _eval_protocol(cfg, args)
    return _eval_representative(cfg, args)


def cmd_realtime(cfg: RunConfig, args) -> str:
    curves, anomalous = _curves(args)
    split = _split(args)
    encoder = _encoder(args)
    out = _out(args)
    audit_path = out / "audit.json"
    audit = AuditTrail.load(audit_path) if audit_path.exists() else AuditTrail()
    model = pipeline.realtime_forests(encoder, _mcif(args), curves, split, cfg, audit)
    if cfg.realtime.prefix_draws:
        pipeline.write_json(out / "realtime_mcif.json", model.to_dict(), cfg)
        audit.save(audit_path)
    test = set(split.test)
    by_class: dict[str, list] = {}
    for lc in curves:
        if lc.object_id in test:
            members = by_class.setdefault(lc.label, [])
            if len(members) < cfg.realtime.max_per_group:
                members.append(lc)
    ls = range(cfg.realtime.l_min, cfg.realtime.l_max + 1)
    grouped = {c: [timeline(encoder, model, lc, ls, cfg.realtime.eligibility_window, cfg.n_t) for lc in lcs]
               for c, lcs in sorted(by_class.items())}
    anomalous = set(anomalous)
    grouped["all-common"] = [t for c, tls in grouped.items() if c not in anomalous for t in tls]
    grouped["all-anomalous"] = [t for c, tls in list(grouped.items())
                                if c in anomalous for t in tls]
    every = [t for c in sorted(by_class) for t in grouped[c]]
    write_timelines_csv(out / "timelines.csv", every)
    pipeline.write_meta(out / "timelines.csv", cfg)
    med = median_curves(grouped)
    write_median_csv(out / "median_timelines.csv", med)
    pipeline.write_meta(out / "median_timelines.csv", cfg)
    return f"{len(every)} timelines over l={cfg.realtime.l_min}..{cfg.realtime.l_max} -> {out / 'timelines.csv'}"


def cmd_sweep(cfg: RunConfig, args) -> str:
    curves, anomalous = _curves(args)
    split = pipeline.split_curves(curves, anomalous, cfg)

    def run_one(dim: int, seed: int) -> float:
        enc_seed = cfg.stage_seed("sweep", dim, seed, "encoder")
        model = pipeline.train_encoder(curves, split, cfg, latent_dim=dim, seed=enc_seed)
        latents = pipeline.encode_curves(model, curves, cfg.n_t)
        mcif = pipeline.fit_mcif_stage(latents, split, cfg, seed=cfg.stage_seed("sweep", dim, seed, "mcif"))
        test = set(split.test)
        scores, _ = pipeline.score_latents(mcif, [lv for lv in latents if lv.object_id in test])
        return pipeline.held_out_auroc(scores, split)

    dims = [int(d) for d in args.dims.split(",")] if args.dims else cfg.sweep.dims
    rows = latent_sweep(dims, run_one, cfg.sweep.seeds)
    path = _out(args) / "sweep.csv"
    write_sweep_csv(path, rows)
    pipeline.write_meta(path, cfg, note=PLATEAU_NOTE)
    return "; ".join(f"d={r.dim}: {r.auroc_mean:.3f}" for r in rows) + f" -> {path}"


def cmd_baseline(cfg: RunConfig, args) -> str:
    latents = _latents(args)
    split = _split(args)
    audit = AuditTrail()
    _, all_scores = pipeline.run_baseline(latents, split, cfg, audit)
    test = set(split.test)
    scores = {o: s for o, s in all_scores.items() if o in test}
    labels = split.labels
    ranked = rank_scores(list(scores), list(scores.values()), ["" for _ in scores],
                         [labels[o] for o in scores])
    out = _out(args)
    write_ranked_csv(out / "baseline_ranked.csv", ranked)
    pipeline.write_meta(out / "baseline_ranked.csv", cfg)
    report = pipeline.representative_eval(scores, split, cfg)
    report.metadata["detector"] = "single-iforest"
    report.metadata["mean_score_by_class"] = pipeline.mean_score_by_class(scores, list(scores), labels)
    report.save(out / "baseline_report.json")
    audit.save(out / "baseline_audit.json")
    return f"single forest x {cfg.forest.baseline_estimators} trees: AUROC {report.auroc:.3f}"


COMMANDS: dict[str, Callable[[RunConfig, argparse.Namespace], str]] = {
    "simulate": cmd_simulate, "train": cmd_train, "encode": cmd_encode, "fit": cmd_fit,
    "score": cmd_score, "rank": cmd_rank, "eval": cmd_eval, "realtime": cmd_realtime,
    "sweep": cmd_sweep, "baseline": cmd_baseline,
}


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (see README for keys)")
    common.add_argument("--seed", type=int, help="master seed; every stage seed derives from it")
    common.add_argument("--out", help="output directory (created if absent; default from config, else ./run)")
    common.add_argument("--jobs", type=int, help="cap on worker threads used by forest building/scoring")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", help="light-curve CSV (default <out>/lightcurves.csv)")
    data.add_argument("--manifest", help="manifest JSON naming anomalous classes (default next to --data)")
    data.add_argument("--anomalous", help="comma-separated anomalous classes, overrides the manifest")

    p = argparse.ArgumentParser(prog="latentmcif", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(SUBCOMMANDS) + "}")

    s = sub.add_parser("simulate", parents=[common], help="generate a synthetic population")
    s.add_argument("--scale", type=float, help="fraction of the reference class totals to generate")
    s.add_argument("--cadence", type=float, help="mean sampling gap in days")

    s = sub.add_parser("train", parents=[common, data], help="split the data and train the encoder")
    s.add_argument("--epochs", type=int)
    s.add_argument("--latent-dim", type=int)
    s.add_argument("--n-t", type=int, help="sequence length fed to the encoder")

    s = sub.add_parser("encode", parents=[common, data], help="write latent vectors for every object")
    s.add_argument("--encoder", help="encoder checkpoint (default <out>/encoder.json)")

    s = sub.add_parser("fit", parents=[common], help="fit one isolation forest per training class")
    s.add_argument("--latents")
    s.add_argument("--split")
    s.add_argument("--estimators", type=int)
    s.add_argument("--psi", type=int)

    for name, hlp in (("score", "per-object MCIF scores"), ("rank", "rank objects by MCIF score")):
        s = sub.add_parser(name, parents=[common], help=hlp)
        s.add_argument("--latents")
        s.add_argument("--mcif")
        s.add_argument("--split", help="restrict to test objects listed here (default <out>/split.json)")
        s.add_argument("--all", action="store_true", help="score every object, not only the test split")

    s = sub.add_parser("eval", parents=[common], help="representative-population or one-class-out evaluation")
    mode = s.add_mutually_exclusive_group()
    mode.add_argument("--representative", action="store_true", help="resampled population (default)")
    mode.add_argument("--protocol", metavar="FEATURES_CSV", help="one-class-out protocol on a feature table")
    s.add_argument("--categories", help="JSON mapping category -> list of classes (with --protocol)")
    s.add_argument("--detector", default="all", choices=DETECTOR_KINDS + ("all",))
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--ranked")
    s.add_argument("--split")
    s.add_argument("--ratio", type=float)
    s.add_argument("--resamples", type=int)

    s = sub.add_parser("realtime", parents=[common, data], help="score truncated light curves day by day")
    s.add_argument("--encoder")
    s.add_argument("--mcif")
    s.add_argument("--split")
    s.add_argument("--max-per-class", type=int)

    s = sub.add_parser("sweep", parents=[common, data], help="held-out AUROC versus latent size")
    s.add_argument("--dims", help="comma-separated latent sizes")
    s.add_argument("--epochs", type=int)

    s = sub.add_parser("baseline", parents=[common], help="single weighted isolation forest over all classes")
    s.add_argument("--latents")
    s.add_argument("--split")
    s.add_argument("--estimators", type=int)
    return p


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {
        "seed": ("seed",), "out": ("out_dir",), "jobs": ("jobs",), "scale": ("simulate", "scale"),
        "cadence": ("simulate", "cadence_days"), "epochs": ("network", "epochs"),
        "latent_dim": ("network", "latent_dim"), "n_t": ("n_t",), "psi": ("forest", "psi"),
        "ratio": ("population", "ratio"), "resamples": ("population", "n_resamples"),
        "max_per_class": ("realtime", "max_per_group"),
    }
    for flag, target in overrides.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        obj = cfg
        for part in target[:-1]:
            obj = getattr(obj, part)
        setattr(obj, target[-1], value)
    est = getattr(args, "estimators", None)
    if est is not None:
        if args.command == "baseline":
            cfg.forest.baseline_estimators = est
        else:
            cfg.forest.n_estimators = est
    args.out = cfg.out_dir
    return cfg


def run(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    stage = args.command
    try:
        cfg = resolve_config(args)
    except (OSError, ValueError) as exc:
        print(f"latentmcif {stage}: bad configuration: {exc}", file=sys.stderr)
        return 1
    try:
        Path(args.out).mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"latentmcif {stage}: cannot create output directory {args.out}: {exc}", file=sys.stderr)
        return 1
    iforest.set_jobs(cfg.jobs)
    t0 = time.perf_counter()
    try:
        summary = COMMANDS[stage](cfg, args)
    except Exception as exc:  # every stage failure maps to exit 1 with the stage name
        log.debug("stage failure", exc_info=True)
        print(f"latentmcif {stage}: stage failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    print(f"[{stage}] {summary} ({time.perf_counter() - t0:.1f}s, digest {cfg.digest()[:12]})")
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
