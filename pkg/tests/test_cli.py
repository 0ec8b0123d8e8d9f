from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np
import pytest

from latentmcif.cli import SUBCOMMANDS, build_parser, run
from latentmcif.dataset import FeatureVector, write_feature_table

TINY = {
    "n_t": 24,
    "simulate": {"scale": 0.0006},
    "network": {"latent_dim": 6, "recurrent_units": 6, "epochs": 1, "batch_size": 64},
    "forest": {"n_estimators": 10, "psi": 32, "baseline_estimators": 40},
    "population": {"n_resamples": 3},
    "realtime": {"l_min": -5, "l_max": 5, "max_per_group": 2},
    "sweep": {"dims": [3, 5], "seeds": [0]},
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "run"
    chain = [["simulate"], ["train"], ["encode"], ["fit"], ["score"], ["rank"], ["eval", "--representative"],
             ["realtime"], ["baseline"], ["sweep"]]
    codes = [run(c + ["--config", str(cfg), "--out", str(out), "--seed", "3"]) for c in chain]
    return out, cfg, codes


def test_smoke_chain_exit_zero(run_dir):
    _, _, codes = run_dir
    assert codes == [0] * 10


def test_artifacts_written(run_dir):
    out, _, _ = run_dir
    for name in ("lightcurves.csv", "manifest.json", "split.json", "encoder.json", "latents.csv", "mcif.json",
                 "scores.csv", "ranked.csv", "report.json", "recall.csv", "timelines.csv",
                 "median_timelines.csv", "baseline_ranked.csv", "baseline_report.json", "sweep.csv", "audit.json",
                 "realtime_mcif.json"):
        assert (out / name).exists(), name
    with (out / "ranked.csv").open() as fh:
        assert next(csv.reader(fh)) == ["rank", "object_id", "score", "nearest_class", "label"]
    assert len((out / "sweep.csv").read_text().splitlines()) == 3


def test_provenance_everywhere(run_dir):
    out, _, _ = run_dir
    digest = json.loads((out / "mcif.json").read_text())["provenance"]["config_digest"]
    for name in ("split.json", "encoder.json", "mcif.json"):
        prov = json.loads((out / name).read_text())["provenance"]
        assert prov == {"config_digest": digest, "seed": 3}
    assert json.loads((out / "report.json").read_text())["config_digest"] == digest
    for name in ("latents.csv", "ranked.csv", "recall.csv", "scores.csv", "timelines.csv", "sweep.csv"):
        meta = json.loads((out / (name + ".meta.json")).read_text())
        assert meta["config_digest"] == digest and meta["seed"] == 3


def test_audit_has_no_held_out_ids(run_dir):
    out, _, _ = run_dir
    split = json.loads((out / "split.json").read_text())
    held = set(split["test_ids"]) | {o for o, lab in split["labels"].items() if lab in split["anomalous_classes"]}
    audit = json.loads((out / "audit.json").read_text())
    assert set(audit) == {"encoder", "mcif", "realtime-mcif"}
    assert all(not (set(ids) & held) for ids in audit.values())


def test_rerun_rank_is_byte_identical(run_dir, tmp_path):
    out, cfg, _ = run_dir
    before = (out / "ranked.csv").read_bytes()
    assert run(["rank", "--config", str(cfg), "--out", str(out), "--seed", "3"]) == 0
    assert (out / "ranked.csv").read_bytes() == before


def test_summary_line(run_dir, capsys):
    out, cfg, _ = run_dir
    run(["score", "--config", str(cfg), "--out", str(out), "--seed", "3", "--all"])
    line = capsys.readouterr().out.strip()
    assert line.startswith("[score] scored ") and "digest" in line


def test_protocol_eval(tmp_path):
    rng = np.random.default_rng(0)
    vecs = [FeatureVector(f"v{i}", rng.normal(size=3) + 5 * (i % 3), "ABC"[i % 3]) for i in range(150)]
    write_feature_table(tmp_path / "f.csv", vecs)
    (tmp_path / "cats.json").write_text(json.dumps({"cat": ["A", "B", "C"]}))
    (tmp_path / "c.json").write_text(json.dumps({"forest": {"n_estimators": 50, "psi": 64}}))
    code = run(["eval", "--protocol", str(tmp_path / "f.csv"), "--categories", str(tmp_path / "cats.json"),
                "--detector", "mcif", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path / "o")])
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "o" / "protocol.csv").open()))
    assert [r["anomalous_class"] for r in rows] == ["A", "B", "C"]
    assert all(float(r["auroc_mean"]) > 0.9 for r in rows)


def test_unknown_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        run(["rank", "--bogus"])
    assert exc.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exits_2():
    with pytest.raises(SystemExit) as exc:
        run(["frobnicate"])
    assert exc.value.code == 2


def test_stage_failure_exits_1_with_stage_name(tmp_path, capsys):
    assert run(["fit", "--out", str(tmp_path)]) == 1
    assert "latentmcif fit: stage failed" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"nope": 1}))
    assert run(["simulate", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == 1
    assert "bad configuration" in capsys.readouterr().err


def test_uncreatable_out_dir_exits_1(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run(["simulate", "--out", str(blocker / "sub")]) == 1


def test_every_subcommand_has_help():
    parser = build_parser()
    for name in SUBCOMMANDS:
        with pytest.raises(SystemExit) as exc:
            parser.parse_args([name, "--help"])
        assert exc.value.code == 0
