from __future__ import annotations

import math

import numpy as np
import pytest
from conftest import blobs
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import hypergeom

from latentmcif import iforest
from latentmcif.dataset import AuditTrail, FeatureVector
from latentmcif.encoder import NetworkConfig
from latentmcif.evaluation import (
    BASELINE_ESTIMATORS, DETECTOR_KINDS, EvalReport, EvaluationError, PopulationSpec, auroc,
    evaluate_representative, latent_sweep, load_reference_table, make_detector, one_class_out_protocol,
    recall_at_k, representative_resample, sample_weights, single_iforest_baseline, write_recall_csv,
    write_sweep_csv,
)
from latentmcif.iforest import MCIF_ESTIMATORS


def pairwise_auroc(pos, neg):
    """O(n^2) oracle: wins plus half-ties over all pairs."""
    twice = sum(2 if p > n else 1 if p == n else 0 for p in pos for n in neg)
    return (twice / 2) / (len(pos) * len(neg))


# ---------------------------------------------------------------- AUROC


def test_auroc_trivial_cases():
    assert auroc([0.9, 0.8], [0.1, 0.2]) == 1.0
    assert auroc([0.5], [0.5]) == 0.5
    assert auroc([0.1], [0.9]) == 0.0
    with pytest.raises(EvaluationError):
        auroc([], [1.0])


def test_auroc_matches_pairwise_oracle_exactly():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n_p, n_n = rng.integers(1, 25, size=2)
        levels = int(rng.integers(2, 12))  # coarse values force ties
        pos = rng.integers(0, levels, n_p) / levels
        neg = rng.integers(0, levels, n_n) / levels
        assert auroc(pos, neg) == pairwise_auroc(pos.tolist(), neg.tolist())


@settings(max_examples=100, deadline=None)
@given(pos=st.lists(st.integers(-40, 40), min_size=1, max_size=30),
       neg=st.lists(st.integers(-40, 40), min_size=1, max_size=30))
def test_auroc_symmetry_and_monotone_invariance(pos, neg):
    # grid values keep exp strictly increasing in floating point
    pos, neg = np.array(pos) / 8, np.array(neg) / 8
    a = auroc(pos, neg)
    assert 0.0 <= a <= 1.0
    assert a + auroc(neg, pos) == 1.0
    assert auroc(np.exp(pos), np.exp(neg)) == a


# ---------------------------------------------------------------- recall


def test_recall_perfect_ranking():
    ranked = [f"a{i}" for i in range(5)] + [f"c{i}" for i in range(20)]
    curve = recall_at_k(ranked, [f"a{i}" for i in range(5)])
    assert curve.recovered[4] == 5 and curve.fraction[4] == 1.0
    assert np.all(np.diff(curve.recovered) >= 0)
    assert np.all(curve.recovered <= np.minimum(curve.k, 5))


def test_random_ranking_within_hypergeometric_bounds():
    N, A, K, reps = 300, 30, 60, 200
    ids = [f"o{i}" for i in range(N)]
    anomalies = ids[:A]
    rng = np.random.default_rng(1)
    got = [recall_at_k(list(rng.permutation(ids)), anomalies, K).recovered[-1] for _ in range(reps)]
    dist = hypergeom(N, A, K)
    assert abs(np.mean(got) - dist.mean()) <= 3 * dist.std() / math.sqrt(reps)


# ---------------------------------------------------------------- resampling


def test_reference_count_rounding():
    spec = PopulationSpec.from_ratio(12040, 220)
    assert spec.anomaly_count == 55
    assert PopulationSpec.from_ratio(100, 220).anomaly_count == 1  # never zero


def pools(n_common=200, per_class=30):
    common = [f"c{i:04d}" for i in range(n_common)]
    anomalies = {f"K{k}": [f"a{k}_{i:03d}" for i in range(per_class)] for k in range(5)}
    return common, anomalies


def test_resamples_keep_common_and_are_distinct_and_deterministic():
    common, anomalies = pools()
    spec = PopulationSpec(len(common), 20, n_resamples=50, seed=3)
    rs = representative_resample(common, anomalies, spec)
    assert len(rs) == 50
    assert all(r.common_ids == common and len(r.anomaly_ids) == 20 for r in rs)
    assert all(len(set(r.anomaly_ids)) == 20 for r in rs)
    assert len({tuple(r.anomaly_ids) for r in rs}) == 50
    again = representative_resample(common, anomalies, spec)
    assert [r.anomaly_ids for r in rs] == [r.anomaly_ids for r in again]


def test_resample_per_class_counts_are_multinomial():
    common, anomalies = pools(per_class=60)
    rs = representative_resample(common, anomalies, PopulationSpec(len(common), 55, n_resamples=400, seed=0))
    counts = np.array([[r.anomaly_labels.count(f"K{k}") for k in range(5)] for r in rs])
    # equal class probabilities: mean 11, variance 55 * 0.2 * 0.8 = 8.8
    assert np.all(np.abs(counts.mean(axis=0) - 11) < 3 * math.sqrt(8.8 / 400))
    assert np.all(np.abs(counts.std(axis=0) - math.sqrt(8.8)) < 0.6)


def test_resample_errors():
    common, anomalies = pools(per_class=2)
    with pytest.raises(EvaluationError, match="smaller than"):
        representative_resample(common, anomalies, PopulationSpec(len(common), 11))
    with pytest.raises(EvaluationError):
        PopulationSpec(10, 1, ratio=0)
    with pytest.raises(EvaluationError):
        PopulationSpec(10, 1, n_resamples=0)


def test_evaluate_representative_separated_scores(tmp_path):
    common, anomalies = pools()
    rng = np.random.default_rng(0)
    scores = {o: float(rng.uniform(0.3, 0.5)) for o in common}
    scores.update({o: float(rng.uniform(0.6, 0.9)) for ids in anomalies.values() for o in ids})
    spec = PopulationSpec.from_ratio(len(common), 20.0, 10, seed=1)
    report, curves = evaluate_representative(scores, common, anomalies, spec, 0.15, "abc")
    assert report.auroc == 1.0 and report.auroc_std == 0.0
    assert report.metadata["recall_top_mean"] == 1.0
    assert report.metadata["reference_anomaly_count"] == 54
    assert report.metadata["ratio_implied_reference_count"] == 55
    means = [m for _, m, _ in report.recall_curve]
    assert np.all(np.diff(means) >= 0) and all(s >= 0 for _, _, s in report.recall_curve)
    report.save(tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.to_dict() == report.to_dict()
    write_recall_csv(tmp_path / "r.csv", report)
    assert (tmp_path / "r.csv").read_text().startswith("k,recovered_mean,recovered_std,recall_mean\n")


# ---------------------------------------------------------------- detectors and protocol


def cluster_vectors(seed=0, n=60):
    X, y = blobs([(0, 0, 0, 0), (6, 0, 0, 0), (0, 6, 0, 0)], n, 0.6, seed)
    names = np.array(["A", "B", "C"])[y]
    return [FeatureVector(f"v{i:04d}", X[i], str(names[i])) for i in range(len(X))]


def small_net():
    return NetworkConfig(hidden_units=16, latent_dim=8, epochs=30, learning_rate=0.01, batch_size=32)


def test_protocol_trains_only_on_common_and_separates():
    vecs = cluster_vectors()
    audit = AuditTrail()
    out = one_class_out_protocol(
        vecs, {"cat": ["A", "B", "C"]},
        lambda s: make_detector("classifier+iforest", network=small_net(), n_estimators=100, psi=64, seed=s),
        n_folds=5, seed=0, audit=audit)
    assert set(out) == {("cat", "A"), ("cat", "B"), ("cat", "C")}
    by_id = {v.object_id: v.label for v in vecs}
    for (cat, anom), rep in out.items():
        assert not rep.failed and rep.auroc > 0.9 and rep.auroc_std >= 0
        assert len(rep.metadata["fold_aurocs"]) == 5
        for stage, ids in audit.stages.items():
            if stage.startswith(f"{cat}/{anom}/"):
                assert anom not in {by_id[i] for i in ids}


def test_protocol_two_class_category_trains_on_other_class():
    vecs = [v for v in cluster_vectors() if v.label in ("A", "B")]
    audit = AuditTrail()
    one_class_out_protocol(vecs, {"pair": ["A", "B"]}, "mcif", n_folds=5, seed=1, audit=audit)
    by_id = {v.object_id: v.label for v in vecs}
    trained_a = {by_id[i] for s, ids in audit.stages.items() if s.startswith("pair/A/") for i in ids}
    assert trained_a == {"B"}


def test_protocol_failure_is_reported_and_continues():
    vecs = [v for v in cluster_vectors() if v.label in ("A", "B")]
    out = one_class_out_protocol(vecs, {"pair": ["A", "B"]}, "classifier+mcif", n_folds=5, seed=0)
    # a classifier needs two common classes; with one left it fails per entry
    assert all(r.failed and "two common classes" in r.error for r in out.values())
    assert len(out) == 2


def test_protocol_rejects_singleton_category():
    with pytest.raises(EvaluationError, match="at least two classes"):
        one_class_out_protocol(cluster_vectors(), {"solo": ["A"]}, "iforest")


@pytest.mark.parametrize("kind", DETECTOR_KINDS)
def test_every_detector_kind_runs(kind):
    vecs = cluster_vectors(n=30)
    det = make_detector(kind, network=small_net(), n_estimators=30, psi=32, seed=0).fit(vecs)
    s = det.score(vecs[:5])
    assert s.shape == (5,) and np.all((s > 0) & (s < 1))


def test_unknown_detector_kind():
    with pytest.raises(EvaluationError, match="unknown detector"):
        make_detector("svm")


def test_reference_table_is_labelled_external():
    ref = load_reference_table()
    assert "description" in ref
    assert ref["detectors"]["classifier+iforest"]["SLSN"]["auroc"] == 0.757
    assert ref["detectors"]["classifier+mcif"]["CEP"]["auroc"] == 0.875


# ---------------------------------------------------------------- baseline


def test_baseline_estimators_equal_mcif_total():
    assert BASELINE_ESTIMATORS == 12 * MCIF_ESTIMATORS == 2400


def test_sample_weights_inverse_frequency():
    w = sample_weights(["a"] * 90 + ["b"] * 10)
    assert np.allclose(w[:90], 0.2) and np.allclose(w[90:], 1.8)
    assert np.all(sample_weights(["x"] * 7) == 1.0)


def test_baseline_single_class_equals_unweighted_fit():
    X = np.random.default_rng(0).normal(size=(80, 3))
    a = single_iforest_baseline(X, ["x"] * 80, 40, 32, seed=2)
    b = iforest.fit(X, 40, 32, None, 2)
    assert np.array_equal(a.score(X), b.score(X))


def test_baseline_penalises_distant_small_cluster():
    X, y = blobs([(0, 0), (4, 0), (0, 4), (25, 25)], 100, 0.5, 0)
    keep = (y < 3) | (np.arange(len(y)) % 5 == 0)
    X, y = X[keep], y[keep].astype(str)
    forest = single_iforest_baseline(X, y, 400, 128, seed=0)
    probe, py = blobs([(0, 0), (4, 0), (0, 4), (25, 25)], 30, 0.5, 1)
    s = forest.score(probe)
    assert s[py == 3].mean() - s[py < 3].mean() > 0


# ---------------------------------------------------------------- sweep


def test_latent_sweep_shape_failures_and_determinism(tmp_path):
    def fake(dim, seed):
        if dim == 25 and seed == 1:
            raise RuntimeError("boom")
        return 0.5 + dim / 1000 + seed / 100

    rows = latent_sweep([10, 25, 50, 100], fake, seeds=[0, 1])
    assert [r.dim for r in rows] == [10, 25, 50, 100]
    assert rows[1].n_runs == 1 and "boom" in rows[1].failures[0]
    assert all(r.auroc_std >= 0 for r in rows)
    assert [(r.auroc_mean, r.auroc_std) for r in rows] == [
        (r.auroc_mean, r.auroc_std) for r in latent_sweep([10, 25, 50, 100], fake, seeds=[0, 1])]
    write_sweep_csv(tmp_path / "s.csv", rows)
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "latent_dim,auroc_mean,auroc_std,n_runs,n_failed" and len(lines) == 5
    with pytest.raises(EvaluationError):
        latent_sweep([], fake)
