import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from learnres import predictor as P
from learnres import simulator as S
from learnres.losses import LossWeights
from learnres.scale import Resolution, ScaleConfig

SCFG = ScaleConfig(0.2, 1.5)
PCFG = P.PredictorConfig()


@pytest.fixture(scope="module")
def small_dataset():
    return S.generate_dataset(120, seed=4)


def quick(**kw):
    base = dict(iters=30, batch=8, log_every=5)
    base.update(kw)
    return S.TrainConfig(**base)


def test_generate_deterministic():
    a, b = S.generate_dataset(50, seed=9), S.generate_dataset(50, seed=9)
    assert [(s.nominal, s.objects) for s in a] == [(s.nominal, s.objects) for s in b]
    assert np.array_equal(S.feature_matrix(a), S.feature_matrix(b))
    c = S.generate_dataset(50, seed=10)
    assert [s.objects for s in a] != [s.objects for s in c]


def test_degenerate_size_distribution():
    dist = S.SizeDistribution(scene_log_std=0, object_log_std=0, aspect_log_std=0)
    scenes = S.generate_dataset(30, dist, seed=1)
    stats = {tuple(np.round(s.features[1:], 12)) for s in scenes}
    assert len(stats) == 1


def test_mean_area_law_of_large_numbers():
    scenes = S.generate_dataset(1000, seed=0)
    areas = np.concatenate([s.normalized_areas() for s in scenes])
    assert abs(areas.mean() / 0.08 - 1) < 0.05


def test_objects_fit_and_features_width():
    for s in S.generate_dataset(200, seed=2):
        assert s.features.shape == (S.N_FEATURES,)
        assert all(o.width <= s.nominal.width and o.height <= s.nominal.height for o in s.objects)


def test_scene_rejects_oversized_objects():
    with pytest.raises(ValueError):
        S.make_scene(Resolution(100, 100), [S.SceneObject(120, 10)])
    with pytest.raises(ValueError):
        S.make_scene(Resolution(100, 100), [S.SceneObject(10, 10, 0.0)])


def test_dataset_roundtrip(tmp_path, small_dataset):
    path = tmp_path / "d.jsonl"
    S.save_dataset(path, small_dataset)
    back = S.load_dataset(path)
    assert [(s.nominal, s.objects) for s in back] == [(s.nominal, s.objects) for s in small_dataset]
    assert len(path.read_text().splitlines()) == len(small_dataset)
    (tmp_path / "bad.jsonl").write_text('{"width": 10}\n')
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        S.load_dataset(tmp_path / "bad.jsonl")


def test_oracle_examples():
    oc = S.OracleConfig(sweet_spot=1000.0, sharpness=0.3, noise_std=0.0)
    obj = S.SceneObject(25.0, 40.0, difficulty=1.7)
    assert S.oracle_loss(obj, 1.0, oc) == 0.0
    assert S.oracle_loss(obj, 2.0, oc) == pytest.approx(0.3 * math.log(4) ** 2 * 1.7)


def test_oracle_noise_mean():
    oc = S.OracleConfig(sweet_spot=1000.0, sharpness=0.3, noise_std=0.2)
    obj = S.SceneObject(25.0, 40.0)
    base = S.oracle_loss(obj, 1.5, S.OracleConfig(1000.0, 0.3, 0.0))
    mc = np.mean([S.oracle_loss(obj, 1.5, oc, step_seed=k) for k in range(20000)])
    assert abs(mc / (base * math.exp(0.02)) - 1) < 0.02
    assert S.oracle_loss(obj, 1.5, oc, 5) == S.oracle_loss(obj, 1.5, oc, 5)


@given(st.floats(1, 500), st.floats(1, 500), st.floats(0.2, 2.0))
def test_oracle_swap_invariant(w, h, phi):
    oc = S.OracleConfig()
    a = S.oracle_loss(S.SceneObject(w, h), phi, oc, 3)
    assert a == S.oracle_loss(S.SceneObject(h, w), phi, oc, 3)


def test_train_deterministic_and_sane(small_dataset):
    r1 = S.train(small_dataset, PCFG, None, SCFG, S.OracleConfig(), quick())
    r2 = S.train(small_dataset, PCFG, None, SCFG, S.OracleConfig(), quick())
    assert r1.rows == r2.rows
    assert np.array_equal(r1.params.flat(), r2.params.flat())
    its = [r["iteration"] for r in r1.rows]
    assert its == sorted(set(its)) and its[-1] == 30
    assert all(0 <= lo < hi for _, lo, hi in r1.boundary_trajectory)
    assert len(r1.boundary_trajectory) == 31
    assert all(SCFG.tau_min <= r["phi_mean"] <= SCFG.tau_max for r in r1.rows)


def test_train_without_losses_keeps_phi_constant(small_dataset):
    tc = quick(lambdas=LossWeights(1.0, 1.0, 0.0, 0.0))
    rep = S.train(small_dataset, PCFG, None, SCFG, S.OracleConfig(), tc)
    assert all(r["phi_std"] == 0.0 for r in rep.rows)


def test_train_skips_empty_scenes(small_dataset):
    empty = S.make_scene(Resolution(600, 800), [])
    rep = S.train([empty] + small_dataset[:10], PCFG, None, SCFG, S.OracleConfig(), quick(iters=3))
    assert len(rep.rows) == 1
    with pytest.raises(ValueError):
        S.train([empty], PCFG, None, SCFG, S.OracleConfig(), quick(iters=3))


def test_divergence_guard(small_dataset, monkeypatch):
    monkeypatch.setattr(S, "oracle_losses", lambda a, d, oc, rng: np.full(a.shape, np.nan))
    with pytest.raises(S.TrainingDiverged) as exc:
        S.train(small_dataset, PCFG, None, SCFG, S.OracleConfig(), quick())
    assert "iteration 1" in str(exc.value) and exc.value.report.diverged


def test_report_csv(tmp_path, small_dataset):
    rep = S.train(small_dataset, PCFG, None, SCFG, S.OracleConfig(), quick(iters=10))
    path = tmp_path / "r.csv"
    rep.write_csv(path)
    import csv
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0].keys()) == S.REPORT_COLUMNS
    assert rows[0]["tau_max"] == "1.5" and len(rows) == 2


def test_evaluate(small_dataset):
    m0 = S.evaluate(small_dataset, P.zero_params(PCFG), PCFG, SCFG, S.OracleConfig())
    assert {b["mean_phi"] for b in m0["buckets"]} == {0.75}
    assert sum(m0["phi_histogram"]["counts"]) == m0["n_scenes"]
    m1 = S.evaluate(small_dataset, P.zero_params(PCFG), PCFG, SCFG, S.OracleConfig())
    assert m0 == m1


def test_pearson_edge_cases():
    assert S.pearson([1, 2, 3], [5, 5, 5]) == 0.0
    assert math.isnan(S.pearson([1], [2]))
    assert S.pearson([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)


def test_config_validation():
    with pytest.raises(ValueError):
        S.OracleConfig(sweet_spot=0)
    with pytest.raises(ValueError):
        S.TrainConfig(form="other")
    with pytest.raises(ValueError):
        S.SizeDistribution(mean_area=0.9)
