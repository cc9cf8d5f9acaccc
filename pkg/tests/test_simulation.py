import numpy as np
import pytest

from robustsae.fitting import fit_many, fit_ml, replicate_rng
from robustsae.predictors import robust_bayes_estimate
from robustsae.simulation import (
    PREDICTION_ESTIMATORS,
    Scenario,
    StudyError,
    draw_effects,
    generate_batch,
    generate_scenario,
    run_mse_estimator_study,
    run_prediction_study,
)


def test_scenario_validation():
    with pytest.raises(ValueError):
        Scenario("VI")
    with pytest.raises(ValueError):
        Scenario("I", m=32)
    with pytest.raises(ValueError):
        Scenario("I", d_pattern=(1, 2, 3))
    s = Scenario("ii")
    assert s.tag == "II"
    np.testing.assert_array_equal(np.unique(s.d), [0.2, 0.4, 0.6, 0.8, 1.0])
    assert np.bincount(s.groups)[1:].tolist() == [6] * 5


def test_covariates_fixed_across_replicates():
    s = Scenario("III")
    a, _ = generate_scenario(s, 0, 1)
    b, _ = generate_scenario(s, 7, 99)
    np.testing.assert_array_equal(a.x, b.x)
    assert np.all((a.x[:, 1] > 0) & (a.x[:, 1] < 1))
    assert not np.array_equal(a.y, b.y)


def test_scenario_one_unit_variance():
    u = draw_effects("I", 1_000_000, np.random.default_rng(0))
    assert abs(u.var() - 1) < 0.01


@pytest.mark.parametrize("tag", ["IV", "V"])
def test_scaled_contamination_moments(tag):
    rng = np.random.default_rng(1)
    n = 1_000_000
    if tag == "IV":
        z = rng.standard_t(5, n) * np.sqrt(49 / (5 / 3))
    else:
        z = (rng.chisquare(5, n) - 5) * np.sqrt(49 / 10)
    assert abs(z.mean()) < 0.05 and abs(z.var() - 49) < 1
    # the generator uses the same maps: its heavy draws have the same moments
    u, mask = draw_effects(tag, 2_000_000, np.random.default_rng(2), return_mask=True)
    heavy = u[mask]
    assert abs(heavy.mean()) < 0.1 and abs(heavy.var() - 49) < 1.5


@pytest.mark.parametrize("tag,frac", [("II", 0.15), ("III", 0.30), ("IV", 0.15), ("V", 0.15)])
def test_contamination_fraction(tag, frac):
    _, mask = draw_effects(tag, 100_000, np.random.default_rng(3), return_mask=True)
    assert abs(mask.mean() - frac) < 0.01


def test_generate_batch_matches_single():
    s = Scenario("II")
    y, theta = generate_batch(s, [3, 5], 11)
    d5, t5 = generate_scenario(s, 5, 11)
    np.testing.assert_array_equal(y[1], d5.y)
    np.testing.assert_array_equal(theta[1], t5)


def test_prediction_single_replicate_is_squared_error():
    s = Scenario("I")
    rep = run_prediction_study(s, r=1, seed=4)
    data, theta = generate_scenario(s, 0, 4)
    ml = fit_ml(data)
    sq = (robust_bayes_estimate(data, ml.params, 0.0) - theta) ** 2
    expected = [sq[s.groups == g].mean() for g in range(1, 6)]
    np.testing.assert_allclose(rep.value("EB"), expected, rtol=1e-12)


def test_prediction_report_shape():
    rep = run_prediction_study(Scenario("I"), r=10, seed=0)
    assert set(rep.frame.estimator) == set(PREDICTION_ESTIMATORS)
    assert len(rep.frame) == 5 * len(PREDICTION_ESTIMATORS)
    assert rep.frame.query("estimator == 'REB1'").value.isna().all()
    assert (rep.frame.dropna().value >= 0).all()
    assert rep.meta["not_implemented"] == ["REB1"]
    assert "REB1" in rep.table() and "n/a" in rep.table()


def test_zero_alpha_dpeb_path_equals_eb():
    s = Scenario("I")
    y, theta = generate_batch(s, range(20), 6)
    ml = fit_many(y, s.x, s.d, 0.0)
    dp = fit_many(y, s.x, s.d, np.zeros(20), start=(ml.beta, ml.a))
    np.testing.assert_array_equal(ml.beta, dp.beta)
    np.testing.assert_array_equal(ml.a, dp.a)


def test_prediction_deterministic_across_workers():
    s = Scenario("II")
    a = run_prediction_study(s, r=12, seed=2, chunk=5, n_jobs=1)
    b = run_prediction_study(s, r=12, seed=2, chunk=5, n_jobs=2)
    c = run_prediction_study(s, r=12, seed=2, chunk=12, n_jobs=1)
    assert a.frame.equals(b.frame) and a.frame.equals(c.frame)


def test_prediction_failure_policy(monkeypatch):
    import robustsae.simulation as sim

    real = sim.fit_many

    def flaky(y, *a, **k):
        out = real(y, *a, **k)
        conv = out.converged.copy()
        conv[::4] = False
        return out._replace(converged=conv)

    monkeypatch.setattr(sim, "fit_many", flaky)
    with pytest.raises(StudyError):
        run_prediction_study(Scenario("I"), r=20, seed=0)


def test_mse_study_oracle_and_shape(tmp_path):
    s = Scenario("I", m=20)
    rep = run_mse_estimator_study(
        s, variants=("nMSE", "oracle"), outer=8, truth_r=100, b=20, seed=1, cache_dir=tmp_path
    )
    orc = rep.frame.query("estimator == 'oracle'")
    assert (orc.value == 0).all()
    assert set(rep.frame.metric) == {"RB", "CV"}
    assert len(list(tmp_path.glob("truth_*.npz"))) == 1
    again = run_mse_estimator_study(
        s, variants=("nMSE", "oracle"), outer=8, truth_r=100, b=20, seed=1, cache_dir=tmp_path
    )
    assert rep.frame.equals(again.frame)


def test_mse_study_rejects_other_scenarios():
    with pytest.raises(ValueError):
        run_mse_estimator_study(Scenario("IV", m=20), outer=2, truth_r=10)
    with pytest.raises(ValueError):
        run_mse_estimator_study(Scenario("I", m=20), variants=("xMSE",), outer=2, truth_r=10)


def test_report_csv(tmp_path):
    rep = run_prediction_study(Scenario("I"), r=3, seed=0)
    path = tmp_path / "r.csv"
    rep.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header == "scenario,group,estimator,metric,value"
