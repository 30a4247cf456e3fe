import csv
import json
import math

import numpy as np
import pytest

from proxrl.environment import ConfoundedEnvSpec, true_policy_value
from proxrl.errors import ConfigurationError, FixtureError
from proxrl.experiments import (DIAGNOSTIC, NEAR_BEHAVIOR, NEAR_OPTIMAL, OPL_COMPARE, ExperimentSpec,
                                ResultRecord, derive_seed, make_target_policy, opl_summary, run_experiment,
                                table_rows, trend_inversions)
from proxrl.policy import PolicyParams


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ExperimentSpec(replications=0)
    with pytest.raises(ConfigurationError):
        ExperimentSpec(sizes=())
    with pytest.raises(ConfigurationError):
        ExperimentSpec(kind="grid")
    with pytest.raises(ConfigurationError):
        ExperimentSpec(targets=("random",))
    with pytest.raises(ConfigurationError):
        ExperimentSpec(policy_classes=("uniform",))
    with pytest.raises(ValueError):
        ExperimentSpec(methods=("dqn",))


def test_seed_derivation_is_stable_and_distinct():
    assert derive_seed(0, 1, 2) == derive_seed(0, 1, 2)
    assert len({derive_seed(0, k, r) for k in range(4) for r in range(20)}) == 80


def test_near_behavior_symmetric_at_zero():
    pc, zeta = make_target_policy(NEAR_BEHAVIOR)
    a = np.linspace(0.05, 0.95, 7)
    np.testing.assert_allclose(pc.density(zeta, np.array([0.0]), a), pc.density(zeta, np.array([0.0]), -a),
                               rtol=1e-13)


def test_missing_fixture_is_reported(tmp_path):
    with pytest.raises(FixtureError, match="build_near_optimal_fixture"):
        make_target_policy(NEAR_OPTIMAL, fixture_path=tmp_path / "absent.json")


def test_near_optimal_beats_near_behavior(env):
    vals = {}
    for name in (NEAR_BEHAVIOR, NEAR_OPTIMAL):
        pc, zeta = make_target_policy(name)
        vals[name] = true_policy_value(env, PolicyParams(pc, zeta), n_mc=300, seed=3).value
    assert vals[NEAR_OPTIMAL] > vals[NEAR_BEHAVIOR]


def test_single_method_single_rep_counts(tmp_path):
    spec = ExperimentSpec(sizes=((5, 4), (6, 4)), replications=1, methods=("proximal",), oracle_n_mc=50)
    res = run_experiment(spec)
    assert len(res.rows) == 2 and len(res.summary) == 2
    truths = {r.truth for r in res.rows}
    assert len(truths) == 1  # one oracle shared by every cell
    res.write(tmp_path)
    with open(tmp_path / "results.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 2
    js = json.loads((tmp_path / "summary.json").read_text())
    assert {"version", "config_hash", "cells", "oracle"} <= set(js)
    assert "wall_time" not in (tmp_path / "summary.json").read_text()


def test_rows_reproducible_from_seed():
    spec = ExperimentSpec(sizes=((5, 4),), replications=2, methods=("mdp",), oracle_n_mc=50)
    a, b = run_experiment(spec), run_experiment(spec)
    assert [r.estimate for r in a.rows] == [r.estimate for r in b.rows]
    assert a.rows[0].seed != a.rows[1].seed


def test_workers_match_serial():
    spec = ExperimentSpec(sizes=((5, 4),), replications=2, methods=("proximal",), oracle_n_mc=50)
    par = ExperimentSpec(sizes=((5, 4),), replications=2, methods=("proximal",), oracle_n_mc=50, workers=2)
    assert [r.estimate for r in run_experiment(spec).rows] == [r.estimate for r in run_experiment(par).rows]


def test_table_layout_and_external_rows():
    spec = ExperimentSpec(kind=OPL_COMPARE, sizes=((25, 25), (100, 50)), replications=2,
                          methods=("proximal", "mdp"), policy_classes=("gaussian_linear", "beta_linear"))
    rows = [ResultRecord(m, v, "", n, T, r, 0, 1.0 + r, math.nan, math.nan)
            for m in spec.methods for v in spec.policy_classes for n, T in spec.sizes for r in range(2)]
    table = table_rows(opl_summary(rows, spec), spec)
    assert table[0] == ["method", "(25, 25)", "(100, 50)"]
    labels = [row[0] for row in table[1:]]
    assert labels == ["Proposed-Linear-Gaussian", "Proposed-Linear-Beta", "MDP-Linear-Gaussian",
                      "MDP-Linear-Beta", "MDP-SAC", "MDP-CQL", "MDP-IQL"]
    assert table[1][1] == "1.50 (0.71)"
    assert table[-1][1:] == ["external", "external"]


def test_failed_cells_are_recorded_not_raised(monkeypatch):
    import proxrl.experiments as ex
    from proxrl.errors import EstimationError

    def broken(*a, **k):
        raise EstimationError("singular")

    monkeypatch.setattr(ex, "fit_q", broken)
    spec = ExperimentSpec(sizes=((3, 2), (4, 2)), replications=1, methods=("proximal",), oracle_n_mc=20)
    res = run_experiment(spec)
    assert [r.status for r in res.rows] == ["failed: EstimationError"] * 2
    assert all(c["n_failed"] == 1 and c["n_ok"] == 0 for c in res.summary)


def test_trend_inversions():
    assert trend_inversions([4, 3, 2, 1]) == 0
    assert trend_inversions([4, 5, 2, 1]) == 1


def test_diagnostic_forces_zero_noise():
    spec = ExperimentSpec(kind=DIAGNOSTIC, sizes=((5, 4),), replications=1, methods=("proximal", "mdpw"),
                          oracle_n_mc=50, env=ConfoundedEnvSpec(obs_noise_sd=1.0))
    res = run_experiment(spec)
    assert len(res.rows) == 2 and res.spec.env.obs_noise_sd == 0.0


def test_diagnostic_prox_and_mdpw_mse_within_factor_two():
    spec = ExperimentSpec(kind=DIAGNOSTIC, sizes=((100, 50),), replications=5, methods=("proximal", "mdpw"),
                          oracle_n_mc=2000)
    mse = {c["method"]: c["mse"] for c in run_experiment(spec).summary}
    assert 0.5 <= mse["proximal"] / mse["mdpw"] <= 2.0
