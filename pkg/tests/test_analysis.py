import json

import numpy as np
import pytest

from torquevla.analysis import (
    DegenerateKernelError,
    HSICDependence,
    contact_bearing_joints,
    hsic_normalized,
    sample_frames,
    sensitivity_experiment,
    token_dependence_matrix,
    torque_prediction_report,
    write_dependence,
    write_torque_report,
)
from torquevla.arm import default_arm
from torquevla.policy import FlowMatchingPolicy
from torquevla.simenv import TaskSpec, generate_dataset

from oracles import hsic_reference

ARM = default_arm()
SPEC = TaskSpec()
SMALL = dict(w_enc=16, w_dec=16, n_ctx_tokens=4, horizon_H=10, execute_steps=10, enc_depth=1, dec_depth=2)


@pytest.fixture(scope="module")
def ds():
    return generate_dataset(SPEC, ARM, 30, seed=8)


@pytest.fixture(scope="module")
def depost(ds):
    return FlowMatchingPolicy(torque_mode="dec_post_hist_agg", predict_torque=True, steps=20, **SMALL).fit(ds)


def test_hsic_matches_reference():
    r = np.random.default_rng(0)
    X = r.normal(size=(40, 3))
    Y = X[:, :1] ** 2 + 0.3 * r.normal(size=(40, 1))
    assert abs(hsic_normalized(X, Y) - hsic_reference(X, Y)) <= 1e-12


def test_hsic_self_and_scaling():
    X = np.random.default_rng(1).normal(size=(256, 4))
    assert abs(hsic_normalized(X, X.copy()) - 1.0) <= 1e-9
    assert hsic_normalized(X, np.pi * X) >= 0.99


def test_hsic_independent_samples_stay_low():
    worst = 0.0
    for seed in range(20):
        r = np.random.default_rng(100 + seed)
        worst = max(worst, hsic_normalized(r.normal(size=(256, 5)), r.normal(size=(256, 5))))
    assert worst <= 0.1


def test_hsic_permutation_invariance_and_range():
    r = np.random.default_rng(2)
    X = r.normal(size=(64, 3))
    Y = np.sin(X) + 0.1 * r.normal(size=(64, 3))
    p = r.permutation(64)
    a, b = hsic_normalized(X, Y), hsic_normalized(X[p], Y[p])
    assert abs(a - b) <= 1e-12 and 0.0 <= a <= 1.0


def test_hsic_errors():
    X = np.random.default_rng(3).normal(size=(16, 2))
    with pytest.raises(DegenerateKernelError):
        hsic_normalized(X, np.ones((16, 2)))
    with pytest.raises(ValueError):
        hsic_normalized(X[:4], X[:4])
    with pytest.raises(ValueError):
        hsic_normalized(X, X[:10])


def test_hsic_estimator_api():
    X = np.random.default_rng(4).normal(size=(32, 2))
    est = HSICDependence().fit(X)
    assert est.bandwidth_ > 0 and abs(est.score(X, X) - 1.0) <= 1e-9
    assert HSICDependence(bandwidth=2.0).get_params() == {"bandwidth": 2.0}


def test_dependence_matrix_shape(depost, ds, tmp_path):
    dm = token_dependence_matrix(depost, ds, layer_index=1, n_frames=128)
    assert dm.labels == ["action", "angle", "torque", "context"] and dm.omitted == []
    assert np.abs(dm.matrix - dm.matrix.T).max() <= 1e-12
    assert np.abs(np.diag(dm.matrix) - 1.0).max() <= 1e-9
    assert dm.matrix.min() >= 0.0 and dm.matrix.max() <= 1.0
    write_dependence(dm, tmp_path)
    assert json.loads((tmp_path / "hsic_summary.json").read_text())["n_samples"] == 128


def test_shuffled_modality_loses_dependence(depost, ds):
    worst = 0.0
    for seed in range(10):
        dm = token_dependence_matrix(depost, ds, layer_index=1, n_frames=128, seed=seed, permute="torque")
        i = dm.labels.index("torque")
        worst = max(worst, np.delete(dm.matrix[i], i).max())
    assert worst < 0.2


def test_missing_modality_is_labelled(ds):
    pol = FlowMatchingPolicy(torque_mode="enc_single", steps=2, **SMALL).fit(ds)
    dm = token_dependence_matrix(pol, ds, n_frames=32)
    assert dm.omitted == ["torque"] and "torque" not in dm.labels


def test_zero_noise_changes_nothing(depost):
    res = sensitivity_experiment(depost, SPEC, ARM, site="decoder", kind="noise", sigma=0.0, n_episodes=5)
    assert res.delta == 0.0 and res.clean == res.perturbed
    with pytest.raises(ValueError):
        sensitivity_experiment(depost, SPEC, ARM, site="head", n_episodes=1)


def test_sensitivity_is_deterministic(depost):
    a = sensitivity_experiment(depost, SPEC, ARM, site="encoder", kind="extra_token", n_episodes=5, perturb_seed=3)
    b = sensitivity_experiment(depost, SPEC, ARM, site="encoder", kind="extra_token", n_episodes=5, perturb_seed=3)
    assert a == b


def test_untrained_torque_predictions_are_uncorrelated(ds, tmp_path):
    pol = FlowMatchingPolicy(torque_mode="dec_post_hist_agg", predict_torque=True, **SMALL).initialize(ds)
    rep = torque_prediction_report(pol, ds.validation, n_frames=64)
    assert rep.predicted.shape == rep.target.shape == (64, 10, 7)
    assert np.isnan(rep.correlation[-1]) and rep.excluded == [6]
    assert np.nanmax(np.abs(rep.correlation)) <= 0.2
    write_torque_report(rep, tmp_path)
    summary = json.loads((tmp_path / "torque_summary.json").read_text())
    assert summary["correlation"][-1] is None and len(summary["mse"]) == 7
    with pytest.raises(ValueError):
        torque_prediction_report(FlowMatchingPolicy(**SMALL).initialize(ds), ds.validation)


def test_strided_frames_hit_decision_points(ds):
    frames = sample_frames(ds.episodes, 50, np.random.default_rng(0), stride=25)
    assert len(set(frames)) == 50 and all(t % 25 == 0 for _, t in frames)
    assert all(t < len(ds.episodes[e]) for e, t in frames)


def test_gripper_never_bears_contact(ds):
    joints = contact_bearing_joints(ds.episodes)
    assert joints and 6 not in joints
