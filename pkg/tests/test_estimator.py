import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from fedgnids import EdgeAnomalyDetector
from fedgnids.estimator import check_events
from fedgnids.graph import LogEvent
from fedgnids.io import SynthSpec, synth_dataset


@pytest.fixture(scope="module")
def data():
    spec = SynthSpec(n_nodes=60, T=10, anomaly_count=8, anomaly_window=(9, 10), p_intra=0.2, seed=2)
    graph, _ = synth_dataset(spec)
    X = np.array([(e.src, e.dst, e.timestamp) for e in graph.events])
    y = np.array([e.label for e in graph.events])
    return X, y


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return EdgeAnomalyDetector(n_clients=3, max_rounds=3, hidden_dim=8, embed_dim=4, random_state=1).fit(X, y)


def test_params_and_clone():
    est = EdgeAnomalyDetector(scheme="fedavg", n_clients=3)
    params = est.get_params()
    assert params["scheme"] == "fedavg" and params["n_clients"] == 3
    twin = clone(est)
    assert twin.get_params() == params and twin is not est
    est.set_params(omega=2.0)
    assert est.omega == 2.0


def test_check_events():
    events = check_events([[0, 1, 5], [1, 2, 6]])
    assert events == [LogEvent(0, 1, 5, 0), LogEvent(1, 2, 6, 0)]
    assert check_events([[0, 1, 5, 1]])[0].label == 1
    assert check_events([[0, 1, 5]], [1])[0].label == 1
    with pytest.raises(ValueError):
        check_events([[0, 1]])
    with pytest.raises(ValueError):
        check_events([[0, 1, 5]], [2])
    with pytest.raises(ValueError):
        check_events([[0, 1, 5], [1, 2, 6]], [0])
    with pytest.raises(ValueError):
        check_events([[0, 1, np.nan]])


def test_unfitted():
    with pytest.raises(NotFittedError):
        EdgeAnomalyDetector().predict([[0, 1, 5]])


def test_fit_sets_attributes(fitted):
    assert fitted.params_.is_finite() and not fitted.diverged_
    assert fitted.n_features_in_ == 3
    assert 1 <= len(fitted.history_) <= 3
    assert np.isfinite(fitted.threshold_)


def test_scores_and_predictions(fitted, data):
    X, y = data
    scores = fitted.decision_function(X)
    assert scores.shape == (len(X),)
    ok = ~np.isnan(scores)
    assert np.all((scores[ok] >= 0) & (scores[ok] <= 1))
    pred = fitted.predict(X[ok])
    assert set(np.unique(pred)) <= {0, 1}
    np.testing.assert_array_equal(pred, (scores[ok] >= fitted.threshold_).astype(int))
    assert fitted.score(X, y) > y.mean()


def test_offset_leaves_first_window_unscored(data):
    X, y = data
    est = EdgeAnomalyDetector(n_clients=3, max_rounds=2, hidden_dim=8, embed_dim=4, offset=1).fit(X, y)
    scores = est.decision_function(X)
    first = (X[:, 2] - X[:, 2].min()) // est.window_seconds == 0
    assert np.all(np.isnan(scores[first])) and not np.any(np.isnan(scores[~first]))


def test_rejects_events_before_origin(fitted):
    with pytest.raises(ValueError, match="origin"):
        fitted.decision_function([[0, 1, fitted.origin_ - 1]])


def test_fit_deterministic(data, fitted):
    X, y = data
    again = clone(fitted).fit(X, y)
    np.testing.assert_array_equal(again.params_.flat, fitted.params_.flat)
    np.testing.assert_array_equal(again.decision_function(X[:50]), fitted.decision_function(X[:50]))
