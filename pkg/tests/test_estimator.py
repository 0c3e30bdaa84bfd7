import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from subbagmil import SubBagMILClassifier
from subbagmil.bagstore import SyntheticConfig, synthesize_bags
from subbagmil.validation import check_bag, check_bags


@pytest.fixture(scope="module")
def data():
    bags = synthesize_bags(SyntheticConfig(3, (1, 1, 1), 60, 8, (6, 10), salient_fraction=0.5,
                                           background_scale=0.3, seed=3))
    names = np.array(["normal", "type_a", "type_b"])
    return [b.features for b in bags], names[[b.label for b in bags]]


@pytest.fixture(scope="module")
def fitted(data):
    X, y = data
    return SubBagMILClassifier(n_subbags=3, epochs=8, patience=8, lr=1e-3, hidden=8, attention=4,
                               random_state=0).fit(X, y)


def test_get_params_and_clone():
    est = SubBagMILClassifier(n_subbags=5, margin=0.2)
    params = est.get_params()
    assert params["n_subbags"] == 5 and params["margin"] == 0.2
    assert clone(est).get_params() == params
    est.set_params(schedule="linear")
    assert est.schedule == "linear"


def test_fit_predict_shapes_and_labels(data, fitted):
    X, y = data
    proba = fitted.predict_proba(X)
    assert proba.shape == (len(X), 3)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, atol=1e-12)
    assert set(fitted.predict(X)) <= set(fitted.classes_)
    assert list(fitted.classes_) == ["normal", "type_a", "type_b"]
    assert fitted.transform(X).shape == (len(X), 8)
    att = fitted.attention_weights(X[:2])
    assert [a.size for a in att] == [x.shape[0] for x in X[:2]]
    assert 0.0 <= fitted.score(X, y) <= 1.0


def test_fit_is_deterministic(data, fitted):
    X, y = data
    again = clone(fitted).fit(X, y)
    np.testing.assert_array_equal(again.predict_proba(X), fitted.predict_proba(X))


def test_explicit_validation_data(data):
    X, y = data
    est = SubBagMILClassifier(n_subbags=2, epochs=2, hidden=4, attention=2)
    est.fit(X[:40], y[:40], validation_data=(X[40:], y[40:]))
    assert est.fit_result_.epochs_run == 2


def test_input_validation(data, fitted):
    X, y = data
    with pytest.raises(NotFittedError):
        SubBagMILClassifier().predict(X)
    with pytest.raises(ValueError, match="features"):
        fitted.predict([np.ones((3, 5))])
    with pytest.raises(ValueError, match="NaN"):
        check_bag(np.array([[np.nan, 1.0]]))
    with pytest.raises(ValueError):
        check_bags([])
    with pytest.raises(ValueError, match="one label per bag"):
        SubBagMILClassifier().fit(X, y[:-1])
    with pytest.raises(ValueError, match="two classes"):
        SubBagMILClassifier().fit(X[:5], ["a"] * 5)


def test_three_dimensional_array_input(fitted):
    cube = np.random.default_rng(0).normal(size=(4, 6, 8))
    assert fitted.predict_proba(cube).shape == (4, 3)
