import numpy as np
import pytest
from sklearn.base import clone

from fmehscmt import HSCMTClassifier, JacobiPCA
from fmehscmt.data import images_labels, synth_generate
from fmehscmt.errors import ConfigError
from fmehscmt.evalkit import pca_project


@pytest.fixture(scope="module")
def tiny():
    x, y = images_labels(synth_generate(3, 32, seed=5))
    return x[:, 0], np.array(["ring", "cross", "checker", "gradient"])[y]


def test_params_and_clone():
    est = HSCMTClassifier(preset="micro", epochs=3, seed=9)
    params = est.get_params()
    assert params["preset"] == "micro" and params["epochs"] == 3 and params["seed"] == 9
    twin = clone(est)
    assert twin is not est and twin.get_params() == params
    est.set_params(lr0=5e-4)
    assert est.lr0 == 5e-4


@pytest.mark.filterwarnings("ignore:.*zero denominator")
def test_fit_predict_transform(tiny):
    x, y = tiny
    est = HSCMTClassifier(preset="micro", epochs=1, batch_size=4, seed=1)
    assert est.fit(x, y, x[:4], y[:4]) is est
    assert sorted(est.classes_) == list(est.classes_) == ["checker", "cross", "gradient", "ring"]
    proba = est.predict_proba(x)
    assert proba.shape == (12, 4)
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-5)
    pred = est.predict(x)
    assert set(pred) <= set(est.classes_)
    assert np.array_equal(pred, est.classes_[proba.argmax(1)])
    cfg = est.net_.config
    feats = est.transform(x[:, None])
    assert feats.shape[0] == 12 and feats.shape[1] == cfg.stage_dims[-1] + cfg.residual_dims[-1]
    assert len(est.history_) == 1
    again = HSCMTClassifier(preset="micro", epochs=1, batch_size=4, seed=1).fit(x, y, x[:4], y[:4])
    assert np.array_equal(again.predict_proba(x), proba)


def test_input_validation(tiny):
    x, y = tiny
    est = HSCMTClassifier(preset="micro", epochs=0)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        est.fit(x * 2.0, y)
    with pytest.raises(ValueError, match="32x32"):
        est.fit(np.zeros((4, 16, 16)), y[:4])
    with pytest.raises(ValueError, match="two classes"):
        est.fit(x[:2], ["a", "a"])
    with pytest.raises(ConfigError):
        HSCMTClassifier(preset="huge").fit(x, y)
    with pytest.raises(Exception):
        HSCMTClassifier(preset="micro").predict(x)


def test_jacobi_pca_matches_projection(rng):
    data = rng.normal(size=(30, 6)) @ rng.normal(size=(6, 6))
    pca = JacobiPCA().fit(data)
    res = pca_project(data)
    np.testing.assert_allclose(pca.transform(data), res.coords, atol=1e-10)
    np.testing.assert_allclose(pca.explained_variance_, res.explained_variance)
    assert pca.n_features_in_ == 6 and not pca.degenerate_
    np.testing.assert_allclose(pca.components_ @ pca.components_.T, np.eye(2), atol=1e-10)
    with pytest.raises(ValueError):
        pca.transform(data[:, :4])
