import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from neurohybrid.estimators import CNNClassifier, HybridClassifier
from neurohybrid.fusion import fit_logreg, fuse
from neurohybrid.netarch import extract_features, predict_proba

from conftest import tiny_arch, toy_dataset

TRAINING = dict(max_epochs=2, batch_size=4, seed=1)


@pytest.fixture(scope="module")
def data():
    arch = tiny_arch()
    ds = toy_dataset(arch, n=8, dtype=np.float32)
    X = dict(ds.inputs)
    X["volume"] = np.random.default_rng(0).normal(size=(8, 12)) + ds.labels[:, None]
    labels = np.where(ds.labels == 1, "PSP", "PD")
    return arch, X, labels


@pytest.fixture(scope="module")
def cnn(data):
    arch, X, y = data
    return CNNClassifier(arch=arch.to_dict(), training=TRAINING).fit(X, y)


def test_cnn_outputs(data, cnn):
    arch, X, y = data
    proba = cnn.predict_proba(X)
    assert proba.shape == (8, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0, rtol=0, atol=1e-6)
    np.testing.assert_array_equal(proba[:, 1], predict_proba(cnn.model_, X))
    assert set(cnn.predict(X)) <= {"PD", "PSP"}
    assert list(cnn.classes_) == ["PD", "PSP"]
    assert cnn.transform(X).shape == (8, arch.dense_width)
    assert len(cnn.history_.epochs) == 2 and cnn.history_.stop_reason


def test_cnn_fit_is_deterministic(data, cnn):
    arch, X, y = data
    again = clone(cnn).fit(X, y)
    np.testing.assert_array_equal(again.predict_proba(X), cnn.predict_proba(X))


def test_cnn_threshold_moves_decision(data, cnn):
    _, X, _ = data
    p = cnn.predict_proba(X)[:, 1]
    always = clone(cnn).set_params(threshold=0.0)
    always.model_, always.classes_ = cnn.model_, cnn.classes_
    assert (always.predict(X) == "PSP").all()
    assert ((cnn.predict(X) == "PSP") == (p >= 0.5)).all()


def test_cnn_errors(data):
    arch, X, y = data
    est = CNNClassifier(arch=arch.to_dict(), training=TRAINING)
    with pytest.raises(NotFittedError):
        est.predict(X)
    with pytest.raises(ValueError, match="binary"):
        est.fit(X, np.zeros(8))
    with pytest.raises(ValueError, match="labels"):
        est.fit(X, y[:6])
    with pytest.raises(ValueError, match="lacks branches"):
        est.fit({"brainstem": X["brainstem"]}, y)


def test_hybrid_with_prefitted_cnn_matches_manual_pipeline(data, cnn):
    _, X, y = data
    hyb = HybridClassifier(cnn=cnn, l2=0.5).fit(X, y)
    assert hyb.cnn_ is cnn
    z = fuse(extract_features(cnn.model_, X), X["volume"])
    manual = fit_logreg(z, (y == "PSP").astype(int), 0.5, "balanced")
    np.testing.assert_allclose(hyb.predict_proba(X)[:, 1], manual.predict_proba(z), rtol=1e-12, atol=0)
    assert set(hyb.predict(X)) <= {"PD", "PSP"}


def test_hybrid_clones_unfitted_cnn(data):
    arch, X, y = data
    template = CNNClassifier(arch=arch.to_dict(), training=TRAINING)
    hyb = HybridClassifier(cnn=template).fit(X, y)
    assert not hasattr(template, "model_")
    assert hyb.cnn_ is not template and hasattr(hyb.cnn_, "model_")


def test_hybrid_errors(data, cnn):
    _, X, y = data
    hyb = HybridClassifier(cnn=cnn)
    with pytest.raises(NotFittedError):
        hyb.predict_proba(X)
    no_volume = {k: v for k, v in X.items() if k != "volume"}
    with pytest.raises(ValueError, match="volume"):
        hyb.fit(no_volume, y)
