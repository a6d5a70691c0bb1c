import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError
from sklearn.pipeline import make_pipeline

from histo_tl.errors import ConfigurationError
from histo_tl.estimator import TileAugmenter, TilePreprocessor, TransferLearningClassifier
from histo_tl.pipeline import AugmentConfig

from conftest import CLASS_COLOURS, make_tile_dataset


def small_clf(**kw):
    params = dict(weights="none", input_size=32, learning_rate=1e-3,
                  max_epochs=40, early_stop_val_acc=1.0, augment=AugmentConfig.identity(), random_state=0)
    params.update(kw)
    return TransferLearningClassifier(**params)


def test_get_params_and_clone():
    clf = small_clf(backbone="VGG16")
    params = clf.get_params()
    assert params["backbone"] == "VGG16" and params["learning_rate"] == 1e-3
    twin = clone(clf)
    assert twin.get_params() == params and twin is not clf
    assert TransferLearningClassifier().get_params()["learning_rate"] == 0.01


def test_preprocessor_transform(six_tile_root):
    paths = sorted((six_tile_root / "tiles").rglob("*.png"))
    pre = TilePreprocessor(size=16)
    with pytest.raises(NotFittedError):
        pre.transform(paths)
    out = pre.fit(paths).transform(paths)
    assert out.shape == (6, 16, 16, 3) and out.min() >= 0 and out.max() <= 1


def test_augmenter_is_reproducible():
    X = np.random.default_rng(0).random((3, 20, 20, 3), dtype=np.float32)
    aug = TileAugmenter(random_state=4).fit(X)
    np.testing.assert_array_equal(aug.transform(X), aug.transform(X))
    assert aug.transform(X).shape == X.shape
    ident = TileAugmenter(0, 0, 0, False, False).fit(X)
    np.testing.assert_array_equal(ident.transform(X), X)


def test_pipeline_fit_predict(tmp_path):
    root = make_tile_dataset(tmp_path / "d", per_class=10, size=24)
    labels = {c.name: c for c in CLASS_COLOURS}
    paths = sorted((root / "tiles").rglob("*.png"))
    y = [p.parent.name for p in paths]
    pipe = make_pipeline(TilePreprocessor(size=32), small_clf())
    pipe.fit(paths, y)
    clf = pipe[-1]
    assert list(clf.classes_) == sorted(labels)
    assert 1 <= clf.n_epochs_ <= 40
    pred = pipe.predict(paths)
    assert set(pred) <= set(labels)
    proba = pipe.predict_proba(paths)
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-6)
    assert np.mean(pred == np.array(y)) >= 0.9


def test_explicit_validation_set():
    rng = np.random.default_rng(0)
    X = [np.full((32, 32, 3), v, np.float32) for v in rng.uniform(0, 0.3, 8)]
    X += [np.full((32, 32, 3), v, np.float32) for v in rng.uniform(0.7, 1, 8)]
    y = ["a"] * 8 + ["b"] * 8
    clf = small_clf(max_epochs=2).fit(X, y, X_val=X[:2] + X[-2:], y_val=["a", "a", "b", "b"])
    assert clf.record_.model_config["n_classes"] == 2
    assert len(clf.record_.epoch_history) == 2


def test_rejects_wrong_class_count():
    X = [np.zeros((32, 32, 3), np.float32)] * 8
    with pytest.raises(ConfigurationError):
        small_clf().fit(X, list("abcdabcd"))
