"""scikit-learn compatible wrappers around the pipeline, model zoo and trainer.

These make the workbench composable with ``sklearn.pipeline.Pipeline``,
``clone`` and ``GridSearchCV``::

    pipe = make_pipeline(TilePreprocessor(), TransferLearningClassifier(max_epochs=50))
    pipe.fit(paths, labels).predict(test_paths)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .errors import ConfigurationError
from .model_zoo import ModelConfig, build_model
from .pipeline import MODEL_INPUT_SIZE, AugmentConfig, BatchStream, augment, load_tensor
from .trainer import TrainConfig, predict, train
from .validation import check_image_batch


class TilePreprocessor(TransformerMixin, BaseEstimator):
    """Paths or raw uint8 rasters -> ``(N, size, size, 3)`` float batch in [0, 1]."""

    def __init__(self, size: int = MODEL_INPUT_SIZE):
        self.size = size

    def fit(self, X, y=None):
        self.output_shape_ = (self.size, self.size, 3)
        return self

    def transform(self, X):
        check_is_fitted(self, "output_shape_")
        return np.stack([load_tensor(x, self.size) for x in X])


class TileAugmenter(TransformerMixin, BaseEstimator):
    """Applies one random augmentation per image. Stateless apart from the seed;
    a fresh generator is created on every ``transform`` call so outputs are
    reproducible."""

    def __init__(
        self,
        rotation_max_deg=40.0,
        width_shift_frac=0.2,
        height_shift_frac=0.2,
        horizontal_flip=True,
        vertical_flip=True,
        fill_mode="nearest",
        random_state=0,
    ):
        self.rotation_max_deg = rotation_max_deg
        self.width_shift_frac = width_shift_frac
        self.height_shift_frac = height_shift_frac
        self.horizontal_flip = horizontal_flip
        self.vertical_flip = vertical_flip
        self.fill_mode = fill_mode
        self.random_state = random_state

    def _config(self) -> AugmentConfig:
        return AugmentConfig(
            rotation_max_deg=self.rotation_max_deg,
            width_shift_frac=self.width_shift_frac,
            height_shift_frac=self.height_shift_frac,
            horizontal_flip=self.horizontal_flip,
            vertical_flip=self.vertical_flip,
            fill_mode=self.fill_mode,
            rng_seed=self.random_state,
        )

    def fit(self, X, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        check_is_fitted(self, "config_")
        X = check_image_batch(X)
        rng = np.random.default_rng(self.config_.rng_seed)
        return np.stack([augment(img, self.config_, rng) for img in X])


class TransferLearningClassifier(ClassifierMixin, BaseEstimator):
    """Pre-trained backbone + two-FC head, trained with Adam and val-accuracy
    early stopping.

    ``X`` is anything :func:`~histo_tl.pipeline.load_tensor` accepts per item:
    image paths, uint8 rasters, or preprocessed float arrays. Labels may be
    arbitrary hashables; 2 or 3 distinct values are required.

    Without explicit ``X_val``/``y_val``, ``validation_fraction`` of the training
    data is held out (stratified).
    """

    def __init__(
        self,
        backbone="VGG19",
        fc1_units=512,
        fc2_units=1024,
        dropout_rate=0.5,
        freeze_backbone=True,
        weights="imagenet",
        input_size=MODEL_INPUT_SIZE,
        input_normalization="none",
        learning_rate=0.01,
        max_epochs=1500,
        batch_size=80,
        val_batch_size=28,
        early_stop_val_acc=0.98,
        validation_fraction=0.1,
        augment=None,
        random_state=0,
    ):
        self.backbone = backbone
        self.fc1_units = fc1_units
        self.fc2_units = fc2_units
        self.dropout_rate = dropout_rate
        self.freeze_backbone = freeze_backbone
        self.weights = weights
        self.input_size = input_size
        self.input_normalization = input_normalization
        self.learning_rate = learning_rate
        self.max_epochs = max_epochs
        self.batch_size = batch_size
        self.val_batch_size = val_batch_size
        self.early_stop_val_acc = early_stop_val_acc
        self.validation_fraction = validation_fraction
        self.augment = augment
        self.random_state = random_state

    def _items(self, X, y):
        return list(zip(list(X), [int(v) for v in y]))

    def fit(self, X, y, X_val=None, y_val=None):
        X = list(X)
        self.label_encoder_ = LabelEncoder().fit(y)
        self.classes_ = self.label_encoder_.classes_
        if len(self.classes_) not in (2, 3):
            raise ConfigurationError(f"need 2 or 3 classes, got {len(self.classes_)}")
        y_enc = self.label_encoder_.transform(y)
        if X_val is None:
            idx = np.arange(len(X))
            tr, va = train_test_split(
                idx,
                test_size=self.validation_fraction,
                stratify=y_enc,
                random_state=self.random_state,
            )
            X_tr, y_tr = [X[i] for i in tr], y_enc[tr]
            X_va, y_va = [X[i] for i in va], y_enc[va]
        else:
            X_tr, y_tr = X, y_enc
            X_va, y_va = list(X_val), self.label_encoder_.transform(y_val)

        n_classes = len(self.classes_)
        size = int(self.input_size)
        aug = self.augment if self.augment is not None else AugmentConfig(rng_seed=self.random_state)
        model_cfg = ModelConfig(
            backbone=self.backbone,
            n_classes=n_classes,
            fc1_units=self.fc1_units,
            fc2_units=self.fc2_units,
            dropout_rate=self.dropout_rate,
            freeze_backbone=self.freeze_backbone,
            input_size=(size, size, 3),
            weights=self.weights,
            input_normalization=self.input_normalization,
        )
        train_cfg = TrainConfig(
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            batch_sizes={"train": self.batch_size, "val": self.val_batch_size, "test": self.val_batch_size},
            early_stop_val_acc=self.early_stop_val_acc,
            seed=self.random_state,
        )
        self.model_ = build_model(model_cfg, seed=self.random_state)
        train_stream = BatchStream(self._items(X_tr, y_tr), self.batch_size, "train", aug, size, n_classes)
        val_stream = BatchStream(self._items(X_va, y_va), self.val_batch_size, "eval", None, size, n_classes)
        self.record_ = train(self.model_, train_stream, val_stream, train_cfg)
        self.n_epochs_ = len(self.record_.epoch_history)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = list(X)
        stream = BatchStream(
            [(x, 0) for x in X], self.val_batch_size, "eval", None, int(self.input_size)
        )
        probs, _, _ = predict(self.model_, stream)
        return probs

    def predict(self, X):
        return self.classes_[self.predict_proba(X).argmax(axis=1)]
