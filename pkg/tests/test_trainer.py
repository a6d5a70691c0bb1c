import csv
import json
import math

import numpy as np
import pytest
import torch

from histo_tl.data_manifest import TASKS
from histo_tl.errors import ConfigurationError, PredictionError
from histo_tl.model_zoo import ModelConfig, build_model, load_checkpoint
from histo_tl.pipeline import AugmentConfig, BatchStream
from histo_tl.trainer import (
    BINARY_CE,
    CATEGORICAL_CE,
    TrainConfig,
    TrainRunRecord,
    cross_entropy,
    predict,
    select_loss,
    train,
)

SIZE = 32
COLOURS = np.array([[0.8, 0.2, 0.2], [0.2, 0.7, 0.3], [0.25, 0.3, 0.85]], np.float32)


def colour_items(per_class, n_classes=3, seed=0):
    rng = np.random.default_rng(seed)
    items = []
    for c in range(n_classes):
        for _ in range(per_class):
            col = np.clip(COLOURS[c] + rng.uniform(-0.03, 0.03, 3), 0, 1)
            items.append((np.broadcast_to(col, (SIZE, SIZE, 3)).astype(np.float32), c))
    return items


def setup(n_classes=3, per_class=4, seed=0, head=(32, 64), **model_kw):
    cfg = ModelConfig(n_classes=n_classes, input_size=(SIZE, SIZE, 3), weights="none",
                      fc1_units=head[0], fc2_units=head[1], **model_kw)
    model = build_model(cfg, seed=seed)
    tr = BatchStream(colour_items(per_class, n_classes), 80, "train", AugmentConfig.identity(seed), SIZE, n_classes)
    va = BatchStream(colour_items(2, n_classes, seed=1), 28, "eval", None, SIZE, n_classes)
    return model, tr, va


# ------------------------------------------------------------------ loss


def test_select_loss_by_arity():
    assert select_loss(TASKS["MULTICLASS"]) == CATEGORICAL_CE
    assert select_loss(TASKS["NCT_vs_VT"]) == BINARY_CE
    assert select_loss(2) == BINARY_CE
    with pytest.raises(ConfigurationError):
        select_loss(4)


@pytest.mark.parametrize("kind, n", [(BINARY_CE, 2), (CATEGORICAL_CE, 3)])
def test_perfect_prediction_has_zero_loss(kind, n):
    onehot = np.eye(n)
    assert abs(cross_entropy(kind, onehot, onehot)) <= 1e-9


def test_binary_equals_categorical_for_two_units():
    rng = np.random.default_rng(0)
    p = rng.dirichlet([1, 1], 20)
    y = np.eye(2)[rng.integers(0, 2, 20)]
    assert cross_entropy(BINARY_CE, y, p) == pytest.approx(cross_entropy(CATEGORICAL_CE, y, p), rel=1e-12)
    manual = -np.mean(np.log(p[y.astype(bool)]))
    assert cross_entropy(CATEGORICAL_CE, y, p) == pytest.approx(manual, rel=1e-12)


@pytest.mark.parametrize("kw", [{"learning_rate": 0}, {"max_epochs": 0}, {"early_stop_val_acc": 1.5},
                                {"optimizer": "sgd"}, {"batch_sizes": {"train": 0, "val": 1, "test": 1}}])
def test_train_config_validation(kw):
    with pytest.raises(ConfigurationError):
        TrainConfig(**kw)


def test_train_config_defaults():
    cfg = TrainConfig()
    assert cfg.learning_rate == 0.01 and cfg.max_epochs == 1500
    assert cfg.batch_sizes == {"train": 80, "val": 28, "test": 16}
    assert cfg.early_stop_val_acc == 0.98
    assert (cfg.adam_beta_1, cfg.adam_beta_2, cfg.adam_epsilon) == (0.9, 0.999, 1e-7)


# ------------------------------------------------------------------ train loop


def test_zero_threshold_stops_after_one_epoch():
    model, tr, va = setup()
    rec = train(model, tr, va, TrainConfig(max_epochs=50, early_stop_val_acc=0.0))
    assert rec.stop_reason == "early_stop"
    assert len(rec.epoch_history) == 1
    assert rec.epoch_history[-1].val_acc > 0.0


def test_max_epochs_bound():
    model, tr, va = setup()
    rec = train(model, tr, va, TrainConfig(max_epochs=3, early_stop_val_acc=1.0))
    assert rec.stop_reason == "max_epochs"
    assert [e.epoch for e in rec.epoch_history] == [1, 2, 3]


def test_early_stop_bookkeeping():
    model, tr, va = setup(per_class=6)
    rec = train(model, tr, va, TrainConfig(learning_rate=1e-3, max_epochs=60, early_stop_val_acc=0.9))
    hist = rec.epoch_history
    assert [e.epoch for e in hist] == list(range(1, len(hist) + 1))
    if rec.stop_reason == "early_stop":
        assert hist[-1].val_acc > 0.9
        assert all(e.val_acc <= 0.9 for e in hist[:-1])
    best = max(hist, key=lambda e: (e.val_acc, -e.epoch))
    assert (rec.best_epoch, rec.best_val_acc) == (best.epoch, best.val_acc)


def test_small_overfit_and_frozen_backbone():
    model, tr, va = setup(per_class=10, head=(512, 1024))
    before = model.backbone_state()
    rec = train(model, tr, va, TrainConfig(learning_rate=1e-3, max_epochs=200, early_stop_val_acc=1.0))
    after = model.backbone_state()
    assert all(torch.equal(before[k], after[k]) for k in before)
    hist = rec.epoch_history
    assert max(e.train_acc for e in hist) >= 0.95
    assert hist[-1].train_loss < hist[0].train_loss


def test_training_is_reproducible():
    runs = []
    for _ in range(2):
        model, tr, va = setup(seed=3)
        rec = train(model, tr, va, TrainConfig(max_epochs=4, early_stop_val_acc=1.0, seed=3))
        runs.append([(e.train_loss, e.val_loss) for e in rec.epoch_history])
    assert runs[0] == runs[1]


def test_feature_cache_matches_direct_path():
    out = []
    for cache in (True, False):
        model, tr, va = setup(seed=2)
        rec = train(model, tr, va, TrainConfig(max_epochs=3, early_stop_val_acc=1.0, seed=2), cache_features=cache)
        out.append([e.val_loss for e in rec.epoch_history])
    np.testing.assert_allclose(out[0], out[1], rtol=1e-5)


def test_augmented_training_runs():
    model, _, va = setup()
    tr = BatchStream(colour_items(3), 4, "train", AugmentConfig(rng_seed=1), SIZE, 3)
    rec = train(model, tr, va, TrainConfig(max_epochs=2, early_stop_val_acc=1.0))
    assert len(rec.epoch_history) == 2


def test_non_finite_loss_aborts():
    model, tr, va = setup()
    with torch.no_grad():
        model.network.head[-1].bias.fill_(float("nan"))
    rec = train(model, tr, va, TrainConfig(max_epochs=5))
    assert rec.stop_reason == "error"
    assert rec.error_epoch == 1
    assert "non-finite" in rec.error


def test_arity_mismatch_is_prediction_error():
    model, tr, va = setup(n_classes=2)
    three = BatchStream(colour_items(2), 4, "eval", None, SIZE, 3)
    with pytest.raises(PredictionError):
        train(model, three, va, TrainConfig(max_epochs=1))
    with pytest.raises(PredictionError):
        predict(model, three)


def test_record_and_checkpoint_files(tmp_path):
    model, tr, va = setup()
    rec = train(model, tr, va, TrainConfig(max_epochs=3, early_stop_val_acc=1.0), run_id="r1",
                task="MULTICLASS", run_dir=tmp_path)
    doc = json.loads((tmp_path / "run.json").read_text())
    assert doc["run_id"] == "r1" and doc["stop_reason"] == "max_epochs"
    assert doc["train_config"]["adam_epsilon"] == 1e-7
    assert doc["augment_config"] == AugmentConfig.identity(0).to_dict()
    assert TrainRunRecord.load(tmp_path) == rec
    with (tmp_path / "history.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [int(r["epoch"]) for r in rows] == [1, 2, 3]
    assert all(math.isfinite(float(r["val_loss"])) for r in rows)
    # checkpoint holds the best-validation weights, which the model also holds
    loaded = load_checkpoint(rec.checkpoint_path, expected=model.config)
    x = np.stack([x for x, _ in colour_items(1)])
    np.testing.assert_allclose(loaded.predict_proba(x), model.predict_proba(x), atol=1e-6)


# ------------------------------------------------------------------ predict


def test_predict_rows_argmax_and_determinism():
    model, _, _ = setup()
    stream = BatchStream(colour_items(5), 4, "eval", None, SIZE, 3)
    probs, pred, true = predict(model, stream)
    assert probs.shape == (15, 3) and probs.dtype == np.float64
    np.testing.assert_array_equal(pred, probs.argmax(1))
    np.testing.assert_array_equal(true, [y for _, y in colour_items(5)])
    again = predict(model, stream)
    np.testing.assert_array_equal(again[0], probs)


def test_predict_requires_eval_stream():
    model, tr, _ = setup()
    with pytest.raises(PredictionError):
        predict(model, tr)
