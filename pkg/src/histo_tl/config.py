"""Experiment plan: dataset, split, task x backbone matrix and hyperparameters,
read from and written to an INI file."""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data_manifest import TASKS
from .errors import ConfigurationError
from .model_zoo import BACKBONES, ModelConfig
from .pipeline import AugmentConfig
from .trainer import TrainConfig

RESULTS_ENV = "HISTO_TL_RESULTS"
DEFAULT_TASKS = ("NT_vs_REST", "NCT_vs_NT", "VT_vs_NT", "NCT_vs_VT", "MULTICLASS")


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


@dataclass(frozen=True)
class ExperimentPlan:
    dataset_root: str
    layout: str = "csv_manifest"
    expected_tile_size: int | None = None
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 42
    group_by_wsi: bool = False
    tasks: tuple[str, ...] = DEFAULT_TASKS
    backbones: tuple[str, ...] = ("VGG19", "InceptionV3")
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    results_dir: str = ""
    cache_images: bool = False
    base_dir: str = "."

    def __post_init__(self):
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise ConfigurationError(f"unknown task(s) {', '.join(bad)}")
        bad = [b for b in self.backbones if b not in BACKBONES]
        if bad:
            raise ConfigurationError(f"unknown backbone(s) {', '.join(bad)}")
        if not self.tasks or not self.backbones:
            raise ConfigurationError("plan needs at least one task and one backbone")
        # the model entry is a template; backbone and arity are set per cell
        if self.model.backbone != self.backbones[0]:
            object.__setattr__(self, "model", replace(self.model, backbone=self.backbones[0]))

    @property
    def seed(self) -> int:
        return self.train.seed

    def run_id(self, task: str, backbone: str) -> str:
        return f"{task}__{backbone}__seed{self.seed}"

    def cells(self) -> list[tuple[str, str]]:
        return [(t, b) for t in self.tasks for b in self.backbones]

    def model_config(self, task: str, backbone: str) -> ModelConfig:
        return replace(self.model, backbone=backbone, n_classes=TASKS[task].n_classes)

    def resolve_results_dir(self, override=None) -> Path:
        """``override`` (CLI flag) > config value > $HISTO_TL_RESULTS > ./results.

        A relative config value is taken relative to the config file."""
        if override:
            return Path(override)
        if self.results_dir:
            p = Path(self.results_dir)
            return p if p.is_absolute() else Path(self.base_dir) / p
        return Path(os.environ.get(RESULTS_ENV) or "results")

    def dataset_path(self) -> Path:
        p = Path(self.dataset_root)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def with_seed(self, seed: int) -> "ExperimentPlan":
        return replace(
            self,
            train=replace(self.train, seed=seed),
            augment=replace(self.augment, rng_seed=seed),
        )

    # ------------------------------------------------------------------ INI

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["data"] = {
            "root": self.dataset_root,
            "layout": self.layout,
            "expected_tile_size": "" if self.expected_tile_size is None else str(self.expected_tile_size),
            "ratios": ", ".join(repr(r) for r in self.ratios),
            "seed": str(self.split_seed),
            "group_by_wsi": str(self.group_by_wsi).lower(),
            "cache_images": str(self.cache_images).lower(),
        }
        a = self.augment
        cp["augment"] = {
            "rotation_max_deg": repr(a.rotation_max_deg),
            "width_shift_frac": repr(a.width_shift_frac),
            "height_shift_frac": repr(a.height_shift_frac),
            "horizontal_flip": str(a.horizontal_flip).lower(),
            "vertical_flip": str(a.vertical_flip).lower(),
            "flip_probability": repr(a.flip_probability),
            "fill_mode": a.fill_mode,
            "fill_value": repr(a.fill_value),
            "rng_seed": str(a.rng_seed),
        }
        m = self.model
        cp["model"] = {
            "backbones": ", ".join(self.backbones),
            "fc1_units": str(m.fc1_units),
            "fc2_units": str(m.fc2_units),
            "dropout_rate": repr(m.dropout_rate),
            "freeze_backbone": str(m.freeze_backbone).lower(),
            "weights": m.weights,
            "input_size": str(m.input_size[0]),
            "input_normalization": m.input_normalization,
        }
        t = self.train
        cp["train"] = {
            "learning_rate": repr(t.learning_rate),
            "max_epochs": str(t.max_epochs),
            "batch_train": str(t.batch_sizes["train"]),
            "batch_val": str(t.batch_sizes["val"]),
            "batch_test": str(t.batch_sizes["test"]),
            "early_stop_val_acc": repr(t.early_stop_val_acc),
            "optimizer": t.optimizer,
            "seed": str(t.seed),
            "adam_beta_1": repr(t.adam_beta_1),
            "adam_beta_2": repr(t.adam_beta_2),
            "adam_epsilon": repr(t.adam_epsilon),
        }
        cp["experiment"] = {
            "tasks": ", ".join(self.tasks),
            "results_dir": self.results_dir,
        }
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, base_dir=".") -> "ExperimentPlan":
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read_string(text)
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse config: {exc}") from exc
        try:
            return _plan_from_parser(cp, str(base_dir))
        except (KeyError, ValueError, configparser.Error) as exc:
            raise ConfigurationError(f"invalid config: {exc}") from exc

    @classmethod
    def load(cls, path) -> "ExperimentPlan":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_ini(text, base_dir=path.parent)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def _plan_from_parser(cp: configparser.ConfigParser, base_dir: str) -> ExperimentPlan:
    if not cp.has_section("data") or not cp.get("data", "root", fallback=""):
        raise ConfigurationError("config needs [data] root")
    data = cp["data"]
    tile = data.get("expected_tile_size", "").strip()
    ratios = tuple(float(r) for r in _csv_list(data.get("ratios", "0.7, 0.1, 0.2")))
    if len(ratios) != 3:
        raise ConfigurationError("[data] ratios needs three values")

    aug = cp["augment"] if cp.has_section("augment") else {}
    defaults = AugmentConfig()
    augment = AugmentConfig(
        rotation_max_deg=float(aug.get("rotation_max_deg", defaults.rotation_max_deg)),
        width_shift_frac=float(aug.get("width_shift_frac", defaults.width_shift_frac)),
        height_shift_frac=float(aug.get("height_shift_frac", defaults.height_shift_frac)),
        horizontal_flip=_bool(aug.get("horizontal_flip", "true")),
        vertical_flip=_bool(aug.get("vertical_flip", "true")),
        flip_probability=float(aug.get("flip_probability", defaults.flip_probability)),
        fill_mode=aug.get("fill_mode", defaults.fill_mode),
        fill_value=float(aug.get("fill_value", defaults.fill_value)),
        rng_seed=int(aug.get("rng_seed", defaults.rng_seed)),
    )

    mdl = cp["model"] if cp.has_section("model") else {}
    size = int(mdl.get("input_size", 375))
    backbones = tuple(_csv_list(mdl.get("backbones", "VGG19")))
    model = ModelConfig(
        backbone=backbones[0] if backbones and backbones[0] in BACKBONES else "VGG19",
        fc1_units=int(mdl.get("fc1_units", 512)),
        fc2_units=int(mdl.get("fc2_units", 1024)),
        dropout_rate=float(mdl.get("dropout_rate", 0.5)),
        freeze_backbone=_bool(mdl.get("freeze_backbone", "true")),
        weights=mdl.get("weights", "imagenet"),
        input_size=(size, size, 3),
        input_normalization=mdl.get("input_normalization", "none"),
    )

    tr = cp["train"] if cp.has_section("train") else {}
    tdef = TrainConfig()
    train = TrainConfig(
        learning_rate=float(tr.get("learning_rate", tdef.learning_rate)),
        max_epochs=int(tr.get("max_epochs", tdef.max_epochs)),
        batch_sizes={
            "train": int(tr.get("batch_train", 80)),
            "val": int(tr.get("batch_val", 28)),
            "test": int(tr.get("batch_test", 16)),
        },
        early_stop_val_acc=float(tr.get("early_stop_val_acc", tdef.early_stop_val_acc)),
        optimizer=tr.get("optimizer", "adam"),
        seed=int(tr.get("seed", tdef.seed)),
        adam_beta_1=float(tr.get("adam_beta_1", tdef.adam_beta_1)),
        adam_beta_2=float(tr.get("adam_beta_2", tdef.adam_beta_2)),
        adam_epsilon=float(tr.get("adam_epsilon", tdef.adam_epsilon)),
    )

    exp = cp["experiment"] if cp.has_section("experiment") else {}
    return ExperimentPlan(
        dataset_root=data["root"],
        layout=data.get("layout", "csv_manifest"),
        expected_tile_size=int(tile) if tile else None,
        ratios=ratios,
        split_seed=int(data.get("seed", 42)),
        group_by_wsi=_bool(data.get("group_by_wsi", "false")),
        cache_images=_bool(data.get("cache_images", "false")),
        tasks=tuple(_csv_list(exp.get("tasks", ", ".join(DEFAULT_TASKS)))),
        backbones=backbones,
        model=model,
        train=train,
        augment=augment,
        results_dir=exp.get("results_dir", ""),
        base_dir=base_dir,
    )


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigurationError(f"not a boolean: {text!r}")
