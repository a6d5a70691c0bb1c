"""Pre-trained convolutional backbones with a two-layer fully connected head.

Every backbone is cut right after its last pooling stage. The head is
``flatten -> FC1 -> ReLU -> dropout -> FC2 -> ReLU -> dropout -> FC(n_classes)
-> softmax`` with FC1=512 and FC2=1024 units by default.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigurationError, RegistryError, WeightLoadError

CHECKPOINT_FORMAT = "histo_tl.checkpoint"
CHECKPOINT_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class ModelConfig:
    backbone: str = "VGG19"
    n_classes: int = 3
    fc1_units: int = 512
    fc2_units: int = 1024
    dropout_rate: float = 0.5
    freeze_backbone: bool = True
    input_size: tuple[int, int, int] = (375, 375, 3)
    # "imagenet", "none" (random init) or a path to a backbone state dict
    weights: str = "imagenet"
    # "none" feeds [0, 1] pixels straight in; "imagenet" standardises first
    input_normalization: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        if self.backbone not in BACKBONES:
            raise RegistryError(
                f"unknown backbone {self.backbone!r}; available: {', '.join(BACKBONES)}"
            )
        if self.n_classes not in (2, 3):
            raise ConfigurationError(f"n_classes must be 2 or 3, got {self.n_classes}")
        if self.fc1_units < 1 or self.fc2_units < 1:
            raise ConfigurationError("fc1_units and fc2_units must be >= 1")
        if not 0 <= self.dropout_rate < 1:
            raise ConfigurationError("dropout_rate must lie in [0, 1)")
        h, w, c = self.input_size
        if c != 3 or h < 32 or w < 32:
            raise ConfigurationError(f"input_size must be (H>=32, W>=32, 3), got {self.input_size}")
        if self.input_normalization not in ("none", "imagenet"):
            raise ConfigurationError("input_normalization must be 'none' or 'imagenet'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# --------------------------------------------------------------------------- registry


def _tv_weights(name: str, weights: str):
    import torchvision.models as tvm

    if weights != "imagenet":
        return None
    return tvm.get_model_weights(name).DEFAULT


def _vgg(name):
    def build(weights):
        import torchvision.models as tvm

        net = tvm.get_model(name, weights=_tv_weights(name, weights))
        return net.features  # ends with the fifth max-pool

    return build


def _resnet50(weights):
    import torchvision.models as tvm

    net = tvm.resnet50(weights=_tv_weights("resnet50", weights))
    return nn.Sequential(
        net.conv1, net.bn1, net.relu, net.maxpool,
        net.layer1, net.layer2, net.layer3, net.layer4, net.avgpool,
    )


def _inception_v3(weights):
    import torchvision.models as tvm

    net = tvm.inception_v3(
        weights=_tv_weights("inception_v3", weights),
        aux_logits=True,
        init_weights=weights != "imagenet",
    )
    names = [
        "Conv2d_1a_3x3", "Conv2d_2a_3x3", "Conv2d_2b_3x3", "maxpool1",
        "Conv2d_3b_1x1", "Conv2d_4a_3x3", "maxpool2",
        "Mixed_5b", "Mixed_5c", "Mixed_5d", "Mixed_6a", "Mixed_6b", "Mixed_6c",
        "Mixed_6d", "Mixed_6e", "Mixed_7a", "Mixed_7b", "Mixed_7c", "avgpool",
    ]
    return nn.Sequential(*(getattr(net, n) for n in names))


def _densenet201(weights):
    import torchvision.models as tvm

    net = tvm.densenet201(weights=_tv_weights("densenet201", weights))
    return nn.Sequential(net.features, nn.ReLU(inplace=False), nn.AdaptiveAvgPool2d(1))


def _nasnet_large(weights):
    try:
        import timm
    except ImportError as exc:
        raise RegistryError("NASNetLarge needs the optional 'timm' package") from exc
    return timm.create_model("nasnetalarge", pretrained=weights == "imagenet", num_classes=0)


BACKBONES: dict[str, Callable[[str], nn.Module]] = {
    "VGG16": _vgg("vgg16"),
    "VGG19": _vgg("vgg19"),
    "ResNet50": _resnet50,
    "InceptionV3": _inception_v3,
    "DenseNet201": _densenet201,
    "NASNetLarge": _nasnet_large,
}


# --------------------------------------------------------------------------- network


class TransferNet(nn.Module):
    def __init__(self, backbone: nn.Module, feature_shape, cfg: ModelConfig):
        super().__init__()
        self.backbone = backbone
        self.frozen = cfg.freeze_backbone
        self.normalize = cfg.input_normalization == "imagenet"
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1))
        flat = int(np.prod(feature_shape))
        self.feature_shape = tuple(feature_shape)
        self.head = nn.Sequential(
            nn.Flatten(),
            nn.Linear(flat, cfg.fc1_units),
            nn.ReLU(),
            nn.Dropout(cfg.dropout_rate),
            nn.Linear(cfg.fc1_units, cfg.fc2_units),
            nn.ReLU(),
            nn.Dropout(cfg.dropout_rate),
            nn.Linear(cfg.fc2_units, cfg.n_classes),
        )
        if self.frozen:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            # frozen batch-norm layers run on their stored statistics
            self.backbone.eval()
        return self

    def features(self, x: torch.Tensor) -> torch.Tensor:
        if self.normalize:
            x = (x - self.mean) / self.std
        return self.backbone(x)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.features(x))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.softmax(self.logits(x), dim=1)


def to_nchw(batch) -> torch.Tensor:
    """(N, H, W, 3) numpy/tensor -> float32 (N, 3, H, W) tensor."""
    t = torch.as_tensor(np.asarray(batch, dtype=np.float32))
    return t.permute(0, 3, 1, 2).contiguous()


@dataclass
class ModelHandle:
    network: TransferNet
    config: ModelConfig
    parameter_counts: dict = field(default_factory=dict)

    @property
    def n_classes(self) -> int:
        return self.config.n_classes

    @property
    def flatten_length(self) -> int:
        return self.network.head[1].in_features

    def predict_proba(self, batch) -> np.ndarray:
        self.network.eval()
        with torch.no_grad():
            return self.network(to_nchw(batch)).numpy()

    def extract_features(self, batch) -> torch.Tensor:
        self.network.eval()
        with torch.no_grad():
            return self.network.features(to_nchw(batch))

    def backbone_state(self) -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in self.network.backbone.state_dict().items()}


def count_parameters(net: TransferNet) -> dict:
    return {
        "backbone_params": sum(p.numel() for p in net.backbone.parameters()),
        "head_params": sum(p.numel() for p in net.head.parameters()),
        "trainable_params": sum(p.numel() for p in net.parameters() if p.requires_grad),
    }


def _load_backbone(cfg: ModelConfig) -> nn.Module:
    init_mode = "imagenet" if cfg.weights == "imagenet" else "none"
    try:
        backbone = BACKBONES[cfg.backbone](init_mode)
    except (RegistryError, ConfigurationError):
        raise
    except Exception as exc:
        if init_mode == "imagenet":
            raise WeightLoadError(
                f"could not obtain ImageNet weights for {cfg.backbone}: {exc}"
            ) from exc
        raise
    if cfg.weights not in ("imagenet", "none"):
        path = Path(cfg.weights)
        try:
            state = torch.load(path, map_location="cpu", weights_only=True)
            backbone.load_state_dict(state)
        except Exception as exc:
            raise WeightLoadError(f"cannot load backbone weights from {path}: {exc}") from exc
    return backbone


def build_model(cfg: ModelConfig, seed: int | None = None) -> ModelHandle:
    """Assemble backbone + head. ``seed`` fixes the head (and any randomly
    initialised backbone) weights."""
    if seed is not None:
        torch.manual_seed(seed)
    backbone = _load_backbone(cfg)
    backbone.eval()
    h, w, _ = cfg.input_size
    with torch.no_grad():
        feature_shape = tuple(backbone(torch.zeros(1, 3, h, w)).shape[1:])
    net = TransferNet(backbone, feature_shape, cfg)
    return ModelHandle(net, cfg, count_parameters(net))


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: ModelHandle, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": json.dumps(model.config.to_dict(), sort_keys=True),
        "feature_shape": list(model.network.feature_shape),
        "state_dict": model.network.state_dict(),
    }
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path, expected: ModelConfig | None = None) -> ModelHandle:
    """Rebuild a model from :func:`save_checkpoint` output.

    With ``expected`` given, the stored architecture must match it
    (``weights`` is ignored in the comparison).
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a histo_tl checkpoint")
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint version {payload.get('format_version')} != {CHECKPOINT_VERSION}"
        )
    try:
        cfg = ModelConfig.from_dict(json.loads(payload["config"]))
    except Exception as exc:
        raise CheckpointError(f"bad config in checkpoint {path}: {exc}") from exc
    if expected is not None and replace(cfg, weights="none") != replace(expected, weights="none"):
        raise CheckpointError(
            f"checkpoint config mismatch: stored {cfg.to_dict()}, expected {expected.to_dict()}"
        )
    backbone = BACKBONES[cfg.backbone]("none")
    net = TransferNet(backbone, payload["feature_shape"], cfg)
    try:
        net.load_state_dict(payload["state_dict"])
    except Exception as exc:
        raise CheckpointError(f"weights do not fit {cfg.backbone}: {exc}") from exc
    net.eval()
    return ModelHandle(net, cfg, count_parameters(net))
