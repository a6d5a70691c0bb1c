"""Tile preprocessing, training-time augmentation and batch streaming.

Images travel through the pipeline as float32 ``(H, W, 3)`` arrays with
values in ``[0, 1]``; batches are ``(N, H, W, 3)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import ConfigurationError, PreprocessingError, StreamError
from .validation import check_image_tensor, check_rgb_raster

MODEL_INPUT_SIZE = 375
RESAMPLING = "bilinear"
FILL_MODES = {"nearest": "nearest", "reflect": "reflect", "constant": "constant"}


def decode_image(path) -> np.ndarray:
    """Decode a PNG/JPEG (or any PIL-readable) file into an (H, W, 3) uint8 array."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            if im.mode in ("RGBA", "LA", "P"):
                im = im.convert("RGBA").convert("RGB")
            elif im.mode != "RGB":
                im = im.convert("RGB")
            return np.asarray(im, dtype=np.uint8).copy()
    except FileNotFoundError as exc:
        raise PreprocessingError(f"image not found: {path}") from exc
    except (UnidentifiedImageError, OSError) as exc:
        raise PreprocessingError(f"cannot decode {path}: {exc}") from exc


def preprocess(raw, size: int = MODEL_INPUT_SIZE) -> np.ndarray:
    """Bilinear resample to ``size x size`` then rescale intensities by 1/255.

    Deterministic; resampling happens in floating point so a constant image
    stays exactly constant.
    """
    arr = check_rgb_raster(raw).astype(np.float32)
    h, w = arr.shape[:2]
    if (h, w) != (size, size):
        channels = [
            np.asarray(
                Image.fromarray(np.ascontiguousarray(arr[..., c]), mode="F").resize(
                    (size, size), Image.Resampling.BILINEAR
                ),
                dtype=np.float32,
            )
            for c in range(3)
        ]
        arr = np.stack(channels, axis=-1)
    out = arr / np.float32(255.0)
    return np.clip(out, 0.0, 1.0, out=out)


@dataclass(frozen=True)
class AugmentConfig:
    """Random affine/flip augmentation bounds.

    Shifts are fractions of the image side; ``flip_probability`` applies to
    each enabled flip independently.
    """

    rotation_max_deg: float = 40.0
    width_shift_frac: float = 0.2
    height_shift_frac: float = 0.2
    horizontal_flip: bool = True
    vertical_flip: bool = True
    fill_mode: str = "nearest"
    rng_seed: int = 0
    flip_probability: float = 0.5
    fill_value: float = 0.0

    def __post_init__(self):
        for name in ("rotation_max_deg", "width_shift_frac", "height_shift_frac",
                     "flip_probability", "fill_value"):
            v = getattr(self, name)
            if not math.isfinite(v):
                raise ConfigurationError(f"{name} must be finite, got {v}")
        if self.rotation_max_deg < 0:
            raise ConfigurationError("rotation_max_deg must be >= 0")
        for name in ("width_shift_frac", "height_shift_frac"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must lie in [0, 1)")
        if not 0 <= self.flip_probability <= 1:
            raise ConfigurationError("flip_probability must lie in [0, 1]")
        if not 0 <= self.fill_value <= 1:
            raise ConfigurationError("fill_value must lie in [0, 1]")
        if self.fill_mode not in FILL_MODES:
            raise ConfigurationError(
                f"fill_mode must be one of {sorted(FILL_MODES)}, got {self.fill_mode!r}"
            )

    @classmethod
    def identity(cls, rng_seed: int = 0) -> "AugmentConfig":
        return cls(0.0, 0.0, 0.0, False, False, rng_seed=rng_seed)

    @property
    def is_identity(self) -> bool:
        flips = (self.horizontal_flip or self.vertical_flip) and self.flip_probability > 0
        return (
            self.rotation_max_deg == 0
            and self.width_shift_frac == 0
            and self.height_shift_frac == 0
            and not flips
        )

    def to_dict(self) -> dict:
        return asdict(self)


def sample_params(img_shape, cfg: AugmentConfig, draw: np.random.Generator) -> dict:
    """Draw one set of augmentation parameters; the draw order is fixed."""
    h, w = img_shape[:2]
    angle = draw.uniform(-cfg.rotation_max_deg, cfg.rotation_max_deg) if cfg.rotation_max_deg else 0.0
    tx = draw.uniform(-cfg.width_shift_frac, cfg.width_shift_frac) * w if cfg.width_shift_frac else 0.0
    ty = draw.uniform(-cfg.height_shift_frac, cfg.height_shift_frac) * h if cfg.height_shift_frac else 0.0
    hflip = bool(cfg.horizontal_flip and draw.random() < cfg.flip_probability)
    vflip = bool(cfg.vertical_flip and draw.random() < cfg.flip_probability)
    return {"angle": angle, "tx": tx, "ty": ty, "hflip": hflip, "vflip": vflip}


def apply_params(img: np.ndarray, params: dict, cfg: AugmentConfig) -> np.ndarray:
    """Rotate about the centre, then translate, then flip."""
    out = img
    angle, tx, ty = params["angle"], params["tx"], params["ty"]
    if angle or tx or ty:
        h, w = img.shape[:2]
        theta = math.radians(angle)
        cos, sin = math.cos(theta), math.sin(theta)
        # output (row, col) -> input (row, col); inverse of rotate-then-shift
        inv = np.array([[cos, -sin], [sin, cos]])
        centre = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        shift = np.array([ty, tx])
        matrix = np.eye(3)
        matrix[:2, :2] = inv
        offset = np.zeros(3)
        offset[:2] = centre - inv @ (centre + shift)
        out = ndimage.affine_transform(
            img,
            matrix,
            offset=offset,
            order=1,
            mode=FILL_MODES[cfg.fill_mode],
            cval=cfg.fill_value,
        )
    if params["hflip"]:
        out = out[:, ::-1, :]
    if params["vflip"]:
        out = out[::-1, :, :]
    out = np.ascontiguousarray(out, dtype=np.float32)
    return np.clip(out, 0.0, 1.0, out=out)


def augment(img, cfg: AugmentConfig, draw: np.random.Generator) -> np.ndarray:
    img = check_image_tensor(img)
    if cfg.is_identity:
        return img.copy()
    return apply_params(img, sample_params(img.shape, cfg, draw), cfg)


def load_tensor(source, size: int = MODEL_INPUT_SIZE) -> np.ndarray:
    """Turn a path, raw uint8 raster or already-preprocessed array into a model input."""
    if isinstance(source, (str, Path)):
        return preprocess(decode_image(source), size)
    arr = np.asarray(source)
    if arr.dtype == np.uint8:
        return preprocess(arr, size)
    return check_image_tensor(arr, (size, size, 3))


class BatchStream:
    """Re-iterable stream of ``(images, labels)`` batches.

    ``mode="train"`` reshuffles every epoch and augments; the permutation and
    augmentation draws for epoch ``k`` depend only on ``(cfg.rng_seed, k)``.
    ``mode="eval"`` keeps dataset order and never augments. The last partial
    batch is always emitted.
    """

    def __init__(
        self,
        dataset: Sequence,
        batch_size: int,
        mode: str = "eval",
        cfg: AugmentConfig | None = None,
        size: int = MODEL_INPUT_SIZE,
        n_classes: int | None = None,
        cache: bool = False,
        num_workers: int = 0,
    ):
        if batch_size < 1:
            raise StreamError(f"batch_size must be >= 1, got {batch_size}")
        if mode not in ("train", "eval"):
            raise StreamError(f"mode must be 'train' or 'eval', got {mode!r}")
        if len(dataset) == 0:
            raise StreamError("empty dataset")
        self.sources = [s for s, _ in dataset]
        self.labels = np.asarray([int(y) for _, y in dataset], dtype=np.int64)
        self.batch_size = int(batch_size)
        self.mode = mode
        self.cfg = cfg if cfg is not None else AugmentConfig.identity()
        self.size = size
        self.n_classes = n_classes
        self.num_workers = num_workers
        self._cache: dict[int, np.ndarray] | None = {} if cache else None
        self._epoch = 0

    def __len__(self):
        return math.ceil(len(self.sources) / self.batch_size)

    @property
    def n_items(self) -> int:
        return len(self.sources)

    @property
    def augments(self) -> bool:
        return self.mode == "train" and not self.cfg.is_identity

    def _rng(self, epoch: int) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence([self.cfg.rng_seed, epoch]))

    def order(self, epoch: int) -> np.ndarray:
        if self.mode == "eval":
            return np.arange(self.n_items)
        return self._rng(epoch).permutation(self.n_items)

    def batch_indices(self, epoch: int) -> list[np.ndarray]:
        order = self.order(epoch)
        return [order[i : i + self.batch_size] for i in range(0, len(order), self.batch_size)]

    def base_tensor(self, index: int) -> np.ndarray:
        """The preprocessed, un-augmented image at ``index``."""
        if self._cache is not None and index in self._cache:
            return self._cache[index]
        img = load_tensor(self.sources[index], self.size)
        if self._cache is not None:
            self._cache[index] = img
        return img

    def _load(self, indices) -> list[np.ndarray]:
        if self.num_workers > 1 and len(indices) > 1:
            with ThreadPoolExecutor(self.num_workers) as pool:
                return list(pool.map(self.base_tensor, indices))
        return [self.base_tensor(i) for i in indices]

    def epoch(self, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        rng = self._rng(epoch)
        if self.mode == "train":
            rng.permutation(self.n_items)  # keep draws aligned with order()
        for idx in self.batch_indices(epoch):
            imgs = self._load(idx)
            if self.augments:
                imgs = [apply_params(im, sample_params(im.shape, self.cfg, rng), self.cfg) for im in imgs]
            yield np.stack(imgs), self.labels[idx]

    def __iter__(self):
        it = self.epoch(self._epoch)
        if self.mode == "train":
            self._epoch += 1
        return it


def make_batch_stream(dataset, batch_size: int, mode: str = "eval", cfg: AugmentConfig | None = None, **kwargs) -> BatchStream:
    return BatchStream(dataset, batch_size, mode, cfg, **kwargs)
