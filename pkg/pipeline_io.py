"""
Dataset ingestion and the toy synthetic dataset.

A dataset is an image folder plus a parallel label folder:
    <root>/<image_dir>/**/<name><image_suffix>
    <root>/<label_dir>/**/<name><label_suffix>
Labels are single-channel 8-bit images holding raw ids; an optional remap
table (shipped under remaps/) turns raw ids into train ids in [0, K) or the
ignore index.
"""

import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from errors import DecodeError, MissingLabelError, RemapError, ValidationError

REMAP_DIR = Path(__file__).resolve().parent / "remaps"
DEFAULT_IGNORE_INDEX = 255

TOY_SIZE = 64
TOY_CLASSES = ("background", "disc", "square", "triangle")
TOY_CLASS_COLORS = {
    1: (0.85, 0.25, 0.20),
    2: (0.20, 0.75, 0.30),
    3: (0.25, 0.35, 0.90),
}


def _say(message: str) -> None:
    print(f"[PIPELINE_IO] {message}", file=sys.stderr, flush=True)


@dataclass
class SegSample:
    image: torch.Tensor  # float32 [3, H, W] in [0, 1]
    label: torch.Tensor  # int64 [H, W], train ids or ignore
    name: str = ""
    remapped: bool = True


@dataclass(frozen=True)
class LabelRemap:
    """Lookup table raw id -> train id; total over the declared raw ids, injective onto [0, K)"""

    name: str
    mapping: Tuple[Tuple[int, int], ...]
    num_classes: int
    ignore_index: int = DEFAULT_IGNORE_INDEX

    def __post_init__(self):
        targets = [train for _, train in self.mapping if train != self.ignore_index]
        if len(set(targets)) != len(targets):
            raise ValidationError(f"remap '{self.name}' maps two raw ids onto the same train id")
        if any(not 0 <= t < self.num_classes for t in targets):
            raise ValidationError(f"remap '{self.name}' produces ids outside [0, {self.num_classes})")
        if any(not 0 <= raw <= 255 for raw, _ in self.mapping):
            raise ValidationError(f"remap '{self.name}' declares raw ids outside 0..255")

    @classmethod
    def load(cls, name_or_path: str, ignore_index: int = DEFAULT_IGNORE_INDEX) -> "LabelRemap":
        path = Path(name_or_path)
        if not path.suffix:
            path = REMAP_DIR / f"{name_or_path}.json"
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except FileNotFoundError as error:
            raise ValidationError(f"remap table not found: {path}") from error
        mapping = tuple(sorted((int(raw), int(train)) for raw, train in payload["mapping"].items()))
        return cls(payload.get("name", path.stem), mapping, int(payload["num_classes"]),
                   int(payload.get("ignore_index", ignore_index)))

    def table(self) -> np.ndarray:
        """256-entry lookup; -1 marks raw ids the remap does not declare"""
        lut = np.full(256, -1, dtype=np.int64)
        for raw, train in self.mapping:
            lut[raw] = train
        return lut

    def apply(self, raw: np.ndarray, path: str = "") -> np.ndarray:
        mapped = self.table()[raw.astype(np.int64)]
        if (mapped < 0).any():
            unknown = sorted(set(np.unique(raw[mapped < 0]).tolist()))
            raise RemapError(f"raw label ids {unknown} are not covered by remap '{self.name}'", path)
        return mapped


def remap_sample(sample: SegSample, remap: Optional[LabelRemap]) -> SegSample:
    """Apply a remap once; samples already in train-id space pass through unchanged"""
    if remap is None or sample.remapped:
        return replace(sample, remapped=True)
    label = torch.from_numpy(remap.apply(sample.label.numpy(), sample.name))
    return replace(sample, label=label, remapped=True)


@dataclass
class DatasetSpec:
    root: str
    split: str = "train"
    image_dir: str = "{split}/images"
    label_dir: str = "{split}/labels"
    image_suffix: str = ".png"
    label_suffix: str = ".png"
    num_classes: int = 19
    ignore_index: int = DEFAULT_IGNORE_INDEX
    remap: Optional[str] = None
    labeled: bool = True
    center_crop: Optional[int] = None

    @property
    def images_root(self) -> Path:
        return Path(self.root) / self.image_dir.format(split=self.split)

    @property
    def labels_root(self) -> Path:
        return Path(self.root) / self.label_dir.format(split=self.split)

    @property
    def crop_policy(self) -> str:
        return f"center-crop-{self.center_crop}" if self.center_crop else "none"

    def label_path(self, image_path: Path) -> Path:
        relative = image_path.relative_to(self.images_root)
        name = relative.name[: -len(self.image_suffix)] + self.label_suffix
        return self.labels_root / relative.parent / name

    def load_remap(self) -> Optional[LabelRemap]:
        if self.remap is None:
            return None
        remap = LabelRemap.load(self.remap, self.ignore_index)
        if remap.num_classes != self.num_classes:
            raise ValidationError(
                f"remap '{remap.name}' has {remap.num_classes} classes but the dataset declares {self.num_classes}"
            )
        return remap


DATASET_PRESETS: Dict[str, Dict] = {
    "cityscapes": dict(
        image_dir="leftImg8bit/{split}",
        label_dir="gtFine/{split}",
        image_suffix="_leftImg8bit.png",
        label_suffix="_gtFine_labelIds.png",
        num_classes=19,
        remap="cityscapes",
    ),
    "gta5": dict(image_dir="images", label_dir="labels", num_classes=19, remap="cityscapes"),
}
for _condition in ("night", "snow", "rain", "fog"):
    DATASET_PRESETS[f"acdc-{_condition}"] = dict(
        image_dir=f"rgb_anon/{_condition}/{{split}}",
        label_dir=f"gt/{_condition}/{{split}}",
        image_suffix="_rgb_anon.png",
        label_suffix="_gt_labelIds.png",
        num_classes=19,
        remap="cityscapes",
    )


def preset_spec(name: str, root: str, split: str, **overrides) -> DatasetSpec:
    if name not in DATASET_PRESETS:
        raise ValidationError(f"unknown dataset preset '{name}' (choose from {sorted(DATASET_PRESETS)})")
    values = dict(DATASET_PRESETS[name])
    values.update(overrides)
    return DatasetSpec(root=root, split=split, **values)


def decode_image(path: Path) -> torch.Tensor:
    try:
        with Image.open(path) as img:
            array = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    except (UnidentifiedImageError, OSError) as error:
        raise DecodeError(f"cannot decode image: {error}", str(path)) from error
    return torch.from_numpy(array.copy()).permute(2, 0, 1).contiguous()


def _decode_label(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode not in ("L", "P", "I;16", "I"):
                raise DecodeError(f"label must be a single-channel image, got mode {img.mode}", str(path))
            return np.asarray(img, dtype=np.int64).copy()
    except (UnidentifiedImageError, OSError) as error:
        raise DecodeError(f"cannot decode label: {error}", str(path)) from error


def _center_crop(array: torch.Tensor, size: int) -> torch.Tensor:
    h, w = array.shape[-2:]
    top, left = max(0, (h - size) // 2), max(0, (w - size) // 2)
    return array[..., top:top + min(size, h), left:left + min(size, w)]


def list_images(spec: DatasetSpec) -> List[Path]:
    root = spec.images_root
    if not root.is_dir():
        raise ValidationError(f"image directory does not exist: {root}")
    images = sorted(p for p in root.rglob(f"*{spec.image_suffix}") if p.is_file())
    if not images:
        raise ValidationError(f"no images matching *{spec.image_suffix} under {root}")
    return images


class SegDataset(Sequence[SegSample]):
    """
    Random-access view of a dataset folder. Nothing is held in memory beyond
    the file list: every access decodes its sample again.

    Directory problems and missing labels are reported on construction;
    decoding and remap problems surface per file.
    """

    def __init__(self, spec: DatasetSpec, limit: Optional[int] = None):
        self.spec = spec
        images = list_images(spec)
        self.images = images[:limit] if limit else images
        self.remap = spec.load_remap()
        if spec.labeled:
            for image_path in self.images:
                if not spec.label_path(image_path).is_file():
                    raise MissingLabelError("missing label for image", str(image_path))

    def __len__(self) -> int:
        return len(self.images)

    def __getitem__(self, index: int) -> SegSample:
        if not -len(self.images) <= index < len(self.images):
            raise IndexError(index)
        spec = self.spec
        image_path = self.images[index]
        image = decode_image(image_path)
        if spec.labeled:
            label_path = spec.label_path(image_path)
            raw = _decode_label(label_path)
            if raw.shape != tuple(image.shape[-2:]):
                raise DecodeError(
                    f"label {raw.shape} is not aligned with image {tuple(image.shape[-2:])}", str(label_path)
                )
            sample = remap_sample(SegSample(image, torch.from_numpy(raw), str(label_path), remapped=False), self.remap)
            valid = (sample.label == spec.ignore_index) | ((sample.label >= 0) & (sample.label < spec.num_classes))
            if not bool(valid.all()):
                raise RemapError(f"label values outside [0, {spec.num_classes}) and ignore", str(label_path))
            label = sample.label
        else:
            label = torch.full(image.shape[-2:], spec.ignore_index, dtype=torch.int64)
        if spec.center_crop:
            image, label = _center_crop(image, spec.center_crop), _center_crop(label, spec.center_crop)
        return SegSample(image, label, image_path.stem, remapped=True)


def open_dataset(spec: DatasetSpec, limit: Optional[int] = None) -> SegDataset:
    return SegDataset(spec, limit)


def load_dataset(spec: DatasetSpec, limit: Optional[int] = None) -> Iterator[SegSample]:
    """Lazily stream decoded samples in sorted path order"""
    dataset = open_dataset(spec, limit)
    return (dataset[index] for index in range(len(dataset)))


# --- toy synthetic dataset -------------------------------------------------


@dataclass(frozen=True)
class ToyShift:
    """Photometric "toy night": value scaled, hue rotated; labels untouched"""

    value_scale: float = 0.45
    hue_degrees: float = 30.0


class ToyDatasets(NamedTuple):
    train: DatasetSpec
    val: DatasetSpec
    shifted_val: DatasetSpec
    shifted_train: DatasetSpec


def _toy_spec(root: Path, split: str) -> DatasetSpec:
    return DatasetSpec(root=str(root), split=split, num_classes=len(TOY_CLASSES))


def _shape_mask(kind: int, cx: float, cy: float, r: float) -> np.ndarray:
    y, x = np.mgrid[0:TOY_SIZE, 0:TOY_SIZE].astype(np.float64)
    if kind == 1:
        return (x - cx) ** 2 + (y - cy) ** 2 <= r ** 2
    if kind == 2:
        return (np.abs(x - cx) <= r) & (np.abs(y - cy) <= r)
    # upward triangle with apex at (cx, cy - r) and base at y = cy + r
    return (y >= cy - r) & (y <= cy + r) & (np.abs(x - cx) <= (y - (cy - r)) / 2.0)


def render_toy_scene(rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """One 64x64 RGB uint8 image and its uint8 mask"""
    base = rng.uniform(0.45, 0.65) + rng.normal(0.0, 0.03, size=3)
    ramp = np.linspace(-0.05, 0.05, TOY_SIZE)[None, :, None] * rng.choice([-1.0, 1.0])
    image = np.broadcast_to(base, (TOY_SIZE, TOY_SIZE, 3)) + ramp
    mask = np.zeros((TOY_SIZE, TOY_SIZE), dtype=np.uint8)
    for _ in range(int(rng.integers(2, 5))):
        kind = int(rng.integers(1, len(TOY_CLASSES)))
        r = rng.uniform(6.0, 14.0)
        cx, cy = rng.uniform(r, TOY_SIZE - r, size=2)
        region = _shape_mask(kind, cx, cy, r)
        color = np.clip(np.asarray(TOY_CLASS_COLORS[kind]) + rng.normal(0.0, 0.04, size=3), 0.0, 1.0)
        image = np.where(region[..., None], color, image)
        mask[region] = kind
    image = image + rng.normal(0.0, 0.02, size=image.shape)
    return (np.clip(image, 0.0, 1.0) * 255.0).round().astype(np.uint8), mask


def apply_toy_shift(image: np.ndarray, shift: ToyShift) -> np.ndarray:
    hsv = Image.fromarray(image, mode="RGB").convert("HSV")
    h, s, v = (np.asarray(channel, dtype=np.int64) for channel in hsv.split())
    h = (h + int(round(shift.hue_degrees / 360.0 * 256.0))) % 256
    v = np.clip(np.round(v * shift.value_scale), 0, 255)
    merged = Image.merge("HSV", [Image.fromarray(c.astype(np.uint8), mode="L") for c in (h, s, v)])
    return np.asarray(merged.convert("RGB"), dtype=np.uint8)


def _write_split(root: Path, split: str, scenes: List[Tuple[np.ndarray, np.ndarray]]) -> None:
    image_dir, label_dir = root / split / "images", root / split / "labels"
    image_dir.mkdir(parents=True, exist_ok=True)
    label_dir.mkdir(parents=True, exist_ok=True)
    for index, (image, mask) in enumerate(scenes):
        Image.fromarray(image, mode="RGB").save(image_dir / f"{index:05d}.png")
        Image.fromarray(mask, mode="L").save(label_dir / f"{index:05d}.png")


def generate_toy_dataset(
    root: Union[str, Path], seed: int, n_train: int, n_val: int, shift: ToyShift = ToyShift()
) -> ToyDatasets:
    """
    Write a clean source domain (train/val) and its shifted twin under root.

    shifted/val renders exactly the scenes of source/val with the photometric
    shift applied, so masks are identical; shifted/train holds different
    scenes and serves as the unlabeled target sample.
    """
    if n_train < 1 or n_val < 1:
        raise ValidationError("n_train and n_val must be >= 1")
    root = Path(root)
    source_root, shifted_root = root / "source", root / "shifted"

    def scenes(split_code: int, count: int) -> List[Tuple[np.ndarray, np.ndarray]]:
        return [render_toy_scene(np.random.default_rng([seed, split_code, i])) for i in range(count)]

    train, val, target = scenes(0, n_train), scenes(1, n_val), scenes(2, n_train)
    _write_split(source_root, "train", train)
    _write_split(source_root, "val", val)
    _write_split(shifted_root, "val", [(apply_toy_shift(img, shift), mask) for img, mask in val])
    _write_split(shifted_root, "train", [(apply_toy_shift(img, shift), mask) for img, mask in target])
    _say(f"Toy dataset (seed {seed}) written to {root}: {n_train} train / {n_val} val per domain")
    return ToyDatasets(
        train=_toy_spec(source_root, "train"),
        val=_toy_spec(source_root, "val"),
        shifted_val=_toy_spec(shifted_root, "val"),
        shifted_train=_toy_spec(shifted_root, "train"),
    )
