"""
Adaptation - source-only training of the segmenter, feature augmentation from a
style bank, and classifier-only fine-tuning on the augmented features.

Workflow:
    train_source         cross-entropy on source images, trunk frozen by default
    finetune_classifier  low-level source features -> AdaIN with a banked style
                         -> frozen remaining trunk -> head, against the source labels
    source_only_g_train  same loop without a bank; each batch's own statistics
                         are perturbed with Gaussian noise instead

Checkpoint on disk: <dir>/meta.json + <dir>/weights.bin
(raw little-endian tensors; meta.json lists name, offset, shape and dtype of each).
"""

import collections.abc
import copy
import json
import os
import sys
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from tqdm import tqdm

from core_stats import NO_NOISE, adain, channel_stats, gaussian_perturb_stats, mix_stats
from encoder_backends import EncoderBackend, parameter_checksum
from errors import ManifestMismatchError, PinAdaptError, ValidationError
from pipeline_io import DEFAULT_IGNORE_INDEX, SegSample
from style_mining import StyleBank

CHECKPOINT_VERSION = 1
CHECKPOINT_META = "meta.json"
CHECKPOINT_WEIGHTS = "weights.bin"
SOURCE_ONLY_G_SNR_DB = 20.0


@dataclass
class SourceTrainConfig:
    iterations: int = 200000
    crop: int = 768
    batch_size: int = 2
    lr_classifier: float = 1e-1
    lr_trunk: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_power: float = 0.9
    color_jitter: float = 0.3
    hflip: bool = True
    seed: int = 0

    def validate(self) -> "SourceTrainConfig":
        if self.iterations < 1 or self.crop < 1 or self.batch_size < 1:
            raise ValidationError("iterations, crop and batch_size must be positive")
        if not (self.lr_classifier > 0 and self.lr_trunk > 0):
            raise ValidationError("learning rates must be positive")
        _check_optimizer_knobs(self.momentum, self.weight_decay, self.lr_power)
        if not 0 <= self.color_jitter < 1:
            raise ValidationError(f"color_jitter must be in [0, 1), got {self.color_jitter}")
        return self

    @classmethod
    def toy(cls, **overrides) -> "SourceTrainConfig":
        values = dict(iterations=500, crop=64, batch_size=8, lr_classifier=0.05, color_jitter=0.0)
        values.update(overrides)
        return cls(**values)


@dataclass
class AdaptConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr_init: float = 1e-2
    lr_power: float = 0.9
    lr_trunk: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-4
    style_mix: bool = False
    gauss_snr_db: Optional[float] = None
    seed: int = 0

    def validate(self) -> "AdaptConfig":
        if self.iterations < 1 or self.batch_size < 1:
            raise ValidationError("iterations and batch_size must be positive")
        if not (self.lr_init > 0 and self.lr_trunk > 0):
            raise ValidationError("learning rates must be positive")
        _check_optimizer_knobs(self.momentum, self.weight_decay, self.lr_power)
        if self.gauss_snr_db is not None and (np.isnan(self.gauss_snr_db) or self.gauss_snr_db == -np.inf):
            raise ValidationError(f"gauss_snr_db must be a number or inf, got {self.gauss_snr_db}")
        return self

    @classmethod
    def toy(cls, **overrides) -> "AdaptConfig":
        values = dict(iterations=400, lr_init=2e-2)
        values.update(overrides)
        return cls(**values)


def _check_optimizer_knobs(momentum: float, weight_decay: float, lr_power: float) -> None:
    if not 0 <= momentum < 1:
        raise ValidationError(f"momentum must be in [0, 1), got {momentum}")
    if weight_decay < 0:
        raise ValidationError(f"weight_decay must be >= 0, got {weight_decay}")
    if not lr_power > 0:
        raise ValidationError(f"lr_power must be positive, got {lr_power}")


def _say(message: str) -> None:
    print(f"[ADAPTATION] {message}", file=sys.stderr, flush=True)


def _quiet() -> bool:
    return bool(os.getenv("PINADAPT_QUIET"))


class SegmentationHead(nn.Module):
    """
    Two-feature decoder: the high-level map is projected and upsampled to the
    low-level resolution, concatenated with the projected low-level map, fused
    and classified per pixel.
    """

    def __init__(self, low_channels: int, high_channels: int, num_classes: int, width: int = 64):
        super().__init__()
        low_width = max(8, width // 4)
        self.high_proj = nn.Sequential(nn.Conv2d(high_channels, width, 1), nn.ReLU())
        self.low_proj = nn.Sequential(nn.Conv2d(low_channels, low_width, 1), nn.ReLU())
        self.fuse = nn.Sequential(nn.Conv2d(width + low_width, width, 3, padding=1), nn.ReLU())
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, low: torch.Tensor, high: torch.Tensor) -> torch.Tensor:
        high = self.high_proj(high)
        high = F.interpolate(high, size=low.shape[-2:], mode="bilinear", align_corners=False)
        return self.classifier(self.fuse(torch.cat([self.low_proj(low), high], dim=1)))


class Segmenter(nn.Module):
    """
    M = (M_feat, M_cls): the backend's frozen trunk plus a trainable head.

    The low-level stages are always the backend's own frozen modules. Stages
    named in `trainable_stages` get private copies that the optimizers may
    update; the rest run straight from the backend.
    """

    def __init__(
        self,
        backend: EncoderBackend,
        num_classes: int,
        trainable_stages: Sequence[str] = (),
        head_width: int = 64,
        ignore_index: int = DEFAULT_IGNORE_INDEX,
    ):
        super().__init__()
        if num_classes < 2:
            raise ValidationError(f"num_classes must be >= 2, got {num_classes}")
        forbidden = [name for name in trainable_stages if name in backend.low_stage_names]
        if forbidden:
            raise ValidationError(f"low-level stages {forbidden} must stay frozen")
        unknown = [name for name in trainable_stages if name not in backend.high_stage_names]
        if unknown:
            raise ValidationError(f"unknown trunk stages {unknown} (trainable: {backend.high_stage_names})")

        self.backend = backend
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.head_width = head_width
        self.trainable_stages = tuple(trainable_stages)
        self.high_stages = nn.ModuleDict()
        for name in self.trainable_stages:
            stage = copy.deepcopy(backend.stages[name])
            stage.requires_grad_(True)
            self.high_stages[name] = stage
        self.head = SegmentationHead(backend.feature_channels, backend.high_channels, num_classes, head_width).to(
            backend.dtype
        )
        self.provenance: Dict = {"encoder_id": backend.id, "source_trained": False, "adapted_with_bank": None}
        self.loss_history: List[float] = []

    def _stage_map(self) -> Dict[str, nn.Module]:
        stages = dict(self.backend.stages)
        stages.update(self.high_stages)
        return stages

    def forward_from_low(self, low: torch.Tensor, output_size: Tuple[int, int]) -> torch.Tensor:
        """Logits [B, K, H, W] from low-level features; gradients reach the head and trainable stages"""
        high = self.backend.forward_high_features(low, stages=self._stage_map())
        logits = self.head(low, high)
        return F.interpolate(logits, size=tuple(output_size), mode="bilinear", align_corners=False)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        batched = images.dim() == 4
        images = images if batched else images.unsqueeze(0)
        logits = self.forward_from_low(self.backend.extract_low_features(images), images.shape[-2:])
        return logits if batched else logits.squeeze(0)

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        was_training = self.training
        self.eval()
        with torch.no_grad():
            prediction = self.forward(images).argmax(dim=-3)
        self.train(was_training)
        return prediction

    def frozen_checksum(self) -> str:
        return self.backend.checksum()

    def low_stage_checksum(self) -> str:
        return parameter_checksum(*(self.backend.stages[name] for name in self.backend.low_stage_names))


def _poly_schedule(optimizer: torch.optim.Optimizer, iterations: int, power: float):
    return torch.optim.lr_scheduler.LambdaLR(optimizer, lambda step: max(0.0, 1.0 - step / iterations) ** power)


def _optimizer(model: Segmenter, lr_head: float, lr_trunk: float, momentum: float, weight_decay: float):
    groups = [{"params": list(model.head.parameters()), "lr": lr_head}]
    if len(model.high_stages):
        groups.append({"params": list(model.high_stages.parameters()), "lr": lr_trunk})
    return torch.optim.SGD(groups, lr=lr_head, momentum=momentum, weight_decay=weight_decay)


def _check_labels(label: torch.Tensor, num_classes: int, ignore_index: int, name: str) -> None:
    valid = (label == ignore_index) | ((label >= 0) & (label < num_classes))
    if not bool(valid.all()):
        bad = sorted(set(label[~valid].unique().tolist()))
        raise ValidationError(f"sample '{name}' has label values {bad} outside [0, {num_classes}) and ignore")


def _indexable(dataset: Iterable[SegSample]) -> Sequence[SegSample]:
    """Random access over the samples; a SegDataset keeps decoding on demand, a bare iterable is drawn into a list"""
    samples = dataset if isinstance(dataset, collections.abc.Sequence) else list(dataset)
    if len(samples) == 0:
        raise ValidationError("training needs a non-empty dataset")
    return samples


def _segmentation_loss(logits: torch.Tensor, labels: torch.Tensor, ignore_index: int) -> Optional[torch.Tensor]:
    if not bool((labels != ignore_index).any()):
        return None
    return F.cross_entropy(logits, labels, ignore_index=ignore_index)


def _augment_sample(sample: SegSample, cfg: SourceTrainConfig, generator: torch.Generator):
    image, label = sample.image, sample.label
    h, w = image.shape[-2:]
    crop_h, crop_w = min(cfg.crop, h), min(cfg.crop, w)
    top = int(torch.randint(h - crop_h + 1, (1,), generator=generator))
    left = int(torch.randint(w - crop_w + 1, (1,), generator=generator))
    image = image[:, top:top + crop_h, left:left + crop_w]
    label = label[top:top + crop_h, left:left + crop_w]
    if cfg.hflip and bool(torch.rand(1, generator=generator) < 0.5):
        image, label = image.flip(-1), label.flip(-1)
    if cfg.color_jitter > 0:
        low, high = 1.0 - cfg.color_jitter, 1.0 + cfg.color_jitter
        factors = (low + (high - low) * torch.rand(3, generator=generator)).tolist()
        image = TF.adjust_brightness(image, factors[0])
        image = TF.adjust_contrast(image, factors[1])
        image = TF.adjust_saturation(image, factors[2])
    return image.clamp(0.0, 1.0), label


def _verify_frozen(model: Segmenter, checksum_before: str, stage: str) -> None:
    if model.frozen_checksum() != checksum_before:
        raise PinAdaptError(f"frozen encoder weights changed during {stage}")


def train_source(
    model: Segmenter, dataset: Iterable[SegSample], cfg: Optional[SourceTrainConfig] = None
) -> Segmenter:
    """Cross-entropy training on labeled source images; only the head and trainable stages move"""
    cfg = (cfg or SourceTrainConfig()).validate()
    samples = _indexable(dataset)
    checksum_before = model.frozen_checksum()
    generator = torch.Generator().manual_seed(cfg.seed)
    torch.manual_seed(cfg.seed)

    optimizer = _optimizer(model, cfg.lr_classifier, cfg.lr_trunk, cfg.momentum, cfg.weight_decay)
    scheduler = _poly_schedule(optimizer, cfg.iterations, cfg.lr_power)
    history: List[float] = []
    model.train()
    for _ in tqdm(range(cfg.iterations), desc="train-source", file=sys.stderr, disable=_quiet()):
        picks = torch.randint(len(samples), (cfg.batch_size,), generator=generator).tolist()
        batch = [samples[i] for i in picks]
        for sample in batch:
            _check_labels(sample.label, model.num_classes, model.ignore_index, sample.name)
        pairs = [_augment_sample(sample, cfg, generator) for sample in batch]
        images = torch.stack([image for image, _ in pairs])
        labels = torch.stack([label for _, label in pairs])
        loss = _segmentation_loss(model(images), labels, model.ignore_index)
        if loss is not None:
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            history.append(float(loss.detach()))
        scheduler.step()

    _verify_frozen(model, checksum_before, "source training")
    model.eval()
    model.loss_history = history
    model.provenance.update(source_trained=True, source_train_config=asdict(cfg))
    if history:
        _say(f"Source training done: loss {history[0]:.4f} -> {history[-1]:.4f} over {len(history)} steps")
    return model


class FeatureCache:
    """
    Low-level source features with their labels. Computed once through the
    frozen stages and held in memory or as .npy files under `directory`, or
    (on_demand) recomputed from a random-access dataset at every access.
    """

    def __init__(self, directory: Optional[Path] = None):
        self.directory = Path(directory) if directory else None
        self._features: List[torch.Tensor] = []
        self._labels: List[torch.Tensor] = []
        self._backend: Optional[EncoderBackend] = None
        self._samples: Optional[Sequence[SegSample]] = None
        self._count = 0
        self.encoder_id = ""

    @classmethod
    def build(
        cls, backend: EncoderBackend, dataset: Iterable[SegSample], directory: Optional[Path] = None
    ) -> "FeatureCache":
        cache = cls(directory)
        cache.encoder_id = backend.id
        if cache.directory:
            cache.directory.mkdir(parents=True, exist_ok=True)
        for sample in dataset:
            low = backend.extract_low_features(sample.image)
            cache._add(low, sample.label)
        if len(cache) == 0:
            raise ValidationError("cannot build a feature cache from an empty dataset")
        _say(f"Cached low-level features for {len(cache)} samples" + (f" in {cache.directory}" if cache.directory else ""))
        return cache

    @classmethod
    def on_demand(cls, backend: EncoderBackend, samples: Sequence[SegSample]) -> "FeatureCache":
        if len(samples) == 0:
            raise ValidationError("cannot build a feature cache from an empty dataset")
        cache = cls()
        cache.encoder_id = backend.id
        cache._backend = backend
        cache._samples = samples
        cache._count = len(samples)
        return cache

    def _add(self, low: torch.Tensor, label: torch.Tensor) -> None:
        if self.directory:
            np.save(self.directory / f"{self._count:06d}.features.npy", low.cpu().numpy())
            np.save(self.directory / f"{self._count:06d}.label.npy", label.cpu().numpy())
        else:
            self._features.append(low)
            self._labels.append(label)
        self._count += 1

    def __len__(self) -> int:
        return self._count

    def __getitem__(self, index: int) -> Tuple[torch.Tensor, torch.Tensor]:
        if not 0 <= index < self._count:
            raise IndexError(index)
        if self._samples is not None:
            sample = self._samples[index]
            return self._backend.extract_low_features(sample.image), sample.label
        if self.directory:
            low = np.load(self.directory / f"{index:06d}.features.npy")
            label = np.load(self.directory / f"{index:06d}.label.npy")
            return torch.from_numpy(low), torch.from_numpy(label)
        return self._features[index], self._labels[index]

    def batch(self, indices: Sequence[int]) -> Tuple[torch.Tensor, torch.Tensor]:
        items = [self[i] for i in indices]
        return torch.stack([f for f, _ in items]), torch.stack([label for _, label in items])


def augment_features(
    f_s: torch.Tensor,
    bank: StyleBank,
    cfg: AdaptConfig,
    generator: torch.Generator,
    alpha: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """
    AdaIN each instance of f_s to a style drawn uniformly (with replacement)
    from the bank. With style_mix the drawn style is first mixed with the
    instance's own statistics (alpha ~ U[0, 1]^C unless given); with
    gauss_snr_db the applied statistics are perturbed. Labels are not touched.
    """
    batched = f_s.dim() == 4
    x = f_s if batched else f_s.unsqueeze(0)
    if len(bank) == 0:
        raise ValidationError("cannot augment from an empty style bank")
    if bank.channels != x.shape[1]:
        raise ValidationError(f"bank has {bank.channels} channels but features have {x.shape[1]}")

    picks = torch.randint(len(bank), (x.shape[0],), generator=generator)
    styles = bank.stats_at(picks, x.dtype)
    if cfg.style_mix:
        if alpha is None:
            alpha = torch.rand(x.shape[0], x.shape[1], generator=generator, dtype=x.dtype)
        styles = mix_stats(channel_stats(x), styles, alpha.expand(x.shape[0], x.shape[1]))
    if cfg.gauss_snr_db is not None:
        styles = gaussian_perturb_stats(styles, cfg.gauss_snr_db, _draw_seed(generator))
    out = adain(x, styles)
    return out if batched else out.squeeze(0)


def perturb_own_stats(f_s: torch.Tensor, snr_db: Optional[float], generator: torch.Generator) -> torch.Tensor:
    """Source-only-G augmentation: AdaIN to the instance's own statistics plus Gaussian noise"""
    if snr_db is None or snr_db == NO_NOISE:
        return f_s
    noisy = gaussian_perturb_stats(channel_stats(f_s), snr_db, _draw_seed(generator))
    return adain(f_s, noisy)


def _draw_seed(generator: torch.Generator) -> int:
    return int(torch.randint(2 ** 31 - 1, (1,), generator=generator))


def _finetune(
    model: Segmenter,
    dataset: Iterable[SegSample],
    bank: Optional[StyleBank],
    cfg: AdaptConfig,
    feature_cache: Optional[FeatureCache],
    desc: str,
) -> Segmenter:
    if not model.provenance.get("source_trained"):
        _say("[WARN] checkpoint has no source-training record; fine-tuning from scratch degrades results")
    cache = feature_cache if feature_cache is not None else FeatureCache.on_demand(model.backend, _indexable(dataset))
    if cache.encoder_id and cache.encoder_id != model.backend.id:
        raise ManifestMismatchError(f"feature cache was built with '{cache.encoder_id}', not '{model.backend.id}'")
    checksum_before = model.frozen_checksum()
    # separate streams: batch picks never depend on the style draws
    batch_generator = torch.Generator().manual_seed(cfg.seed)
    style_generator = torch.Generator().manual_seed(cfg.seed + 1)
    torch.manual_seed(cfg.seed)
    optimizer = _optimizer(model, cfg.lr_init, cfg.lr_trunk, cfg.momentum, cfg.weight_decay)
    scheduler = _poly_schedule(optimizer, cfg.iterations, cfg.lr_power)
    history: List[float] = []
    model.train()
    for _ in tqdm(range(cfg.iterations), desc=desc, file=sys.stderr, disable=_quiet()):
        picks = torch.randint(len(cache), (cfg.batch_size,), generator=batch_generator).tolist()
        low, labels = cache.batch(picks)
        for index, label in zip(picks, labels):
            _check_labels(label, model.num_classes, model.ignore_index, f"#{index}")
        if bank is not None:
            low = augment_features(low, bank, cfg, style_generator)
        else:
            low = perturb_own_stats(low, cfg.gauss_snr_db, style_generator)
        loss = _segmentation_loss(model.forward_from_low(low, labels.shape[-2:]), labels, model.ignore_index)
        if loss is not None:
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            history.append(float(loss.detach()))
        scheduler.step()

    _verify_frozen(model, checksum_before, desc)
    model.eval()
    model.loss_history = history
    return model


def finetune_classifier(
    model: Segmenter,
    dataset: Iterable[SegSample],
    bank: Optional[StyleBank],
    cfg: Optional[AdaptConfig] = None,
    feature_cache: Optional[FeatureCache] = None,
) -> Segmenter:
    """
    Fine-tune the head on bank-stylized source features against the source labels.
    The model after the last iteration is returned.
    """
    cfg = (cfg or AdaptConfig()).validate()
    if bank is not None:
        bank_encoder = bank.manifest.get("encoder_id")
        if bank_encoder != model.backend.id:
            raise ManifestMismatchError(
                f"bank was mined with encoder '{bank_encoder}' but the model uses '{model.backend.id}'; "
                "mine a bank with the same backend and layer split"
            )
    _finetune(model, dataset, bank, cfg, feature_cache, "adapt")
    model.provenance.update(
        adapted_with_bank=bank.content_hash() if bank is not None else None,
        adapt_config=asdict(cfg),
    )
    _say(f"Fine-tuned classifier for {cfg.iterations} iterations" + (f" with {len(bank)} styles" if bank else ""))
    return model


def source_only_g_train(
    model: Segmenter,
    dataset: Iterable[SegSample],
    cfg: Optional[AdaptConfig] = None,
    snr_db: float = SOURCE_ONLY_G_SNR_DB,
    feature_cache: Optional[FeatureCache] = None,
) -> Segmenter:
    """Fine-tune on source features whose own statistics are perturbed at snr_db; no bank"""
    cfg = replace(cfg or AdaptConfig(), gauss_snr_db=snr_db).validate()
    _finetune(model, dataset, None, cfg, feature_cache, "source-only-g")
    model.provenance.update(source_only_g_snr_db=snr_db, adapt_config=asdict(cfg))
    return model


def save_checkpoint(model: Segmenter, path, resolved_config: Optional[Dict] = None) -> Path:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(directory / CHECKPOINT_WEIGHTS, "wb") as f:
        for name, tensor in model.state_dict().items():
            array = tensor.detach().cpu().contiguous().numpy()
            array = array.astype(array.dtype.newbyteorder("<"))
            blob = array.tobytes()
            f.write(blob)
            entries.append({"name": name, "offset": offset, "shape": list(array.shape), "dtype": array.dtype.name})
            offset += len(blob)
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "encoder_id": model.backend.id,
        "num_classes": model.num_classes,
        "ignore_index": model.ignore_index,
        "head_width": model.head_width,
        "trainable_stages": list(model.trainable_stages),
        "provenance": model.provenance,
        "loss_history": model.loss_history,
        "config": resolved_config or {},
        "tensors": entries,
    }
    with open(directory / CHECKPOINT_META, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    _say(f"Saved checkpoint to {directory}")
    return directory


def load_checkpoint(path, backend: EncoderBackend) -> Segmenter:
    directory = Path(path)
    try:
        with open(directory / CHECKPOINT_META, "r", encoding="utf-8") as f:
            meta = json.load(f)
        raw = (directory / CHECKPOINT_WEIGHTS).read_bytes()
    except FileNotFoundError as error:
        raise ValidationError(f"incomplete checkpoint {directory}: {error}") from error
    if meta.get("format_version") != CHECKPOINT_VERSION:
        raise ValidationError(f"checkpoint format {meta.get('format_version')} is not supported")
    if meta["encoder_id"] != backend.id:
        raise ManifestMismatchError(
            f"checkpoint was trained on encoder '{meta['encoder_id']}' but the backend is '{backend.id}'"
        )

    model = Segmenter(
        backend,
        int(meta["num_classes"]),
        trainable_stages=meta.get("trainable_stages", []),
        head_width=int(meta.get("head_width", 64)),
        ignore_index=int(meta.get("ignore_index", DEFAULT_IGNORE_INDEX)),
    )
    state = {}
    for entry in meta["tensors"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        if entry["offset"] + count * dtype.itemsize > len(raw):
            raise ValidationError(f"{CHECKPOINT_WEIGHTS} is truncated at tensor '{entry['name']}'")
        array = np.frombuffer(raw, dtype=dtype, count=count, offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.astype(dtype.newbyteorder("=")))
    model.load_state_dict(state)
    model.provenance = dict(meta.get("provenance", {}))
    model.loss_history = list(meta.get("loss_history", []))
    model.eval()
    return model
