"""
Joint vision-language encoders.

Two implementations share one interface:
- ToyBackend: a tiny seeded convolutional surrogate (float64, frozen) whose
  every numerical property can be checked on a desk
- ClipBackend: an adapter over a pretrained CLIP ResNet from open_clip

The image trunk is split after `layer_split` stages. The low part produces
the feature maps that get stylized; the high part continues either into
the segmentation head (spatial maps, no pooling) or into the embedding head
(pooling + projection into the joint space).

Images are passed as float tensors in [0, 1], [3, H, W] or [B, 3, H, W];
each backend applies its own normalization, recorded in its id.
"""

import hashlib
import os
import sys
import zlib
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Union

import torch
import torch.nn as nn
import torch.nn.functional as F
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from errors import CapabilityError, ValidationError

TOY_SEED = 1234
TOY_INPUT_SIZE = 64

IMAGENET_TEMPLATES = (
    "a bad photo of a {}.",
    "a photo of many {}.",
    "a sculpture of a {}.",
    "a photo of the hard to see {}.",
    "a low resolution photo of the {}.",
    "a rendering of a {}.",
    "graffiti of a {}.",
    "a bad photo of the {}.",
    "a cropped photo of the {}.",
    "a tattoo of a {}.",
    "the embroidered {}.",
    "a photo of a hard to see {}.",
    "a bright photo of a {}.",
    "a photo of a clean {}.",
    "a photo of a dirty {}.",
    "a dark photo of the {}.",
    "a drawing of a {}.",
    "a photo of my {}.",
    "the plastic {}.",
    "a photo of the cool {}.",
    "a close-up photo of a {}.",
    "a black and white photo of the {}.",
    "a painting of the {}.",
    "a painting of a {}.",
    "a pixelated photo of the {}.",
    "a sculpture of the {}.",
    "a bright photo of the {}.",
    "a cropped photo of a {}.",
    "a plastic {}.",
    "a photo of the dirty {}.",
    "a jpeg corrupted photo of a {}.",
    "a blurry photo of the {}.",
    "a photo of the {}.",
    "a good photo of the {}.",
    "a rendering of the {}.",
    "a {} in a video game.",
    "a photo of one {}.",
    "a doodle of a {}.",
    "a close-up photo of the {}.",
    "a photo of a {}.",
    "the origami {}.",
    "the {} in a video game.",
    "a sketch of a {}.",
    "a doodle of the {}.",
    "a origami {}.",
    "a low resolution photo of a {}.",
    "the toy {}.",
    "a rendition of the {}.",
    "a photo of the clean {}.",
    "a photo of a large {}.",
    "a rendition of a {}.",
    "a photo of a nice {}.",
    "a photo of a weird {}.",
    "a blurry photo of a {}.",
    "a cartoon {}.",
    "art of a {}.",
    "a sketch of the {}.",
    "a embroidered {}.",
    "a pixelated photo of a {}.",
    "itap of the {}.",
    "a jpeg corrupted photo of the {}.",
    "a good photo of a {}.",
    "a plushie {}.",
    "a photo of the nice {}.",
    "a photo of the small {}.",
    "a photo of the weird {}.",
    "the cartoon {}.",
    "art of the {}.",
    "a drawing of the {}.",
    "a photo of the large {}.",
    "a black and white photo of a {}.",
    "the plushie {}.",
    "a dark photo of a {}.",
    "itap of a {}.",
    "graffiti of the {}.",
    "a toy {}.",
    "itap of my {}.",
    "a photo of a cool {}.",
    "a photo of a small {}.",
    "a tattoo of the {}.",
)

TEMPLATE_SETS = {
    "single": ("{}",),
    "imagenet": IMAGENET_TEMPLATES,
}


@dataclass(frozen=True)
class Prompt:
    text: str
    template_set: str = "imagenet"

    def __post_init__(self):
        if not self.text or not self.text.strip():
            raise ValidationError("prompt text must not be empty")
        if self.template_set not in TEMPLATE_SETS:
            raise ValidationError(
                f"unknown template set '{self.template_set}' (choose from {sorted(TEMPLATE_SETS)})"
            )

    def render(self) -> List[str]:
        return [template.format(self.text.strip()) for template in TEMPLATE_SETS[self.template_set]]


def parameter_checksum(*modules: nn.Module) -> str:
    """sha256 over every parameter and buffer, in registration order"""
    digest = hashlib.sha256()
    for module in modules:
        for name, tensor in list(module.named_parameters()) + list(module.named_buffers()):
            digest.update(name.encode("utf-8"))
            digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / torch.linalg.vector_norm(v, dim=-1, keepdim=True)


class EncoderBackend(ABC):
    """
    Frozen joint vision-language encoder with a split image trunk.

    Subclasses build `self.stages` (ordered trunk stages) and set
    `self.low_stage_count` (how many of them form the low-level part).
    """

    id: str
    feature_channels: int
    high_channels: int
    embedding_dim: int
    layer_split: int
    dtype: torch.dtype = torch.float32
    supports_token_injection: bool = False

    stages: "OrderedDict[str, nn.Module]"
    low_stage_count: int

    @abstractmethod
    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        ...

    @abstractmethod
    def pool(self, high: torch.Tensor) -> torch.Tensor:
        """Embedding head: final trunk output [B, C', h, w] -> [B, D]"""

    @abstractmethod
    def encode_text_strings(self, texts: Sequence[str]) -> torch.Tensor:
        """Raw (unnormalized) text embeddings [N, D]"""

    def check_images(self, images: torch.Tensor) -> None:
        if images.dim() != 4 or images.shape[1] != 3:
            raise ValidationError(f"images must be [B, 3, H, W], got {tuple(images.shape)}")

    def check_low_features(self, low: torch.Tensor) -> None:
        if low.dim() != 4 or low.shape[1] != self.feature_channels:
            raise ValidationError(
                f"expected low-level features [B, {self.feature_channels}, H, W], got {tuple(low.shape)}"
            )

    @property
    def low_stage_names(self) -> List[str]:
        return list(self.stages)[: self.low_stage_count]

    @property
    def high_stage_names(self) -> List[str]:
        return list(self.stages)[self.low_stage_count:]

    def modules(self) -> List[nn.Module]:
        return list(self.stages.values())

    def checksum(self) -> str:
        return parameter_checksum(*self.modules())

    def extract_low_features(self, images: torch.Tensor) -> torch.Tensor:
        batched = images.dim() == 4
        x = images if batched else images.unsqueeze(0)
        self.check_images(x)
        x = self.normalize(x.to(self.dtype))
        with torch.no_grad():
            for name in self.low_stage_names:
                x = self.stages[name](x)
        return x if batched else x.squeeze(0)

    def forward_high_features(self, low: torch.Tensor, stages: Optional[dict] = None) -> torch.Tensor:
        """Remaining trunk stages; `stages` lets a segmenter run its own (possibly trainable) copies"""
        stages = stages if stages is not None else self.stages
        batched = low.dim() == 4
        x = low if batched else low.unsqueeze(0)
        self.check_low_features(x)
        for name in self.high_stage_names:
            x = stages[name](x)
        return x if batched else x.squeeze(0)

    def embed_from_features(self, low: torch.Tensor) -> torch.Tensor:
        """Differentiable with respect to `low`"""
        batched = low.dim() == 4
        x = low if batched else low.unsqueeze(0)
        embedding = self.pool(self.forward_high_features(x))
        return embedding if batched else embedding.squeeze(0)

    def embed_image(self, images: torch.Tensor) -> torch.Tensor:
        return self.embed_from_features(self.extract_low_features(images))

    def embed_text(self, prompt: Prompt) -> torch.Tensor:
        """Template-averaged text embedding: normalize each, average, renormalize"""
        with torch.no_grad():
            per_template = _unit(self.encode_text_strings(prompt.render()).to(self.dtype))
            return _unit(per_template.mean(dim=0))

    def token_embedding_of(self, word: str) -> torch.Tensor:
        raise CapabilityError(f"backend '{self.id}' cannot expose token embeddings")

    def token_embedding_std(self) -> float:
        raise CapabilityError(f"backend '{self.id}' cannot expose token embeddings")

    def encode_with_concept(self, concept_tokens: torch.Tensor, suffix: str) -> torch.Tensor:
        raise CapabilityError(
            f"backend '{self.id}' has no token-embedding text encoder; "
            "use concept_opt.optimize_free_embedding for the toy surrogate"
        )


class ToyBackend(EncoderBackend):
    """
    Seeded surrogate: conv(3->8, k3, s2, ReLU) as Layer1, conv(8->16, k3, s2, ReLU)
    as the remaining trunk, spatial mean + linear 16->16 as the embedding head.
    Text side: a fixed unit vector per exact string.
    """

    embedding_dim = 16
    dtype = torch.float64

    def __init__(self, layer_split: int = 1):
        if layer_split not in (1, 2):
            raise ValidationError(f"toy backend has 2 stages; layer_split must be 1 or 2, got {layer_split}")
        generator = torch.Generator().manual_seed(TOY_SEED)

        conv1 = nn.Conv2d(3, 8, kernel_size=3, stride=2, padding=1)
        conv2 = nn.Conv2d(8, 16, kernel_size=3, stride=2, padding=1)
        head = nn.Linear(16, 16)
        with torch.no_grad():
            for layer, fan_in in ((conv1, 27), (conv2, 72), (head, 16)):
                layer.weight.copy_(
                    torch.randn(layer.weight.shape, generator=generator, dtype=torch.float64) * (2.0 / fan_in) ** 0.5
                )
                layer.bias.copy_(torch.randn(layer.bias.shape, generator=generator, dtype=torch.float64) * 0.1)

        self.stages = OrderedDict(
            layer1=nn.Sequential(conv1, nn.ReLU()).to(torch.float64),
            layer2=nn.Sequential(conv2, nn.ReLU()).to(torch.float64),
        )
        self.head = head.to(torch.float64)
        for module in self.modules():
            module.requires_grad_(False)
            module.eval()

        self.layer_split = layer_split
        self.low_stage_count = layer_split
        self.feature_channels = 8 if layer_split == 1 else 16
        self.high_channels = 16
        self.low_size = TOY_INPUT_SIZE // (2 ** layer_split)
        self.id = f"toy-v1:L{layer_split}:pm1"

    def modules(self) -> List[nn.Module]:
        return list(self.stages.values()) + [self.head]

    def check_images(self, images: torch.Tensor) -> None:
        super().check_images(images)
        if tuple(images.shape[-2:]) != (TOY_INPUT_SIZE, TOY_INPUT_SIZE):
            raise ValidationError(
                f"toy backend takes {TOY_INPUT_SIZE}x{TOY_INPUT_SIZE} images, got {tuple(images.shape[-2:])}"
            )

    def check_low_features(self, low: torch.Tensor) -> None:
        super().check_low_features(low)
        if tuple(low.shape[-2:]) != (self.low_size, self.low_size):
            raise ValidationError(
                f"toy low-level features are {self.low_size}x{self.low_size}, got {tuple(low.shape[-2:])}"
            )

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return images * 2.0 - 1.0

    def pool(self, high: torch.Tensor) -> torch.Tensor:
        return self.head(high.mean(dim=(-2, -1)))

    def encode_text_strings(self, texts: Sequence[str]) -> torch.Tensor:
        rows = []
        for text in texts:
            generator = torch.Generator().manual_seed(TOY_SEED + zlib.crc32(text.encode("utf-8")))
            rows.append(_unit(torch.randn(self.embedding_dim, generator=generator, dtype=torch.float64)))
        return torch.stack(rows)


def mean_image_embedding(
    backend: EncoderBackend, images: Union[torch.Tensor, Iterable[torch.Tensor]]
) -> torch.Tensor:
    """
    Unit-normalized mean of unit image embeddings; the toy stand-in for a target
    embedding. `images` is one batch tensor or a stream of images or batches.
    """
    batches = [images] if isinstance(images, torch.Tensor) else images
    total, count = None, 0
    with torch.no_grad():
        for batch in batches:
            units = _unit(backend.embed_image(batch))
            units = units if units.dim() == 2 else units.unsqueeze(0)
            total = units.sum(dim=0) if total is None else total + units.sum(dim=0)
            count += units.shape[0]
    if count == 0:
        raise ValidationError("no images to embed")
    return _unit(total / count)


class _ResNetStem(nn.Module):
    def __init__(self, visual: nn.Module):
        super().__init__()
        layers = []
        for index in (1, 2, 3):
            layers.append(getattr(visual, f"conv{index}"))
            layers.append(getattr(visual, f"bn{index}"))
            layers.append(getattr(visual, f"act{index}", None) or getattr(visual, f"relu{index}"))
        layers.append(visual.avgpool)
        self.body = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.body(x)


@retry(
    stop=stop_after_attempt(3),
    wait=wait_exponential(multiplier=1, min=2, max=20),
    retry=retry_if_exception_type((OSError, ConnectionError)),
    reraise=True,
)
def _create_clip(model_name: str, pretrained: str, cache_dir: Optional[str], device: str):
    import open_clip

    print(f"[ENCODER] Loading CLIP {model_name} ({pretrained}) cache_dir={cache_dir}", file=sys.stderr, flush=True)
    model, _, _ = open_clip.create_model_and_transforms(
        model_name, pretrained=pretrained, cache_dir=cache_dir, device=device
    )
    tokenizer = open_clip.get_tokenizer(model_name)
    return model, tokenizer


class ClipBackend(EncoderBackend):
    """
    CLIP ResNet adapter. The segmentation path drops the attention-pooling head,
    the embedding path keeps it; both share the trunk weights.
    """

    supports_token_injection = True

    def __init__(self, model: nn.Module, tokenizer, model_name: str, pretrained: str, layer_split: int = 1):
        visual = model.visual
        if not all(hasattr(visual, attr) for attr in ("layer1", "layer4", "attnpool")):
            raise CapabilityError(f"{model_name} is not a convolutional CLIP backbone; only ResNet variants work")
        if layer_split not in (1, 2, 3, 4):
            raise ValidationError(f"layer_split must be in 1..4, got {layer_split}")

        model.eval()
        model.requires_grad_(False)
        self.model = model
        self.visual = visual
        self.tokenizer = tokenizer
        self.stages = OrderedDict(
            stem=_ResNetStem(visual),
            layer1=visual.layer1,
            layer2=visual.layer2,
            layer3=visual.layer3,
            layer4=visual.layer4,
        )
        self.layer_split = layer_split
        self.low_stage_count = layer_split + 1
        self.dtype = visual.conv1.weight.dtype

        widths = [getattr(visual, f"layer{i}")[-1].conv3.out_channels for i in (1, 2, 3, 4)]
        self.feature_channels = widths[layer_split - 1]
        self.high_channels = widths[3]
        self.embedding_dim = visual.attnpool.c_proj.out_features

        from open_clip import OPENAI_DATASET_MEAN, OPENAI_DATASET_STD

        mean = getattr(visual, "image_mean", None) or OPENAI_DATASET_MEAN
        std = getattr(visual, "image_std", None) or OPENAI_DATASET_STD
        self._mean = torch.tensor(mean, dtype=self.dtype).view(1, 3, 1, 1)
        self._std = torch.tensor(std, dtype=self.dtype).view(1, 3, 1, 1)
        norm_tag = "openai-norm" if tuple(mean) == tuple(OPENAI_DATASET_MEAN) else "custom-norm"
        self.id = f"clip-{model_name}-{pretrained}:L{layer_split}:{norm_tag}"

    @classmethod
    def load(
        cls,
        model_name: str = "RN50",
        pretrained: str = "openai",
        layer_split: int = 1,
        cache_dir: Optional[str] = None,
        device: str = "cpu",
    ) -> "ClipBackend":
        cache_dir = cache_dir or os.getenv("PINADAPT_MODEL_DIR") or None
        if cache_dir:
            cache_dir = os.path.expanduser(cache_dir)
        model, tokenizer = _create_clip(model_name, pretrained, cache_dir, device)
        return cls(model, tokenizer, model_name, pretrained, layer_split)

    def modules(self) -> List[nn.Module]:
        return [self.model]

    def normalize(self, images: torch.Tensor) -> torch.Tensor:
        return (images - self._mean.to(images.device)) / self._std.to(images.device)

    def pool(self, high: torch.Tensor) -> torch.Tensor:
        attnpool = self.visual.attnpool
        n, c, h, w = high.shape
        x = high.flatten(2).permute(2, 0, 1)  # (HW)NC
        x = torch.cat([x.mean(dim=0, keepdim=True), x], dim=0)
        x = x + self._positional_embedding(h, w).to(x.dtype)[:, None, :]
        x, _ = F.multi_head_attention_forward(
            query=x[:1],
            key=x,
            value=x,
            embed_dim_to_check=c,
            num_heads=attnpool.num_heads,
            q_proj_weight=attnpool.q_proj.weight,
            k_proj_weight=attnpool.k_proj.weight,
            v_proj_weight=attnpool.v_proj.weight,
            in_proj_weight=None,
            in_proj_bias=torch.cat([attnpool.q_proj.bias, attnpool.k_proj.bias, attnpool.v_proj.bias]),
            bias_k=None,
            bias_v=None,
            add_zero_attn=False,
            dropout_p=0.0,
            out_proj_weight=attnpool.c_proj.weight,
            out_proj_bias=attnpool.c_proj.bias,
            use_separate_proj_weight=True,
            training=False,
            need_weights=False,
        )
        return x.squeeze(0)

    def _positional_embedding(self, grid_h: int, grid_w: int) -> torch.Tensor:
        pe = self.visual.attnpool.positional_embedding  # [1 + S*S, C]
        if pe.shape[0] == grid_h * grid_w + 1:
            return pe
        class_pe, patch_pe = pe[:1], pe[1:]
        old_grid = int(round(patch_pe.shape[0] ** 0.5))
        patch_pe = patch_pe.reshape(1, old_grid, old_grid, -1).permute(0, 3, 1, 2)
        patch_pe = F.interpolate(patch_pe, size=(grid_h, grid_w), mode="bicubic", align_corners=False)
        patch_pe = patch_pe.permute(0, 2, 3, 1).reshape(grid_h * grid_w, -1)
        return torch.cat([class_pe, patch_pe], dim=0)

    def encode_text_strings(self, texts: Sequence[str]) -> torch.Tensor:
        with torch.no_grad():
            return self.model.encode_text(self.tokenizer(list(texts)))

    # token-level access for concept optimization

    def token_embedding_of(self, word: str) -> torch.Tensor:
        ids = self.tokenizer([word])[0]
        eot = int(ids.argmax())
        return self.model.token_embedding(ids[1:eot]).detach()

    def token_embedding_std(self) -> float:
        return float(self.model.token_embedding.weight.std())

    def encode_with_concept(self, concept_tokens: torch.Tensor, suffix: str) -> torch.Tensor:
        """
        Encode "<concept> suffix" with the concept tokens injected right after
        the start token. Differentiable with respect to concept_tokens.
        """
        n_tokens = concept_tokens.shape[0]
        placeholder = " ".join(["x"] * n_tokens)
        text = f"{placeholder} {suffix.strip()}" if suffix and suffix.strip() else placeholder
        ids = self.tokenizer([text])
        model = self.model

        embedded = model.token_embedding(ids)
        embedded = torch.cat(
            [embedded[:, :1], concept_tokens[None].to(embedded.dtype), embedded[:, 1 + n_tokens:]], dim=1
        )
        x = embedded + model.positional_embedding.to(embedded.dtype)

        batch_first = getattr(model.transformer, "batch_first", False)
        if not batch_first:
            x = x.permute(1, 0, 2)
        x = model.transformer(x, attn_mask=model.attn_mask)
        if not batch_first:
            x = x.permute(1, 0, 2)
        x = model.ln_final(x)
        x = x[torch.arange(x.shape[0]), ids.argmax(dim=-1)]

        projection = model.text_projection
        x = projection(x) if isinstance(projection, nn.Module) else x @ projection
        return _unit(x.squeeze(0))


BACKEND_CHOICES = ("toy", "clip-RN50", "clip-RN101")


def build_backend(name: str, layer_split: int = 1, model_dir: Optional[str] = None) -> EncoderBackend:
    if name == "toy":
        return ToyBackend(layer_split=layer_split)
    if name.startswith("clip-"):
        return ClipBackend.load(name.split("-", 1)[1], layer_split=layer_split, cache_dir=model_dir)
    raise ValidationError(f"unknown backend '{name}' (choose from {', '.join(BACKEND_CHOICES)})")
