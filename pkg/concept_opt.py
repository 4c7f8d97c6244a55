"""
Concept optimization - learn the token embedding(s) of a <concept> shared by all
source images, so that "<concept> in clear weather" embeds close to every source
image. The learned concept is later combined with a style suffix
("<concept> at night") to produce a target embedding for mining.

Only the concept tokens are trained; both encoders stay frozen.
The toy backend has no token-level text encoder, so its tests go through
optimize_free_embedding, which trains a free joint-space vector with the same loss.

Concept on disk: <dir>/concept.json + <dir>/concept.f32
(little-endian float32, [n_tokens][token_dim]).
"""

import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np
import torch
from tqdm import tqdm

from core_stats import cosine_distance
from encoder_backends import EncoderBackend
from errors import CapabilityError, ManifestMismatchError, PinAdaptError, ValidationError

DEFAULT_SUFFIX = "in clear weather"
INIT_WORD = "driving"
CONCEPT_META = "concept.json"
CONCEPT_BLOB = "concept.f32"
OPTIMIZERS = ("sgd", "adam")


@dataclass
class ConceptConfig:
    epochs: int = 10
    batch_size: int = 16
    learning_rate: float = 1e-4
    momentum: float = 0.9
    optimizer: str = "sgd"
    seed: int = 0
    n_tokens: int = 1

    def validate(self) -> "ConceptConfig":
        if self.epochs < 1 or self.batch_size < 1 or self.n_tokens < 1:
            raise ValidationError("epochs, batch_size and n_tokens must be positive")
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.optimizer not in OPTIMIZERS:
            raise ValidationError(f"optimizer must be one of {OPTIMIZERS}, got '{self.optimizer}'")
        return self


@dataclass
class ConceptEmbedding:
    tokens: torch.Tensor
    suffix_used_in_training: str = DEFAULT_SUFFIX
    seed: int = 0
    backend_id: str = ""
    loss_history: List[float] = field(default_factory=list)

    def __post_init__(self):
        if self.tokens.dim() != 2 or self.tokens.shape[0] < 1:
            raise ValidationError(f"concept tokens must be [n_tokens, token_dim], got {tuple(self.tokens.shape)}")
        if not torch.isfinite(self.tokens).all():
            raise ValidationError("concept tokens contain NaN or Inf values")

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]

    @property
    def token_dim(self) -> int:
        return self.tokens.shape[1]


def _say(message: str) -> None:
    print(f"[CONCEPT] {message}", file=sys.stderr, flush=True)


def _unit(v: torch.Tensor) -> torch.Tensor:
    return v / torch.linalg.vector_norm(v, dim=-1, keepdim=True)


def _image_embeddings(backend: EncoderBackend, images: Iterable[torch.Tensor]) -> torch.Tensor:
    rows = []
    with torch.no_grad():
        for image in images:
            embedding = backend.embed_image(image)
            rows.append(embedding if embedding.dim() == 2 else embedding.unsqueeze(0))
    if not rows:
        raise ValidationError("concept optimization needs at least one source image")
    return _unit(torch.cat(rows))


def initial_concept_tokens(backend: EncoderBackend, cfg: ConceptConfig) -> torch.Tensor:
    """Embedding of "driving" when it is a single token and one slot is asked for, else seeded Gaussian"""
    word = backend.token_embedding_of(INIT_WORD)
    if cfg.n_tokens == 1 and word.shape[0] == 1:
        return word.clone()
    generator = torch.Generator().manual_seed(cfg.seed)
    scale = backend.token_embedding_std()
    return torch.randn(cfg.n_tokens, word.shape[1], generator=generator, dtype=word.dtype) * scale


def _fit(
    param: torch.Tensor,
    encode,
    image_embeddings: torch.Tensor,
    cfg: ConceptConfig,
    desc: str,
) -> List[float]:
    """SGD (Adam if cfg.optimizer says so) on the mean cosine distance between encode(param) and each image"""
    if cfg.optimizer == "adam":
        optimizer = torch.optim.Adam([param], lr=cfg.learning_rate)
    else:
        optimizer = torch.optim.SGD([param], lr=cfg.learning_rate, momentum=cfg.momentum)
    generator = torch.Generator().manual_seed(cfg.seed)
    history: List[float] = []
    quiet = bool(os.getenv("PINADAPT_QUIET"))
    for epoch in tqdm(range(cfg.epochs), desc=desc, file=sys.stderr, disable=quiet):
        order = torch.randperm(image_embeddings.shape[0], generator=generator)
        total, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            batch = image_embeddings[order[start:start + cfg.batch_size]]
            optimizer.zero_grad(set_to_none=True)
            loss = cosine_distance(encode(param).unsqueeze(0), batch).mean()
            loss.backward()
            optimizer.step()
            total += float(loss.detach()) * batch.shape[0]
            seen += batch.shape[0]
        history.append(total / seen)
        _say(f"epoch {epoch + 1}/{cfg.epochs} mean loss {history[-1]:.5f}")
    return history


def optimize_concept(
    source_images: Iterable[torch.Tensor],
    backend: EncoderBackend,
    cfg: Optional[ConceptConfig] = None,
    suffix: str = DEFAULT_SUFFIX,
) -> ConceptEmbedding:
    cfg = (cfg or ConceptConfig()).validate()
    if not backend.supports_token_injection:
        raise CapabilityError(
            f"backend '{backend.id}' cannot inject concept tokens into its text encoder; "
            "use optimize_free_embedding for the toy surrogate"
        )
    checksum_before = backend.checksum()
    image_embeddings = _image_embeddings(backend, source_images)
    tokens = initial_concept_tokens(backend, cfg).requires_grad_(True)
    history = _fit(tokens, lambda t: backend.encode_with_concept(t, suffix), image_embeddings, cfg, "concept")
    if backend.checksum() != checksum_before:
        raise PinAdaptError("frozen encoder weights changed during concept optimization")
    return ConceptEmbedding(tokens.detach(), suffix, cfg.seed, backend.id, history)


def optimize_free_embedding(
    image_embeddings: torch.Tensor,
    cfg: Optional[ConceptConfig] = None,
    init: Optional[torch.Tensor] = None,
) -> ConceptEmbedding:
    """
    Same loss and optimizer as optimize_concept, on a free [D] vector standing in
    for the encoded prompt. Stored as a 1-token concept.
    """
    cfg = (cfg or ConceptConfig()).validate()
    image_embeddings = _unit(image_embeddings.detach())
    if init is None:
        generator = torch.Generator().manual_seed(cfg.seed)
        init = torch.randn(image_embeddings.shape[1], generator=generator, dtype=image_embeddings.dtype)
    vector = init.detach().clone().to(image_embeddings.dtype).requires_grad_(True)
    history = _fit(vector, lambda v: v, image_embeddings, cfg, "free-embedding")
    return ConceptEmbedding(vector.detach().unsqueeze(0), "", cfg.seed, "free-embedding", history)


def build_concept_prompt_embedding(
    concept: ConceptEmbedding, style_suffix: str, backend: EncoderBackend
) -> torch.Tensor:
    """Unit embedding of "<concept> <style_suffix>"; an empty suffix encodes the concept alone"""
    if concept.backend_id and concept.backend_id != backend.id:
        raise ManifestMismatchError(
            f"concept was optimized with backend '{concept.backend_id}', not '{backend.id}'"
        )
    with torch.no_grad():
        return backend.encode_with_concept(concept.tokens, style_suffix or "")


def save_concept(concept: ConceptEmbedding, path) -> Path:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "n_tokens": concept.n_tokens,
        "token_dim": concept.token_dim,
        "suffix_used_in_training": concept.suffix_used_in_training,
        "seed": concept.seed,
        "backend_id": concept.backend_id,
        "loss_history": concept.loss_history,
    }
    with open(directory / CONCEPT_META, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    with open(directory / CONCEPT_BLOB, "wb") as f:
        f.write(concept.tokens.detach().cpu().numpy().astype("<f4").tobytes())
    return directory


def load_concept(path) -> ConceptEmbedding:
    directory = Path(path)
    try:
        with open(directory / CONCEPT_META, "r", encoding="utf-8") as f:
            meta = json.load(f)
        raw = (directory / CONCEPT_BLOB).read_bytes()
    except FileNotFoundError as error:
        raise ValidationError(f"incomplete concept directory {directory}: {error}") from error
    n_tokens, token_dim = int(meta["n_tokens"]), int(meta["token_dim"])
    if len(raw) != n_tokens * token_dim * 4:
        raise ValidationError(
            f"{CONCEPT_BLOB}: expected {n_tokens * token_dim * 4} bytes, found {len(raw)}"
        )
    tokens = torch.from_numpy(np.frombuffer(raw, dtype="<f4").reshape(n_tokens, token_dim).astype(np.float32))
    return ConceptEmbedding(
        tokens,
        meta.get("suffix_used_in_training", DEFAULT_SUFFIX),
        int(meta.get("seed", 0)),
        meta.get("backend_id", ""),
        list(meta.get("loss_history", [])),
    )
