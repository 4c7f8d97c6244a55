"""
Style mining - optimize per-instance (mu, sigma) so that the stylized low-level
features embed close to a single target embedding, then bank the results.

Loop per batch of source features (each instance owns its own parameters):
    f_st  = PIN(f_s, mu, sigma)
    emb   = backend.embed_from_features(f_st)
    loss  = cosine_distance(emb, target)
    (mu, sigma) <- momentum gradient descent step

Bank on disk: <dir>/manifest.json + <dir>/styles.f32
(little-endian float32, [count][2][C], mu block before sigma block).
"""

import hashlib
import json
import os
import sys
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import islice
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Tuple

import numpy as np
import torch
from tqdm import tqdm
from typing_extensions import TypedDict

from core_stats import DEFAULT_EPS, StyleStats, channel_stats, cosine_distance, pin_apply, validate_feature
from encoder_backends import EncoderBackend
from errors import (
    BankChannelError,
    BankLengthError,
    BankLoadError,
    BankVersionError,
    MiningError,
    ValidationError,
)

FORMAT_VERSION = 1
MANIFEST_FILE = "manifest.json"
STYLES_FILE = "styles.f32"
INIT_MODES = ("source", "identity", "random")
TARGET_KINDS = ("prompt", "concept+suffix", "image", "embedding")


@dataclass
class MiningConfig:
    iterations: int = 100
    learning_rate: float = 1.0
    momentum: float = 0.9
    batch_size: int = 16
    seed: int = 0
    init: str = "source"
    eps: float = DEFAULT_EPS

    def validate(self) -> "MiningConfig":
        if self.iterations < 0:
            raise ValidationError(f"iterations must be >= 0, got {self.iterations}")
        if not self.learning_rate > 0:
            raise ValidationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0 <= self.momentum < 1:
            raise ValidationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init not in INIT_MODES:
            raise ValidationError(f"init must be one of {INIT_MODES}, got '{self.init}'")
        if not self.eps > 0:
            raise ValidationError(f"eps must be positive, got {self.eps}")
        return self

    @classmethod
    def toy(cls, **overrides) -> "MiningConfig":
        values = dict(learning_rate=0.05)
        values.update(overrides)
        return cls(**values)


class TargetDescriptor(TypedDict, total=False):
    kind: str
    value: str
    content_hash: str


class BankManifest(TypedDict):
    format_version: int
    channels: int
    count: int
    encoder_id: str
    target: TargetDescriptor
    mining_config: Dict
    seed: int
    sigma_nonpositive_total: int
    crop_policy: str
    mean_initial_loss: Optional[float]
    mean_final_loss: Optional[float]


@dataclass
class MinedBatch:
    stats: StyleStats
    initial_loss: torch.Tensor
    final_loss: torch.Tensor


def _say(message: str) -> None:
    print(f"[STYLE_MINING] {message}", file=sys.stderr, flush=True)


def _initial_stats(f_s: torch.Tensor, cfg: MiningConfig, first_index: int) -> StyleStats:
    if cfg.init == "source":
        return channel_stats(f_s, cfg.eps)
    batch, channels = f_s.shape[0], f_s.shape[1]
    if cfg.init == "identity":
        return StyleStats(
            torch.zeros(batch, channels, dtype=f_s.dtype), torch.ones(batch, channels, dtype=f_s.dtype)
        )
    # random: one generator per instance so batching never changes the draw
    mus, sigmas = [], []
    for offset in range(batch):
        generator = torch.Generator().manual_seed(cfg.seed + first_index + offset)
        mus.append(torch.randn(channels, generator=generator, dtype=f_s.dtype))
        sigmas.append(torch.randn(channels, generator=generator, dtype=f_s.dtype))
    return StyleStats(torch.stack(mus), torch.stack(sigmas))


def _first_bad(values: torch.Tensor) -> int:
    bad = (~torch.isfinite(values)).reshape(values.shape[0], -1).any(dim=1)
    return int(bad.nonzero()[0].item())


def mine_batch(
    f_s: torch.Tensor,
    target_emb: torch.Tensor,
    cfg: MiningConfig,
    backend: EncoderBackend,
    first_index: int = 0,
) -> MinedBatch:
    """
    Mine styles for a [B, C, H, W] batch. Instances never share parameters; the
    backward pass uses the sum of per-instance losses so each instance gets the
    same update it would get when mined alone.
    """
    validate_feature(f_s)
    if f_s.dim() != 4:
        raise ValidationError(f"mine_batch expects [B, C, H, W] features, got {tuple(f_s.shape)}")
    f_s = f_s.to(backend.dtype)
    target = target_emb.detach().to(backend.dtype)
    if target.dim() != 1 or target.shape[0] != backend.embedding_dim:
        raise ValidationError(
            f"target embedding must be a [{backend.embedding_dim}] vector, got {tuple(target.shape)}"
        )
    if not torch.isfinite(target).all() or float(torch.linalg.vector_norm(target)) == 0:
        raise ValidationError("target embedding must be finite with non-zero norm")

    start = _initial_stats(f_s, cfg, first_index)
    mu = start.mu.detach().clone().requires_grad_(True)
    sigma = start.sigma.detach().clone().requires_grad_(True)
    optimizer = torch.optim.SGD([mu, sigma], lr=cfg.learning_rate, momentum=cfg.momentum)

    def losses() -> torch.Tensor:
        stylized = pin_apply(f_s, StyleStats(mu, sigma), cfg.eps)
        return cosine_distance(backend.embed_from_features(stylized), target)

    with torch.no_grad():
        initial = losses()
    if not torch.isfinite(initial).all():
        raise MiningError("non-finite loss", iteration=0, source_index=first_index + _first_bad(initial))

    for iteration in range(1, cfg.iterations + 1):
        optimizer.zero_grad(set_to_none=True)
        try:
            batch_losses = losses()
        except ValidationError as error:
            raise MiningError(str(error), iteration=iteration, source_index=first_index) from error
        if not torch.isfinite(batch_losses).all():
            raise MiningError(
                "non-finite loss", iteration=iteration, source_index=first_index + _first_bad(batch_losses)
            )
        batch_losses.sum().backward()
        optimizer.step()
        params = torch.cat([mu.detach(), sigma.detach()], dim=1)
        if not torch.isfinite(params).all():
            raise MiningError(
                "non-finite style parameters", iteration=iteration, source_index=first_index + _first_bad(params)
            )

    with torch.no_grad():
        final = losses()
    return MinedBatch(StyleStats(mu.detach(), sigma.detach()), initial, final)


def mine_style(
    f_s: torch.Tensor, target_emb: torch.Tensor, cfg: MiningConfig, backend: EncoderBackend
) -> StyleStats:
    """Mine a single [C, H, W] feature map; returns [C] statistics"""
    cfg.validate()
    if f_s.dim() != 3:
        raise ValidationError(f"mine_style expects a [C, H, W] feature map, got {tuple(f_s.shape)}")
    mined = mine_batch(f_s.unsqueeze(0), target_emb, cfg, backend)
    return StyleStats(mined.stats.mu[0], mined.stats.sigma[0])


def _instances(features: Iterable[torch.Tensor]) -> Iterator[torch.Tensor]:
    for f in features:
        if f.dim() == 4:
            yield from f
        else:
            yield f


def _batches(features: Iterable[torch.Tensor], batch_size: int) -> Iterator[Tuple[int, List[torch.Tensor]]]:
    stream = _instances(features)
    start = 0
    while True:
        chunk = list(islice(stream, batch_size))
        if not chunk:
            return
        yield start, chunk
        start += len(chunk)


def _mine_chunk(
    chunk: List[torch.Tensor], start: int, target_emb: torch.Tensor, cfg: MiningConfig, backend: EncoderBackend
) -> MinedBatch:
    if all(f.shape == chunk[0].shape for f in chunk):
        return mine_batch(torch.stack(chunk), target_emb, cfg, backend, first_index=start)
    # mixed spatial sizes cannot be stacked; instances are independent anyway
    parts = [mine_batch(f.unsqueeze(0), target_emb, cfg, backend, first_index=start + i) for i, f in enumerate(chunk)]
    return MinedBatch(
        StyleStats(torch.cat([p.stats.mu for p in parts]), torch.cat([p.stats.sigma for p in parts])),
        torch.cat([p.initial_loss for p in parts]),
        torch.cat([p.final_loss for p in parts]),
    )


def mine_bank(
    features: Iterable[torch.Tensor],
    target_emb: torch.Tensor,
    cfg: MiningConfig,
    backend: EncoderBackend,
    target: Optional[TargetDescriptor] = None,
    crop_policy: str = "none",
    workers: int = 1,
) -> "StyleBank":
    """
    Mine one style per source feature, in source order.

    Batches run on up to `workers` threads; results are collected by this
    thread alone and appended in source order.
    """
    cfg.validate()
    target = target or TargetDescriptor(kind="embedding", value="", content_hash=_tensor_hash(target_emb))
    if target.get("kind") not in TARGET_KINDS:
        raise ValidationError(f"target kind must be one of {TARGET_KINDS}, got '{target.get('kind')}'")
    mus: List[torch.Tensor] = []
    sigmas: List[torch.Tensor] = []
    initial: List[torch.Tensor] = []
    final: List[torch.Tensor] = []

    def collect(mined: MinedBatch) -> None:
        mus.append(mined.stats.mu)
        sigmas.append(mined.stats.sigma)
        initial.append(mined.initial_loss)
        final.append(mined.final_loss)

    quiet = bool(os.getenv("PINADAPT_QUIET"))
    progress = tqdm(desc="mining", unit="inst", file=sys.stderr, disable=quiet)
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        pending = deque()
        for start, chunk in _batches(features, cfg.batch_size):
            pending.append(pool.submit(_mine_chunk, chunk, start, target_emb, cfg, backend))
            while len(pending) > 2 * max(1, workers):
                collect(pending.popleft().result())
                progress.update(mus[-1].shape[0])
        while pending:
            collect(pending.popleft().result())
            progress.update(mus[-1].shape[0])
    progress.close()

    if not mus:
        raise ValidationError("cannot mine a style bank from an empty feature stream")

    mu = torch.cat(mus)
    sigma = torch.cat(sigmas)
    initial_loss = torch.cat(initial)
    final_loss = torch.cat(final)
    bank = StyleBank.from_stats(
        StyleStats(mu, sigma),
        encoder_id=backend.id,
        target=target,
        mining_config=asdict(cfg),
        seed=cfg.seed,
        crop_policy=crop_policy,
        mean_initial_loss=float(initial_loss.mean()),
        mean_final_loss=float(final_loss.mean()),
    )
    _say(
        f"Mined {len(bank)} styles (loss {bank.manifest['mean_initial_loss']:.4f} -> "
        f"{bank.manifest['mean_final_loss']:.4f})"
    )
    if bank.manifest["sigma_nonpositive_total"]:
        _say(f"[WARN] {bank.manifest['sigma_nonpositive_total']} mined sigma entries are <= 0")
    return bank


def _tensor_hash(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().to(torch.float64).contiguous().numpy().tobytes()).hexdigest()


@dataclass
class StyleBank:
    """Ordered mined styles; `data` is float32 [count, 2, C] (mu row, sigma row)"""

    data: np.ndarray
    manifest: BankManifest = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[1] != 2:
            raise ValidationError(f"bank data must be [count, 2, C], got {self.data.shape}")
        if self.manifest.get("count") != self.data.shape[0]:
            raise ValidationError(f"manifest count {self.manifest.get('count')} != {self.data.shape[0]} styles")
        if self.manifest.get("channels") != self.data.shape[2]:
            raise ValidationError(f"manifest channels {self.manifest.get('channels')} != {self.data.shape[2]}")

    @classmethod
    def from_stats(cls, stats: StyleStats, **fields) -> "StyleBank":
        mu = stats.mu.detach().cpu().reshape(-1, stats.channels)
        sigma = stats.sigma.detach().cpu().reshape(-1, stats.channels)
        data = torch.stack([mu, sigma], dim=1).to(torch.float32).numpy()
        manifest = BankManifest(
            format_version=FORMAT_VERSION,
            channels=int(data.shape[2]),
            count=int(data.shape[0]),
            encoder_id=fields["encoder_id"],
            target=dict(fields.get("target") or {}),
            mining_config=dict(fields.get("mining_config") or {}),
            seed=int(fields.get("seed", 0)),
            sigma_nonpositive_total=int((data[:, 1, :] <= 0).sum()),
            crop_policy=fields.get("crop_policy", "none"),
            mean_initial_loss=fields.get("mean_initial_loss"),
            mean_final_loss=fields.get("mean_final_loss"),
        )
        return cls(data, manifest)

    def __len__(self) -> int:
        return self.data.shape[0]

    def __getitem__(self, index: int) -> StyleStats:
        entry = torch.from_numpy(self.data[index].copy())
        return StyleStats(entry[0], entry[1])

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def stats_at(self, indices: torch.Tensor, dtype: torch.dtype = torch.float32) -> StyleStats:
        picked = torch.from_numpy(self.data[indices.cpu().numpy()].copy()).to(dtype)
        return StyleStats(picked[:, 0], picked[:, 1])

    def content_hash(self) -> str:
        digest = hashlib.sha256(self.data.astype("<f4").tobytes())
        digest.update(json.dumps(self.manifest, sort_keys=True).encode("utf-8"))
        return digest.hexdigest()


def save_bank(bank: StyleBank, path) -> Path:
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / MANIFEST_FILE, "w", encoding="utf-8") as f:
        json.dump(bank.manifest, f, indent=2)
    with open(directory / STYLES_FILE, "wb") as f:
        f.write(bank.data.astype("<f4").tobytes())
    _say(f"Saved {len(bank)} styles to {directory}")
    return directory


def load_bank(path) -> StyleBank:
    directory = Path(path)
    try:
        with open(directory / MANIFEST_FILE, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    except FileNotFoundError as error:
        raise BankLoadError(f"no {MANIFEST_FILE} in {directory}") from error
    except json.JSONDecodeError as error:
        raise BankLoadError(f"corrupted {MANIFEST_FILE} in {directory}: {error}") from error

    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise BankVersionError(f"bank format version {version} is not supported (expected {FORMAT_VERSION})")
    missing = [key for key in BankManifest.__annotations__ if key not in manifest]
    if missing:
        raise BankLoadError(f"manifest is missing {', '.join(missing)}")

    count, channels = int(manifest["count"]), int(manifest["channels"])
    try:
        raw = (directory / STYLES_FILE).read_bytes()
    except FileNotFoundError as error:
        raise BankLoadError(f"no {STYLES_FILE} in {directory}") from error

    expected = count * 2 * channels * 4
    if len(raw) != expected:
        entry_block = count * 2 * 4
        if count > 0 and len(raw) % entry_block == 0 and len(raw) > 0:
            raise BankChannelError(
                f"{STYLES_FILE}: expected {expected} bytes, found {len(raw)}; manifest declares {channels} "
                f"channels but the data stride implies {len(raw) // entry_block}"
            )
        raise BankLengthError(f"{STYLES_FILE}: expected {expected} bytes, found {len(raw)}")

    data = np.frombuffer(raw, dtype="<f4").reshape(count, 2, channels).astype(np.float32)
    return StyleBank(data, manifest)


@dataclass
class ChannelSummary:
    minimum: np.ndarray
    q1: np.ndarray
    median: np.ndarray
    q3: np.ndarray
    maximum: np.ndarray
    outliers: List[List[float]]

    def to_dict(self) -> Dict:
        return {
            "min": self.minimum.tolist(),
            "q1": self.q1.tolist(),
            "median": self.median.tolist(),
            "q3": self.q3.tolist(),
            "max": self.maximum.tolist(),
            "outliers": self.outliers,
        }


@dataclass
class DiversityReport:
    count: int
    mu: ChannelSummary
    sigma: ChannelSummary
    diversity_score: float

    def to_dict(self) -> Dict:
        return {
            "count": self.count,
            "diversity_score": self.diversity_score,
            "mu": self.mu.to_dict(),
            "sigma": self.sigma.to_dict(),
        }


def _summarize(values: np.ndarray) -> ChannelSummary:
    """values: [count, C]; Tukey outliers beyond 1.5 IQR from the quartiles"""
    q1, median, q3 = np.percentile(values, [25, 50, 75], axis=0)
    iqr = q3 - q1
    low, high = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = [
        sorted(float(v) for v in values[:, c] if v < low[c] or v > high[c]) for c in range(values.shape[1])
    ]
    return ChannelSummary(values.min(axis=0), q1, median, q3, values.max(axis=0), outliers)


def bank_diversity_report(bank: StyleBank) -> DiversityReport:
    """Per-channel five-number summaries; score = mean inter-instance std over all mu and sigma channels"""
    if len(bank) < 2:
        raise ValidationError(f"diversity needs at least 2 styles, bank has {len(bank)}")
    data = bank.data.astype(np.float64)
    mu, sigma = data[:, 0, :], data[:, 1, :]
    score = float(np.concatenate([mu.std(axis=0), sigma.std(axis=0)]).mean())
    return DiversityReport(len(bank), _summarize(mu), _summarize(sigma), score)
